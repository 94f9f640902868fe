// Segmentation evaluation: confusion matrix, per-class IoU, mIoU.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "c2v/common.hpp"
#include "c2v/tensor.hpp"

namespace c2v {

// K x K pixel counts, rows = ground truth, columns = prediction.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int k) : num_classes(k), counts(static_cast<size_t>(k) * k, 0) {}

    uint64_t& at(int truth, int pred) { return counts[static_cast<size_t>(truth) * num_classes + pred]; }
    uint64_t at(int truth, int pred) const {
        return counts[static_cast<size_t>(truth) * num_classes + pred];
    }

    uint64_t total() const {
        uint64_t s = 0;
        for (uint64_t v : counts) s += v;
        return s;
    }

    // shard merge; associative and commutative
    ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
        if (other.num_classes != num_classes) throw ShapeError("confusion matrix size mismatch");
        for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
        return *this;
    }
};

// Tallies prediction/label pairs; ignore pixels are skipped.
inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth) {
    if (pred.values.size() != truth.values.size()) {
        throw ShapeError("accumulate: prediction and label sizes differ");
    }
    for (size_t i = 0; i < truth.values.size(); ++i) {
        int32_t t = truth.values[i];
        if (t == kIgnoreLabel) continue;
        int32_t p = pred.values[i];
        if (t < 0 || t >= cm.num_classes || p < 0 || p >= cm.num_classes) {
            throw ValueError("accumulate: class id out of range (gt " + std::to_string(t) +
                             ", pred " + std::to_string(p) + ")");
        }
        ++cm.at(t, p);
    }
}

// argmax over the class axis; ties resolve to the lowest class index
inline LabelMap argmax_predictions(const Tensor& logits) {
    if (logits.rank() != 4) throw ShapeError("argmax_predictions: expected [B,K,H,W]");
    int b = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    LabelMap out(b, h, w);
    size_t hw = static_cast<size_t>(h) * w;
    const double* p = logits.data();
    for (int bb = 0; bb < b; ++bb) {
        for (size_t i = 0; i < hw; ++i) {
            int best = 0;
            double best_v = p[(static_cast<size_t>(bb) * k) * hw + i];
            for (int c = 1; c < k; ++c) {
                double v = p[(static_cast<size_t>(bb) * k + c) * hw + i];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            out.values[bb * hw + i] = best;
        }
    }
    return out;
}

struct IouReport {
    std::vector<double> per_class;  // NaN for classes absent from gt and pred
    std::vector<bool> present;
    double miou = 0.0;
};

// IoU_k = diag / (row + col - diag); classes with empty union are excluded
// from the mean rather than counted as zero.
inline IouReport miou(const ConfusionMatrix& cm) {
    IouReport rep;
    int k = cm.num_classes;
    rep.per_class.assign(k, std::nan(""));
    rep.present.assign(k, false);
    double total = 0.0;
    int counted = 0;
    for (int c = 0; c < k; ++c) {
        uint64_t row = 0, col = 0;
        for (int j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        uint64_t diag = cm.at(c, c);
        uint64_t uni = row + col - diag;
        if (uni == 0) continue;
        double iou = static_cast<double>(diag) / static_cast<double>(uni);
        rep.per_class[c] = iou;
        rep.present[c] = true;
        total += iou;
        ++counted;
    }
    rep.miou = counted > 0 ? total / counted : 0.0;
    return rep;
}

inline std::string iou_report_csv(const IouReport& rep) {
    std::string out = "class_id,iou\n";
    char buf[64];
    for (size_t c = 0; c < rep.per_class.size(); ++c) {
        if (rep.present[c]) {
            std::snprintf(buf, sizeof(buf), "%zu,%.6f\n", c, rep.per_class[c]);
        } else {
            std::snprintf(buf, sizeof(buf), "%zu,\n", c);
        }
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "miou,%.6f\n", rep.miou);
    out += buf;
    return out;
}

inline std::string iou_report_table(const IouReport& rep) {
    std::string out = "  class        iou\n";
    char buf[64];
    for (size_t c = 0; c < rep.per_class.size(); ++c) {
        if (rep.present[c]) {
            std::snprintf(buf, sizeof(buf), "  %-8zu %8.4f\n", c, rep.per_class[c]);
        } else {
            std::snprintf(buf, sizeof(buf), "  %-8zu   absent\n", c);
        }
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "  mIoU     %8.4f\n", rep.miou);
    out += buf;
    return out;
}

}  // namespace c2v
