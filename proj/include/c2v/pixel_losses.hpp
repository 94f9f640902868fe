// Prediction-space losses: target/non-target decoupling, the decoupled
// distillation loss, and plain cross-entropy.
#pragma once

#include <cstdio>

#include "c2v/common.hpp"
#include "c2v/tensor.hpp"

namespace c2v {

// Per-pixel binary split of a softmax prediction: probability of the
// ground-truth class and the pooled probability of everything else.
struct DecoupledMaps {
    Tensor target_prob;  // [B,H,W]
    Tensor rest_prob;    // [B,H,W], 1 - target_prob
};

namespace detail {
inline void check_logits_labels(const Tensor& logits, const LabelMap& y) {
    if (logits.rank() != 4) throw ShapeError("expected [B,K,H,W] logits");
    if (logits.dim(0) != y.batch || logits.dim(2) != y.height || logits.dim(3) != y.width) {
        throw ShapeError("logits " + shape_str(logits.shape()) + " do not match label map [" +
                         std::to_string(y.batch) + "," + std::to_string(y.height) + "," +
                         std::to_string(y.width) + "]");
    }
    y.validate(logits.dim(1));
}

// One-hot ground truth [B,K,H,W]; ignore pixels are assigned class 0 and
// must be masked out by the caller.
inline Tensor one_hot_labels(const LabelMap& y, int num_classes) {
    Tensor out({y.batch, num_classes, y.height, y.width});
    size_t hw = static_cast<size_t>(y.height) * y.width;
    double* po = out.data();
    for (int b = 0; b < y.batch; ++b) {
        for (size_t i = 0; i < hw; ++i) {
            int32_t v = y.values[b * hw + i];
            int cls = (v == kIgnoreLabel) ? 0 : v;
            po[(static_cast<size_t>(b) * num_classes + cls) * hw + i] = 1.0;
        }
    }
    return out;
}

// 1 at supervised pixels, 0 at ignore pixels. [B,H,W]
inline Tensor valid_mask(const LabelMap& y) {
    Tensor out({y.batch, y.height, y.width});
    for (size_t i = 0; i < y.values.size(); ++i)
        out.data()[i] = y.values[i] == kIgnoreLabel ? 0.0 : 1.0;
    return out;
}

inline size_t count_valid(const LabelMap& y) {
    size_t n = 0;
    for (int32_t v : y.values)
        if (v != kIgnoreLabel) ++n;
    return n;
}

// x * log(x / q) with the 0 log 0 = 0 convention; q is floored at kKlEps.
// Keeps saturated predictions (x == 0 after rounding) from producing NaN.
inline Tensor xlog_ratio(const Tensor& x, const Tensor& q) {
    check_same_shape(x, q, "xlog_ratio");
    Tensor out(x.shape());
    const double* px = x.data();
    const double* pq = q.data();
    double* po = out.data();
    for (size_t i = 0; i < x.numel(); ++i) {
        po[i] = px[i] > 0.0 ? px[i] * std::log(px[i] / std::max(pq[i], kKlEps)) : 0.0;
    }
    if (should_record({&x, &q})) {
        mark_output(out);
        auto xi = x.impl(), qi = q.impl(), oi = out.impl();
        Tape::active().record([xi, qi, oi] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < xi->data.size(); ++i) {
                    double v = xi->data[i];
                    if (v > 0.0)
                        xi->grad[i] +=
                            oi->grad[i] * (std::log(v / std::max(qi->data[i], kKlEps)) + 1.0);
                }
            }
            if (qi->requires_grad) {
                qi->ensure_grad();
                for (size_t i = 0; i < qi->data.size(); ++i) {
                    double b = qi->data[i];
                    if (b >= kKlEps) qi->grad[i] -= oi->grad[i] * xi->data[i] / b;
                }
            }
        });
    }
    return out;
}
}  // namespace detail

// Splits softmaxed logits into per-pixel (target, non-target) probability
// pairs. Ignore pixels get (1, 0) and are excluded downstream.
inline DecoupledMaps decouple(const Tensor& logits, const LabelMap& y) {
    detail::check_logits_labels(logits, y);
    NoGradGuard ng;
    int k = logits.dim(1);
    Tensor probs = softmax(logits, 1);
    Tensor target({y.batch, y.height, y.width});
    Tensor rest({y.batch, y.height, y.width});
    size_t hw = static_cast<size_t>(y.height) * y.width;
    const double* pp = probs.data();
    for (int b = 0; b < y.batch; ++b) {
        for (size_t i = 0; i < hw; ++i) {
            int32_t v = y.values[b * hw + i];
            double t = 1.0;
            if (v != kIgnoreLabel) t = pp[(static_cast<size_t>(b) * k + v) * hw + i];
            target.data()[b * hw + i] = t;
            rest.data()[b * hw + i] = 1.0 - t;
        }
    }
    return {target, rest};
}

// Decoupled distillation loss. Per supervised pixel the student's binary
// (target, non-target) pair is pulled toward the renormalized mixture of the
// teacher's pair and the one-hot label:
//   q_t = (teacher_t + 1) / 2, q_nt = teacher_nt / 2
//   L = (1/|P|) sum alpha * s_t*log(s_t/q_t) + beta * s_nt*log(s_nt/q_nt)
// Teacher logits are treated as constants.
inline Tensor decoupled_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                             const LabelMap& y, double alpha, double beta) {
    detail::check_logits_labels(student_logits, y);
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ShapeError("decoupled_loss: student " + shape_str(student_logits.shape()) +
                         " vs teacher " + shape_str(teacher_logits.shape()));
    }
    if (alpha < 0.0 || beta < 0.0) throw ValueError("decoupled_loss: weights must be >= 0");
    size_t valid = detail::count_valid(y);
    if (valid == 0) {
        std::fprintf(stderr, "[c2v] warning: decoupled_loss over zero supervised pixels\n");
        return Tensor::scalar(0.0);
    }
    int k = student_logits.dim(1);
    Tensor mix_t, mix_nt;
    {
        NoGradGuard ng;
        DecoupledMaps teacher = decouple(teacher_logits, y);
        mix_t = mul_scalar(add_scalar(teacher.target_prob, 1.0), 0.5);
        mix_nt = mul_scalar(teacher.rest_prob, 0.5);
    }
    Tensor mask = detail::valid_mask(y);
    Tensor one_hot = detail::one_hot_labels(y, k);
    Tensor probs = softmax(student_logits, 1);
    Tensor s_t = sum_axis(mul(probs, one_hot), 1);  // [B,H,W]
    Tensor s_nt = sub_from_scalar(1.0, s_t);
    Tensor term = add(mul_scalar(detail::xlog_ratio(s_t, mix_t), alpha),
                      mul_scalar(detail::xlog_ratio(s_nt, mix_nt), beta));
    return mul_scalar(sum(mul(term, mask)), 1.0 / static_cast<double>(valid));
}

// Mean cross-entropy over supervised pixels.
inline Tensor ce_loss(const Tensor& logits, const LabelMap& y) {
    detail::check_logits_labels(logits, y);
    size_t valid = detail::count_valid(y);
    if (valid == 0) {
        std::fprintf(stderr, "[c2v] warning: ce_loss over zero supervised pixels\n");
        return Tensor::scalar(0.0);
    }
    int k = logits.dim(1);
    Tensor mask = detail::valid_mask(y);
    Tensor one_hot = detail::one_hot_labels(y, k);
    Tensor picked = sum_axis(mul(softmax(logits, 1), one_hot), 1);
    // ignore pixels are remapped to probability 1 so their log vanishes
    Tensor guarded = add(mul(picked, mask), sub_from_scalar(1.0, mask));
    return mul_scalar(sum(log(guarded)), -1.0 / static_cast<double>(valid));
}

}  // namespace c2v
