// Deterministic synthetic segmentation data: shape compositing, flip/crop
// augmentation, and dataset container IO.
//
// Each sample draws one geometric region per non-background class
// (rectangle / circle / stripes, cycling for K > 4) over a textured
// background. Class colors are separated but corrupted with sigma = 0.1
// noise, so the task is learnable without being trivial. Sample i derives
// its own RNG stream from (seed, i); generation is bit-reproducible.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "c2v/common.hpp"
#include "c2v/container.hpp"
#include "c2v/tensor.hpp"

namespace c2v {

struct SynthSample {
    Tensor image;   // [3,H,W], values in [0,1]
    LabelMap label; // [1,H,W] stored with batch extent 1
};

namespace detail {
constexpr double kColorNoise = 0.1;

// Class anchors sit close together relative to the noise, so single-pixel
// color is an ambiguous cue and spatial context carries real information.
inline std::array<double, 3> class_color(int cls) {
    static const std::array<std::array<double, 3>, 8> palette = {{
        {0.45, 0.45, 0.45},  // background: mid gray
        {0.58, 0.37, 0.42},  // red-leaning
        {0.37, 0.58, 0.42},  // green-leaning
        {0.42, 0.40, 0.58},  // blue-leaning
        {0.56, 0.55, 0.36},  // yellow-leaning
        {0.55, 0.37, 0.56},  // magenta-leaning
        {0.36, 0.55, 0.55},  // cyan-leaning
        {0.58, 0.49, 0.35},  // orange-leaning
    }};
    return palette[static_cast<size_t>(cls) % palette.size()];
}

// paints label regions for one class; family cycles rectangle/circle/stripes
inline void paint_shape(LabelMap& label, int cls, int h, int w, Rng& rng) {
    int family = (cls - 1) % 3;
    if (family == 0) {
        int bw = rng.uniform_int(w * 3 / 10, w * 11 / 20);
        int bh = rng.uniform_int(h * 3 / 10, h * 11 / 20);
        int x0 = rng.uniform_int(0, w - bw);
        int y0 = rng.uniform_int(0, h - bh);
        for (int y = y0; y < y0 + bh; ++y)
            for (int x = x0; x < x0 + bw; ++x) label.at(0, y, x) = cls;
    } else if (family == 1) {
        int rmin = std::min(h, w) * 9 / 50;
        int rmax = std::min(h, w) * 3 / 10;
        int r = rng.uniform_int(std::max(2, rmin), std::max(3, rmax));
        int cx = rng.uniform_int(r, w - 1 - r);
        int cy = rng.uniform_int(r, h - 1 - r);
        for (int y = cy - r; y <= cy + r; ++y)
            for (int x = cx - r; x <= cx + r; ++x) {
                int dy = y - cy, dx = x - cx;
                if (dy * dy + dx * dx <= r * r) label.at(0, y, x) = cls;
            }
    } else {
        bool horizontal = rng.bernoulli(0.5);
        int extent = horizontal ? h : w;
        int thick = rng.uniform_int(std::max(2, extent * 3 / 20), std::max(3, extent * 11 / 50));
        int gap = thick + rng.uniform_int(1, std::max(2, extent / 8));
        int span = 2 * thick + gap;
        int start = rng.uniform_int(0, std::max(0, extent - span));
        for (int bar = 0; bar < 2; ++bar) {
            int lo = start + bar * (thick + gap);
            for (int s = lo; s < std::min(extent, lo + thick); ++s) {
                if (horizontal) {
                    for (int x = 0; x < w; ++x) label.at(0, s, x) = cls;
                } else {
                    for (int y = 0; y < h; ++y) label.at(0, y, s) = cls;
                }
            }
        }
    }
}
}  // namespace detail

inline SynthSample generate_sample(Rng rng, int h, int w, int num_classes) {
    SynthSample s;
    s.label = LabelMap(1, h, w, 0);
    // geometry first, then colors; keeps the RNG consumption order fixed
    for (int cls = 1; cls < num_classes; ++cls) detail::paint_shape(s.label, cls, h, w, rng);
    double grad_amp = rng.uniform(-0.05, 0.05);
    s.image = Tensor({3, h, w});
    double* img = s.image.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int cls = s.label.at(0, y, x);
            std::array<double, 3> base = detail::class_color(cls);
            double shade = cls == 0 ? grad_amp * (2.0 * x / std::max(1, w - 1) - 1.0) : 0.0;
            for (int c = 0; c < 3; ++c) {
                double v = base[c] + shade + detail::kColorNoise * rng.normal();
                img[(static_cast<size_t>(c) * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return s;
}

inline std::vector<SynthSample> generate_dataset(uint64_t seed, int n, int h, int w,
                                                 int num_classes) {
    if (num_classes < 2) throw ValueError("generate_dataset: need at least 2 classes");
    if (h % 4 != 0 || w % 4 != 0) throw ValueError("generate_dataset: extents must divide by 4");
    Rng master(seed);
    std::vector<SynthSample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.push_back(generate_sample(master.fork(static_cast<uint64_t>(i)), h, w, num_classes));
    }
    return out;
}

inline SynthSample flip_horizontal(const SynthSample& s) {
    int h = s.label.height, w = s.label.width;
    SynthSample out;
    out.image = Tensor({3, h, w});
    out.label = LabelMap(1, h, w);
    const double* src = s.image.data();
    double* dst = out.image.data();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                dst[(static_cast<size_t>(c) * h + y) * w + x] =
                    src[(static_cast<size_t>(c) * h + y) * w + (w - 1 - x)];
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.label.at(0, y, x) = s.label.at(0, y, w - 1 - x);
    return out;
}

// Crop to crop_h x crop_w (same window for image and label), then resize
// back to the original extents: bilinear for the image, nearest for labels.
inline SynthSample crop_resize(const SynthSample& s, int crop_h, int crop_w, Rng& rng) {
    int h = s.label.height, w = s.label.width;
    if (crop_h > h || crop_w > w || crop_h <= 0 || crop_w <= 0) {
        throw ValueError("crop_resize: crop window larger than image");
    }
    int y0 = crop_h == h ? 0 : rng.uniform_int(0, h - crop_h);
    int x0 = crop_w == w ? 0 : rng.uniform_int(0, w - crop_w);
    if (crop_h == h && crop_w == w) return s;
    Tensor crop({3, crop_h, crop_w});
    const double* src = s.image.data();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < crop_h; ++y)
            for (int x = 0; x < crop_w; ++x)
                crop.data()[(static_cast<size_t>(c) * crop_h + y) * crop_w + x] =
                    src[(static_cast<size_t>(c) * h + y0 + y) * w + x0 + x];
    SynthSample out;
    {
        NoGradGuard ng;
        out.image = reshape(bilinear_resize(reshape(crop, {1, 3, crop_h, crop_w}), h, w), {3, h, w});
    }
    out.label = LabelMap(1, h, w);
    for (int y = 0; y < h; ++y) {
        int sy = std::min(crop_h - 1, static_cast<int>((y + 0.5) * crop_h / h));
        for (int x = 0; x < w; ++x) {
            int sx = std::min(crop_w - 1, static_cast<int>((x + 0.5) * crop_w / w));
            out.label.at(0, y, x) = s.label.at(0, y0 + sy, x0 + sx);
        }
    }
    return out;
}

// Training augmentation: coin-flip horizontal mirror, then random crop with
// resize back to the model's input extents.
inline SynthSample augment(const SynthSample& s, Rng& rng, int crop_h, int crop_w,
                           double flip_prob = 0.5) {
    SynthSample out = rng.bernoulli(flip_prob) ? flip_horizontal(s) : s;
    return crop_resize(out, crop_h, crop_w, rng);
}

// ---------------------------------------------------------------------------
// dataset container IO: entries image_{i} [3,H,W] and label_{i} [H,W]
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& path, const std::vector<SynthSample>& samples) {
    std::vector<NamedTensor> entries;
    entries.reserve(samples.size() * 2);
    for (size_t i = 0; i < samples.size(); ++i) {
        const SynthSample& s = samples[i];
        entries.push_back({"image_" + std::to_string(i), s.image});
        std::vector<double> lbl(s.label.values.begin(), s.label.values.end());
        entries.push_back(
            {"label_" + std::to_string(i), Tensor({s.label.height, s.label.width}, std::move(lbl))});
    }
    save_container(path, entries);
}

inline std::vector<SynthSample> load_dataset(const std::string& path) {
    std::vector<NamedTensor> entries = load_container(path);
    if (entries.size() % 2 != 0) {
        throw ContainerError(ContainerError::Kind::BadEntry,
                             "dataset container must hold image/label pairs");
    }
    size_t n = entries.size() / 2;
    std::vector<SynthSample> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const Tensor& img = require_entry(entries, "image_" + std::to_string(i));
        const Tensor& lbl = require_entry(entries, "label_" + std::to_string(i));
        if (img.rank() != 3 || lbl.rank() != 2 || img.dim(1) != lbl.dim(0) ||
            img.dim(2) != lbl.dim(1)) {
            throw ContainerError(ContainerError::Kind::BadEntry,
                                 "malformed sample " + std::to_string(i));
        }
        SynthSample s;
        s.image = img;
        s.label = LabelMap(1, lbl.dim(0), lbl.dim(1));
        for (size_t j = 0; j < lbl.numel(); ++j)
            s.label.values[j] = static_cast<int32_t>(lbl.data()[j]);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace c2v
