// Feature-space distillation losses: linguistic descriptor KL, global map
// KL, and the patch-affinity MSE.
//
// Raw features are not distributions, so both KL losses softmax-normalize
// first (over the feature axis for the linguistic loss, over spatial
// positions for the global loss). Affinities use cosine similarity: rows are
// L2-normalized before the Gram product so the loss cannot be shrunk by
// scaling features down.
#pragma once

#include "c2v/tensor.hpp"

namespace c2v {

// T x T patch-similarity Gram matrix per batch sample.
using AffinityMatrix = Tensor;

// KL between softmax-normalized global descriptors, averaged over the batch
// and divided by the descriptor dimension. The teacher descriptor is
// expected to carry no gradient.
inline Tensor linguistic_loss(const Tensor& student_desc, const Tensor& teacher_desc) {
    if (student_desc.shape() != teacher_desc.shape() || student_desc.rank() != 2) {
        throw ShapeError("linguistic_loss: expected matching [B,D] descriptors, got " +
                         shape_str(student_desc.shape()) + " vs " +
                         shape_str(teacher_desc.shape()));
    }
    int d = student_desc.dim(1);
    Tensor p = softmax(student_desc, 1);
    Tensor q = softmax(teacher_desc, 1);
    return mul_scalar(kl_div(p, q), 1.0 / static_cast<double>(d));
}

namespace detail {
// [B,C,h,w] -> [B,h,w] channel mean
inline Tensor channel_mean(const Tensor& x) {
    return mul_scalar(sum_axis(x, 1), 1.0 / static_cast<double>(x.dim(1)));
}

// Bring [B,h,w] to (th, tw): integer-ratio mean pooling when possible,
// bilinear otherwise.
inline Tensor reduce_to_grid(const Tensor& x, int th, int tw) {
    int b = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h == th && w == tw) return x;
    Tensor m = reshape(x, {b, 1, h, w});
    if (h % th == 0 && w % tw == 0 && h / th == w / tw) {
        m = avg_pool2d(m, h / th);
    } else {
        m = bilinear_resize(m, th, tw);
    }
    return reshape(m, {b, th, tw});
}
}  // namespace detail

// KL between the spatial distributions of the rebuilt student token map and
// the teacher feature map. Both are channel-averaged, reduced to the coarser
// grid, and softmax-normalized over positions.
inline Tensor global_loss(const Tensor& student_tokens, const Tensor& teacher_features,
                          int token_grid_h, int token_grid_w) {
    if (student_tokens.rank() != 3 || teacher_features.rank() != 4) {
        throw ShapeError("global_loss: expected tokens [B,T,D] and features [B,C,h,w]");
    }
    if (student_tokens.dim(1) != token_grid_h * token_grid_w) {
        throw ShapeError("global_loss: token count does not match grid " +
                         std::to_string(token_grid_h) + "x" + std::to_string(token_grid_w));
    }
    Tensor student_map = detail::channel_mean(
        tokens_to_map(student_tokens, token_grid_h, token_grid_w));      // [B,th,tw]
    Tensor teacher_map = detail::channel_mean(teacher_features);         // [B,hf,wf]
    int th = std::min(student_map.dim(1), teacher_map.dim(1));
    int tw = std::min(student_map.dim(2), teacher_map.dim(2));
    student_map = detail::reduce_to_grid(student_map, th, tw);
    teacher_map = detail::reduce_to_grid(teacher_map, th, tw);
    int b = student_map.dim(0);
    Tensor p = softmax(reshape(student_map, {b, th * tw}), 1);
    Tensor q = softmax(reshape(teacher_map, {b, th * tw}), 1);
    return kl_div(p, q);
}

// Splits a teacher feature map into the student's token layout: one flattened
// patch vector per student token. Grids must be integer multiples.
inline Tensor teacher_patch_tokens(const Tensor& teacher_features, int token_grid_h,
                                   int token_grid_w) {
    if (teacher_features.rank() != 4) {
        throw ShapeError("teacher_patch_tokens: expected [B,C,h,w] features");
    }
    int hf = teacher_features.dim(2), wf = teacher_features.dim(3);
    if (hf % token_grid_h != 0 || wf % token_grid_w != 0 ||
        hf / token_grid_h != wf / token_grid_w) {
        throw ShapeError("teacher_patch_tokens: feature grid " + std::to_string(hf) + "x" +
                         std::to_string(wf) + " not an integer multiple of token grid " +
                         std::to_string(token_grid_h) + "x" + std::to_string(token_grid_w));
    }
    return patch_partition(teacher_features, hf / token_grid_h);
}

// Cosine affinity: rows L2-normalized, then the Gram product. Zero-norm rows
// stay zero (their diagonal entry is 0).
inline AffinityMatrix patch_affinity(const Tensor& tokens) {
    if (tokens.rank() != 3) throw ShapeError("patch_affinity: expected [B,T,Z] tokens");
    Tensor n = l2_normalize_rows(tokens);
    return bmm(n, transpose_last2(n));
}

// Mean squared difference over all B*T*T affinity entries.
inline Tensor patch_loss(const AffinityMatrix& teacher_affinity,
                         const AffinityMatrix& student_affinity) {
    if (teacher_affinity.shape() != student_affinity.shape()) {
        throw ShapeError("patch_loss: affinity shapes differ, " +
                         shape_str(teacher_affinity.shape()) + " vs " +
                         shape_str(student_affinity.shape()));
    }
    Tensor diff = sub(teacher_affinity, student_affinity);
    return mean(mul(diff, diff));
}

}  // namespace c2v
