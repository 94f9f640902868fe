// Differentiable layers the teacher and student are assembled from.
#pragma once

#include <string>
#include <vector>

#include "c2v/container.hpp"
#include "c2v/tensor.hpp"

namespace c2v {

struct Conv2dLayer {
    Tensor weight;  // [out_ch, in_ch, kh, kw]
    Tensor bias;    // [out_ch]
    int stride = 1;
    int padding = 0;

    Conv2dLayer() = default;

    Conv2dLayer(int in_ch, int out_ch, int kernel, int stride_, int padding_, Rng& rng)
        : stride(stride_), padding(padding_) {
        if (kernel % 2 == 0) throw ShapeError("Conv2dLayer: kernel extent must be odd");
        double std_dev = std::sqrt(2.0 / (static_cast<double>(in_ch) * kernel * kernel));
        weight = Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, std_dev);
        bias = Tensor::zeros({out_ch});
    }

    void collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
        out.push_back({prefix + ".w", weight});
        out.push_back({prefix + ".b", bias});
    }
};

inline Tensor conv2d_forward(const Conv2dLayer& layer, const Tensor& x) {
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim) : gamma(Tensor::full({dim}, 1.0)), beta(Tensor::zeros({dim})) {}

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

    void collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
        out.push_back({prefix + ".g", gamma});
        out.push_back({prefix + ".b", beta});
    }
};

// Multi-head self-attention without positional encoding or biases.
// Attention weights use scale 1/sqrt(head_dim); heads are concatenated and
// projected by w_out.
struct MhsaLayer {
    int num_heads = 1;
    Tensor w_query, w_key, w_value, w_out;  // all [D, D]

    MhsaLayer() = default;

    MhsaLayer(int dim, int heads, Rng& rng) : num_heads(heads) {
        if (heads <= 0 || dim % heads != 0) {
            throw ShapeError("MhsaLayer: dim " + std::to_string(dim) +
                             " not divisible by heads " + std::to_string(heads));
        }
        double std_dev = std::sqrt(1.0 / static_cast<double>(dim));
        w_query = Tensor::randn({dim, dim}, rng, std_dev);
        w_key = Tensor::randn({dim, dim}, rng, std_dev);
        w_value = Tensor::randn({dim, dim}, rng, std_dev);
        w_out = Tensor::randn({dim, dim}, rng, std_dev);
    }

    void collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
        out.push_back({prefix + ".wq", w_query});
        out.push_back({prefix + ".wk", w_key});
        out.push_back({prefix + ".wv", w_value});
        out.push_back({prefix + ".wo", w_out});
    }
};

inline Tensor mhsa_forward(const MhsaLayer& layer, const Tensor& tokens) {
    if (tokens.rank() != 3) throw ShapeError("mhsa_forward: expected [B,T,D] tokens");
    int b = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
    if (d != layer.w_query.dim(0)) {
        throw ShapeError("mhsa_forward: token dim " + std::to_string(d) +
                         " does not match layer dim " + std::to_string(layer.w_query.dim(0)));
    }
    int head_dim = d / layer.num_heads;
    Tensor zeros_bias = Tensor::zeros({d});
    Tensor q = linear(tokens, layer.w_query, zeros_bias);
    Tensor k = linear(tokens, layer.w_key, zeros_bias);
    Tensor v = linear(tokens, layer.w_value, zeros_bias);
    double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Tensor> heads;
    heads.reserve(layer.num_heads);
    for (int h = 0; h < layer.num_heads; ++h) {
        Tensor qh = narrow(q, 2, h * head_dim, head_dim);
        Tensor kh = narrow(k, 2, h * head_dim, head_dim);
        Tensor vh = narrow(v, 2, h * head_dim, head_dim);
        Tensor scores = mul_scalar(bmm(qh, transpose_last2(kh)), scale);  // [B,T,T]
        Tensor attn = softmax(scores, 2);
        heads.push_back(bmm(attn, vh));  // [B,T,head_dim]
    }
    Tensor merged = layer.num_heads == 1 ? heads[0] : concat(heads, 2);
    (void)b;
    (void)t;
    return linear(merged, layer.w_out, Tensor::zeros({d}));
}

// Patch embedding: non-overlapping p x p patches projected to embed_dim.
struct PatchEmbed {
    int patch_size = 4;
    int in_channels = 3;
    Tensor weight;  // [in_channels * p * p, embed_dim]
    Tensor bias;    // [embed_dim]

    PatchEmbed() = default;

    PatchEmbed(int p, int in_ch, int embed_dim, Rng& rng) : patch_size(p), in_channels(in_ch) {
        int flat = in_ch * p * p;
        weight = Tensor::randn({flat, embed_dim}, rng, std::sqrt(1.0 / flat));
        bias = Tensor::zeros({embed_dim});
    }

    Tensor forward(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != in_channels) {
            throw ShapeError("PatchEmbed: expected [B," + std::to_string(in_channels) +
                             ",H,W], got " + shape_str(x.shape()));
        }
        return linear(patch_partition(x, patch_size), weight, bias);
    }

    void collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
        out.push_back({prefix + ".w", weight});
        out.push_back({prefix + ".b", bias});
    }
};

}  // namespace c2v
