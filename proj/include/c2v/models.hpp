// Concrete segmentation networks: a small convolutional teacher and a
// patch-attention student, plus the training-only attention-pool and
// alignment heads. Inference uses only TeacherNet / StudentNet forward.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "c2v/nn.hpp"

namespace c2v {

// One forward pass worth of outputs: segmentation logits at input
// resolution and the final high-level features.
struct FeatureBundle {
    Tensor logits;    // [B,K,H,W], pre-softmax
    Tensor features;  // teacher: [B,D,h,w]; student: [B,T,D]
};

struct TeacherArch {
    int in_channels = 3;
    int num_classes = 4;
    std::vector<int> widths = {16, 32, 64, 64};  // stage output channels
};

// Conv encoder (two 3x3 convs per stage, stride-2 downsampling at stages 2
// and 3) with a 1x1 head and bilinear upsampling back to input resolution.
class TeacherNet {
public:
    TeacherNet() = default;

    TeacherNet(const TeacherArch& arch, Rng& rng) : arch_(arch) {
        if (arch.widths.size() != 4) throw ShapeError("TeacherNet: expected 4 stage widths");
        int in_ch = arch.in_channels;
        for (size_t s = 0; s < arch.widths.size(); ++s) {
            int out_ch = arch.widths[s];
            int stride = (s == 1 || s == 2) ? 2 : 1;
            stages_.push_back(Conv2dLayer(in_ch, out_ch, 3, stride, 1, rng));
            stages_.push_back(Conv2dLayer(out_ch, out_ch, 3, 1, 1, rng));
            in_ch = out_ch;
        }
        head_ = Conv2dLayer(in_ch, arch.num_classes, 1, 1, 0, rng);
        set_param_grads();
    }

    FeatureBundle forward(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != arch_.in_channels) {
            throw ShapeError("TeacherNet: expected [B," + std::to_string(arch_.in_channels) +
                             ",H,W], got " + shape_str(x.shape()));
        }
        if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0) {
            throw ShapeError("TeacherNet: spatial extents must be divisible by 4");
        }
        Tensor h = x;
        for (const auto& conv : stages_) h = relu(conv2d_forward(conv, h));
        Tensor logits_coarse = conv2d_forward(head_, h);
        Tensor logits = bilinear_resize(logits_coarse, x.dim(2), x.dim(3));
        return {logits, h};
    }

    const TeacherArch& arch() const { return arch_; }
    int feature_dim() const { return arch_.widths.back(); }

    std::vector<NamedTensor> parameters() const {
        std::vector<NamedTensor> out;
        for (size_t i = 0; i < stages_.size(); ++i) {
            stages_[i].collect(out, "teacher.s" + std::to_string(i / 2) + ".c" +
                                        std::to_string(i % 2));
        }
        head_.collect(out, "teacher.head");
        return out;
    }

    std::vector<NamedTensor> to_entries(int64_t step) const {
        std::vector<NamedTensor> out = parameters();
        std::vector<double> meta = {1.0, static_cast<double>(step),
                                    static_cast<double>(arch_.num_classes),
                                    static_cast<double>(arch_.in_channels)};
        for (int w : arch_.widths) meta.push_back(static_cast<double>(w));
        out.push_back({"__meta__", Tensor({static_cast<int>(meta.size())}, meta)});
        return out;
    }

    static TeacherNet from_entries(const std::vector<NamedTensor>& entries, int64_t* step = nullptr) {
        const Tensor& meta = require_entry(entries, "__meta__");
        if (meta.numel() < 8 || meta.data()[0] != 1.0) {
            throw ContainerError(ContainerError::Kind::BadEntry, "not a teacher checkpoint");
        }
        if (step) *step = static_cast<int64_t>(meta.data()[1]);
        TeacherArch arch;
        arch.num_classes = static_cast<int>(meta.data()[2]);
        arch.in_channels = static_cast<int>(meta.data()[3]);
        arch.widths.assign(4, 0);
        for (int i = 0; i < 4; ++i) arch.widths[i] = static_cast<int>(meta.data()[4 + i]);
        Rng rng(0);
        TeacherNet net(arch, rng);
        net.load_parameters(entries);
        return net;
    }

    void load_parameters(const std::vector<NamedTensor>& entries) {
        for (auto& p : parameters()) {
            const Tensor& src = require_entry(entries, p.name);
            if (src.shape() != p.tensor.shape()) {
                throw ContainerError(ContainerError::Kind::BadEntry,
                                     "shape mismatch for '" + p.name + "'");
            }
            std::copy(src.vec().begin(), src.vec().end(),
                      p.tensor.impl()->data.begin());
        }
    }

private:
    void set_param_grads() {
        for (auto& p : parameters()) p.tensor.set_requires_grad(true);
    }

    TeacherArch arch_;
    std::vector<Conv2dLayer> stages_;  // two convs per stage
    Conv2dLayer head_;
};

struct StudentArch {
    int in_channels = 3;
    int num_classes = 4;
    int height = 32;
    int width = 32;
    int patch_size = 4;
    int depth = 4;
    int embed_dim = 64;
    int num_heads = 4;
    int mlp_hidden = 64;
};

// Patch-embedding encoder with pre-norm attention blocks and a per-token
// linear decoder unfolded back to pixel logits.
class StudentNet {
public:
    StudentNet() = default;

    StudentNet(const StudentArch& arch, Rng& rng) : arch_(arch) {
        if (arch.height % arch.patch_size != 0 || arch.width % arch.patch_size != 0) {
            throw ShapeError("StudentNet: image extents not divisible by patch size");
        }
        int tokens = (arch.height / arch.patch_size) * (arch.width / arch.patch_size);
        embed_ = PatchEmbed(arch.patch_size, arch.in_channels, arch.embed_dim, rng);
        pos_embed_ = Tensor::zeros({tokens, arch.embed_dim});
        for (int i = 0; i < arch.depth; ++i) {
            Block blk;
            blk.ln1 = LayerNorm(arch.embed_dim);
            blk.attn = MhsaLayer(arch.embed_dim, arch.num_heads, rng);
            blk.ln2 = LayerNorm(arch.embed_dim);
            blk.mlp_w1 = Tensor::randn({arch.embed_dim, arch.mlp_hidden}, rng,
                                       std::sqrt(1.0 / arch.embed_dim));
            blk.mlp_b1 = Tensor::zeros({arch.mlp_hidden});
            blk.mlp_w2 = Tensor::randn({arch.mlp_hidden, arch.embed_dim}, rng,
                                       std::sqrt(1.0 / arch.mlp_hidden));
            blk.mlp_b2 = Tensor::zeros({arch.embed_dim});
            blocks_.push_back(std::move(blk));
        }
        final_norm_ = LayerNorm(arch.embed_dim);
        int dec_out = arch.num_classes * arch.patch_size * arch.patch_size;
        dec_w_ = Tensor::randn({arch.embed_dim, dec_out}, rng, std::sqrt(1.0 / arch.embed_dim));
        dec_b_ = Tensor::zeros({dec_out});
        set_param_grads();
    }

    FeatureBundle forward(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(2) != arch_.height || x.dim(3) != arch_.width) {
            throw ShapeError("StudentNet: expected [B," + std::to_string(arch_.in_channels) + "," +
                             std::to_string(arch_.height) + "," + std::to_string(arch_.width) +
                             "], got " + shape_str(x.shape()));
        }
        Tensor tokens = add_tokens(embed_.forward(x), pos_embed_);
        for (const auto& blk : blocks_) {
            Tensor attn_out = mhsa_forward(blk.attn, blk.ln1.forward(tokens));
            tokens = add(tokens, attn_out);
            Tensor h = linear(blk.ln2.forward(tokens), blk.mlp_w1, blk.mlp_b1);
            h = linear(gelu(h), blk.mlp_w2, blk.mlp_b2);
            tokens = add(tokens, h);
        }
        // distilled features are the final-block residual stream; the final
        // norm belongs to the decoder path (a normalized stream has zero
        // channel mean, which would blind the global feature loss)
        Tensor per_token = linear(final_norm_.forward(tokens), dec_w_, dec_b_);
        Tensor logits = patch_reverse(per_token, arch_.patch_size, arch_.height, arch_.width);
        return {logits, tokens};
    }

    const StudentArch& arch() const { return arch_; }
    int token_count() const { return pos_embed_.dim(0); }
    int token_grid_h() const { return arch_.height / arch_.patch_size; }
    int token_grid_w() const { return arch_.width / arch_.patch_size; }

    std::vector<NamedTensor> parameters() const {
        std::vector<NamedTensor> out;
        embed_.collect(out, "student.embed");
        out.push_back({"student.pos", pos_embed_});
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "student.blk" + std::to_string(i);
            blocks_[i].ln1.collect(out, p + ".ln1");
            blocks_[i].attn.collect(out, p + ".attn");
            blocks_[i].ln2.collect(out, p + ".ln2");
            out.push_back({p + ".mlp.w1", blocks_[i].mlp_w1});
            out.push_back({p + ".mlp.b1", blocks_[i].mlp_b1});
            out.push_back({p + ".mlp.w2", blocks_[i].mlp_w2});
            out.push_back({p + ".mlp.b2", blocks_[i].mlp_b2});
        }
        final_norm_.collect(out, "student.norm");
        out.push_back({"student.dec.w", dec_w_});
        out.push_back({"student.dec.b", dec_b_});
        return out;
    }

    std::vector<NamedTensor> to_entries(int64_t step) const {
        std::vector<NamedTensor> out = parameters();
        std::vector<double> meta = {2.0,
                                    static_cast<double>(step),
                                    static_cast<double>(arch_.num_classes),
                                    static_cast<double>(arch_.in_channels),
                                    static_cast<double>(arch_.height),
                                    static_cast<double>(arch_.width),
                                    static_cast<double>(arch_.patch_size),
                                    static_cast<double>(arch_.depth),
                                    static_cast<double>(arch_.embed_dim),
                                    static_cast<double>(arch_.num_heads),
                                    static_cast<double>(arch_.mlp_hidden)};
        out.push_back({"__meta__", Tensor({static_cast<int>(meta.size())}, meta)});
        return out;
    }

    static StudentNet from_entries(const std::vector<NamedTensor>& entries, int64_t* step = nullptr) {
        const Tensor& meta = require_entry(entries, "__meta__");
        if (meta.numel() < 11 || meta.data()[0] != 2.0) {
            throw ContainerError(ContainerError::Kind::BadEntry, "not a student checkpoint");
        }
        if (step) *step = static_cast<int64_t>(meta.data()[1]);
        StudentArch arch;
        arch.num_classes = static_cast<int>(meta.data()[2]);
        arch.in_channels = static_cast<int>(meta.data()[3]);
        arch.height = static_cast<int>(meta.data()[4]);
        arch.width = static_cast<int>(meta.data()[5]);
        arch.patch_size = static_cast<int>(meta.data()[6]);
        arch.depth = static_cast<int>(meta.data()[7]);
        arch.embed_dim = static_cast<int>(meta.data()[8]);
        arch.num_heads = static_cast<int>(meta.data()[9]);
        arch.mlp_hidden = static_cast<int>(meta.data()[10]);
        Rng rng(0);
        StudentNet net(arch, rng);
        net.load_parameters(entries);
        return net;
    }

    void load_parameters(const std::vector<NamedTensor>& entries) {
        for (auto& p : parameters()) {
            const Tensor& src = require_entry(entries, p.name);
            if (src.shape() != p.tensor.shape()) {
                throw ContainerError(ContainerError::Kind::BadEntry,
                                     "shape mismatch for '" + p.name + "'");
            }
            std::copy(src.vec().begin(), src.vec().end(), p.tensor.impl()->data.begin());
        }
    }

private:
    struct Block {
        LayerNorm ln1;
        MhsaLayer attn;
        LayerNorm ln2;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    void set_param_grads() {
        for (auto& p : parameters()) p.tensor.set_requires_grad(true);
    }

    StudentArch arch_;
    PatchEmbed embed_;
    Tensor pos_embed_;
    std::vector<Block> blocks_;
    LayerNorm final_norm_;
    Tensor dec_w_, dec_b_;
};

inline size_t count_params(const std::vector<NamedTensor>& params) {
    size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

// Training-only head on the teacher side: a GAP-derived global token is
// prepended to the spatial tokens and mixed by one MHSA layer; token 0 of
// the output is the global descriptor. Kept frozen (see trainer).
struct AttentionPoolHead {
    MhsaLayer attn;
    Tensor proj_w, proj_b;  // only used when feature dim != aligned dim
    bool has_proj = false;
    int aligned_dim = 0;

    AttentionPoolHead() = default;

    AttentionPoolHead(int feature_dim, int aligned_dim_, int heads, Rng& rng)
        : aligned_dim(aligned_dim_) {
        if (feature_dim != aligned_dim_) {
            has_proj = true;
            proj_w = Tensor::randn({feature_dim, aligned_dim_}, rng,
                                   std::sqrt(1.0 / feature_dim));
            proj_b = Tensor::zeros({aligned_dim_});
        }
        attn = MhsaLayer(aligned_dim_, heads, rng);
    }
};

// Returns (global descriptor [B,D], spatial tokens [B,T,D]).
inline std::pair<Tensor, Tensor> attention_pool(const AttentionPoolHead& head,
                                                const Tensor& features) {
    Tensor tokens = features.rank() == 4 ? map_to_tokens(features) : features;
    if (head.has_proj) tokens = linear(tokens, head.proj_w, head.proj_b);
    int b = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
    Tensor global_token = reshape(global_avg_pool(tokens), {b, 1, d});
    Tensor mixed = mhsa_forward(head.attn, concat({global_token, tokens}, 1));
    Tensor pooled = reshape(narrow(mixed, 1, 0, 1), {b, d});
    Tensor spatial = narrow(mixed, 1, 1, t);
    return {pooled, spatial};
}

// Training-only head on the student side: one linear map to the common
// aligned dimension. Trained jointly with the student.
struct AlignHead {
    Tensor weight;  // [D_V, D]
    Tensor bias;    // [D]

    AlignHead() = default;

    AlignHead(int in_dim, int aligned_dim, Rng& rng) {
        weight = Tensor::randn({in_dim, aligned_dim}, rng, std::sqrt(1.0 / in_dim));
        bias = Tensor::zeros({aligned_dim});
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    std::vector<NamedTensor> parameters() const {
        return {{"align.w", weight}, {"align.b", bias}};
    }
};

// Returns (global descriptor [B,D], per-token aligned features [B,T,D]).
inline std::pair<Tensor, Tensor> align_head(const AlignHead& head, const Tensor& tokens) {
    Tensor pooled = add_bias(matmul(global_avg_pool(tokens), head.weight), head.bias);
    Tensor per_token = linear(tokens, head.weight, head.bias);
    return {pooled, per_token};
}

}  // namespace c2v
