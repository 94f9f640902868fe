// End-to-end training: poly schedule, AdamW, the teacher pretraining loop,
// the distillation loop combining all four losses, threaded evaluation, and
// the finite-difference gradient check suite.
#pragma once

#include <atomic>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "c2v/config.hpp"
#include "c2v/data.hpp"
#include "c2v/feature_losses.hpp"
#include "c2v/metrics.hpp"
#include "c2v/models.hpp"
#include "c2v/pixel_losses.hpp"

namespace c2v {

// base_lr * (1 - iter/max_iters)^power
inline double poly_lr(int64_t iter, int64_t max_iters, double base_lr, double power) {
    if (iter < 0 || iter > max_iters || max_iters < 1) {
        throw ValueError("poly_lr: need 0 <= iter <= max_iters");
    }
    double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iters);
    return base_lr * std::pow(frac, power);
}

// Decoupled weight decay Adam. Momenta are stored per parameter in the
// order the parameter list was registered.
class AdamW {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    explicit AdamW(std::vector<NamedTensor> params, double weight_decay)
        : params_(std::move(params)), weight_decay_(weight_decay) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    // Clips the global gradient norm, applies one update, clears gradients.
    void step(double lr, double clip_norm) {
        ++t_;
        double sq = 0.0;
        for (auto& p : params_) {
            for (double g : p.tensor.grad()) sq += g * g;
        }
        double scale = 1.0;
        double norm = std::sqrt(sq);
        if (clip_norm > 0.0 && norm > clip_norm) scale = clip_norm / norm;
        double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& impl = *params_[i].tensor.impl();
            impl.ensure_grad();
            for (size_t j = 0; j < impl.data.size(); ++j) {
                double g = impl.grad[j] * scale;
                m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g;
                v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g * g;
                double mhat = m_[i][j] / bc1;
                double vhat = v_[i][j] / bc2;
                impl.data[j] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay_ * impl.data[j]);
            }
            std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    std::vector<NamedTensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double weight_decay_ = 0.01;
    int64_t t_ = 0;
};

// The four scalar loss terms of one distillation step. Disabled terms are
// left as default zero scalars and skipped by total_loss.
struct LossParts {
    Tensor supervised;  // L_d (or CE in baseline mode)
    Tensor global_term; // L_g
    Tensor patch_term;  // L_p
    Tensor linguistic;  // L_l
};

// L = L_d + lambda_g*L_g + lambda_p*L_p + lambda_l*L_l. Disabled terms
// contribute exactly zero; a non-finite enabled term aborts, naming it.
inline Tensor total_loss(const LossParts& parts, const DistillConfig& cfg) {
    auto check = [](const Tensor& t, const char* name) {
        if (!std::isfinite(t.item())) {
            throw DivergenceError(std::string("total_loss: term ") + name + " is not finite");
        }
    };
    check(parts.supervised, "L_d");
    Tensor loss = parts.supervised;
    if (cfg.use_lg) {
        check(parts.global_term, "L_g");
        loss = add(loss, mul_scalar(parts.global_term, cfg.lambda_g));
    }
    if (cfg.use_lp) {
        check(parts.patch_term, "L_p");
        loss = add(loss, mul_scalar(parts.patch_term, cfg.lambda_p));
    }
    if (cfg.use_ll) {
        check(parts.linguistic, "L_l");
        loss = add(loss, mul_scalar(parts.linguistic, cfg.lambda_l));
    }
    return loss;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

// Epoch-shuffled index stream; reshuffles with its own stream each epoch.
class BatchSampler {
public:
    BatchSampler(size_t n, uint64_t seed) : rng_(seed) {
        order_.resize(n);
        for (size_t i = 0; i < n; ++i) order_[i] = i;
        shuffle();
    }

    std::vector<size_t> next(size_t count) {
        std::vector<size_t> out;
        out.reserve(count);
        while (out.size() < count) {
            if (pos_ == order_.size()) {
                shuffle();
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void shuffle() {
        for (size_t i = order_.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng_.next_u64() % i);
            std::swap(order_[i - 1], order_[j]);
        }
    }

    std::vector<size_t> order_;
    size_t pos_ = 0;
    Rng rng_;
};

struct Batch {
    Tensor images;  // [B,3,H,W]
    LabelMap labels;
};

inline Batch make_batch(const std::vector<SynthSample>& data, const std::vector<size_t>& indices) {
    int h = data[indices[0]].label.height, w = data[indices[0]].label.width;
    int b = static_cast<int>(indices.size());
    Batch out{Tensor({b, 3, h, w}), LabelMap(b, h, w)};
    size_t plane = static_cast<size_t>(3) * h * w;
    size_t hw = static_cast<size_t>(h) * w;
    for (int i = 0; i < b; ++i) {
        const SynthSample& s = data[indices[i]];
        std::copy(s.image.vec().begin(), s.image.vec().end(), out.images.data() + i * plane);
        std::copy(s.label.values.begin(), s.label.values.end(), out.labels.values.begin() + i * hw);
    }
    return out;
}

// Augmented batch; each slot derives its RNG stream from (seed, iteration,
// slot) so results are independent of assembly order.
inline Batch make_training_batch(const std::vector<SynthSample>& data,
                                 const std::vector<size_t>& indices, const DistillConfig& cfg,
                                 int64_t iter) {
    if (!cfg.augment) return make_batch(data, indices);
    std::vector<SynthSample> samples;
    samples.reserve(indices.size());
    Rng base(cfg.seed ^ 0x5A17B0C9D3E8F24Bull);
    for (size_t slot = 0; slot < indices.size(); ++slot) {
        Rng rng = base.fork(static_cast<uint64_t>(iter) * indices.size() + slot);
        const SynthSample& s = data[indices[slot]];
        int crop_h = cfg.crop > 0 ? cfg.crop : s.label.height;
        int crop_w = cfg.crop > 0 ? cfg.crop : s.label.width;
        samples.push_back(augment(s, rng, crop_h, crop_w, cfg.flip_prob));
    }
    std::vector<size_t> ids(samples.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return make_batch(samples, ids);
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline int worker_count() {
    if (const char* env = std::getenv("C2V_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
}

using LogitsFn = std::function<Tensor(const Tensor&)>;  // batch images -> [B,K,H,W]

// Confusion-matrix evaluation over a dataset. Work is split into fixed
// chunks merged in index order, so the result is independent of the worker
// count (capped by C2V_THREADS).
inline IouReport evaluate_forward(const LogitsFn& forward, const std::vector<SynthSample>& data,
                                  int num_classes, int batch_size) {
    if (data.empty()) return miou(ConfusionMatrix(num_classes));
    size_t chunk = static_cast<size_t>(std::max(1, batch_size));
    size_t n_chunks = (data.size() + chunk - 1) / chunk;
    std::vector<ConfusionMatrix> partial(n_chunks, ConfusionMatrix(num_classes));
    std::atomic<size_t> cursor{0};
    auto work = [&] {
        NoGradGuard ng;
        size_t i;
        while ((i = cursor.fetch_add(1)) < n_chunks) {
            size_t lo = i * chunk;
            size_t hi = std::min(data.size(), lo + chunk);
            std::vector<size_t> ids;
            for (size_t s = lo; s < hi; ++s) ids.push_back(s);
            Batch b = make_batch(data, ids);
            LabelMap pred = argmax_predictions(forward(b.images));
            accumulate(partial[i], pred, b.labels);
        }
    };
    int threads = std::min<int>(worker_count(), static_cast<int>(n_chunks));
    if (threads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    ConfusionMatrix total(num_classes);
    for (const auto& cm : partial) total += cm;
    return miou(total);
}

inline IouReport evaluate_teacher(const TeacherNet& net, const std::vector<SynthSample>& data,
                                  int batch_size) {
    return evaluate_forward([&](const Tensor& x) { return net.forward(x).logits; }, data,
                            net.arch().num_classes, batch_size);
}

inline IouReport evaluate_student(const StudentNet& net, const std::vector<SynthSample>& data,
                                  int batch_size) {
    return evaluate_forward([&](const Tensor& x) { return net.forward(x).logits; }, data,
                            net.arch().num_classes, batch_size);
}

// ---------------------------------------------------------------------------
// CSV helpers (fixed formatting keeps logs byte-reproducible)
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// teacher pretraining
// ---------------------------------------------------------------------------

struct TeacherResult {
    TeacherNet net;
    std::string csv;  // iter,lr,loss,val_miou
    double final_miou = 0.0;
    int64_t step = 0;
};

// Supervised pretraining with cross-entropy. When resuming, `start_step`
// iterations are considered done; zero remaining iterations returns the
// checkpoint unchanged.
inline TeacherResult train_teacher(const DistillConfig& cfg, const std::vector<SynthSample>& train,
                                   const std::vector<SynthSample>& val,
                                   std::optional<TeacherNet> init = std::nullopt,
                                   int64_t start_step = 0) {
    cfg.validate();
    if (train.empty()) throw ValueError("train_teacher: empty training set");
    TeacherResult res;
    if (init.has_value()) {
        res.net = std::move(*init);
    } else {
        Rng rng(cfg.seed ^ 0x7EAC4E2ull);
        res.net = TeacherNet(cfg.teacher_arch(), rng);
    }
    res.csv = "iter,lr,loss,val_miou\n";
    res.step = start_step;
    if (start_step >= cfg.teacher_iters) {
        res.final_miou = evaluate_teacher(res.net, val, cfg.batch_size).miou;
        return res;
    }
    AdamW opt(res.net.parameters(), cfg.weight_decay);
    BatchSampler sampler(train.size(), cfg.seed ^ 0x8BADF00Dull);
    for (int64_t iter = start_step; iter < cfg.teacher_iters; ++iter) {
        double lr = poly_lr(iter, cfg.teacher_iters, cfg.teacher_lr, cfg.power);
        Batch batch = make_training_batch(train, sampler.next(cfg.batch_size), cfg, iter);
        FeatureBundle out = res.net.forward(batch.images);
        Tensor loss = ce_loss(out.logits, batch.labels);
        double loss_v = loss.item();
        if (!std::isfinite(loss_v)) {
            throw DivergenceError("train_teacher: loss diverged at iter " + std::to_string(iter));
        }
        backward(loss);
        opt.step(lr, cfg.clip_norm);
        res.csv += std::to_string(iter) + "," + detail::fmt_num(lr) + "," + detail::fmt_num(loss_v);
        bool eval_now = ((iter + 1) % cfg.eval_interval == 0) || iter + 1 == cfg.teacher_iters;
        if (eval_now && !val.empty()) {
            double m = evaluate_teacher(res.net, val, cfg.batch_size).miou;
            res.csv += "," + detail::fmt_num(m) + "\n";
            res.final_miou = m;
        } else {
            res.csv += ",\n";
        }
        res.step = iter + 1;
    }
    return res;
}

// ---------------------------------------------------------------------------
// distillation (and the CE-only baseline, which is the same loop with the
// supervised term swapped and all distillation terms disabled)
// ---------------------------------------------------------------------------

struct DistillResult {
    StudentNet student;
    std::string csv;  // iter,lr,L_d,L_g,L_p,L_l,L_total,val_miou
    double final_miou = 0.0;
};

inline bool needs_teacher(const DistillConfig& cfg) {
    return !cfg.ce_supervision || cfg.use_lg || cfg.use_lp || cfg.use_ll;
}

inline DistillResult distill(const DistillConfig& cfg, const TeacherNet* teacher,
                             const std::vector<SynthSample>& train,
                             const std::vector<SynthSample>& val) {
    cfg.validate();
    if (train.empty()) throw ValueError("distill: empty training set");
    if (needs_teacher(cfg) && teacher == nullptr) {
        throw ValueError("distill: teacher checkpoint required for the enabled losses");
    }
    if (teacher && teacher->arch().num_classes != cfg.classes) {
        throw ValueError("distill: teacher class count does not match config");
    }
    // Feature-grid compatibility is a configuration error, caught before the
    // loop: the teacher feature map is H/4, the student token grid H/p.
    if (cfg.use_lp && teacher != nullptr) {
        int hf = cfg.height / 4, wf = cfg.width / 4;
        int th = cfg.height / cfg.patch_size, tw = cfg.width / cfg.patch_size;
        if (hf % th != 0 || wf % tw != 0 || hf / th != wf / tw) {
            throw ShapeError("distill: teacher grid " + std::to_string(hf) + "x" +
                             std::to_string(wf) + " incompatible with student token grid " +
                             std::to_string(th) + "x" + std::to_string(tw));
        }
    }

    DistillResult res;
    Rng student_rng(cfg.seed ^ 0x57D4E17Aull);
    res.student = StudentNet(cfg.student_arch(), student_rng);
    // Training-only heads. The attention-pool head lives on the teacher side
    // and stays frozen (no VLFD gradient may reach teacher-side tensors);
    // the align head belongs to the trained parameter set.
    Rng pool_rng(cfg.seed ^ 0x9001D00Dull);
    AttentionPoolHead pool_head;
    if (teacher) {
        pool_head = AttentionPoolHead(teacher->feature_dim(), cfg.aligned_dim, cfg.pool_heads,
                                      pool_rng);
    }
    Rng align_rng(cfg.seed ^ 0xA11C4EADull);
    AlignHead align(cfg.embed_dim, cfg.aligned_dim, align_rng);

    std::vector<NamedTensor> trained = res.student.parameters();
    if (cfg.use_ll) {
        for (auto& p : align.parameters()) trained.push_back(p);
    }
    AdamW opt(trained, cfg.weight_decay);
    BatchSampler sampler(train.size(), cfg.seed ^ 0x8BADF00Dull);

    int grid_h = res.student.token_grid_h();
    int grid_w = res.student.token_grid_w();
    res.csv = "iter,lr,L_d,L_g,L_p,L_l,L_total,val_miou\n";
    for (int64_t iter = 0; iter < cfg.max_iters; ++iter) {
        double lr = poly_lr(iter, cfg.max_iters, cfg.base_lr, cfg.power);
        Batch batch = make_training_batch(train, sampler.next(cfg.batch_size), cfg, iter);
        // Warmup phase: plain supervised training standing in for a
        // pretrained student initialization. Distillation terms stay off;
        // the true L_d value is still logged for the convergence record.
        bool warm = iter < cfg.student_init_iters && !cfg.ce_supervision;

        // teacher pass and derived constants, all gradient-free
        Tensor teacher_logits, teacher_features, teacher_desc, teacher_affinity;
        if (teacher) {
            NoGradGuard ng;
            FeatureBundle t = teacher->forward(batch.images);
            teacher_logits = t.logits;
            teacher_features = t.features;
            if (cfg.use_ll && !warm) teacher_desc = attention_pool(pool_head, t.features).first;
            if (cfg.use_lp && !warm) {
                teacher_affinity =
                    patch_affinity(teacher_patch_tokens(t.features, grid_h, grid_w));
            }
        }

        FeatureBundle s = res.student.forward(batch.images);
        LossParts parts;
        parts.supervised = (cfg.ce_supervision || warm)
                               ? ce_loss(s.logits, batch.labels)
                               : decoupled_loss(s.logits, teacher_logits, batch.labels, cfg.alpha,
                                                cfg.beta);
        if (cfg.use_lg && !warm) {
            parts.global_term = global_loss(s.features, teacher_features, grid_h, grid_w);
        }
        if (cfg.use_lp && !warm) {
            parts.patch_term = patch_loss(teacher_affinity, patch_affinity(s.features));
        }
        if (cfg.use_ll && !warm) {
            Tensor student_desc = align_head(align, s.features).first;
            parts.linguistic = linguistic_loss(student_desc, teacher_desc);
        }
        DistillConfig term_cfg = cfg;
        if (warm) {
            term_cfg.use_lg = term_cfg.use_lp = term_cfg.use_ll = false;
        }
        Tensor loss = total_loss(parts, term_cfg);
        double loss_v = loss.item();
        double supervised_log = parts.supervised.item();
        if (warm && teacher) {
            NoGradGuard ng;
            supervised_log =
                decoupled_loss(s.logits, teacher_logits, batch.labels, cfg.alpha, cfg.beta).item();
        }
        backward(loss);
        opt.step(lr, cfg.clip_norm);

        res.csv += std::to_string(iter) + "," + detail::fmt_num(lr) + "," +
                   detail::fmt_num(supervised_log) + "," +
                   detail::fmt_num(cfg.use_lg ? parts.global_term.item() : 0.0) + "," +
                   detail::fmt_num(cfg.use_lp ? parts.patch_term.item() : 0.0) + "," +
                   detail::fmt_num(cfg.use_ll ? parts.linguistic.item() : 0.0) + "," +
                   detail::fmt_num(loss_v);
        bool eval_now = ((iter + 1) % cfg.eval_interval == 0) || iter + 1 == cfg.max_iters;
        if (eval_now && !val.empty()) {
            double m = evaluate_student(res.student, val, cfg.batch_size).miou;
            res.csv += "," + detail::fmt_num(m) + "\n";
            res.final_miou = m;
        } else {
            res.csv += ",\n";
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
};

// Relative error with an absolute floor, so near-zero coordinates do not
// blow up the ratio.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Checks analytic gradients of every distillation loss (and their weighted
// sum) against central finite differences at seeded random student-parameter
// coordinates.
inline std::vector<GradCheckResult> gradcheck_losses(uint64_t seed, int points_per_loss = 10) {
    DistillConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.classes = 3;
    cfg.teacher_widths = {8, 12, 16, 16};
    cfg.depth = 2;
    cfg.embed_dim = 32;
    cfg.heads = 2;
    cfg.mlp_hidden = 32;
    cfg.aligned_dim = 32;
    cfg.pool_heads = 2;
    cfg.seed = seed;

    std::vector<SynthSample> data = generate_dataset(seed, 2, cfg.height, cfg.width, cfg.classes);
    std::vector<size_t> ids = {0, 1};
    Batch batch = make_batch(data, ids);

    Rng trng(seed ^ 0x7EAC4E2ull);
    TeacherNet teacher(cfg.teacher_arch(), trng);
    Rng srng(seed ^ 0x57D4E17Aull);
    StudentNet student(cfg.student_arch(), srng);
    Rng prng(seed ^ 0x9001D00Dull);
    AttentionPoolHead pool_head(teacher.feature_dim(), cfg.aligned_dim, cfg.pool_heads, prng);
    Rng arng(seed ^ 0xA11C4EADull);
    AlignHead align(cfg.embed_dim, cfg.aligned_dim, arng);

    int grid_h = student.token_grid_h(), grid_w = student.token_grid_w();
    Tensor teacher_logits, teacher_features, teacher_desc, teacher_affinity;
    {
        NoGradGuard ng;
        FeatureBundle t = teacher.forward(batch.images);
        teacher_logits = t.logits;
        teacher_features = t.features;
        teacher_desc = attention_pool(pool_head, t.features).first;
        teacher_affinity = patch_affinity(teacher_patch_tokens(t.features, grid_h, grid_w));
    }

    auto loss_value = [&](const std::string& which) {
        FeatureBundle s = student.forward(batch.images);
        if (which == "L_d") {
            return decoupled_loss(s.logits, teacher_logits, batch.labels, cfg.alpha, cfg.beta);
        }
        if (which == "L_g") return global_loss(s.features, teacher_features, grid_h, grid_w);
        if (which == "L_p") return patch_loss(teacher_affinity, patch_affinity(s.features));
        if (which == "L_l") {
            return linguistic_loss(align_head(align, s.features).first, teacher_desc);
        }
        LossParts parts;
        parts.supervised =
            decoupled_loss(s.logits, teacher_logits, batch.labels, cfg.alpha, cfg.beta);
        parts.global_term = global_loss(s.features, teacher_features, grid_h, grid_w);
        parts.patch_term = patch_loss(teacher_affinity, patch_affinity(s.features));
        parts.linguistic = linguistic_loss(align_head(align, s.features).first, teacher_desc);
        return total_loss(parts, cfg);
    };

    std::vector<NamedTensor> params = student.parameters();
    for (auto& p : align.parameters()) params.push_back(p);

    std::vector<GradCheckResult> results;
    Rng pick(seed ^ 0xF1D0C24Eull);
    for (const std::string which : {"L_d", "L_g", "L_p", "L_l", "L_all"}) {
        for (auto& p : params) p.tensor.zero_grad();
        Tape::active().clear();
        Tensor loss = loss_value(which);
        backward(loss);
        GradCheckResult r{which, 0.0};
        for (int k = 0; k < points_per_loss; ++k) {
            size_t pi = static_cast<size_t>(pick.next_u64() % params.size());
            Tensor param = params[pi].tensor;
            size_t ei = static_cast<size_t>(pick.next_u64() % param.numel());
            double analytic = param.grad()[ei];
            double fd = finite_diff_at([&] { return loss_value(which).item(); }, param, ei, 1e-5);
            r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic, fd));
        }
        results.push_back(r);
    }
    for (auto& p : params) p.tensor.zero_grad();
    return results;
}

}  // namespace c2v
