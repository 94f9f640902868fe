// Run configuration: every hyperparameter of the pipeline, a flat
// `key = value` config-file parser, and the startup echo.
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "c2v/common.hpp"
#include "c2v/models.hpp"

namespace c2v {

struct DistillConfig {
    // data / shapes
    int height = 32;
    int width = 32;
    int classes = 4;
    int train_samples = 1000;
    int val_samples = 200;
    uint64_t data_seed = 7;

    // teacher architecture
    std::vector<int> teacher_widths = {16, 32, 64, 64};

    // student architecture
    int patch_size = 4;
    int depth = 4;
    int embed_dim = 64;
    int heads = 4;
    int mlp_hidden = 64;
    int aligned_dim = 64;
    int pool_heads = 4;

    // loss weights and toggles
    double lambda_g = 1.0;
    double lambda_p = 1.0;
    double lambda_l = 1.0;
    double alpha = 1.0;
    double beta = 1.0;
    bool use_lg = true;
    bool use_lp = true;
    bool use_ll = true;
    // baseline mode: supervised cross-entropy instead of the decoupled loss
    bool ce_supervision = false;

    // optimization
    double base_lr = 6e-5;    // student schedule
    double teacher_lr = 2e-3; // teacher pretraining schedule
    double power = 1.0;
    double weight_decay = 0.01;
    double clip_norm = 5.0;
    int batch_size = 8;
    int max_iters = 900;
    // supervised warmup of the student before distillation losses engage;
    // the desk-scale stand-in for initializing from pretrained weights
    int student_init_iters = 0;
    int teacher_iters = 2000;
    int eval_interval = 100;
    uint64_t seed = 42;

    // augmentation
    bool augment = true;
    int crop = 0;  // 0 disables cropping; otherwise the square crop extent
    double flip_prob = 0.5;

    TeacherArch teacher_arch() const {
        TeacherArch a;
        a.in_channels = 3;
        a.num_classes = classes;
        a.widths = teacher_widths;
        return a;
    }

    StudentArch student_arch() const {
        StudentArch a;
        a.in_channels = 3;
        a.num_classes = classes;
        a.height = height;
        a.width = width;
        a.patch_size = patch_size;
        a.depth = depth;
        a.embed_dim = embed_dim;
        a.num_heads = heads;
        a.mlp_hidden = mlp_hidden;
        return a;
    }

    void validate() const {
        if (classes < 2) throw ValueError("config: classes must be >= 2");
        if (max_iters < 1 || teacher_iters < 0) throw ValueError("config: iteration counts invalid");
        if (student_init_iters < 0 || student_init_iters > max_iters) {
            throw ValueError("config: student_init_iters must lie in [0, max_iters]");
        }
        if (batch_size < 1) throw ValueError("config: batch_size must be >= 1");
        if (lambda_g < 0 || lambda_p < 0 || lambda_l < 0 || alpha < 0 || beta < 0) {
            throw ValueError("config: loss weights must be >= 0");
        }
        if (crop < 0 || crop > height || crop > width) {
            throw ValueError("config: crop must be 0 (disabled) or in (0, min(height,width)]");
        }
        if (teacher_widths.size() != 4) throw ValueError("config: teacher_widths needs 4 entries");
    }
};

namespace detail {
inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValueError("config: bad boolean for '" + key + "': " + v);
}

inline std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(trim(item)));
    return out;
}
}  // namespace detail

// Applies one key = value pair; throws ValueError on unknown keys.
inline void apply_config_entry(DistillConfig& cfg, const std::string& key,
                               const std::string& value) {
    using detail::parse_bool;
    if (key == "height") cfg.height = std::stoi(value);
    else if (key == "width") cfg.width = std::stoi(value);
    else if (key == "classes") cfg.classes = std::stoi(value);
    else if (key == "train_samples") cfg.train_samples = std::stoi(value);
    else if (key == "val_samples") cfg.val_samples = std::stoi(value);
    else if (key == "data_seed") cfg.data_seed = std::stoull(value);
    else if (key == "teacher_widths") cfg.teacher_widths = detail::parse_int_list(value);
    else if (key == "patch_size") cfg.patch_size = std::stoi(value);
    else if (key == "depth") cfg.depth = std::stoi(value);
    else if (key == "embed_dim") cfg.embed_dim = std::stoi(value);
    else if (key == "heads") cfg.heads = std::stoi(value);
    else if (key == "mlp_hidden") cfg.mlp_hidden = std::stoi(value);
    else if (key == "aligned_dim") cfg.aligned_dim = std::stoi(value);
    else if (key == "pool_heads") cfg.pool_heads = std::stoi(value);
    else if (key == "lambda_g") cfg.lambda_g = std::stod(value);
    else if (key == "lambda_p") cfg.lambda_p = std::stod(value);
    else if (key == "lambda_l") cfg.lambda_l = std::stod(value);
    else if (key == "alpha") cfg.alpha = std::stod(value);
    else if (key == "beta") cfg.beta = std::stod(value);
    else if (key == "use_lg") cfg.use_lg = parse_bool(value, key);
    else if (key == "use_lp") cfg.use_lp = parse_bool(value, key);
    else if (key == "use_ll") cfg.use_ll = parse_bool(value, key);
    else if (key == "ce_supervision") cfg.ce_supervision = parse_bool(value, key);
    else if (key == "base_lr") cfg.base_lr = std::stod(value);
    else if (key == "teacher_lr") cfg.teacher_lr = std::stod(value);
    else if (key == "power") cfg.power = std::stod(value);
    else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
    else if (key == "clip_norm") cfg.clip_norm = std::stod(value);
    else if (key == "batch_size") cfg.batch_size = std::stoi(value);
    else if (key == "max_iters") cfg.max_iters = std::stoi(value);
    else if (key == "student_init_iters") cfg.student_init_iters = std::stoi(value);
    else if (key == "teacher_iters") cfg.teacher_iters = std::stoi(value);
    else if (key == "eval_interval") cfg.eval_interval = std::stoi(value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "augment") cfg.augment = parse_bool(value, key);
    else if (key == "crop") cfg.crop = std::stoi(value);
    else if (key == "flip_prob") cfg.flip_prob = std::stod(value);
    else throw ValueError("config: unknown key '" + key + "'");
}

// One `key = value` per line; '#' starts a comment.
inline void load_config_file(DistillConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValueError("config: cannot open '" + path + "'");
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValueError("config: line " + std::to_string(line_no) + " is not 'key = value'");
        }
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        try {
            apply_config_entry(cfg, key, value);
        } catch (const std::invalid_argument&) {
            throw ValueError("config: bad value for '" + key + "' on line " +
                             std::to_string(line_no));
        }
    }
}

inline std::string config_echo(const DistillConfig& c) {
    std::ostringstream os;
    auto kv = [&os](const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; };
    auto num = [](double v) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%g", v);
        return std::string(buf);
    };
    kv("height", std::to_string(c.height));
    kv("width", std::to_string(c.width));
    kv("classes", std::to_string(c.classes));
    kv("train_samples", std::to_string(c.train_samples));
    kv("val_samples", std::to_string(c.val_samples));
    kv("data_seed", std::to_string(c.data_seed));
    {
        std::string w;
        for (size_t i = 0; i < c.teacher_widths.size(); ++i)
            w += (i ? "," : "") + std::to_string(c.teacher_widths[i]);
        kv("teacher_widths", w);
    }
    kv("patch_size", std::to_string(c.patch_size));
    kv("depth", std::to_string(c.depth));
    kv("embed_dim", std::to_string(c.embed_dim));
    kv("heads", std::to_string(c.heads));
    kv("mlp_hidden", std::to_string(c.mlp_hidden));
    kv("aligned_dim", std::to_string(c.aligned_dim));
    kv("pool_heads", std::to_string(c.pool_heads));
    kv("lambda_g", num(c.lambda_g));
    kv("lambda_p", num(c.lambda_p));
    kv("lambda_l", num(c.lambda_l));
    kv("alpha", num(c.alpha));
    kv("beta", num(c.beta));
    kv("use_lg", c.use_lg ? "true" : "false");
    kv("use_lp", c.use_lp ? "true" : "false");
    kv("use_ll", c.use_ll ? "true" : "false");
    kv("ce_supervision", c.ce_supervision ? "true" : "false");
    kv("base_lr", num(c.base_lr));
    kv("teacher_lr", num(c.teacher_lr));
    kv("power", num(c.power));
    kv("weight_decay", num(c.weight_decay));
    kv("clip_norm", num(c.clip_norm));
    kv("batch_size", std::to_string(c.batch_size));
    kv("max_iters", std::to_string(c.max_iters));
    kv("student_init_iters", std::to_string(c.student_init_iters));
    kv("teacher_iters", std::to_string(c.teacher_iters));
    kv("eval_interval", std::to_string(c.eval_interval));
    kv("seed", std::to_string(c.seed));
    kv("augment", c.augment ? "true" : "false");
    kv("crop", std::to_string(c.crop));
    kv("flip_prob", num(c.flip_prob));
    return os.str();
}

}  // namespace c2v
