// Command-line front end for the CNN-to-ViT distillation toolkit.
//
// Subcommands: gen-data, train-teacher, distill, evaluate, ablate, gradcheck.
// Exit codes: 0 success, 1 validation failure, 2 runtime divergence.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "c2v/c2v.hpp"

namespace fs = std::filesystem;
using namespace c2v;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    CLI::App* cmd = nullptr;
};

// Flag storage for overrides; only values the user actually passed are
// applied on top of the config file.
struct Overrides {
    uint64_t seed = 0;
    double lambda_g = 0, lambda_p = 0, lambda_l = 0, alpha = 0, beta = 0;
    double lr = 0, teacher_lr = 0;
    int iters = 0, init_iters = 0, teacher_iters = 0, batch_size = 0, eval_interval = 0;
    bool no_lg = false, no_lp = false, no_ll = false;
};

void add_common_options(CLI::App* cmd, CommonOpts& common, Overrides& ov) {
    common.cmd = cmd;
    cmd->add_option("--config", common.config_path, "flat key = value config file");
    cmd->add_option("--out", common.out_dir, "output directory");
    cmd->add_option("--seed", ov.seed, "run seed");
    cmd->add_option("--lambda-g", ov.lambda_g, "weight of the global feature loss");
    cmd->add_option("--lambda-p", ov.lambda_p, "weight of the patch affinity loss");
    cmd->add_option("--lambda-l", ov.lambda_l, "weight of the linguistic descriptor loss");
    cmd->add_option("--alpha", ov.alpha, "target-term weight of the decoupled loss");
    cmd->add_option("--beta", ov.beta, "non-target-term weight of the decoupled loss");
    cmd->add_option("--iters", ov.iters, "distillation iterations");
    cmd->add_option("--init-iters", ov.init_iters, "supervised warmup iterations before distillation");
    cmd->add_option("--teacher-iters", ov.teacher_iters, "teacher pretraining iterations");
    cmd->add_option("--batch-size", ov.batch_size, "training batch size");
    cmd->add_option("--eval-interval", ov.eval_interval, "iterations between val evaluations");
    cmd->add_option("--lr", ov.lr, "student base learning rate");
    cmd->add_option("--teacher-lr", ov.teacher_lr, "teacher base learning rate");
    cmd->add_flag("--no-lg", ov.no_lg, "disable the global feature loss");
    cmd->add_flag("--no-lp", ov.no_lp, "disable the patch affinity loss");
    cmd->add_flag("--no-ll", ov.no_ll, "disable the linguistic descriptor loss");
}

DistillConfig build_config(const CommonOpts& common, const Overrides& ov) {
    DistillConfig cfg;
    if (!common.config_path.empty()) load_config_file(cfg, common.config_path);
    auto set = [&](const char* flag) { return common.cmd->count(flag) > 0; };
    if (set("--seed")) cfg.seed = ov.seed;
    if (set("--lambda-g")) cfg.lambda_g = ov.lambda_g;
    if (set("--lambda-p")) cfg.lambda_p = ov.lambda_p;
    if (set("--lambda-l")) cfg.lambda_l = ov.lambda_l;
    if (set("--alpha")) cfg.alpha = ov.alpha;
    if (set("--beta")) cfg.beta = ov.beta;
    if (set("--iters")) cfg.max_iters = ov.iters;
    if (set("--init-iters")) cfg.student_init_iters = ov.init_iters;
    if (set("--teacher-iters")) cfg.teacher_iters = ov.teacher_iters;
    if (set("--batch-size")) cfg.batch_size = ov.batch_size;
    if (set("--eval-interval")) cfg.eval_interval = ov.eval_interval;
    if (set("--lr")) cfg.base_lr = ov.lr;
    if (set("--teacher-lr")) cfg.teacher_lr = ov.teacher_lr;
    if (ov.no_lg) cfg.use_lg = false;
    if (ov.no_lp) cfg.use_lp = false;
    if (ov.no_ll) cfg.use_ll = false;
    cfg.validate();
    return cfg;
}

void echo(const DistillConfig& cfg) {
    std::cout << "-- effective config --\n" << config_echo(cfg) << "----------------------\n";
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValueError("cannot write '" + path.string() + "'");
    out << content;
}

std::vector<SynthSample> load_split(const std::string& data_dir, const char* split) {
    fs::path p = fs::path(data_dir) / (std::string(split) + ".c2vt");
    if (!fs::exists(p)) throw ValueError("dataset file missing: " + p.string());
    return load_dataset(p.string());
}

void report_model_sizes(const TeacherNet* teacher, const StudentNet* student) {
    if (teacher) {
        std::cout << "[teacher] parameters: " << count_params(teacher->parameters()) << "\n";
    }
    if (student) {
        std::cout << "[student] parameters: " << count_params(student->parameters()) << "\n";
    }
}

int cmd_gen_data(const std::string& out_dir, const DistillConfig& cfg) {
    fs::create_directories(out_dir);
    auto train = generate_dataset(cfg.data_seed, cfg.train_samples, cfg.height, cfg.width,
                                  cfg.classes);
    auto val = generate_dataset(cfg.data_seed ^ 0x5EEDull, cfg.val_samples, cfg.height, cfg.width,
                                cfg.classes);
    save_dataset((fs::path(out_dir) / "train.c2vt").string(), train);
    save_dataset((fs::path(out_dir) / "val.c2vt").string(), val);
    std::cout << "wrote " << train.size() << " train / " << val.size() << " val samples to "
              << out_dir << "\n";
    return 0;
}

int cmd_train_teacher(const std::string& data_dir, const std::string& out_dir,
                      const std::string& resume, const DistillConfig& cfg) {
    echo(cfg);
    auto train = load_split(data_dir, "train");
    auto val = load_split(data_dir, "val");
    std::optional<TeacherNet> init;
    int64_t start_step = 0;
    if (!resume.empty()) {
        init = TeacherNet::from_entries(load_container(resume), &start_step);
        std::cout << "resuming from step " << start_step << "\n";
    }
    {
        // size report before the run starts
        Rng tmp(cfg.seed);
        TeacherNet probe = init ? *init : TeacherNet(cfg.teacher_arch(), tmp);
        Rng stmp(cfg.seed);
        StudentNet sprobe(cfg.student_arch(), stmp);
        report_model_sizes(&probe, &sprobe);
    }
    TeacherResult res = train_teacher(cfg, train, val, std::move(init), start_step);
    fs::create_directories(out_dir);
    save_container((fs::path(out_dir) / "teacher.c2vt").string(), res.net.to_entries(res.step));
    write_file(fs::path(out_dir) / "teacher_train.csv", res.csv);
    std::printf("teacher val mIoU: %.4f\n", res.final_miou);
    return 0;
}

int cmd_distill(const std::string& data_dir, const std::string& teacher_path,
                const std::string& out_dir, bool ce_baseline, DistillConfig cfg) {
    cfg.ce_supervision = ce_baseline;
    if (ce_baseline && teacher_path.empty()) {
        cfg.use_lg = cfg.use_lp = cfg.use_ll = false;
    }
    echo(cfg);
    auto train = load_split(data_dir, "train");
    auto val = load_split(data_dir, "val");
    std::optional<TeacherNet> teacher;
    if (!teacher_path.empty()) {
        teacher = TeacherNet::from_entries(load_container(teacher_path));
    }
    if (needs_teacher(cfg) && !teacher) {
        throw ValueError("distill: --teacher required for the enabled losses");
    }
    {
        Rng stmp(cfg.seed);
        StudentNet sprobe(cfg.student_arch(), stmp);
        report_model_sizes(teacher ? &*teacher : nullptr, &sprobe);
    }
    DistillResult res = distill(cfg, teacher ? &*teacher : nullptr, train, val);
    fs::create_directories(out_dir);
    save_container((fs::path(out_dir) / "student.c2vt").string(),
                   res.student.to_entries(cfg.max_iters));
    write_file(fs::path(out_dir) / "distill_metrics.csv", res.csv);
    std::printf("student val mIoU: %.4f\n", res.final_miou);
    return 0;
}

int cmd_evaluate(const std::string& data_dir, const std::string& ckpt_path,
                 const std::string& out_dir, const DistillConfig& cfg) {
    auto val = load_split(data_dir, "val");
    auto entries = load_container(ckpt_path);
    const Tensor& meta = require_entry(entries, "__meta__");
    IouReport rep;
    if (meta.data()[0] == 1.0) {
        TeacherNet net = TeacherNet::from_entries(entries);
        report_model_sizes(&net, nullptr);
        rep = evaluate_teacher(net, val, cfg.batch_size);
    } else {
        StudentNet net = StudentNet::from_entries(entries);
        report_model_sizes(nullptr, &net);
        rep = evaluate_student(net, val, cfg.batch_size);
    }
    std::cout << iou_report_table(rep);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "report.csv", iou_report_csv(rep));
    }
    return 0;
}

struct AblateCell {
    std::string name;
    bool ce = false;
    bool lg = false, lp = false, ll = false;
    double alpha = 1.0, beta = 1.0;
};

int cmd_ablate(const std::string& data_dir, const std::string& teacher_path,
               const std::string& out_dir, int n_seeds, bool full_grid, const DistillConfig& cfg) {
    echo(cfg);
    auto train = load_split(data_dir, "train");
    auto val = load_split(data_dir, "val");
    TeacherNet teacher = TeacherNet::from_entries(load_container(teacher_path));

    std::vector<AblateCell> cells;
    cells.push_back({"base", true, false, false, false, 1, 1});
    if (full_grid) {
        for (int lg = 0; lg < 2; ++lg)
            for (int lp = 0; lp < 2; ++lp)
                for (int ll = 0; ll < 2; ++ll) {
                    std::string name = "ld";
                    if (lg) name += "+lg";
                    if (lp) name += "+lp";
                    if (ll) name += "+ll";
                    cells.push_back({name, false, lg != 0, lp != 0, ll != 0, 1, 1});
                }
    } else {
        cells.push_back({"ld", false, false, false, false, 1, 1});
        cells.push_back({"ld+lg", false, true, false, false, 1, 1});
        cells.push_back({"ld+lp", false, false, true, false, 1, 1});
        cells.push_back({"ld+ll", false, false, false, true, 1, 1});
        cells.push_back({"all", false, true, true, true, 1, 1});
    }
    // alpha/beta sweep; the 1/1 point is the plain "ld" cell above
    cells.push_back({"ld_a3b1", false, false, false, false, 3, 1});
    cells.push_back({"ld_a2b1", false, false, false, false, 2, 1});

    struct Job {
        size_t cell;
        uint64_t seed;
        double miou = 0.0;
    };
    std::vector<Job> jobs;
    for (size_t c = 0; c < cells.size(); ++c)
        for (int s = 0; s < n_seeds; ++s) jobs.push_back({c, cfg.seed + static_cast<uint64_t>(s)});

    std::atomic<size_t> cursor{0};
    auto work = [&] {
        size_t j;
        while ((j = cursor.fetch_add(1)) < jobs.size()) {
            const AblateCell& cell = cells[jobs[j].cell];
            DistillConfig run = cfg;
            run.seed = jobs[j].seed;
            run.ce_supervision = cell.ce;
            run.use_lg = cell.lg;
            run.use_lp = cell.lp;
            run.use_ll = cell.ll;
            run.alpha = cell.alpha;
            run.beta = cell.beta;
            const TeacherNet* tp = cell.ce ? nullptr : &teacher;
            jobs[j].miou = distill(run, tp, train, val).final_miou;
        }
    };
    int threads = std::min<int>(worker_count(), static_cast<int>(jobs.size()));
    if (threads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }

    std::string csv = "cell,lg,lp,ll,alpha,beta,seed,val_miou\n";
    char buf[160];
    for (const Job& j : jobs) {
        const AblateCell& cell = cells[j.cell];
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%g,%g,%llu,%.6f\n", cell.name.c_str(),
                      cell.lg ? 1 : 0, cell.lp ? 1 : 0, cell.ll ? 1 : 0, cell.alpha, cell.beta,
                      static_cast<unsigned long long>(j.seed), j.miou);
        csv += buf;
    }
    std::cout << "cell        median mIoU\n";
    for (size_t c = 0; c < cells.size(); ++c) {
        std::vector<double> vals;
        for (const Job& j : jobs)
            if (j.cell == c) vals.push_back(j.miou);
        std::sort(vals.begin(), vals.end());
        double med = vals[vals.size() / 2];
        if (vals.size() % 2 == 0) med = 0.5 * (med + vals[vals.size() / 2 - 1]);
        std::snprintf(buf, sizeof(buf), "%-10s %10.4f\n", cells[c].name.c_str(), med);
        std::cout << buf;
    }
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "ablate.csv", csv);
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    auto results = gradcheck_losses(seed);
    bool ok = true;
    for (const auto& r : results) {
        bool pass = r.max_rel_err < 1e-4;
        ok = ok && pass;
        std::printf("%-6s max rel err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                    pass ? "PASS" : "FAIL");
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CNN-to-ViT segmentation distillation toolkit"};
    app.require_subcommand(1);

    CommonOpts common_gen, common_tt, common_di, common_ev, common_ab, common_gc;
    Overrides ov_gen, ov_tt, ov_di, ov_ev, ov_ab, ov_gc;
    std::string data_dir, teacher_path, ckpt_path, resume_path;
    bool ce_baseline = false, full_grid = false;
    int n_seeds = 1;
    int n_train = -1, n_val = -1, gen_h = -1, gen_w = -1, gen_k = -1;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    add_common_options(gen, common_gen, ov_gen);
    gen->add_option("--n-train", n_train, "training samples");
    gen->add_option("--n-val", n_val, "validation samples");
    gen->add_option("--height", gen_h, "image height");
    gen->add_option("--width", gen_w, "image width");
    gen->add_option("--classes", gen_k, "class count");

    CLI::App* tt = app.add_subcommand("train-teacher", "pretrain the convolutional teacher");
    add_common_options(tt, common_tt, ov_tt);
    tt->add_option("--data", data_dir, "dataset directory")->required();
    tt->add_option("--resume", resume_path, "teacher checkpoint to continue from");

    CLI::App* di = app.add_subcommand("distill", "train the student (distilled or CE baseline)");
    add_common_options(di, common_di, ov_di);
    di->add_option("--data", data_dir, "dataset directory")->required();
    di->add_option("--teacher", teacher_path, "teacher checkpoint");
    di->add_flag("--ce", ce_baseline, "supervise with plain cross-entropy (baseline)");

    CLI::App* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the val split");
    add_common_options(ev, common_ev, ov_ev);
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--checkpoint", ckpt_path, "teacher or student checkpoint")->required();

    CLI::App* ab = app.add_subcommand("ablate", "run the loss-combination and alpha/beta grids");
    add_common_options(ab, common_ab, ov_ab);
    ab->add_option("--data", data_dir, "dataset directory")->required();
    ab->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    ab->add_option("--seeds", n_seeds, "seeds per grid cell");
    ab->add_flag("--full", full_grid, "run all 8 loss-flag combinations");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss");
    add_common_options(gc, common_gc, ov_gc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            DistillConfig cfg = build_config(common_gen, ov_gen);
            if (gen->count("--seed")) cfg.data_seed = ov_gen.seed;
            if (n_train >= 0) cfg.train_samples = n_train;
            if (n_val >= 0) cfg.val_samples = n_val;
            if (gen_h > 0) cfg.height = gen_h;
            if (gen_w > 0) cfg.width = gen_w;
            if (gen_k > 0) cfg.classes = gen_k;
            cfg.validate();
            if (common_gen.out_dir.empty()) throw ValueError("gen-data: --out is required");
            return cmd_gen_data(common_gen.out_dir, cfg);
        }
        if (tt->parsed()) {
            DistillConfig cfg = build_config(common_tt, ov_tt);
            if (common_tt.out_dir.empty()) throw ValueError("train-teacher: --out is required");
            return cmd_train_teacher(data_dir, common_tt.out_dir, resume_path, cfg);
        }
        if (di->parsed()) {
            DistillConfig cfg = build_config(common_di, ov_di);
            if (common_di.out_dir.empty()) throw ValueError("distill: --out is required");
            return cmd_distill(data_dir, teacher_path, common_di.out_dir, ce_baseline, cfg);
        }
        if (ev->parsed()) {
            DistillConfig cfg = build_config(common_ev, ov_ev);
            return cmd_evaluate(data_dir, ckpt_path, common_ev.out_dir, cfg);
        }
        if (ab->parsed()) {
            DistillConfig cfg = build_config(common_ab, ov_ab);
            if (common_ab.out_dir.empty()) throw ValueError("ablate: --out is required");
            return cmd_ablate(data_dir, teacher_path, common_ab.out_dir, n_seeds, full_grid, cfg);
        }
        if (gc->parsed()) {
            DistillConfig cfg = build_config(common_gc, ov_gc);
            return cmd_gradcheck(cfg.seed);
        }
    } catch (const DivergenceError& e) {
        std::cerr << "error (divergence): " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
