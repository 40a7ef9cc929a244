#pragma once

// The work behind each CLI subcommand, callable in-process.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ented/checkpoint.hpp"
#include "ented/config.hpp"
#include "ented/gradcheck_suite.hpp"
#include "ented/image_io.hpp"
#include "ented/metrics.hpp"
#include "ented/toy_data.hpp"
#include "ented/trainer.hpp"

namespace ented::app {

namespace fs = std::filesystem;

inline constexpr const char* kLogHeader =
    "iteration,loss_adv,loss_percep,loss_q,loss_att,loss_total,loss_disc,vq_active";
inline constexpr const char* kEventHeader =
    "iteration,event,distortion_before,distortion_after,chosen,dead_reseeded";
inline constexpr const char* kLogFile = "train_log.csv";
inline constexpr const char* kEventFile = "events.csv";
inline constexpr const char* kFinalCheckpoint = "final.entd";

/// Shortest text that reads back to the same double; empty for NaN.
inline std::string num(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
std::vector<Tensor<T>> dataset(const config::RunConfig& cfg) {
    if (!cfg.data.dir.empty()) return toy::load_dir<T>(cfg.data.dir, cfg.network.resolution);
    return toy::faces<T>(cfg.data.synthetic, cfg.network.resolution, cfg.seed);
}

struct TrainResult {
    std::string final_checkpoint;
    std::size_t iteration = 0;
    train::Score score;
};

/// Hooks for callers that want to watch a run.
struct TrainHooks {
    std::function<void(const train::StepLog&)> on_step;
    std::ostream* progress = nullptr;
    std::size_t progress_every = 100;
};

namespace detail {

/// Opens a CSV for appending, writing the header only when the file is new.
inline std::ofstream open_csv(const fs::path& path, const char* header, bool fresh) {
    const bool exists = fs::exists(path) && fs::file_size(path) > 0;
    std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    if (fresh || !exists) out << header << '\n';
    return out;
}

template <class T>
TrainResult train_impl(const config::RunConfig& cfg, const std::string& resume, const TrainHooks& hooks) {
    const fs::path out_dir(cfg.out_dir);
    fs::create_directories(out_dir);
    train::Trainer<T> tr(cfg, dataset<T>(cfg));
    if (!resume.empty()) tr.load(checkpoint::Checkpoint::load(resume));

    // A fresh run starts new logs; a resumed one appends to them.
    auto log = open_csv(out_dir / kLogFile, kLogHeader, resume.empty());
    auto events = open_csv(out_dir / kEventFile, kEventHeader, resume.empty());
    while (tr.iteration() < cfg.train.iterations) {
        const train::StepLog s = tr.step();
        log << s.iteration << ',' << num(s.adv) << ',' << num(s.percep) << ',' << num(s.q) << ',' << num(s.att)
            << ',' << num(s.total) << ',' << num(s.disc) << ',' << (s.vq_active ? 1 : 0) << '\n';
        for (const auto& e : tr.events()) {
            events << e.iteration << ',' << e.kind << ',' << num(e.report.distortion_before) << ','
                   << num(e.report.distortion_after) << ',' << e.report.chosen << ',' << e.report.dead_reseeded
                   << '\n';
        }
        if (hooks.on_step) hooks.on_step(s);
        if (hooks.progress && hooks.progress_every && tr.iteration() % hooks.progress_every == 0) {
            *hooks.progress << "iter " << tr.iteration() << "  total " << s.total << "  disc " << s.disc << '\n';
        }
        if (cfg.train.checkpoint_every && tr.iteration() % cfg.train.checkpoint_every == 0) {
            tr.snapshot().save((out_dir / ("ckpt_" + std::to_string(tr.iteration()) + ".entd")).string());
        }
    }
    log.flush();
    events.flush();
    TrainResult r;
    r.final_checkpoint = (out_dir / kFinalCheckpoint).string();
    tr.snapshot().save(r.final_checkpoint);
    r.iteration = tr.iteration();
    r.score = train::evaluate(tr.generator(), cfg, tr.data(), tr.iteration());
    return r;
}

}  // namespace detail

inline TrainResult train(const config::RunConfig& cfg, const std::string& resume = {}, const TrainHooks& hooks = {}) {
    return cfg.precision == "f64" ? detail::train_impl<double>(cfg, resume, hooks)
                                  : detail::train_impl<float>(cfg, resume, hooks);
}

namespace detail {

inline bool is_f64(const checkpoint::Checkpoint& ck) {
    return ck.type_of(std::string("G/") + Generator<double>::kCodebook) == 'd';
}

template <class T>
void restore_impl(const checkpoint::Checkpoint& ck, const std::string& input, const std::string& ref,
                  const std::string& out) {
    const Generator<T> gen = train::load_generator<T>(ck);
    const Tensor<T> lq = image_io::read_png<T>(input);
    const Tensor<T> rf = image_io::read_png<T>(ref);
    gen.require_image(lq);
    gen.require_image(rf);
    image_io::write_png(out, train::restore(gen, lq, rf, ck.u64("meta/iteration")));
}

}  // namespace detail

inline void restore(const std::string& ckpt, const std::string& input, const std::string& ref,
                    const std::string& out) {
    const auto ck = checkpoint::Checkpoint::load(ckpt);
    if (detail::is_f64(ck)) detail::restore_impl<double>(ck, input, ref, out);
    else detail::restore_impl<float>(ck, input, ref, out);
}

struct EvalRow {
    std::string name;
    double psnr_input = 0, ssim_input = 0, psnr_restored = 0, ssim_restored = 0;
};

namespace detail {

template <class T>
std::vector<EvalRow> eval_impl(const checkpoint::Checkpoint& ck, const std::vector<std::string>& names,
                               const fs::path& dir) {
    const Generator<T> gen = train::load_generator<T>(ck);
    std::vector<EvalRow> rows;
    for (const auto& n : names) {
        const auto lq = image_io::read_png<T>((dir / (n + "_lq.png")).string());
        const auto ref = image_io::read_png<T>((dir / (n + "_ref.png")).string());
        const auto gt = image_io::read_png<T>((dir / (n + "_gt.png")).string());
        gen.require_image(lq);
        const auto out = image_io::quantize8(train::restore(gen, lq, ref, ck.u64("meta/iteration")));
        rows.push_back({n, metrics::psnr(lq, gt), metrics::ssim(lq, gt), metrics::psnr(out, gt), metrics::ssim(out, gt)});
    }
    return rows;
}

}  // namespace detail

/// Scores every `<name>_lq.png` / `<name>_ref.png` / `<name>_gt.png` triplet in
/// `dir`. Restorations are rounded to 8 bits first, as `restore` would write
/// them. Files outside a complete triplet are reported to `warn` and skipped.
/// The CSV ends with a `mean` row.
inline std::vector<EvalRow> eval(const std::string& ckpt, const std::string& dir, const std::string& out_csv,
                                 std::ostream& warn) {
    if (!fs::is_directory(dir)) throw std::runtime_error("evaluation directory not found: " + dir);
    std::map<std::string, std::set<std::string>> parts;
    std::vector<std::string> stray;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".png") continue;
        const std::string stem = e.path().stem().string();
        bool matched = false;
        for (const char* suffix : {"_lq", "_ref", "_gt"}) {
            const std::string s(suffix);
            if (stem.size() > s.size() && stem.ends_with(s)) {
                parts[stem.substr(0, stem.size() - s.size())].insert(s);
                matched = true;
                break;
            }
        }
        if (!matched) stray.push_back(e.path().filename().string());
    }
    std::vector<std::string> names;
    for (const auto& [name, have] : parts) {
        if (have.size() == 3) {
            names.push_back(name);
        } else {
            for (const auto& s : have) stray.push_back(name + s + ".png");
        }
    }
    std::sort(stray.begin(), stray.end());
    for (const auto& s : stray) warn << "warning: skipping unpaired file " << s << '\n';
    if (names.empty()) throw std::runtime_error("no complete (lq, ref, gt) triplets in " + dir);

    const auto ck = checkpoint::Checkpoint::load(ckpt);
    const auto rows = detail::is_f64(ck) ? detail::eval_impl<double>(ck, names, dir)
                                         : detail::eval_impl<float>(ck, names, dir);
    std::ofstream out(out_csv, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + out_csv);
    out << "image,psnr_input,ssim_input,psnr_restored,ssim_restored\n";
    EvalRow mean{"mean"};
    for (const auto& r : rows) {
        out << r.name << ',' << num(r.psnr_input) << ',' << num(r.ssim_input) << ',' << num(r.psnr_restored) << ','
            << num(r.ssim_restored) << '\n';
        mean.psnr_input += r.psnr_input;
        mean.ssim_input += r.ssim_input;
        mean.psnr_restored += r.psnr_restored;
        mean.ssim_restored += r.ssim_restored;
    }
    const double n = static_cast<double>(rows.size());
    out << "mean," << num(mean.psnr_input / n) << ',' << num(mean.ssim_input / n) << ','
        << num(mean.psnr_restored / n) << ',' << num(mean.ssim_restored / n) << '\n';
    return rows;
}

/// Writes `count` procedural faces to <out>/gt and their fixed evaluation
/// triplets to <out>/eval.
inline void synth(const config::RunConfig& cfg, std::size_t count, const std::string& out) {
    const auto faces = toy::faces<double>(count, cfg.network.resolution, cfg.seed);
    fs::create_directories(fs::path(out) / "gt");
    fs::create_directories(fs::path(out) / "eval");
    for (std::size_t i = 0; i < faces.size(); ++i) {
        std::ostringstream name;
        name << "face_" << std::setw(3) << std::setfill('0') << i;
        const auto [lq, ref] = train::eval_pair(cfg, faces[i], i);
        image_io::write_png((fs::path(out) / "gt" / (name.str() + ".png")).string(), faces[i]);
        image_io::write_png((fs::path(out) / "eval" / (name.str() + "_gt.png")).string(), faces[i]);
        image_io::write_png((fs::path(out) / "eval" / (name.str() + "_lq.png")).string(), lq);
        image_io::write_png((fs::path(out) / "eval" / (name.str() + "_ref.png")).string(), ref);
    }
}

struct Variant {
    std::string name;
    bool skip, style, vq, refine;
};

/// The four reduced models and the full model of the ablation grid.
inline const std::vector<Variant>& ablation_variants() {
    static const std::vector<Variant> v{{"model1", false, true, true, false},
                                        {"model2", true, false, true, false},
                                        {"model3", true, true, false, false},
                                        {"model4", true, true, true, false},
                                        {"full", true, true, true, true}};
    return v;
}

struct AblationRow {
    Variant variant;
    train::Score score;
};

/// Trains every variant with the same seed and data under <out_dir>/ablate/<name>
/// and writes <out_dir>/ablation.csv.
inline std::vector<AblationRow> ablate(const config::RunConfig& base, std::ostream* progress = nullptr) {
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        config::RunConfig cfg = base;
        cfg.network.skip = v.skip;
        cfg.network.style = v.style;
        cfg.network.vq = v.vq;
        cfg.network.refine = v.refine;
        cfg.out_dir = (fs::path(base.out_dir) / "ablate" / v.name).string();
        if (progress) *progress << "training " << v.name << '\n';
        rows.push_back({v, train(cfg).score});
    }
    fs::create_directories(base.out_dir);
    std::ofstream out(fs::path(base.out_dir) / "ablation.csv", std::ios::trunc);
    out << "model,skip,style,vq,refine,psnr_input,psnr,ssim\n";
    for (const auto& r : rows) {
        out << r.variant.name << ',' << r.variant.skip << ',' << r.variant.style << ',' << r.variant.vq << ','
            << r.variant.refine << ',' << num(r.score.psnr_input) << ',' << num(r.score.psnr_restored) << ','
            << num(r.score.ssim_restored) << '\n';
    }
    return rows;
}

struct GradcheckSummary {
    std::vector<gradsuite::CaseResult> cases;
    std::set<std::string> ops_covered;
    std::vector<std::string> ops_missing;
    double seconds = 0;
    bool passed() const {
        if (!ops_missing.empty()) return false;
        for (const auto& c : cases) {
            if (!c.passed()) return false;
        }
        return true;
    }
};

/// Runs the gradient suite and prints one line per case and a coverage line.
inline GradcheckSummary gradcheck(std::size_t seeds, std::ostream& out, double fault_scale = 1.0) {
    GradcheckSummary s;
    const auto start = std::chrono::steady_clock::now();
    const auto registry = gradsuite::registry();
    s.cases = gradsuite::run(
        registry, seeds,
        [&out](const gradsuite::CaseResult& r) {
            out << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(30) << r.name << " seeds "
                << r.seeds_passed << "/" << r.seeds << "  max rel err " << std::scientific << std::setprecision(2)
                << r.worst << std::defaultfloat << std::setprecision(6);
            if (!r.passed()) out << "  " << r.diagnostic;
            out << '\n';
        },
        fault_scale);
    for (const auto& c : s.cases) s.ops_covered.insert(c.ops_exercised.begin(), c.ops_exercised.end());
    for (const auto& op : gradsuite::recorded_ops()) {
        if (!s.ops_covered.count(op)) s.ops_missing.push_back(op);
    }
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::size_t passed = 0;
    for (const auto& c : s.cases) passed += c.passed();
    out << "cases passed " << passed << "/" << registry.size() << ", recorded ops covered "
        << gradsuite::recorded_ops().size() - s.ops_missing.size() << "/" << gradsuite::recorded_ops().size()
        << ", " << std::fixed << std::setprecision(1) << s.seconds << " s" << std::defaultfloat << '\n';
    for (const auto& op : s.ops_missing) out << "uncovered op: " << op << '\n';
    return s;
}

}  // namespace ented::app
