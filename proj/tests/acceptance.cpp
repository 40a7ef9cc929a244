// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Long-running: two 2000-iteration toy trainings plus a determinism pair.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ented/commands.hpp"

using namespace ented;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool ok;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
    if (!o.ok) ++failures;
    std::cout << (o.ok ? "PASS" : "FAIL") << " [" << id << "] " << title << ": " << o.detail << std::endl;
}

void run(int id, const std::string& title, const std::function<Outcome()>& f) {
    try {
        report(id, title, f());
    } catch (const std::exception& e) {
        report(id, title, {false, std::string("exception: ") + e.what()});
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
}

std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

Tensor<double> randn(Rng& rng, Shape s, double sd = 1.0) { return rng.normal_tensor<double>(std::move(s), sd); }

struct ToyRun {
    app::TrainResult result;
    std::vector<double> totals;
    double seconds = 0;
    fs::path dir;
};

ToyRun toy_run(const fs::path& root, const std::string& name, bool skip, std::size_t iterations = 2000) {
    ToyRun r;
    r.dir = root / name;
    fs::remove_all(r.dir);
    config::RunConfig cfg = config::desk_scale();
    cfg.data.synthetic = 4;
    cfg.train.iterations = iterations;
    cfg.network.skip = skip;
    cfg.out_dir = r.dir.string();
    app::TrainHooks hooks;
    hooks.on_step = [&r](const train::StepLog& s) { r.totals.push_back(s.total); };
    hooks.progress = &std::cerr;
    hooks.progress_every = 250;
    const auto t0 = std::chrono::steady_clock::now();
    r.result = app::train(cfg, {}, hooks);
    r.seconds = seconds_since(t0);
    return r;
}

/// Softmax normalisations: texture extraction (over locations), distribution
/// (over kernels) and refinement attention (over keys).
Outcome normalisation_sums() {
    Rng rng(31);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 1 + rng.uniform_index(12), c = 1 + rng.uniform_index(8);
        const std::size_t h = 1 + rng.uniform_index(6), w = 1 + rng.uniform_index(6), hw = h * w;
        Tape<double> t;
        const auto ex = texture::extract_texture(t, t.constant(randn(rng, {c, h, w}, 3.0)),
                                                 t.constant(randn(rng, {k, c}, 2.0)), t.constant(randn(rng, {c, c})));
        const auto d = texture::distribute_texture(t, t.constant(randn(rng, {c, h, w}, 3.0)), ex.texture,
                                                   t.constant(randn(rng, {k, c}, 2.0)));
        Var attn;
        const std::size_t nq = 1 + rng.uniform_index(16), nk = 1 + rng.uniform_index(16);
        refine::scaled_dot_attention(t, t.constant(randn(rng, {nq, c}, 3.0)), t.constant(randn(rng, {nk, c}, 3.0)),
                                     t.constant(randn(rng, {nk, 2})), static_cast<double>(c), &attn);
        const auto& ce = t.value(ex.attention);
        const auto& cd = t.value(d.attention);
        const auto& a = t.value(attn);
        for (std::size_t i = 0; i < k; ++i) {
            double s = 0;
            for (std::size_t p = 0; p < hw; ++p) s += ce.at(i, p);
            worst = std::max(worst, std::abs(s - 1));
        }
        for (std::size_t p = 0; p < hw; ++p) {
            double s = 0;
            for (std::size_t i = 0; i < k; ++i) s += cd.at(i, p);
            worst = std::max(worst, std::abs(s - 1));
        }
        for (std::size_t i = 0; i < nq; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < nk; ++j) s += a.at(i, j);
            worst = std::max(worst, std::abs(s - 1));
        }
    }
    return {worst <= 1e-6, "100 inputs, worst |sum - 1| = " + sci(worst)};
}

Outcome vector_quantisation() {
    Rng rng(41);
    auto dict = vq::Dictionary<double>::random(rng, 64, 8, {});
    const auto rows = randn(rng, {1000, 8});
    Tensor<double> z({8, 1000, 1});
    for (std::size_t p = 0; p < 1000; ++p)
        for (std::size_t ch = 0; ch < 8; ++ch) z[ch * 1000 + p] = rows.at(p, ch);
    const auto r = vq::quantize(z, dict);
    std::size_t mismatches = 0;
    for (std::size_t p = 0; p < 1000; ++p) {
        std::size_t best = 0;
        long double best_d = INFINITY;
        for (std::size_t j = 0; j < 64; ++j) {
            long double d = 0;
            for (std::size_t ch = 0; ch < 8; ++ch) {
                const long double e = rows.at(p, ch) - dict.codewords().at(j, ch);
                d += e * e;
            }
            if (d < best_d) best_d = d, best = j;
        }
        mismatches += r.indices[p] != best;
    }
    const auto again = vq::quantize(r.quantized, dict);
    const bool idempotent = again.indices == r.indices && again.quantized == r.quantized;
    Tape<double> t;
    const double scalar = t.value(vq::quantization_loss(t, t.constant(Tensor<double>({1}, {1.0})),
                                                        t.constant(Tensor<double>({1}, {3.0})), 0.25))
                              .item();
    return {mismatches == 0 && idempotent && scalar == 5.0,
            std::to_string(mismatches) + "/1000 scan mismatches, idempotent " + (idempotent ? "yes" : "no") +
                ", scalar loss " + fmt(scalar, 17)};
}

Outcome kmeans_monotone() {
    std::size_t wcss_violations = 0, distortion_violations = 0;
    for (std::uint64_t b = 0; b < 20; ++b) {
        Rng rng(500 + b);
        auto dict = vq::Dictionary<double>::random(rng, 32, 6, {});
        dict.record_usage(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
        const auto batch = randn(rng, {256, 6}, 1.5);
        const auto rep = vq::kmeans_reinit(dict, batch, 10, rng);
        for (std::size_t i = 1; i < rep.lloyd_wcss.size(); ++i) wcss_violations += rep.lloyd_wcss[i] > rep.lloyd_wcss[i - 1];
        distortion_violations += rep.distortion_after > rep.distortion_before;
    }
    return {wcss_violations == 0 && distortion_violations == 0,
            "20 batches, " + std::to_string(wcss_violations) + " WCSS increases, " +
                std::to_string(distortion_violations) + " distortion increases"};
}

Outcome loss_composition() {
    Rng rng(51);
    const losses::LossWeights w{1.5, 1.0, 1.0, 15.0};
    std::size_t off = 0;
    for (int i = 0; i < 1000; ++i) {
        const losses::LossParts p{rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5)};
        off += losses::total_loss(p, w) != 1.5 * p.adv + 1.0 * p.percep + 1.0 * p.q + 15.0 * p.att;
    }
    const double a0 = losses::adversarial_loss(0.0);
    const bool ln2 = std::abs(a0 - std::log(2.0)) <= 1e-15;
    return {off == 0 && ln2, std::to_string(off) + "/1000 dot-product mismatches, adv(0) - ln 2 = " +
                                 sci(a0 - std::log(2.0))};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ented_acceptance";
    fs::create_directories(root);
    std::cout << std::unitbuf;

    run(1, "gradient suite", [] {
        std::ostringstream log;
        const auto s = app::gradcheck(10, log);
        std::cerr << log.str();
        std::size_t passed = 0;
        for (const auto& c : s.cases) passed += c.passed();
        const bool ok = s.passed() && s.seconds < 300;
        return Outcome{ok, std::to_string(passed) + "/" + std::to_string(s.cases.size()) + " cases x 10 seeds, " +
                               std::to_string(s.ops_covered.size()) + " ops covered, " +
                               std::to_string(s.ops_missing.size()) + " missing, " + fmt(s.seconds, 1) + " s"};
    });
    run(2, "normalisation sums", normalisation_sums);
    run(3, "vector quantisation", vector_quantisation);
    run(4, "k-means monotonicity", kmeans_monotone);
    run(5, "loss composition", loss_composition);

    ToyRun full, no_skip;
    bool full_ok = false;
    run(6, "toy overfit", [&] {
        full = toy_run(root, "full", true);
        full_ok = true;
        const double at100 = full.totals.at(100), last = full.totals.back();
        const auto& s = full.result.score;
        const bool ok = last < 0.5 * at100 && s.psnr_restored >= s.psnr_input + 3.0 && full.seconds < 900;
        return Outcome{ok, "loss " + fmt(last) + " vs " + fmt(at100) + " at it 100 (ratio " + fmt(last / at100) +
                               "), PSNR " + fmt(s.psnr_restored, 2) + " dB vs input " + fmt(s.psnr_input, 2) +
                               " dB, " + fmt(full.seconds, 0) + " s"};
    });
    run(7, "skip connections help", [&] {
        if (!full_ok) return Outcome{false, "full run unavailable"};
        no_skip = toy_run(root, "no_skip", false);
        const double a = no_skip.result.score.psnr_restored, b = full.result.score.psnr_restored;
        return Outcome{a < b, "skip-off " + fmt(a, 2) + " dB vs full " + fmt(b, 2) + " dB"};
    });
    run(8, "determinism", [&] {
        const auto a = toy_run(root, "det_a", true, 200), b = toy_run(root, "det_b", true, 200);
        const bool same_ckpt = slurp(a.result.final_checkpoint) == slurp(b.result.final_checkpoint);
        app::synth(config::desk_scale(), 1, (root / "det_eval").string());
        const auto in = (root / "det_eval" / "eval" / "face_000_lq.png").string();
        const auto ref = (root / "det_eval" / "eval" / "face_000_ref.png").string();
        app::restore(a.result.final_checkpoint, in, ref, (root / "restore_a.png").string());
        app::restore(a.result.final_checkpoint, in, ref, (root / "restore_b.png").string());
        const bool same_png = slurp(root / "restore_a.png") == slurp(root / "restore_b.png");
        return Outcome{same_ckpt && same_png, std::string("checkpoints ") + (same_ckpt ? "identical" : "differ") +
                                                  ", restorations " + (same_png ? "identical" : "differ")};
    });
    run(9, "dictionary schedule", [&] {
        if (!full_ok) return Outcome{false, "full run unavailable"};
        const auto log = read_csv(full.dir / app::kLogFile);
        std::size_t early_q = 0, missing_q = 0;
        for (const auto& row : log) {
            const std::size_t it = std::stoul(row.at(0));
            const bool has_q = !row.at(3).empty();
            if (it < 100) early_q += has_q;
            else missing_q += !has_q;
        }
        std::vector<std::size_t> reinit, expected;
        bool init_at_gate = false;
        for (const auto& e : read_csv(full.dir / app::kEventFile)) {
            if (e.at(1) == "reinit") reinit.push_back(std::stoul(e.at(0)));
            if (e.at(1) == "kmeans_init") init_at_gate = std::stoul(e.at(0)) == 100;
        }
        for (std::size_t it = 150; it < 2000; it += 50) expected.push_back(it);
        const bool ok = log.size() == 2000 && early_q == 0 && missing_q == 0 && reinit == expected && init_at_gate;
        return Outcome{ok, std::to_string(early_q) + " q entries before 100, " + std::to_string(missing_q) +
                               " missing after, " + std::to_string(reinit.size()) + " re-inits (" +
                               (reinit == expected ? "150, 200, ..., 1950" : "unexpected iterations") + ")"};
    });

    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}
