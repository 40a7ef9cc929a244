#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ented/commands.hpp"

using namespace ented;

int main(int argc, char** argv) {
    CLI::App app{"Reference-based face restoration at desk scale"};
    app.require_subcommand(1);

    std::string config_path, resume, ckpt, input, ref, out, dir, out_csv;
    std::size_t seeds = 10, count = 4;

    auto* train_cmd = app.add_subcommand("train", "Train from a JSON config");
    train_cmd->add_option("--config", config_path, "Run configuration")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

    auto* restore_cmd = app.add_subcommand("restore", "Restore one degraded image");
    restore_cmd->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    restore_cmd->add_option("--input", input, "Degraded PNG")->required()->check(CLI::ExistingFile);
    restore_cmd->add_option("--ref", ref, "Reference PNG")->required()->check(CLI::ExistingFile);
    restore_cmd->add_option("--out", out, "Output PNG")->required();

    auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM over <name>_{lq,ref,gt}.png triplets");
    eval_cmd->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--dir", dir)->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--out-csv", out_csv)->required();

    auto* ablate_cmd = app.add_subcommand("ablate", "Train the ablation grid and compare");
    ablate_cmd->add_option("--config", config_path)->required()->check(CLI::ExistingFile);

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
    grad_cmd->add_option("--seeds", seeds, "Seeds per case")->capture_default_str();

    auto* synth_cmd = app.add_subcommand("synth", "Write procedural faces and evaluation triplets");
    synth_cmd->add_option("--out", out)->required();
    synth_cmd->add_option("--count", count)->capture_default_str();
    synth_cmd->add_option("--config", config_path, "Supplies seed, resolution and degradation")
        ->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            const auto cfg = config::load(config_path);
            app::TrainHooks hooks;
            hooks.progress = &std::cout;
            const auto r = app::train(cfg, resume, hooks);
            std::cout << "checkpoint " << r.final_checkpoint << "\n"
                      << "toy psnr degraded " << r.score.psnr_input << " restored " << r.score.psnr_restored << "\n";
        } else if (*restore_cmd) {
            app::restore(ckpt, input, ref, out);
        } else if (*eval_cmd) {
            const auto rows = app::eval(ckpt, dir, out_csv, std::cerr);
            std::cout << rows.size() << " triplets scored, report in " << out_csv << "\n";
        } else if (*ablate_cmd) {
            const auto rows = app::ablate(config::load(config_path), &std::cout);
            std::cout << "model    skip style vq refine   psnr    ssim\n";
            for (const auto& r : rows) {
                std::printf("%-8s %4d %5d %2d %6d  %6.2f  %6.4f\n", r.variant.name.c_str(), r.variant.skip,
                            r.variant.style, r.variant.vq, r.variant.refine, r.score.psnr_restored,
                            r.score.ssim_restored);
            }
        } else if (*grad_cmd) {
            return app::gradcheck(seeds, std::cout).passed() ? EXIT_SUCCESS : EXIT_FAILURE;
        } else if (*synth_cmd) {
            config::RunConfig cfg;
            if (!config_path.empty()) {
                cfg = config::load(config_path);
            } else {
                config::apply_env(cfg);
            }
            app::synth(cfg, count, out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return EXIT_FAILURE;
    }
    return EXIT_SUCCESS;
}
