// msca command-line tool. Exit codes: 0 ok, 1 usage error, 2 runtime failure.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "msca/checkpoint.hpp"
#include "msca/eval.hpp"
#include "msca/gradsuite.hpp"
#include "msca/image_io.hpp"
#include "msca/manip.hpp"

namespace fs = std::filesystem;
using namespace msca;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        try {
            set_train_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

GeneratorModel<double> load_model(const std::string& path) {
    return GeneratorModel<double>::from_params(load_checkpoint<double>(path));
}

Exemplar<double> load_exemplar(const std::string& image, const std::string& labels, int classes) {
    Exemplar<double> ex{read_image_png<double>(image), read_label_png(labels, classes)};
    require_shape(ex.image.dim(1) == ex.labels.height() && ex.image.dim(2) == ex.labels.width(),
                  image + " and " + labels + " differ in extent");
    return ex;
}

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

template <typename T>
std::vector<Scene<T>> training_data(const TrainConfig& cfg, const std::string& data_dir, uint64_t seed) {
    if (!data_dir.empty()) return load_dataset<T>(data_dir, cfg.model.classes);
    return make_synthetic_dataset<T>(cfg.data_scenes, cfg.model.classes, cfg.data_extent, seed);
}

template <typename T>
int run_train(const TrainConfig& cfg, const std::string& data_dir, const fs::path& out, uint64_t seed,
              const std::string& resume) {
    fs::create_directories(out);
    std::ofstream(out / "config.txt") << train_config_to_text(cfg);
    Trainer<T> trainer(cfg, training_data<T>(cfg, data_dir, seed), seed);
    if (!resume.empty()) trainer.load_checkpoint_state(load_checkpoint<T>(resume));
    std::ofstream log(out / "metrics.log", std::ios::app);
    if (cfg.pretrain_steps > 0 && trainer.step_index() == 0) {
        pretrain_msca(training_data<T>(cfg, data_dir, seed), trainer.generator(), cfg, cfg.pretrain_steps, seed, &log);
    }
    train(trainer, out, log);
    std::cout << "trained " << trainer.step_index() << " steps, checkpoint " << (out / "final.ckpt").string() << "\n";
    return 0;
}

template <typename T>
int run_pretrain(const TrainConfig& cfg, const std::string& data_dir, const fs::path& out, int steps,
                 uint64_t seed) {
    auto data = training_data<T>(cfg, data_dir, seed);
    auto model = GeneratorModel<T>::init(cfg.model, seed);
    const auto losses = pretrain_msca(data, model, cfg, steps, seed, &std::cout);
    ensure_parent(out);
    save_checkpoint(out, model.all_params());
    if (!losses.empty()) {
        std::cout << "pretrain loss " << losses.front() << " -> " << losses.back() << ", checkpoint " << out.string()
                  << "\n";
    }
    return 0;
}

void dump_packs(const std::vector<AttentionPack<double>>& packs, const fs::path& dir) {
    for (std::size_t s = 0; s < packs.size(); ++s) export_attention_pack(packs[s], dir / ("scale_" + std::to_string(s)));
}

Tensor<double> load_weight_map(const std::string& arg, int64_t h, int64_t w) {
    if (arg == "ramp") return horizontal_ramp<double>(h, w);
    const auto img = read_image_png<double>(arg);
    Tensor<double> m({1, img.dim(1), img.dim(2)});
    for (int64_t y = 0; y < img.dim(1); ++y)
        for (int64_t x = 0; x < img.dim(2); ++x) m.at(0, y, x) = std::clamp((img.at(0, y, x) + 1) / 2, 0.0, 1.0);
    return m;
}

std::vector<int64_t> parse_sides(const std::string& s) {
    std::vector<int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw UsageError("--sides expects a comma-separated list of integers");
        }
    }
    if (out.size() < 2) throw UsageError("--sides needs at least two sizes");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Exemplar-guided scene synthesis with masked spatial-channel attention", "msca"};
    app.require_subcommand(1);
    std::function<int()> action;
    uint64_t seed = 1;

    // train
    std::string config_path, data_dir, out_path, resume;
    std::vector<std::string> overrides;
    auto* train_cmd = app.add_subcommand("train", "adversarial self-supervised training");
    train_cmd->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    train_cmd->add_option("--set", overrides, "override one config key (key=value), repeatable");
    train_cmd->add_option("--data", data_dir, "scene_NNNN.png / scene_NNNN_label.png directory (default: synthetic)");
    train_cmd->add_option("--out", out_path, "output directory")->required();
    train_cmd->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    train_cmd->add_option("--seed", seed, "random seed");
    train_cmd->callback([&] {
        action = [&] {
            const TrainConfig cfg = resolve_config(config_path, overrides);
            return cfg.precision == 64 ? run_train<double>(cfg, data_dir, out_path, seed, resume)
                                       : run_train<float>(cfg, data_dir, out_path, seed, resume);
        };
    });

    int pre_steps = 200;
    auto* pre_cmd = app.add_subcommand("pretrain", "pretrain the pyramid and attention weights");
    pre_cmd->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    pre_cmd->add_option("--set", overrides, "override one config key (key=value), repeatable");
    pre_cmd->add_option("--data", data_dir, "dataset directory (default: synthetic)");
    pre_cmd->add_option("--out", out_path, "checkpoint to write")->required();
    pre_cmd->add_option("--steps", pre_steps, "optimizer steps")->check(CLI::PositiveNumber);
    pre_cmd->add_option("--seed", seed, "random seed");
    pre_cmd->callback([&] {
        action = [&] {
            const TrainConfig cfg = resolve_config(config_path, overrides);
            return cfg.precision == 64 ? run_pretrain<double>(cfg, data_dir, out_path, pre_steps, seed)
                                       : run_pretrain<float>(cfg, data_dir, out_path, pre_steps, seed);
        };
    });

    // synth
    std::string label, exemplar, exemplar_label, checkpoint, dump_dir;
    auto* synth_cmd = app.add_subcommand("synth", "render a label map in an exemplar's style");
    synth_cmd->add_option("--label", label, "target label map PNG")->required()->check(CLI::ExistingFile);
    synth_cmd->add_option("--exemplar", exemplar, "exemplar image PNG")->required()->check(CLI::ExistingFile);
    synth_cmd->add_option("--exemplar-label", exemplar_label, "exemplar label map PNG")->required()->check(CLI::ExistingFile);
    synth_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
    synth_cmd->add_option("--out", out_path, "output PNG")->required();
    synth_cmd->add_option("--dump-attention", dump_dir, "write attention maps and gates here");
    synth_cmd->add_option("--seed", seed, "unused; synthesis is deterministic");
    synth_cmd->callback([&] {
        action = [&] {
            const auto model = load_model(checkpoint);
            const auto c1 = read_label_png(label, model.cfg.classes);
            const auto ex = load_exemplar(exemplar, exemplar_label, model.cfg.classes);
            std::vector<AttentionPack<double>> packs;
            Tape<double> tape;
            const auto img = synthesize(model, c1, ex.image, ex.labels, dump_dir.empty() ? nullptr : &packs,
                                        dump_dir.empty() ? nullptr : &tape);
            ensure_parent(out_path);
            write_image_png(out_path, img);
            if (!dump_dir.empty()) dump_packs(packs, dump_dir);
            return 0;
        };
    });

    // interpolate
    std::string exemplar2, exemplar2_label, weight_map;
    std::optional<double> factor;
    auto* interp_cmd = app.add_subcommand("interpolate", "blend the styles of two exemplars");
    interp_cmd->add_option("--label", label, "target label map PNG")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--exemplar", exemplar, "first exemplar image (weight a)")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--exemplar-label", exemplar_label, "first exemplar labels")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--exemplar2", exemplar2, "second exemplar image")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--exemplar2-label", exemplar2_label, "second exemplar labels")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--out", out_path, "output PNG")->required();
    auto* a_opt = interp_cmd->add_option("--a", factor, "global factor in [0,1]; 1 keeps only the first exemplar");
    auto* w_opt = interp_cmd->add_option("--weight-map", weight_map,
                                         "per-pixel weight PNG (gray 255 = first exemplar) or 'ramp'");
    a_opt->excludes(w_opt);
    interp_cmd->add_option("--dump-attention", dump_dir, "write joint spatial attention maps here (--a only)");
    interp_cmd->add_option("--seed", seed, "unused; interpolation is deterministic");
    interp_cmd->callback([&] {
        if (!factor && weight_map.empty()) throw CLI::RequiredError("--a or --weight-map");
        action = [&] {
            const auto model = load_model(checkpoint);
            const auto c1 = read_label_png(label, model.cfg.classes);
            const auto ex2 = load_exemplar(exemplar, exemplar_label, model.cfg.classes);
            const auto ex3 = load_exemplar(exemplar2, exemplar2_label, model.cfg.classes);
            Tensor<double> img;
            if (factor) {
                if (*factor < 0 || *factor > 1) throw UsageError("--a must lie in [0, 1]");
                const auto r = interpolate_styles(model, c1, ex2, ex3, *factor);
                img = r.image;
                for (std::size_t s = 0; s < r.joint_alpha.size() && !dump_dir.empty(); ++s) {
                    const fs::path dir = fs::path(dump_dir) / ("scale_" + std::to_string(s));
                    fs::create_directories(dir);
                    const auto& al = r.joint_alpha[s];
                    for (int64_t k = 0; k < al.dim(0); ++k) {
                        char name[32];
                        std::snprintf(name, sizeof(name), "joint_alpha_k%02lld.png", static_cast<long long>(k));
                        Tensor<double> slice({1, al.dim(1), al.dim(2)});
                        for (int64_t i = 0; i < slice.numel(); ++i) slice[i] = al[k * slice.numel() + i];
                        write_gray_png(dir / name, slice);
                    }
                }
            } else {
                img = spatial_interpolate(model, c1, ex2, ex3, load_weight_map(weight_map, c1.height(), c1.width()));
            }
            ensure_parent(out_path);
            write_image_png(out_path, img);
            return 0;
        };
    });

    // extrapolate
    std::string center, center_label, global_label, weight_out;
    auto* extra_cmd = app.add_subcommand("extrapolate", "grow a crop to twice its size along a label map");
    extra_cmd->add_option("--center", center, "center crop image PNG")->required()->check(CLI::ExistingFile);
    extra_cmd->add_option("--center-label", center_label, "center crop labels")->required()->check(CLI::ExistingFile);
    extra_cmd->add_option("--global-label", global_label, "label map of the full 2x scene")->required()->check(CLI::ExistingFile);
    extra_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
    extra_cmd->add_option("--out", out_path, "output PNG")->required();
    extra_cmd->add_option("--weight-out", weight_out, "write the accumulated blend weight as a gray PNG");
    extra_cmd->add_option("--seed", seed, "places the random patch sites");
    extra_cmd->callback([&] {
        action = [&] {
            const auto model = load_model(checkpoint);
            const auto ex = load_exemplar(center, center_label, model.cfg.classes);
            const auto r = extrapolate(model, ex, read_label_png(global_label, model.cfg.classes), seed);
            ensure_parent(out_path);
            write_image_png(out_path, r.image);
            if (!weight_out.empty()) write_gray_png(weight_out, r.weight);
            std::cout << "seam_ratio " << seam_ratio(r) << "\n";
            return 0;
        };
    });

    // swap
    std::string scenes_dir;
    auto* swap_cmd = app.add_subcommand("swap", "style-swap grid over a directory of scenes");
    swap_cmd->add_option("--scenes", scenes_dir, "scene_NNNN.png / scene_NNNN_label.png directory")->required()->check(CLI::ExistingDirectory);
    swap_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
    swap_cmd->add_option("--out", out_path, "output PNG")->required();
    swap_cmd->add_option("--seed", seed, "unused; synthesis is deterministic");
    swap_cmd->callback([&] {
        action = [&] {
            const auto model = load_model(checkpoint);
            std::vector<Exemplar<double>> scenes;
            for (auto& s : load_dataset<double>(scenes_dir, model.cfg.classes)) scenes.push_back({s.image, s.labels});
            ensure_parent(out_path);
            write_image_png(out_path, style_swap_grid(model, scenes));
            return 0;
        };
    });

    // eval
    std::string task = "duplicate";
    auto* eval_cmd = app.add_subcommand("eval", "PSNR and style loss on the duplicate or mirror task");
    eval_cmd->add_option("--task", task, "duplicate or mirror")->check(CLI::IsMember({"duplicate", "mirror"}));
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", out_path, "results file (appended)");
    eval_cmd->add_option("--seed", seed, "unused; evaluation is deterministic");
    eval_cmd->callback([&] {
        action = [&] {
            const auto model = load_model(checkpoint);
            const auto data = load_dataset<double>(data_dir, model.cfg.classes);
            const EvalResult r = run_task(parse_eval_task(task), data, model);
            if (!out_path.empty()) {
                ensure_parent(out_path);
                append_eval_result(out_path, r);
            }
            std::cout << r.to_text();
            return 0;
        };
    });

    // bench
    std::string sides = "16,32,64";
    int slots = 8, reps = 3, channels = 32, label_width = 32;
    auto* bench_cmd = app.add_subcommand("bench", "time decoupled attention against the explicit matrix");
    bench_cmd->add_option("--sides", sides, "square extents, comma separated");
    bench_cmd->add_option("--slots", slots, "attention slots K")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--reps", reps, "timing repetitions (best kept)")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--channels", channels, "feature channels")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--label-width", label_width, "label feature channels")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--seed", seed, "random seed");
    bench_cmd->callback([&] {
        action = [&] {
            const BenchReport r = bench_attention(parse_sides(sides), slots, reps, seed, channels, label_width);
            std::cout << r.to_text();
            if (!r.agreed) {
                std::cerr << "decoupled and explicit attention disagree\n";
                return 2;
            }
            return 0;
        };
    });

    // gradcheck
    bool include_broken = false;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every primitive and the generator");
    gc_cmd->add_option("--seed", seed, "random seed");
    gc_cmd->add_flag("--include-broken", include_broken, "add a primitive with a wrong gradient (self-test)");
    gc_cmd->callback([&] {
        action = [&] {
            int failed = 0;
            for (const auto& e : run_gradient_suite(seed, include_broken)) {
                std::printf("%-4s %-22s max_rel_error=%.3e coords=%lld\n", e.report.passed ? "ok" : "FAIL",
                            e.name.c_str(), e.report.max_rel_error, static_cast<long long>(e.report.coords_checked));
                failed += e.report.passed ? 0 : 1;
            }
            std::printf("%d failed\n", failed);
            return failed == 0 ? 0 : 2;
        };
    });

    // gen-data
    int count = 32, extent = 512, classes = 8;
    auto* gen_cmd = app.add_subcommand("gen-data", "write synthetic Voronoi scenes");
    gen_cmd->add_option("--n", count, "number of scenes")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--extent", extent, "square extent in pixels")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--classes", classes, "label vocabulary size")->check(CLI::Range(1, 256));
    gen_cmd->add_option("--out", out_path, "output directory")->required();
    gen_cmd->add_option("--seed", seed, "random seed");
    gen_cmd->callback([&] {
        action = [&] {
            save_dataset(out_path, make_synthetic_dataset<double>(count, classes, extent, seed));
            std::cout << "wrote " << count << " scenes to " << out_path << "\n";
            return 0;
        };
    });

    if (argc < 2) {
        std::cerr << app.help();
        return 1;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }
    try {
        return action();
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
