// rescrnet: train / evaluate / predict / augment-preview / gradcheck / synth.
//
// Errors end the process with one stderr line "error: <kind>: <message>"
// and a nonzero exit code. Progress goes to stderr, results to files; only
// evaluate and gradcheck print their results on stdout.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "rescr/checkpoint.hpp"
#include "rescr/config.hpp"
#include "rescr/gradcheck.hpp"
#include "rescr/trainer.hpp"

namespace fs = std::filesystem;
using namespace rescr;

namespace {

struct TrainArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, steps;
    std::optional<std::string> output_dir, precision;
    std::optional<double> learning_rate;
    bool no_augment = false;
};

struct EvalArgs {
    std::string checkpoint, images, masks, config, output_dir;
};

struct PredictArgs {
    std::string checkpoint, images, config, output_dir;
};

struct PreviewArgs {
    std::string config, images, masks, output_dir;
    std::size_t count = 8;
    std::uint64_t seed = 0;
};

struct GradArgs {
    std::size_t trials = 20, n = 1, m = 1, size = 8;
    std::uint64_t seed = 0;
    bool network_only = false;
};

struct SynthArgs {
    std::string output_dir;
    std::size_t count = 2, height = 32, width = 48;
    std::uint64_t seed = 0;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw IoError("cannot write '" + path.string() + "'");
}

RunConfig load_config_or_default(const std::string& path) {
    return path.empty() ? RunConfig{} : RunConfig::load(path);
}

template <typename T>
void write_predictions(const ResCrNet<T>& model, const std::vector<Sample>& items, const ClassPalette& palette,
                       const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& s : items) write_png(dir / (s.id + ".png"), predict(model, s.image, palette).color);
}

template <typename T>
int train_with(const RunConfig& cfg, const SegDataset& train_set, const SegDataset* val_set) {
    Rng init(derive_seed(cfg.seed, kInitStream));
    auto model = ResCrNet<T>::build(cfg.network, init);
    std::cerr << "training " << model.parameter_count() << " parameters on " << train_set.size() << " images, "
              << cfg.epochs << " epochs x " << cfg.steps_per_epoch << " steps\n";
    const auto run = train(model, train_set, val_set, cfg, TrainOutputs{cfg.output_dir, &std::cerr});
    if (run.validated_on_train) std::cerr << "no validation set: epoch scores are on the un-augmented training set\n";

    const auto best = load_checkpoint<T>(cfg.output_dir / "best.ckpt");
    const auto& eval_items = val_set ? val_set->items : train_set.items;
    const auto ev = evaluate(best, eval_items, cfg.loss);
    std::ofstream metrics(cfg.output_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    write_metric_csv(metrics, ev.report, cfg.palette.names());
    if (!metrics) throw IoError("cannot write metrics.csv");
    write_predictions(best, eval_items, cfg.palette, cfg.output_dir / "predictions");
    std::cerr << "best epoch " << run.best_epoch << " (T~ " << run.best_tanimoto << "), outputs in "
              << cfg.output_dir.string() << "\n";
    return 0;
}

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = RunConfig::load(a.config);
    // command-line flags take precedence over the file
    if (a.seed) cfg.seed = *a.seed;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.steps) cfg.steps_per_epoch = *a.steps;
    if (a.output_dir) cfg.output_dir = *a.output_dir;
    if (a.learning_rate) cfg.optimizer.learning_rate = *a.learning_rate;
    if (a.no_augment) cfg.augment_enabled = false;
    if (a.precision) {
        if (*a.precision == "float64")
            cfg.precision = Precision::float64;
        else if (*a.precision == "float32")
            cfg.precision = Precision::float32;
        else
            throw ConfigError("--precision must be float64 or float32");
    }
    cfg.validate();
    if (cfg.train_images.empty()) throw ConfigError(a.config + ": [data] train_images and train_masks are required");

    auto train_set = load_dataset(cfg.train_images, cfg.train_masks, cfg.palette, cfg.mask_decode, &std::cerr);
    std::optional<SegDataset> val_set;
    if (cfg.has_validation())
        val_set = load_dataset(cfg.val_images, cfg.val_masks, cfg.palette, cfg.mask_decode, &std::cerr);

    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "run.cfg", cfg.to_ini());
    const SegDataset* val = val_set ? &*val_set : nullptr;
    return cfg.precision == Precision::float32 ? train_with<float>(cfg, train_set, val)
                                               : train_with<double>(cfg, train_set, val);
}

ClassPalette palette_for(const RunConfig& cfg, const NetworkConfig& net, const std::string& config_path) {
    if (cfg.palette.size() != net.num_classes)
        throw ConfigError("checkpoint has " + std::to_string(net.num_classes) + " classes but the palette" +
                          (config_path.empty() ? " (default)" : " in " + config_path) + " has " +
                          std::to_string(cfg.palette.size()));
    return cfg.palette;
}

int cmd_evaluate(const EvalArgs& a) {
    const RunConfig cfg = load_config_or_default(a.config);
    const auto model = load_checkpoint<double>(a.checkpoint);
    const auto palette = palette_for(cfg, model.config(), a.config);
    const auto ds = load_dataset(a.images, a.masks, palette, cfg.mask_decode, &std::cerr);
    const auto ev = evaluate(model, ds.items, cfg.loss);
    write_metric_table(std::cout, ev.report, palette.names());
    std::printf("\nloss %.6f  soft dice %.6f  soft tanimoto (with complement) %.6f  images %zu\n", ev.mean_loss,
                ev.report.soft_dice, ev.report.soft_tanimoto, ds.size());
    if (!a.output_dir.empty()) {
        fs::create_directories(a.output_dir);
        std::ofstream os(fs::path(a.output_dir) / "metrics.csv", std::ios::binary | std::ios::trunc);
        write_metric_csv(os, ev.report, palette.names());
        if (!os) throw IoError("cannot write metrics.csv");
    }
    return 0;
}

int cmd_predict(const PredictArgs& a) {
    const RunConfig cfg = load_config_or_default(a.config);
    const auto model = load_checkpoint<double>(a.checkpoint);
    const auto palette = palette_for(cfg, model.config(), a.config);
    const auto items = load_images(a.images);
    write_predictions(model, items, palette, a.output_dir);
    std::cerr << "wrote " << items.size() << " predictions to " << a.output_dir << "\n";
    return 0;
}

int cmd_preview(const PreviewArgs& a) {
    const RunConfig cfg = load_config_or_default(a.config);
    const fs::path images = a.images.empty() ? cfg.train_images : fs::path(a.images);
    const fs::path masks = a.masks.empty() ? cfg.train_masks : fs::path(a.masks);
    if (images.empty() || masks.empty()) throw ConfigError("augment-preview needs --images and --masks or a config");
    if (a.count == 0) throw ValueError("--count must be at least 1");
    const auto ds = load_dataset(images, masks, cfg.palette, cfg.mask_decode, &std::cerr);

    const fs::path out(a.output_dir);
    fs::create_directories(out);
    std::ofstream params(out / "params.csv", std::ios::binary | std::ios::trunc);
    params << "file,source,rotation_deg,shear_deg,shift_x,shift_y,scale,flip_h,flip_v\n";
    for (std::size_t k = 0; k < a.count; ++k) {
        const auto& s = ds.items[k % ds.size()];
        Rng rng(augment_seed(a.seed, 0, k, k % ds.size()));
        const auto p = sample_params(cfg.augment, rng);
        const auto [img, mask] = apply_affine(s.image, s.mask, p);
        char stem[64];
        std::snprintf(stem, sizeof stem, "preview_%03zu", k);
        write_png(out / (std::string(stem) + "_image.png"), tensor_to_image(img));
        write_png(out / (std::string(stem) + "_mask.png"), encode_mask(mask, cfg.palette));
        char line[256];
        std::snprintf(line, sizeof line, "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%d\n", stem, s.id.c_str(),
                      p.rotation_deg, p.shear_deg, p.shift_x, p.shift_y, p.scale, int(p.flip_h), int(p.flip_v));
        params << line;
    }
    if (!params) throw IoError("cannot write params.csv");
    std::cerr << "wrote " << a.count << " augmented pairs to " << out.string() << "\n";
    return 0;
}

int cmd_gradcheck(const GradArgs& a) {
    GradcheckOptions o;
    o.trials = a.trials;
    o.seed = a.seed;
    o.include_ops = !a.network_only;
    o.n_conv_blocks = a.n;
    o.n_lstm_blocks = a.m;
    o.height = o.width = a.size;
    const auto report = run_gradcheck(o, &std::cerr);
    const double worst = report.max_rel_err();
    std::printf("max rel err %.3e over %zu cases x %zu trials\n", worst, report.cases.size(), o.trials);
    if (!(worst < 1e-4)) throw NumericError("gradient check failed: max rel err " + std::to_string(worst));
    return 0;
}

int cmd_synth(const SynthArgs& a) {
    const fs::path out(a.output_dir);
    const auto ds = make_synthetic_dataset(a.count, a.height, a.width, a.seed);
    write_dataset(ds, out / "images", out / "masks");
    RunConfig cfg;
    cfg.palette = ds.palette;
    cfg.network.n_conv_blocks = 2;
    cfg.epochs = 300;
    cfg.train_images = "images";
    cfg.train_masks = "masks";
    cfg.output_dir = "run";
    write_text(out / "synthetic.cfg", cfg.to_ini());
    std::cerr << "wrote " << ds.size() << " image/mask pairs and synthetic.cfg to " << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Res-CR-Net segmentation: training, evaluation and tooling"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
    train_cmd->add_option("--config", ta.config, "run config file")->required();
    train_cmd->add_option("--seed", ta.seed, "overrides [train] seed");
    train_cmd->add_option("--epochs", ta.epochs, "overrides [train] epochs");
    train_cmd->add_option("--steps_per_epoch", ta.steps, "overrides [train] steps_per_epoch");
    train_cmd->add_option("--output_dir", ta.output_dir, "overrides [train] output_dir");
    train_cmd->add_option("--learning_rate", ta.learning_rate, "overrides [optimizer] learning_rate");
    train_cmd->add_option("--precision", ta.precision, "float64 or float32");
    train_cmd->add_flag("--no_augment", ta.no_augment, "disable augmentation");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("evaluate", "print per-class metrics of a checkpoint");
    eval_cmd->add_option("--checkpoint", ea.checkpoint)->required();
    eval_cmd->add_option("--images", ea.images)->required();
    eval_cmd->add_option("--masks", ea.masks)->required();
    eval_cmd->add_option("--config", ea.config, "palette, mask decoding and loss settings");
    eval_cmd->add_option("--output_dir", ea.output_dir, "also write metrics.csv here");

    PredictArgs pa;
    auto* pred_cmd = app.add_subcommand("predict", "write colour-coded predicted masks");
    pred_cmd->add_option("--checkpoint", pa.checkpoint)->required();
    pred_cmd->add_option("--images", pa.images)->required();
    pred_cmd->add_option("--output_dir", pa.output_dir)->required();
    pred_cmd->add_option("--config", pa.config, "palette");

    PreviewArgs va;
    auto* prev_cmd = app.add_subcommand("augment-preview", "write augmented image/mask pairs");
    prev_cmd->add_option("--config", va.config, "augmentation ranges, palette, data paths");
    prev_cmd->add_option("--images", va.images, "overrides [data] train_images");
    prev_cmd->add_option("--masks", va.masks, "overrides [data] train_masks");
    prev_cmd->add_option("--count", va.count, "number of pairs")->capture_default_str();
    prev_cmd->add_option("--seed", va.seed)->capture_default_str();
    prev_cmd->add_option("--output_dir", va.output_dir)->required();

    GradArgs ga;
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
    grad_cmd->add_option("--trials", ga.trials, "random draws per case")->capture_default_str();
    grad_cmd->add_option("--seed", ga.seed)->capture_default_str();
    grad_cmd->add_option("--n_conv_blocks", ga.n)->capture_default_str();
    grad_cmd->add_option("--n_lstm_blocks", ga.m)->capture_default_str();
    grad_cmd->add_option("--size", ga.size, "input height and width")->capture_default_str();
    grad_cmd->add_flag("--network_only", ga.network_only, "skip the per-operation cases");

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "write the synthetic disks/stripes dataset and a config");
    synth_cmd->add_option("--output_dir", sa.output_dir)->required();
    synth_cmd->add_option("--count", sa.count)->capture_default_str();
    synth_cmd->add_option("--height", sa.height)->capture_default_str();
    synth_cmd->add_option("--width", sa.width)->capture_default_str();
    synth_cmd->add_option("--seed", sa.seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "error: usage: " << msg << "\n";
        return 2;
    }

    try {
        if (*train_cmd) return cmd_train(ta);
        if (*eval_cmd) return cmd_evaluate(ea);
        if (*pred_cmd) return cmd_predict(pa);
        if (*prev_cmd) return cmd_preview(va);
        if (*grad_cmd) return cmd_gradcheck(ga);
        if (*synth_cmd) return cmd_synth(sa);
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "error: " << e.kind() << ": " << msg << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: io: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
