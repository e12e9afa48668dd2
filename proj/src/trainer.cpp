#include "rescr/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "rescr/checkpoint.hpp"
#include "rescr/loss.hpp"

namespace rescr {

template <typename T>
Optimizer<T>::Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
}

template <typename T>
void Optimizer<T>::step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads) {
    for (const auto& [name, g] : grads) {
        if (!params.contains(name)) throw ValueError("gradient for unknown parameter '" + name + "'");
        if (g.shape() != params.get(name).shape())
            throw ShapeError("gradient of '" + name + "' has shape " + to_string(g.shape()) + ", parameter has " +
                             to_string(params.get(name).shape()));
        if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
    ++t_;
    const bool adam = cfg_.kind == "adam";
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto& [name, theta] : params) {
        auto it = grads.find(name);
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(theta.size(), 0.0);
            if (adam) v.assign(theta.size(), 0.0);
        }
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = it == grads.end() ? 0.0 : static_cast<double>(it->second[i]);
            if (adam) {
                m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1, vhat = v[i] / bc2;
                theta[i] = static_cast<T>(theta[i] - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
            } else {
                m[i] = cfg_.momentum * m[i] + g;
                theta[i] = static_cast<T>(theta[i] - cfg_.learning_rate * m[i]);
            }
        }
    }
}

Tensor<double> stack_batch(const std::vector<const Tensor<double>*>& items) {
    if (items.empty()) throw ValueError("empty batch");
    const Shape& s = items[0]->shape();
    if (s.size() != 3) throw ShapeError("batch items must be [H,W,C], got " + to_string(s));
    Tensor<double> out(Shape{items.size(), s[0], s[1], s[2]});
    const std::size_t n = items[0]->size();
    for (std::size_t b = 0; b < items.size(); ++b) {
        if (items[b]->shape() != s)
            throw ShapeError("batch item " + std::to_string(b) + " is " + to_string(items[b]->shape()) +
                             ", expected " + to_string(s));
        std::copy(items[b]->data().begin(), items[b]->data().end(), out.data().begin() + b * n);
    }
    return out;
}

namespace {

void check_compatible(const NetworkConfig& cfg, const std::vector<Sample>& data, const char* what) {
    if (data.empty()) throw ValueError(std::string(what) + " set is empty");
    for (const auto& s : data) {
        if (s.image.rank() != 3 || s.image.dim(2) != cfg.input_channels)
            throw ShapeError(std::string(what) + " image '" + s.id + "' is " + to_string(s.image.shape()) +
                             ", network expects " + std::to_string(cfg.input_channels) + " channels");
        if (s.mask.rank() != 3 || s.mask.dim(2) != cfg.num_classes)
            throw ShapeError(std::string(what) + " mask '" + s.id + "' has " +
                             (s.mask.rank() == 3 ? std::to_string(s.mask.dim(2)) : std::string("no")) +
                             " classes, network has " + std::to_string(cfg.num_classes));
    }
}

template <typename T>
Tensor<T> as(const Tensor<double>& t) {
    if constexpr (std::is_same_v<T, double>)
        return t;
    else
        return t.template cast<T>();
}

Tensor<double> add_batch_axis(const Tensor<double>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return t.reshaped(s);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

template <typename T>
EvalResult evaluate(const ResCrNet<T>& model, const std::vector<Sample>& data, const LossConfig& loss) {
    check_compatible(model.config(), data, "evaluation");
    ConfusionCounts counts;
    double soft_dice = 0, soft_t = 0, total_loss = 0;
    for (const auto& s : data) {
        const auto y = as<T>(add_batch_axis(s.mask));
        const auto yhat = model.infer(as<T>(add_batch_axis(s.image)));
        Tensor<T> weights;
        if (loss.contour_weighting) weights = contour_weight_map(y, loss);
        total_loss += tanimoto_loss(constant(yhat), y, loss, weights.empty() ? nullptr : &weights).value()[0];
        accumulate(counts, confusion_counts(yhat, y));
        soft_dice += dice_coefficient(yhat, y, loss.smooth);
        soft_t += tanimoto_with_complement(yhat, y, loss.smooth);
    }
    const double n = double(data.size());
    return EvalResult{make_report(std::move(counts), soft_dice / n, soft_t / n), total_loss / n};
}

template <typename T>
Prediction predict(const ResCrNet<T>& model, const Tensor<double>& image, const ClassPalette& palette) {
    if (image.rank() != 3 || image.dim(2) != model.config().input_channels)
        throw ShapeError("image is " + to_string(image.shape()) + ", network expects " +
                         std::to_string(model.config().input_channels) + " channels");
    auto probs = model.infer(as<T>(add_batch_axis(image)));
    Tensor<double> out = probs.template cast<double>().reshaped(
        Shape{image.dim(0), image.dim(1), model.config().num_classes});
    auto color = encode_prediction(out, palette);
    return Prediction{std::move(out), std::move(color)};
}

std::string log_header(const std::vector<std::string>& class_names) {
    std::string h = "epoch,train_loss,train_tanimoto,val_loss,val_tanimoto";
    for (const auto& name : class_names)
        for (const char* m : {"dice", "jaccard", "precision", "recall", "f1"}) h += "," + name + "_" + m;
    return h;
}

template <typename T>
TrainRun train(ResCrNet<T>& model, const SegDataset& train_set, const SegDataset* val_set, const RunConfig& cfg,
               const TrainOutputs& outputs) {
    cfg.validate();
    if (!(model.config() == cfg.network)) throw ConfigError("model was built for a different network config");
    check_compatible(cfg.network, train_set.items, "training");
    if (val_set) check_compatible(cfg.network, val_set->items, "validation");
    const auto& eval_items = val_set ? val_set->items : train_set.items;
    const auto class_names = cfg.palette.names();

    std::ofstream log;
    if (!outputs.dir.empty()) {
        std::filesystem::create_directories(outputs.dir);
        log.open(outputs.dir / "log.csv", std::ios::binary | std::ios::trunc);
        if (!log) throw IoError("cannot write '" + (outputs.dir / "log.csv").string() + "'");
        log << log_header(class_names) << "\n";
        log.flush();
    }
    auto save = [&](const char* file) {
        if (!outputs.dir.empty()) save_checkpoint(outputs.dir / file, model);
    };

    TrainRun run;
    run.validated_on_train = val_set == nullptr;
    save("best.ckpt");
    save("last.ckpt");

    Optimizer<T> opt(cfg.optimizer);
    const std::size_t steps = cfg.steps_per_epoch;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::vector<Sample>> batches;
        if (cfg.augment_enabled) batches = epoch_stream(train_set.items, steps, cfg.augment, cfg.seed, epoch);

        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t s = 0; s < steps; ++s) {
            const auto& items = cfg.augment_enabled ? batches[s] : train_set.items;
            std::vector<const Tensor<double>*> imgs, masks;
            std::string ids;
            for (const auto& it : items) {
                imgs.push_back(&it.image);
                masks.push_back(&it.mask);
                ids += (ids.empty() ? "" : ", ") + it.id;
            }
            const auto x = as<T>(stack_batch(imgs));
            const auto y = as<T>(stack_batch(masks));
            Tensor<T> weights;
            if (cfg.loss.contour_weighting) weights = contour_weight_map(y, cfg.loss);

            Tape<T> tape;
            auto p = ParamVars<T>::bind(model.parameters(), &tape);
            // dropout masks get their own stream, disjoint from augmentation
            Rng dropout_rng(derive_seed(derive_seed(cfg.seed ^ 0xD5A61266F0C9392Cull, epoch), s));
            double loss_value = 0;
            std::map<std::string, Tensor<T>> grads;
            try {
                auto yhat = model.forward(p, constant(x), true, dropout_rng);
                auto loss = tanimoto_loss(yhat, y, cfg.loss, weights.empty() ? nullptr : &weights);
                loss_value = loss.value()[0];
                rec.train_tanimoto += tanimoto_with_complement(yhat.value(), y, cfg.loss.smooth);
                tape.backward(loss);
                for (const auto& [name, v] : p.all())
                    if (const auto* g = v.grad()) grads.emplace(name, *g);
                opt.step(model.parameters(), grads);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(s + 1) + ", batch: " + ids + ")");
            }
            rec.train_loss += loss_value;
            ++run.optimizer_steps;
        }
        rec.train_loss /= double(steps);
        rec.train_tanimoto /= double(steps);

        auto ev = evaluate(model, eval_items, cfg.loss);
        rec.val_loss = ev.mean_loss;
        rec.val_tanimoto = ev.report.soft_tanimoto;
        rec.val_report = std::move(ev.report);

        if (epoch == 1 || rec.val_tanimoto > run.best_tanimoto) {
            run.best_epoch = epoch;
            run.best_tanimoto = rec.val_tanimoto;
            save("best.ckpt");
        }
        save("last.ckpt");

        if (log.is_open()) {
            log << epoch << "," << fmt(rec.train_loss) << "," << fmt(rec.train_tanimoto) << "," << fmt(rec.val_loss)
                << "," << fmt(rec.val_tanimoto);
            for (const auto& m : rec.val_report.per_class)
                log << "," << fmt(m.dice) << "," << fmt(m.jaccard) << "," << fmt(m.precision) << ","
                    << fmt(m.recall) << "," << fmt(m.f1);
            log << "\n";
            log.flush();
        }
        if (outputs.progress) {
            char line[160];
            std::snprintf(line, sizeof line, "epoch %zu/%zu  loss %.4f  T~ %.4f  %s loss %.4f  %s T~ %.4f\n", epoch,
                          cfg.epochs, rec.train_loss, rec.train_tanimoto, val_set ? "val" : "train-eval",
                          rec.val_loss, val_set ? "val" : "train-eval", rec.val_tanimoto);
            *outputs.progress << line << std::flush;
        }
        run.records.push_back(std::move(rec));
    }
    if (log.is_open() && !log) throw IoError("failed writing the training log");
    return run;
}

// ---------------------------------------------------------------------------
// synthetic data

ClassPalette synthetic_palette() {
    return ClassPalette{{{"disk", {255, 0, 0}}, {"stripe", {0, 255, 0}}, {"background", {0, 0, 255}}}};
}

SegDataset make_synthetic_dataset(std::size_t count, std::size_t height, std::size_t width, std::uint64_t seed) {
    if (count == 0 || height < 8 || width < 8) throw ValueError("synthetic dataset needs count >= 1 and size >= 8x8");
    SegDataset ds{{}, synthetic_palette()};
    const double H = double(height), W = double(width);
    for (std::size_t n = 0; n < count; ++n) {
        Rng rng(derive_seed(seed, n));
        // stripes: period and phase along a diagonal direction
        const double period = uniform(rng, 10, 16), phase = uniform(rng, 0, period);
        const double slope = uniform01(rng) < 0.5 ? 1.0 : -1.0;
        struct Disk {
            double r, c, radius;
        };
        std::vector<Disk> disks;
        const int n_disks = 2 + static_cast<int>(uniform01(rng) * 2);
        for (int d = 0; d < n_disks; ++d)
            disks.push_back({uniform(rng, 0.2 * H, 0.8 * H), uniform(rng, 0.15 * W, 0.85 * W),
                             uniform(rng, 0.12 * H, 0.2 * H)});

        Sample s{Tensor<double>(Shape{height, width, 1}), Tensor<double>(Shape{height, width, 3}),
                 "synthetic_" + std::to_string(n)};
        for (std::size_t r = 0; r < height; ++r)
            for (std::size_t c = 0; c < width; ++c) {
                std::size_t cls = 2;
                const double u = std::fmod(double(c) + slope * double(r) + phase + 4 * period, period);
                if (u < 0.35 * period) cls = 1;
                for (const auto& d : disks) {
                    const double dr = double(r) - d.r, dc = double(c) - d.c;
                    if (dr * dr + dc * dc <= d.radius * d.radius) cls = 0;
                }
                static constexpr int kLevel[3] = {220, 130, 40};
                const int noise = static_cast<int>(uniform01(rng) * 21) - 10;
                s.image.at({r, c, 0}) = double(kLevel[cls] + noise) / 255.0;
                s.mask.at({r, c, cls}) = 1.0;
            }
        ds.items.push_back(std::move(s));
    }
    return ds;
}

void write_dataset(const SegDataset& ds, const std::filesystem::path& images_dir,
                   const std::filesystem::path& masks_dir) {
    std::filesystem::create_directories(images_dir);
    std::filesystem::create_directories(masks_dir);
    for (const auto& s : ds.items) {
        write_png(images_dir / (s.id + ".png"), tensor_to_image(s.image));
        write_png(masks_dir / (s.id + ".png"), encode_mask(s.mask, ds.palette));
    }
}

#define RESCR_INSTANTIATE_TRAINER(T)                                                                       \
    template class Optimizer<T>;                                                                           \
    template EvalResult evaluate(const ResCrNet<T>&, const std::vector<Sample>&, const LossConfig&);       \
    template Prediction predict(const ResCrNet<T>&, const Tensor<double>&, const ClassPalette&);           \
    template TrainRun train(ResCrNet<T>&, const SegDataset&, const SegDataset*, const RunConfig&,          \
                            const TrainOutputs&);

RESCR_INSTANTIATE_TRAINER(float)
RESCR_INSTANTIATE_TRAINER(double)

}  // namespace rescr
