#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "rescr/config.hpp"
#include "rescr/dataset_io.hpp"
#include "rescr/metrics.hpp"
#include "rescr/network.hpp"

namespace rescr {

/// Adam (bias-corrected) or SGD with momentum, per OptimizerConfig.
template <typename T>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg);

    // One update. `grads` maps parameter names to gradients of equal shape;
    // a missing entry counts as zero. Non-finite gradients throw
    // NumericError naming the parameter, before anything is modified.
    void step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads);

    std::size_t steps() const noexcept { return t_; }
    const OptimizerConfig& config() const noexcept { return cfg_; }

private:
    OptimizerConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// Stacks equally sized [H,W,C] tensors into [B,H,W,C].
Tensor<double> stack_batch(const std::vector<const Tensor<double>*>& items);

struct EvalResult {
    MetricReport report;
    double mean_loss = 0;
};

// Dropout-free evaluation; counts are summed over items, soft scores and
// loss averaged per item.
template <typename T>
EvalResult evaluate(const ResCrNet<T>& model, const std::vector<Sample>& data, const LossConfig& loss);

struct Prediction {
    Tensor<double> probs;  // [H,W,K]
    PngImage color;
};

template <typename T>
Prediction predict(const ResCrNet<T>& model, const Tensor<double>& image, const ClassPalette& palette);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0, train_tanimoto = 0;
    double val_loss = 0, val_tanimoto = 0;
    MetricReport val_report;
};

struct TrainRun {
    std::vector<EpochRecord> records;
    std::size_t optimizer_steps = 0;
    std::size_t best_epoch = 0;  // 0: initial weights
    double best_tanimoto = 0;
    bool validated_on_train = false;  // no validation set was given
};

struct TrainOutputs {
    std::filesystem::path dir;         // empty: write nothing
    std::ostream* progress = nullptr;  // one line per epoch
};

// Per epoch: `steps_per_epoch` batches of the whole training set (each item
// re-augmented when enabled), one optimizer step each, then validation
// without augmentation or dropout. Without a validation set the
// un-augmented training set is evaluated instead. Writes log.csv,
// best.ckpt and last.ckpt under outputs.dir.
template <typename T>
TrainRun train(ResCrNet<T>& model, const SegDataset& train_set, const SegDataset* val_set, const RunConfig& cfg,
               const TrainOutputs& outputs = {});

// Stream of the run seed that initializes the model weights.
inline constexpr std::uint64_t kInitStream = 0x1a2b;

// CSV header for `class_names`, matching the rows train() writes.
std::string log_header(const std::vector<std::string>& class_names);

// Gray disks (class 0) over diagonal stripes (class 1) on background
// (class 2). Pixel values are multiples of 1/255, so a PNG round trip is exact.
SegDataset make_synthetic_dataset(std::size_t count = 2, std::size_t height = 32, std::size_t width = 48,
                                  std::uint64_t seed = 0);
ClassPalette synthetic_palette();

// Writes images as 8-bit PNGs and masks as palette colors, named <id>.png.
void write_dataset(const SegDataset& ds, const std::filesystem::path& images_dir,
                   const std::filesystem::path& masks_dir);

}  // namespace rescr
