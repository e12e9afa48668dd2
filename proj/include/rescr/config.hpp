#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rescr/augment.hpp"
#include "rescr/dataset_io.hpp"
#include "rescr/loss.hpp"
#include "rescr/network.hpp"

namespace rescr {

// INI-style text: `[section]` headers, `key = value` lines, `#` or `;`
// comments. Keys before the first header belong to section "".
struct IniEntry {
    std::string key, value;
    std::size_t line = 0;
};

struct IniSection {
    std::string name;
    std::size_t line = 0;
    std::vector<IniEntry> entries;
};

struct IniDocument {
    std::string source;  // file name used in error messages
    std::vector<IniSection> sections;

    // Throws ConfigError("<source>:<line>: ...") on malformed lines and on
    // repeated sections or keys.
    static IniDocument parse(std::string_view text, std::string source);
    static IniDocument load(const std::filesystem::path& path);
};

struct OptimizerConfig {
    std::string kind = "adam";  // adam | sgd
    double learning_rate = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
    double momentum = 0.0;  // sgd only

    void validate() const;
};

enum class Precision { float64, float32 };

struct RunConfig {
    NetworkConfig network;
    LossConfig loss;
    bool augment_enabled = true;
    AugmentRanges augment;
    OptimizerConfig optimizer;
    ClassPalette palette = ClassPalette::rgb3();
    MaskDecodeOptions mask_decode;

    std::filesystem::path train_images, train_masks, val_images, val_masks;

    std::size_t epochs = 90;
    std::size_t steps_per_epoch = 15;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "run";
    Precision precision = Precision::float64;

    // Relative paths resolve against `base_dir`. Unknown sections or keys,
    // bad values and inconsistent fields raise ConfigError naming the line.
    static RunConfig from_ini(const IniDocument& doc, const std::filesystem::path& base_dir);
    static RunConfig load(const std::filesystem::path& path);

    bool has_validation() const { return !val_images.empty(); }

    // Cross-field checks (class counts, ranges, paths present).
    void validate() const;

    // Text that from_ini reads back to an equal config.
    std::string to_ini() const;
};

}  // namespace rescr
