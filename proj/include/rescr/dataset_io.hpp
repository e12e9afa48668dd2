#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rescr/augment.hpp"
#include "rescr/tensor.hpp"

namespace rescr {

// Decoded PNG: 1 (gray) or 3 (RGB) channels, 8 or 16 bits per sample.
// Palette images arrive expanded to RGB; alpha is dropped.
struct PngImage {
    std::size_t height = 0, width = 0, channels = 0;
    int bit_depth = 8;
    std::vector<std::uint16_t> samples;  // row-major, interleaved

    std::uint16_t max_value() const noexcept { return bit_depth == 16 ? 65535 : 255; }
};

PngImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const PngImage& image);

// Samples scaled to [0,1] by the bit depth's maximum; shape [H,W,C].
Tensor<double> image_to_tensor(const PngImage& image);

// [H,W,1] or [H,W,3] in [0,1] to an 8-bit PNG, rounding to the nearest level.
PngImage tensor_to_image(const Tensor<double>& t);

using Rgb = std::array<std::uint8_t, 3>;

struct ClassPalette {
    struct Entry {
        std::string name;
        Rgb color;

        friend bool operator==(const Entry&, const Entry&) = default;
    };
    std::vector<Entry> entries;

    std::size_t size() const noexcept { return entries.size(); }
    std::vector<std::string> names() const;

    // Non-empty, distinct colors, distinct non-empty names.
    void validate() const;

    // red, green, blue
    static ClassPalette rgb3();

    friend bool operator==(const ClassPalette&, const ClassPalette&) = default;
};

struct MaskDecodeOptions {
    bool exact_only = false;      // any non-palette color is an error
    double far_distance = 30.0;   // RGB distance counted as "far" from every color
    double far_fraction = 0.01;   // report when more pixels than this are far
};

struct DecodedMask {
    Tensor<double> onehot;  // [H,W,K]
    std::size_t far_pixels = 0;
    bool far_warning = false;  // far_pixels exceeds the configured fraction
};

// Nearest palette color by Euclidean RGB distance, ties to the lowest index.
// Gray masks are read as (v,v,v); 16-bit samples are reduced to 8 bits.
DecodedMask decode_mask(const PngImage& png, const ClassPalette& palette, const MaskDecodeOptions& opts = {});

// One-hot [H,W,K] to an RGB image. Throws ValueError if not one-hot.
PngImage encode_mask(const Tensor<double>& onehot, const ClassPalette& palette);

// Probabilities [H,W,K] to an RGB image via argmax (lowest index on ties).
template <typename T>
PngImage encode_prediction(const Tensor<T>& probs, const ClassPalette& palette);

struct SegDataset {
    std::vector<Sample> items;
    ClassPalette palette;

    std::size_t size() const noexcept { return items.size(); }
};

// Pairs *.png files in the two directories by filename stem, sorted
// lexicographically. Decode warnings go to `warn` when given.
SegDataset load_dataset(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                        const ClassPalette& palette, const MaskDecodeOptions& opts = {},
                        std::ostream* warn = nullptr);

// Images only (masks left empty), same ordering rules.
std::vector<Sample> load_images(const std::filesystem::path& images_dir);

}  // namespace rescr
