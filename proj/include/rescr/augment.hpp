#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rescr/random.hpp"
#include "rescr/tensor.hpp"

namespace rescr {

struct Range {
    double lo = 0, hi = 0;

    friend bool operator==(const Range&, const Range&) = default;
};

struct AugmentRanges {
    Range rotation_deg{-30, 30};
    Range shear_deg{-15, 15};
    Range shift_x{-0.1, 0.1};  // fraction of the width
    Range shift_y{-0.1, 0.1};  // fraction of the height
    Range scale{0.8, 1.25};
    double flip_h_prob = 0.5;
    double flip_v_prob = 0.5;

    // Ranges that always sample the identity transform.
    static AugmentRanges identity();

    void validate() const;

    friend bool operator==(const AugmentRanges&, const AugmentRanges&) = default;
};

struct AugmentParams {
    double rotation_deg = 0;  // clockwise on screen (rows grow downward)
    double shear_deg = 0;
    double shift_x = 0, shift_y = 0;
    double scale = 1;
    bool flip_h = false, flip_v = false;
    std::uint64_t seed = 0;  // stream seed the sample was drawn from

    bool is_identity() const noexcept;
};

enum class Interp { bilinear, nearest };

AugmentParams sample_params(const AugmentRanges& ranges, Rng& rng);

// Destination-to-source map of the composed transform, in (x=col, y=row)
// pixel coordinates. Flips are applied to the source first.
struct AffineMap {
    double a00, a01, a10, a11;  // inverse of scale * rotate * shear
    double cx, cy;              // image centre
    double tx, ty;              // translation in pixels
    bool flip_h, flip_v;
    std::size_t height, width;

    static AffineMap from(const AugmentParams& p, std::size_t height, std::size_t width);

    // Source coordinates (before reflection) for output pixel (row, col).
    std::pair<double, double> source(double row, double col) const;
};

// Mirror indexing without edge repetition: -1 -> 1, n -> n-2.
std::size_t reflect_index(long long i, std::size_t n);

// Image [H,W,C] resampled under `p`; out-of-domain samples use reflection.
Tensor<double> warp_image(const Tensor<double>& image, const AugmentParams& p, Interp interp = Interp::bilinear);

// One-hot mask [H,W,K], nearest sampling, re-one-hotted by argmax.
Tensor<double> warp_mask(const Tensor<double>& mask, const AugmentParams& p);

// Same geometry for both tensors. Throws ShapeError if H,W differ.
std::pair<Tensor<double>, Tensor<double>> apply_affine(const Tensor<double>& image, const Tensor<double>& mask,
                                                       const AugmentParams& p, Interp interp = Interp::bilinear);

struct Sample {
    Tensor<double> image;  // [H,W,C]
    Tensor<double> mask;   // [H,W,K]
    std::string id;
};

// Seed of the transform applied to item `item` in step `step` of `epoch`.
std::uint64_t augment_seed(std::uint64_t base_seed, std::size_t epoch, std::size_t step, std::size_t item);

// `steps` batches, each holding every item independently re-augmented.
std::vector<std::vector<Sample>> epoch_stream(const std::vector<Sample>& dataset, std::size_t steps,
                                              const AugmentRanges& ranges, std::uint64_t base_seed,
                                              std::size_t epoch);

}  // namespace rescr
