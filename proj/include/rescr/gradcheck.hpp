#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace rescr {

struct GradcheckOptions {
    std::size_t trials = 20;  // random draws per case
    std::uint64_t seed = 0;  // network draw t uses seed + t + 1
    double step = 1e-6;   // central-difference step h
    double floor = 1e-6;  // relative error is |a-n| / max(|a|, |n|, floor)
    bool include_ops = true;
    bool include_network = true;
    // End-to-end network case; input is [1, height, width, 1].
    std::size_t n_conv_blocks = 1, n_lstm_blocks = 1;
    std::size_t height = 8, width = 8;
};

struct GradcheckCase {
    std::string name;
    double max_rel_err = 0;
    std::size_t trials = 0;
    std::size_t entries = 0;  // input entries compared per trial
    std::size_t kinks = 0;    // entries skipped: x-h and x+h on different LeakyReLU pieces
};

struct GradcheckReport {
    std::vector<GradcheckCase> cases;
    double max_rel_err() const;
    std::size_t kinks() const;
};

// Compares reverse-mode gradients with central differences in double
// precision for every differentiable operation and for a whole network.
// Each output is reduced by a fixed random weighting (centred per pixel
// over classes where the output is a softmax). Entries whose two
// evaluations x-h and x+h fall on different LeakyReLU pieces are counted
// in `kinks` and left out of the error, since the function has no
// derivative inside that interval.
GradcheckReport run_gradcheck(const GradcheckOptions& opts, std::ostream* progress = nullptr);

}  // namespace rescr
