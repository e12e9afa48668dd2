#pragma once

#include <cstddef>
#include <vector>

#include "rescr/autodiff.hpp"
#include "rescr/random.hpp"

// Differentiable operations on Var<T>. Every op checks shapes, rejects
// non-finite outputs, and records an exact backward rule when any input
// requires a gradient. Layout is channels-last: [batch, rows, cols, channels].
namespace rescr::ops {

// 2-D convolution, 'same' zero padding, stride 1.
// x [B,H,W,Cin], kernel [kh,kw,Cin,Cout], bias [Cout] (optional).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias = {}, std::size_t dilation = 1);

// Per-channel spatial convolution. kernel [kh,kw,C], bias [C] (optional).
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias = {},
                        std::size_t dilation = 1);

// 1x1 convolution as a matrix product over the channel axis.
// x [...,Cin], weight [Cin,Cout], bias [Cout] (optional).
template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {});

// Depthwise dilated convolution followed by a pointwise projection.
template <typename T>
Var<T> separable_atrous_conv(const Var<T>& x, const Var<T>& depthwise, const Var<T>& pointwise,
                             const Var<T>& bias = {}, std::size_t dilation = 1);

// max(x, alpha*x). The derivative at exactly 0 is taken as 1.
template <typename T>
Var<T> leaky_relu(const Var<T>& x, T alpha);

// While alive, records which side of the breakpoint every leaky_relu input
// falls on (one active probe per thread, nesting restores the outer one).
// Two evaluations with different patterns lie on different linear pieces.
class BranchProbe {
public:
    BranchProbe();
    ~BranchProbe();
    BranchProbe(const BranchProbe&) = delete;
    BranchProbe& operator=(const BranchProbe&) = delete;

    const std::vector<bool>& pattern() const noexcept { return pattern_; }
    void clear() noexcept { pattern_.clear(); }

    static BranchProbe* active() noexcept;
    void record(bool nonnegative) { pattern_.push_back(nonnegative); }

private:
    std::vector<bool> pattern_;
    BranchProbe* outer_;
};

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> tanh(const Var<T>& x);

// Softmax over the last axis (needs >= 2 entries), max-shifted.
template <typename T>
Var<T> softmax_channels(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> multiply(const Var<T>& a, const Var<T>& b);

// Concatenate along the last axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

// Half-open range [begin, end) of the last axis.
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Var<T> transpose_axes(const Var<T>& x, const std::vector<std::size_t>& perm);

// [...] -> [...,1]
template <typename T>
Var<T> expand_last_dim(const Var<T>& x);

// [...,n] -> [...]
template <typename T>
Var<T> sum_last_dim(const Var<T>& x);

// Drops `axis`, keeping entry `index` along it.
template <typename T>
Var<T> select(const Var<T>& x, std::size_t axis, std::size_t index);

// Inverse of select: inserts a new axis at `axis` of length parts.size().
template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts, std::size_t axis);

// Zeroes whole channels of [B,H,W,C] with probability `rate` per (batch, channel)
// and rescales the rest by 1/(1-rate). Identity when !training or rate == 0.
template <typename T>
Var<T> spatial_dropout(const Var<T>& x, double rate, bool training, Rng& rng);

// Sum of all entries, as shape [1].
template <typename T>
Var<T> sum(const Var<T>& x);

}  // namespace rescr::ops
