#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rescr/autodiff.hpp"
#include "rescr/ops.hpp"
#include "rescr/random.hpp"

namespace rescr {

enum class BranchMerge { concat, add };

std::string to_string(BranchMerge m);
BranchMerge parse_branch_merge(const std::string& s);

struct NetworkConfig {
    std::size_t n_conv_blocks = 6;
    std::size_t n_lstm_blocks = 1;
    std::size_t filters_per_branch = 4;
    std::array<std::size_t, 3> kernel_sizes{3, 3, 3};
    std::array<std::size_t, 3> dilation_rates{1, 3, 5};
    BranchMerge branch_merge = BranchMerge::concat;
    double dropout_rate = 0.2;
    std::size_t num_classes = 3;
    double leaky_alpha = 0.3;
    std::size_t input_channels = 1;

    // Throws ConfigError naming the offending field.
    void validate() const;

    // Channel count produced by the STEM and every CONV RES BLOCK.
    std::size_t feature_width() const {
        return branch_merge == BranchMerge::concat ? 3 * filters_per_branch : filters_per_branch;
    }

    // Largest dilated kernel extent d*(k-1)+1 over the three branches.
    std::size_t max_receptive_extent() const;

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Named parameter tensors in insertion order.
template <typename T>
class ParameterStore {
public:
    void add(std::string name, Tensor<T> value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor<T>& get(const std::string& name);
    const Tensor<T>& get(const std::string& name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t element_count() const noexcept;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
        return out;
    }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.entries_ == b.entries_; }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Parameters bound into a graph, looked up by name.
template <typename T>
class ParamVars {
public:
    // Leaves on `tape` (gradients wanted) or, with a null tape, constants.
    static ParamVars bind(const ParameterStore<T>& store, Tape<T>* tape);
    // Variables the caller already created.
    static ParamVars wrap(std::map<std::string, Var<T>> vars);

    const Var<T>& operator[](const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    const std::map<std::string, Var<T>>& all() const noexcept { return vars_; }

private:
    std::map<std::string, Var<T>> vars_;
};

// Ordered (label, shape) pairs recorded by blocks that accept a trace.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

template <typename T>
struct ConvLSTMState {
    Var<T> hidden;  // [B,S,C,1]
    Var<T> cell;    // [B,S,C,1]
};

template <typename T>
struct ConvLSTMParams {
    Var<T> kernel;  // [3,3,2,4]: (input, hidden) -> gates (i,f,g,o)
    Var<T> bias;    // [4]
};

// ----------------------------------------------------------------------------
// Parameter layout. Each function appends initialized tensors for one block.

void add_stem_params(ParameterStore<double>& store, const NetworkConfig& cfg, Rng& rng);
void add_conv_res_block_params(ParameterStore<double>& store, const NetworkConfig& cfg, const std::string& prefix,
                               std::size_t in_width, Rng& rng);
void add_lstm_res_block_params(ParameterStore<double>& store, const std::string& prefix, Rng& rng);

// ----------------------------------------------------------------------------
// Blocks

// Three parallel separable atrous branches over the raw input, each
// LeakyReLU-activated, merged per cfg.branch_merge. No shortcut.
template <typename T>
Var<T> stem_block(const Var<T>& x, const NetworkConfig& cfg, const ParamVars<T>& p);

// shortcut(x) + merge(branches(x)), then spatial dropout. The shortcut is a
// 1x1 projection only when x's width differs from the merged branch width.
template <typename T>
Var<T> conv_res_block(const Var<T>& x, const NetworkConfig& cfg, const ParamVars<T>& p, const std::string& prefix,
                      bool training, Rng& rng);

// One ConvLSTM cell update on a [B,S,C,1] slice; returns (output, new state).
template <typename T>
std::pair<Var<T>, ConvLSTMState<T>> conv_lstm_step(const Var<T>& slice, const ConvLSTMState<T>& state,
                                                   const ConvLSTMParams<T>& params);

// [B,T,S,C,1] -> [B,T,S,C,2]; channel 0 is the forward-in-time pass,
// channel 1 the backward pass re-aligned to forward time.
template <typename T>
Var<T> bidirectional_conv_lstm(const Var<T>& x5, const ConvLSTMParams<T>& forward,
                               const ConvLSTMParams<T>& backward);

// Row-wise and column-wise bidirectional ConvLSTMs over the class-width map,
// summed and collapsed into a residual added to x.
template <typename T>
Var<T> lstm_res_block(const Var<T>& x, const ParamVars<T>& p, const std::string& prefix,
                      ShapeTrace* trace = nullptr);

// ----------------------------------------------------------------------------

/// Res-CR-Net: STEM -> n CONV RES BLOCKs -> 1x1 class projection + LeakyReLU
/// -> m LSTM RES BLOCKs -> channel softmax.
template <typename T>
class ResCrNet {
public:
    // Checks that `params` holds exactly the tensors `cfg` needs.
    ResCrNet(NetworkConfig cfg, ParameterStore<T> params);

    // Glorot-uniform kernels, zero biases, forget-gate bias 1.
    static ResCrNet build(const NetworkConfig& cfg, Rng& rng);

    const NetworkConfig& config() const noexcept { return cfg_; }
    ParameterStore<T>& parameters() noexcept { return params_; }
    const ParameterStore<T>& parameters() const noexcept { return params_; }
    std::size_t parameter_count() const noexcept { return params_.element_count(); }

    // Input [B,H,W,input_channels] -> class probabilities [B,H,W,num_classes].
    Var<T> forward(const ParamVars<T>& p, const Var<T>& input, bool training, Rng& rng) const;

    // Dropout-free forward with nothing recorded.
    Tensor<T> infer(const Tensor<T>& input) const;

private:
    NetworkConfig cfg_;
    ParameterStore<T> params_;
};

// Names and shapes of every tensor build() creates for `cfg`, in order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkConfig& cfg);

}  // namespace rescr
