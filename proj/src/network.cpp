#include "rescr/network.hpp"

#include <algorithm>
#include <cmath>

namespace rescr {

std::string to_string(BranchMerge m) {
    return m == BranchMerge::concat ? "concat" : "add";
}

BranchMerge parse_branch_merge(const std::string& s) {
    if (s == "concat") return BranchMerge::concat;
    if (s == "add") return BranchMerge::add;
    throw ConfigError("branch_merge must be 'concat' or 'add', got '" + s + "'");
}

void NetworkConfig::validate() const {
    if (n_conv_blocks < 1) throw ConfigError("n_conv_blocks must be >= 1");
    if (filters_per_branch < 1) throw ConfigError("filters_per_branch must be >= 1");
    for (std::size_t i = 0; i < 3; ++i) {
        if (kernel_sizes[i] == 0 || kernel_sizes[i] % 2 == 0)
            throw ConfigError("kernel_sizes[" + std::to_string(i) + "] must be odd, got " +
                              std::to_string(kernel_sizes[i]));
        if (dilation_rates[i] < 1)
            throw ConfigError("dilation_rates[" + std::to_string(i) + "] must be >= 1");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0,1)");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (!(leaky_alpha > 0.0 && leaky_alpha < 1.0)) throw ConfigError("leaky_alpha must lie in (0,1)");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
}

std::size_t NetworkConfig::max_receptive_extent() const {
    std::size_t m = 1;
    for (std::size_t i = 0; i < 3; ++i) m = std::max(m, dilation_rates[i] * (kernel_sizes[i] - 1) + 1);
    return m;
}

// ---------------------------------------------------------------------------

template <typename T>
void ParameterStore<T>::add(std::string name, Tensor<T> value) {
    if (contains(name)) throw ValueError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
Tensor<T>& ParameterStore<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
std::size_t ParameterStore<T>::element_count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
}

template <typename T>
ParamVars<T> ParamVars<T>::bind(const ParameterStore<T>& store, Tape<T>* tape) {
    ParamVars<T> pv;
    for (const auto& [name, t] : store) pv.vars_.emplace(name, tape ? tape->leaf(t) : constant(t));
    return pv;
}

template <typename T>
ParamVars<T> ParamVars<T>::wrap(std::map<std::string, Var<T>> vars) {
    ParamVars pv;
    pv.vars_ = std::move(vars);
    return pv;
}

template <typename T>
const Var<T>& ParamVars<T>::operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ValueError("parameter '" + name + "' is not bound");
    return it->second;
}

// ---------------------------------------------------------------------------
// layout and initialization

namespace {

using Layout = std::vector<std::pair<std::string, Shape>>;

std::string branch_name(const std::string& prefix, std::size_t i) {
    return prefix + ".branch" + std::to_string(i);
}

void branch_layout(Layout& out, const NetworkConfig& cfg, const std::string& prefix, std::size_t in_width) {
    const std::size_t F = cfg.filters_per_branch;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t k = cfg.kernel_sizes[i];
        const std::string b = branch_name(prefix, i);
        out.push_back({b + ".depthwise", {k, k, in_width}});
        out.push_back({b + ".pointwise", {in_width, F}});
        out.push_back({b + ".bias", {F}});
    }
}

Layout stem_layout(const NetworkConfig& cfg) {
    Layout l;
    branch_layout(l, cfg, "stem", cfg.input_channels);
    return l;
}

Layout conv_block_layout(const NetworkConfig& cfg, const std::string& prefix, std::size_t in_width) {
    Layout l;
    branch_layout(l, cfg, prefix, in_width);
    if (in_width != cfg.feature_width()) {
        l.push_back({prefix + ".shortcut.weight", {in_width, cfg.feature_width()}});
        l.push_back({prefix + ".shortcut.bias", {cfg.feature_width()}});
    }
    return l;
}

const char* const kLstmCells[4] = {"row.fwd", "row.bwd", "col.fwd", "col.bwd"};

Layout lstm_block_layout(const std::string& prefix) {
    Layout l;
    for (const char* cell : kLstmCells) {
        l.push_back({prefix + "." + cell + ".kernel", {3, 3, 2, 4}});
        l.push_back({prefix + "." + cell + ".bias", {4}});
    }
    return l;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Glorot-uniform for kernels; biases zero except the LSTM forget gate.
Tensor<double> init_tensor(const std::string& name, const Shape& shape, Rng& rng) {
    Tensor<double> t(shape);
    if (ends_with(name, ".bias")) {
        if (ends_with(name, "fwd.bias") || ends_with(name, "bwd.bias")) t[1] = 1.0;  // forget gate
        return t;
    }
    std::size_t fan_in = 0, fan_out = 0;
    if (ends_with(name, ".depthwise")) {
        fan_in = fan_out = shape[0] * shape[1];
    } else if (shape.size() == 2) {
        fan_in = shape[0];
        fan_out = shape[1];
    } else {  // [kh,kw,Cin,Cout]
        fan_in = shape[0] * shape[1] * shape[2];
        fan_out = shape[0] * shape[1] * shape[3];
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.data()) v = uniform(rng, -limit, limit);
    return t;
}

void add_layout(ParameterStore<double>& store, const Layout& layout, Rng& rng) {
    for (const auto& [name, shape] : layout) store.add(name, init_tensor(name, shape, rng));
}

std::string conv_prefix(std::size_t j) { return "conv" + std::to_string(j); }
std::string lstm_prefix(std::size_t j) { return "lstm" + std::to_string(j); }

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkConfig& cfg) {
    cfg.validate();
    Layout l = stem_layout(cfg);
    for (std::size_t j = 0; j < cfg.n_conv_blocks; ++j) {
        auto b = conv_block_layout(cfg, conv_prefix(j), cfg.feature_width());
        l.insert(l.end(), b.begin(), b.end());
    }
    l.push_back({"head.weight", {cfg.feature_width(), cfg.num_classes}});
    l.push_back({"head.bias", {cfg.num_classes}});
    for (std::size_t j = 0; j < cfg.n_lstm_blocks; ++j) {
        auto b = lstm_block_layout(lstm_prefix(j));
        l.insert(l.end(), b.begin(), b.end());
    }
    return l;
}

void add_stem_params(ParameterStore<double>& store, const NetworkConfig& cfg, Rng& rng) {
    add_layout(store, stem_layout(cfg), rng);
}

void add_conv_res_block_params(ParameterStore<double>& store, const NetworkConfig& cfg, const std::string& prefix,
                               std::size_t in_width, Rng& rng) {
    add_layout(store, conv_block_layout(cfg, prefix, in_width), rng);
}

void add_lstm_res_block_params(ParameterStore<double>& store, const std::string& prefix, Rng& rng) {
    add_layout(store, lstm_block_layout(prefix), rng);
}

// ---------------------------------------------------------------------------
// blocks

namespace {

template <typename T>
std::vector<Var<T>> branches(const Var<T>& x, const NetworkConfig& cfg, const ParamVars<T>& p,
                             const std::string& prefix) {
    std::vector<Var<T>> out;
    const T alpha = static_cast<T>(cfg.leaky_alpha);
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string b = branch_name(prefix, i);
        auto y = ops::separable_atrous_conv(x, p[b + ".depthwise"], p[b + ".pointwise"], p[b + ".bias"],
                                            cfg.dilation_rates[i]);
        out.push_back(ops::leaky_relu(y, alpha));
    }
    return out;
}

template <typename T>
Var<T> merge(const std::vector<Var<T>>& parts, BranchMerge mode) {
    if (mode == BranchMerge::concat) return ops::concat_channels(parts);
    return ops::add(ops::add(parts[0], parts[1]), parts[2]);
}

}  // namespace

template <typename T>
Var<T> stem_block(const Var<T>& x, const NetworkConfig& cfg, const ParamVars<T>& p) {
    if (x.rank() != 4 || x.dim(3) != cfg.input_channels)
        throw ShapeError("stem: expected [B,H,W," + std::to_string(cfg.input_channels) + "] input, got " +
                         to_string(x.shape()));
    return merge(branches(x, cfg, p, "stem"), cfg.branch_merge);
}

template <typename T>
Var<T> conv_res_block(const Var<T>& x, const NetworkConfig& cfg, const ParamVars<T>& p, const std::string& prefix,
                      bool training, Rng& rng) {
    if (x.rank() != 4) throw ShapeError(prefix + ": expected rank-4 input, got " + to_string(x.shape()));
    const std::string dw = branch_name(prefix, 0) + ".depthwise";
    if (p[dw].dim(2) != x.dim(3))
        throw ShapeError(prefix + ": block built for width " + std::to_string(p[dw].dim(2)) + ", input has " +
                         std::to_string(x.dim(3)));
    Var<T> residual = merge(branches(x, cfg, p, prefix), cfg.branch_merge);
    Var<T> shortcut = x;
    if (x.dim(3) != residual.dim(3)) {
        if (!p.contains(prefix + ".shortcut.weight"))
            throw ShapeError(prefix + ": width " + std::to_string(x.dim(3)) + " needs a shortcut projection to " +
                             std::to_string(residual.dim(3)));
        shortcut = ops::pointwise_conv(x, p[prefix + ".shortcut.weight"], p[prefix + ".shortcut.bias"]);
    }
    return ops::spatial_dropout(ops::add(shortcut, residual), cfg.dropout_rate, training, rng);
}

template <typename T>
std::pair<Var<T>, ConvLSTMState<T>> conv_lstm_step(const Var<T>& slice, const ConvLSTMState<T>& state,
                                                   const ConvLSTMParams<T>& params) {
    if (slice.rank() != 4 || slice.dim(3) != 1)
        throw ShapeError("conv_lstm_step: slice must be [B,S,C,1], got " + to_string(slice.shape()));
    if (state.hidden.shape() != slice.shape() || state.cell.shape() != slice.shape())
        throw ShapeError("conv_lstm_step: state " + to_string(state.hidden.shape()) + " does not match slice " +
                         to_string(slice.shape()));
    auto gates = ops::conv2d(ops::concat_channels<T>({slice, state.hidden}), params.kernel, params.bias, 1);
    auto i = ops::sigmoid(ops::slice_channels(gates, 0, 1));
    auto f = ops::sigmoid(ops::slice_channels(gates, 1, 2));
    auto g = ops::tanh(ops::slice_channels(gates, 2, 3));
    auto o = ops::sigmoid(ops::slice_channels(gates, 3, 4));
    auto cell = ops::add(ops::multiply(f, state.cell), ops::multiply(i, g));
    auto hidden = ops::multiply(o, ops::tanh(cell));
    return {hidden, ConvLSTMState<T>{hidden, cell}};
}

template <typename T>
Var<T> bidirectional_conv_lstm(const Var<T>& x5, const ConvLSTMParams<T>& forward,
                               const ConvLSTMParams<T>& backward) {
    if (x5.rank() != 5 || x5.dim(4) != 1)
        throw ShapeError("bidirectional_conv_lstm: expected [B,T,S,C,1], got " + to_string(x5.shape()));
    const std::size_t steps = x5.dim(1);
    const Shape slice_shape{x5.dim(0), x5.dim(2), x5.dim(3), 1};
    auto zeros = constant(Tensor<T>(slice_shape));

    std::vector<Var<T>> fwd(steps), bwd(steps);
    ConvLSTMState<T> s{zeros, zeros};
    for (std::size_t t = 0; t < steps; ++t) {
        auto [out, next] = conv_lstm_step(ops::select(x5, 1, t), s, forward);
        fwd[t] = out;
        s = next;
    }
    s = ConvLSTMState<T>{zeros, zeros};
    for (std::size_t t = steps; t-- > 0;) {
        auto [out, next] = conv_lstm_step(ops::select(x5, 1, t), s, backward);
        bwd[t] = out;
        s = next;
    }
    // each stack is [B,T,S,C,1]
    return ops::concat_channels<T>({ops::stack(fwd, 1), ops::stack(bwd, 1)});
}

template <typename T>
Var<T> lstm_res_block(const Var<T>& x, const ParamVars<T>& p, const std::string& prefix, ShapeTrace* trace) {
    if (x.rank() != 4) throw ShapeError(prefix + ": expected rank-4 input, got " + to_string(x.shape()));
    auto cell = [&](const char* name) {
        return ConvLSTMParams<T>{p[prefix + "." + name + ".kernel"], p[prefix + "." + name + ".bias"]};
    };
    auto note = [&](const char* label, const Var<T>& v) {
        if (trace) trace->emplace_back(label, v.shape());
    };
    const std::vector<std::size_t> swap_rows_cols{0, 2, 1, 3, 4};

    note("input", x);
    auto x5 = ops::expand_last_dim(x);
    note("expanded", x5);
    auto rows = bidirectional_conv_lstm(x5, cell("row.fwd"), cell("row.bwd"));
    note("row_pass", rows);
    auto xt = ops::transpose_axes(x5, swap_rows_cols);
    note("transposed", xt);
    auto cols = bidirectional_conv_lstm(xt, cell("col.fwd"), cell("col.bwd"));
    note("column_pass", cols);
    auto cols_back = ops::transpose_axes(cols, swap_rows_cols);
    note("column_pass_restored", cols_back);
    auto residual = ops::sum_last_dim(ops::add(rows, cols_back));
    note("residual", residual);
    auto out = ops::add(x, residual);
    note("output", out);
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
ResCrNet<T>::ResCrNet(NetworkConfig cfg, ParameterStore<T> params) : cfg_(cfg), params_(std::move(params)) {
    const auto layout = parameter_layout(cfg_);
    if (layout.size() != params_.size())
        throw ValueError("parameter set has " + std::to_string(params_.size()) + " tensors, config needs " +
                         std::to_string(layout.size()));
    for (const auto& [name, shape] : layout) {
        if (!params_.contains(name)) throw ValueError("missing parameter '" + name + "'");
        if (params_.get(name).shape() != shape)
            throw ShapeError("parameter '" + name + "' has shape " + to_string(params_.get(name).shape()) +
                             ", expected " + to_string(shape));
    }
}

template <typename T>
ResCrNet<T> ResCrNet<T>::build(const NetworkConfig& cfg, Rng& rng) {
    ParameterStore<double> store;
    for (const auto& [name, shape] : parameter_layout(cfg)) store.add(name, init_tensor(name, shape, rng));
    if constexpr (std::is_same_v<T, double>)
        return ResCrNet<T>(cfg, std::move(store));
    else
        return ResCrNet<T>(cfg, store.template cast<T>());
}

template <typename T>
Var<T> ResCrNet<T>::forward(const ParamVars<T>& p, const Var<T>& input, bool training, Rng& rng) const {
    if (input.rank() != 4 || input.dim(3) != cfg_.input_channels)
        throw ShapeError("network expects [B,H,W," + std::to_string(cfg_.input_channels) + "] input, got " +
                         to_string(input.shape()));
    auto h = stem_block(input, cfg_, p);
    for (std::size_t j = 0; j < cfg_.n_conv_blocks; ++j) h = conv_res_block(h, cfg_, p, conv_prefix(j), training, rng);
    h = ops::leaky_relu(ops::pointwise_conv(h, p["head.weight"], p["head.bias"]), static_cast<T>(cfg_.leaky_alpha));
    for (std::size_t j = 0; j < cfg_.n_lstm_blocks; ++j) h = lstm_res_block(h, p, lstm_prefix(j));
    return ops::softmax_channels(h);
}

template <typename T>
Tensor<T> ResCrNet<T>::infer(const Tensor<T>& input) const {
    auto p = ParamVars<T>::bind(params_, nullptr);
    Rng unused(0);
    return forward(p, constant(input), false, unused).value();
}

#define RESCR_INSTANTIATE_NETWORK(T)                                                                         \
    template class ParameterStore<T>;                                                                        \
    template class ParamVars<T>;                                                                             \
    template class ResCrNet<T>;                                                                              \
    template Var<T> stem_block(const Var<T>&, const NetworkConfig&, const ParamVars<T>&);                    \
    template Var<T> conv_res_block(const Var<T>&, const NetworkConfig&, const ParamVars<T>&,                 \
                                   const std::string&, bool, Rng&);                                          \
    template std::pair<Var<T>, ConvLSTMState<T>> conv_lstm_step(const Var<T>&, const ConvLSTMState<T>&,      \
                                                                const ConvLSTMParams<T>&);                   \
    template Var<T> bidirectional_conv_lstm(const Var<T>&, const ConvLSTMParams<T>&, const ConvLSTMParams<T>&); \
    template Var<T> lstm_res_block(const Var<T>&, const ParamVars<T>&, const std::string&, ShapeTrace*);

RESCR_INSTANTIATE_NETWORK(float)
RESCR_INSTANTIATE_NETWORK(double)

}  // namespace rescr
