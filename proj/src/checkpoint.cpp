#include "rescr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace rescr {

namespace {

constexpr char kMagic[4] = {'R', 'C', 'R', 'N'};
constexpr std::uint8_t kF64 = 0, kF32 = 1;
constexpr std::size_t kMaxNameLength = 4096;

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}

    template <typename U>
    void uint(U v) {
        unsigned char b[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os_.write(reinterpret_cast<const char*>(b), sizeof b);
    }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }

private:
    std::ostream& os_;
};

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}

    template <typename U>
    U uint() {
        unsigned char b[sizeof(U)];
        read(reinterpret_cast<char*>(b), sizeof b);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(U(b[i]) << (8 * i));
        return v;
    }
    double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }

    void read(char* p, std::size_t n) {
        if (!is_.read(p, static_cast<std::streamsize>(n))) throw IoError("checkpoint is truncated");
    }

private:
    std::istream& is_;
};

void write_config(Writer& w, const NetworkConfig& c) {
    w.uint<std::uint64_t>(c.n_conv_blocks);
    w.uint<std::uint64_t>(c.n_lstm_blocks);
    w.uint<std::uint64_t>(c.filters_per_branch);
    for (auto k : c.kernel_sizes) w.uint<std::uint64_t>(k);
    for (auto d : c.dilation_rates) w.uint<std::uint64_t>(d);
    w.uint<std::uint8_t>(c.branch_merge == BranchMerge::concat ? 0 : 1);
    w.f64(c.dropout_rate);
    w.uint<std::uint64_t>(c.num_classes);
    w.f64(c.leaky_alpha);
    w.uint<std::uint64_t>(c.input_channels);
}

NetworkConfig read_config(Reader& r) {
    NetworkConfig c;
    c.n_conv_blocks = r.uint<std::uint64_t>();
    c.n_lstm_blocks = r.uint<std::uint64_t>();
    c.filters_per_branch = r.uint<std::uint64_t>();
    for (auto& k : c.kernel_sizes) k = r.uint<std::uint64_t>();
    for (auto& d : c.dilation_rates) d = r.uint<std::uint64_t>();
    const auto merge = r.uint<std::uint8_t>();
    if (merge > 1) throw IoError("checkpoint has unknown branch merge code " + std::to_string(merge));
    c.branch_merge = merge == 0 ? BranchMerge::concat : BranchMerge::add;
    c.dropout_rate = r.f64();
    c.num_classes = r.uint<std::uint64_t>();
    c.leaky_alpha = r.f64();
    c.input_channels = r.uint<std::uint64_t>();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("checkpoint holds an invalid network config: ") + e.what());
    }
    return c;
}

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& os, const ResCrNet<T>& model) {
    Writer w(os);
    w.bytes(kMagic, 4);
    w.uint<std::uint32_t>(kCheckpointVersion);
    write_config(w, model.config());
    w.uint<std::uint64_t>(model.parameters().size());
    for (const auto& [name, t] : model.parameters()) {
        w.uint<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.uint<std::uint8_t>(std::is_same_v<T, double> ? kF64 : kF32);
        w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
        for (auto e : t.shape()) w.uint<std::uint64_t>(e);
        for (T v : t.data()) {
            if constexpr (std::is_same_v<T, double>)
                w.f64(v);
            else
                w.f32(v);
        }
    }
    if (!os) throw IoError("failed writing checkpoint");
}

template <typename T>
ResCrNet<T> read_checkpoint(std::istream& is) {
    Reader r(is);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a checkpoint (bad magic)");
    const auto version = r.uint<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    const NetworkConfig cfg = read_config(r);

    const auto layout = parameter_layout(cfg);
    const auto count = r.uint<std::uint64_t>();
    if (count != layout.size())
        throw IoError("checkpoint has " + std::to_string(count) + " tensors, config needs " +
                      std::to_string(layout.size()));

    ParameterStore<T> store;
    for (std::uint64_t n = 0; n < count; ++n) {
        const auto len = r.uint<std::uint32_t>();
        if (len == 0 || len > kMaxNameLength) throw IoError("checkpoint tensor name length " + std::to_string(len));
        std::string name(len, '\0');
        r.read(name.data(), len);
        const auto dtype = r.uint<std::uint8_t>();
        if (dtype != kF64 && dtype != kF32) throw IoError("tensor '" + name + "' has unknown dtype");
        const auto rank = r.uint<std::uint8_t>();
        if (rank < 1 || rank > kMaxRank) throw IoError("tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& e : shape) e = r.uint<std::uint64_t>();
        // compare against the layout before allocating anything
        const auto& expected = layout[n];
        if (name != expected.first || shape != expected.second)
            throw IoError("checkpoint tensor '" + name + "' " + to_string(shape) + " does not match expected '" +
                          expected.first + "' " + to_string(expected.second));
        Tensor<T> t(shape);
        for (auto& v : t.data()) v = static_cast<T>(dtype == kF64 ? r.f64() : static_cast<double>(r.f32()));
        if (!t.all_finite()) throw IoError("tensor '" + name + "' holds non-finite values");
        store.add(std::move(name), std::move(t));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after checkpoint");
    return ResCrNet<T>(cfg, std::move(store));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ResCrNet<T>& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    write_checkpoint(os, model);
    os.close();
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

template <typename T>
ResCrNet<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
    try {
        return read_checkpoint<T>(is);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

#define RESCR_INSTANTIATE_CHECKPOINT(T)                                           \
    template void write_checkpoint(std::ostream&, const ResCrNet<T>&);            \
    template ResCrNet<T> read_checkpoint<T>(std::istream&);                       \
    template void save_checkpoint(const std::filesystem::path&, const ResCrNet<T>&); \
    template ResCrNet<T> load_checkpoint<T>(const std::filesystem::path&);

RESCR_INSTANTIATE_CHECKPOINT(float)
RESCR_INSTANTIATE_CHECKPOINT(double)

}  // namespace rescr
