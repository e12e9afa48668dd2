#include "rescr/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace rescr {

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        out.emplace_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

IniDocument IniDocument::parse(std::string_view text, std::string source) {
    IniDocument doc{std::move(source), {}};
    auto fail = [&](std::size_t line, const std::string& msg) {
        throw ConfigError(doc.source + ":" + std::to_string(line) + ": " + msg);
    };
    std::set<std::string> section_names;
    std::set<std::string> keys;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;

        auto line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(line_no, "unterminated section header");
            std::string name(trim(line.substr(1, line.size() - 2)));
            if (name.empty()) fail(line_no, "empty section name");
            if (!section_names.insert(name).second) fail(line_no, "section [" + name + "] appears twice");
            doc.sections.push_back(IniSection{name, line_no, {}});
            keys.clear();
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) fail(line_no, "expected 'key = value'");
        std::string key(trim(line.substr(0, eq)));
        std::string value(trim(line.substr(eq + 1)));
        if (key.empty()) fail(line_no, "missing key before '='");
        if (doc.sections.empty()) {
            doc.sections.push_back(IniSection{"", line_no, {}});
            section_names.insert("");
        }
        if (!keys.insert(key).second)
            fail(line_no, "key '" + key + "' repeated in [" + doc.sections.back().name + "]");
        doc.sections.back().entries.push_back(IniEntry{std::move(key), std::move(value), line_no});
    }
    return doc;
}

IniDocument IniDocument::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read config '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
}

void OptimizerConfig::validate() const {
    if (kind != "adam" && kind != "sgd") throw ConfigError("optimizer kind must be 'adam' or 'sgd', got '" + kind + "'");
    if (!(learning_rate > 0 && std::isfinite(learning_rate))) throw ConfigError("learning_rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta1 and beta2 must lie in [0,1)");
    if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
}

// ---------------------------------------------------------------------------

namespace {

class Binder {
public:
    Binder(const IniDocument& doc, const IniSection& sec, const IniEntry& e) : doc_(doc), sec_(sec), e_(e) {}

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError(doc_.source + ":" + std::to_string(e_.line) + ": [" + sec_.name + "] " + e_.key + ": " +
                          msg);
    }

    double real(std::string_view s) const {
        double v = 0;
        const auto* end = s.data() + s.size();
        auto [p, ec] = std::from_chars(s.data(), end, v);
        if (ec != std::errc() || p != end || !std::isfinite(v)) fail("'" + std::string(s) + "' is not a finite number");
        return v;
    }
    double real() const { return real(e_.value); }

    std::uint64_t integer(std::string_view s) const {
        std::uint64_t v = 0;
        const auto* end = s.data() + s.size();
        auto [p, ec] = std::from_chars(s.data(), end, v);
        if (ec != std::errc() || p != end) fail("'" + std::string(s) + "' is not a non-negative integer");
        return v;
    }
    std::uint64_t integer() const { return integer(e_.value); }

    bool boolean() const {
        const auto& v = e_.value;
        if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
        if (v == "false" || v == "no" || v == "off" || v == "0") return false;
        fail("'" + v + "' is not a boolean");
    }

    std::vector<std::string> list(std::size_t n) const {
        auto parts = split_list(e_.value);
        if (n && parts.size() != n) fail("expected " + std::to_string(n) + " comma-separated values");
        return parts;
    }

    Range range() const {
        auto p = list(2);
        Range r{real(p[0]), real(p[1])};
        if (r.lo > r.hi) fail("range is inverted");
        return r;
    }

    std::array<std::size_t, 3> triple() const {
        auto p = list(3);
        return {integer(p[0]), integer(p[1]), integer(p[2])};
    }

    const std::string& text() const { return e_.value; }
    const IniEntry& entry() const { return e_; }

private:
    const IniDocument& doc_;
    const IniSection& sec_;
    const IniEntry& e_;
};

using Handler = std::function<void(const Binder&)>;

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() ? (base / path).lexically_normal() : path;
}

std::string fmt_real(double v) {
    // shortest text that parses back to the same double
    char buf[40];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

RunConfig RunConfig::from_ini(const IniDocument& doc, const std::filesystem::path& base_dir) {
    RunConfig c;
    bool num_classes_set = false, palette_set = false;
    std::size_t num_classes_line = 0;
    NetworkConfig& n = c.network;

    std::map<std::string, std::map<std::string, Handler>> table;
    table["network"] = {
        {"n_conv_blocks", [&](const Binder& b) { n.n_conv_blocks = b.integer(); }},
        {"n_lstm_blocks", [&](const Binder& b) { n.n_lstm_blocks = b.integer(); }},
        {"filters_per_branch", [&](const Binder& b) { n.filters_per_branch = b.integer(); }},
        {"kernel_sizes", [&](const Binder& b) { n.kernel_sizes = b.triple(); }},
        {"dilation_rates", [&](const Binder& b) { n.dilation_rates = b.triple(); }},
        {"branch_merge",
         [&](const Binder& b) {
             try {
                 n.branch_merge = parse_branch_merge(b.text());
             } catch (const ConfigError& e) {
                 b.fail(e.what());
             }
         }},
        {"dropout_rate", [&](const Binder& b) { n.dropout_rate = b.real(); }},
        {"num_classes",
         [&](const Binder& b) {
             n.num_classes = b.integer();
             num_classes_set = true;
             num_classes_line = b.entry().line;
         }},
        {"leaky_alpha", [&](const Binder& b) { n.leaky_alpha = b.real(); }},
        {"input_channels", [&](const Binder& b) { n.input_channels = b.integer(); }},
    };
    table["loss"] = {
        {"smooth", [&](const Binder& b) { c.loss.smooth = b.real(); }},
        {"class_weights",
         [&](const Binder& b) {
             c.loss.class_weights.clear();
             for (const auto& s : b.list(0)) c.loss.class_weights.push_back(b.real(s));
         }},
        {"contour_weighting", [&](const Binder& b) { c.loss.contour_weighting = b.boolean(); }},
        {"contour_sigma", [&](const Binder& b) { c.loss.contour_sigma = b.real(); }},
        {"contour_w0", [&](const Binder& b) { c.loss.contour_w0 = b.real(); }},
    };
    table["augment"] = {
        {"enabled", [&](const Binder& b) { c.augment_enabled = b.boolean(); }},
        {"rotation_deg", [&](const Binder& b) { c.augment.rotation_deg = b.range(); }},
        {"shear_deg", [&](const Binder& b) { c.augment.shear_deg = b.range(); }},
        {"shift_x", [&](const Binder& b) { c.augment.shift_x = b.range(); }},
        {"shift_y", [&](const Binder& b) { c.augment.shift_y = b.range(); }},
        {"scale", [&](const Binder& b) { c.augment.scale = b.range(); }},
        {"flip_h_prob", [&](const Binder& b) { c.augment.flip_h_prob = b.real(); }},
        {"flip_v_prob", [&](const Binder& b) { c.augment.flip_v_prob = b.real(); }},
    };
    table["optimizer"] = {
        {"kind", [&](const Binder& b) { c.optimizer.kind = b.text(); }},
        {"learning_rate", [&](const Binder& b) { c.optimizer.learning_rate = b.real(); }},
        {"beta1", [&](const Binder& b) { c.optimizer.beta1 = b.real(); }},
        {"beta2", [&](const Binder& b) { c.optimizer.beta2 = b.real(); }},
        {"epsilon", [&](const Binder& b) { c.optimizer.epsilon = b.real(); }},
        {"momentum", [&](const Binder& b) { c.optimizer.momentum = b.real(); }},
    };
    table["mask"] = {
        {"exact_only", [&](const Binder& b) { c.mask_decode.exact_only = b.boolean(); }},
        {"far_distance", [&](const Binder& b) { c.mask_decode.far_distance = b.real(); }},
        {"far_fraction", [&](const Binder& b) { c.mask_decode.far_fraction = b.real(); }},
    };
    table["data"] = {
        {"train_images", [&](const Binder& b) { c.train_images = resolve(base_dir, b.text()); }},
        {"train_masks", [&](const Binder& b) { c.train_masks = resolve(base_dir, b.text()); }},
        {"val_images", [&](const Binder& b) { c.val_images = resolve(base_dir, b.text()); }},
        {"val_masks", [&](const Binder& b) { c.val_masks = resolve(base_dir, b.text()); }},
    };
    table["train"] = {
        {"epochs", [&](const Binder& b) { c.epochs = b.integer(); }},
        {"steps_per_epoch", [&](const Binder& b) { c.steps_per_epoch = b.integer(); }},
        {"seed", [&](const Binder& b) { c.seed = b.integer(); }},
        {"output_dir", [&](const Binder& b) { c.output_dir = resolve(base_dir, b.text()); }},
        {"precision",
         [&](const Binder& b) {
             if (b.text() == "float64")
                 c.precision = Precision::float64;
             else if (b.text() == "float32")
                 c.precision = Precision::float32;
             else
                 b.fail("precision must be 'float64' or 'float32'");
         }},
    };

    for (const auto& sec : doc.sections) {
        auto fail_section = [&](const std::string& msg) {
            throw ConfigError(doc.source + ":" + std::to_string(sec.line) + ": " + msg);
        };
        if (sec.name == "palette") {
            c.palette.entries.clear();
            palette_set = true;
            for (const auto& e : sec.entries) {
                Binder b(doc, sec, e);
                auto parts = b.list(3);
                ClassPalette::Entry entry{e.key, {}};
                for (int k = 0; k < 3; ++k) {
                    const auto v = b.integer(parts[k]);
                    if (v > 255) b.fail("color components must lie in 0..255");
                    entry.color[k] = static_cast<std::uint8_t>(v);
                }
                c.palette.entries.push_back(entry);
            }
            try {
                c.palette.validate();
            } catch (const ValueError& e) {
                fail_section(e.what());
            }
            continue;
        }
        auto it = table.find(sec.name);
        if (it == table.end()) fail_section("unknown section [" + sec.name + "]");
        for (const auto& e : sec.entries) {
            Binder b(doc, sec, e);
            auto h = it->second.find(e.key);
            if (h == it->second.end()) b.fail("unknown key");
            h->second(b);
        }
    }

    if (palette_set && !num_classes_set) n.num_classes = c.palette.size();
    if (num_classes_set && n.num_classes != c.palette.size())
        throw ConfigError(doc.source + ":" + std::to_string(num_classes_line) + ": num_classes is " +
                          std::to_string(n.num_classes) + " but the palette has " +
                          std::to_string(c.palette.size()) + " colors");
    try {
        c.validate();
    } catch (const Error& e) {
        throw ConfigError(doc.source + ": " + e.what());
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    return from_ini(IniDocument::load(path), path.parent_path());
}

void RunConfig::validate() const {
    network.validate();
    palette.validate();
    if (palette.size() != network.num_classes)
        throw ConfigError("palette has " + std::to_string(palette.size()) + " colors, network has " +
                          std::to_string(network.num_classes) + " classes");
    loss.validate(network.num_classes);
    augment.validate();
    optimizer.validate();
    if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
    if (train_images.empty() != train_masks.empty())
        throw ConfigError("train_images and train_masks must be given together");
    if (val_images.empty() != val_masks.empty()) throw ConfigError("val_images and val_masks must be given together");
    if (!(mask_decode.far_distance >= 0) || !(mask_decode.far_fraction >= 0 && mask_decode.far_fraction <= 1))
        throw ConfigError("mask far_distance must be >= 0 and far_fraction in [0,1]");
}

std::string RunConfig::to_ini() const {
    std::ostringstream os;
    auto range = [](const Range& r) { return fmt_real(r.lo) + ", " + fmt_real(r.hi); };
    auto triple = [](const std::array<std::size_t, 3>& t) {
        return std::to_string(t[0]) + ", " + std::to_string(t[1]) + ", " + std::to_string(t[2]);
    };
    os << "[network]\n"
       << "n_conv_blocks = " << network.n_conv_blocks << "\n"
       << "n_lstm_blocks = " << network.n_lstm_blocks << "\n"
       << "filters_per_branch = " << network.filters_per_branch << "\n"
       << "kernel_sizes = " << triple(network.kernel_sizes) << "\n"
       << "dilation_rates = " << triple(network.dilation_rates) << "\n"
       << "branch_merge = " << to_string(network.branch_merge) << "\n"
       << "dropout_rate = " << fmt_real(network.dropout_rate) << "\n"
       << "num_classes = " << network.num_classes << "\n"
       << "leaky_alpha = " << fmt_real(network.leaky_alpha) << "\n"
       << "input_channels = " << network.input_channels << "\n\n";
    os << "[loss]\n"
       << "smooth = " << fmt_real(loss.smooth) << "\n";
    if (!loss.class_weights.empty()) {
        os << "class_weights = ";
        for (std::size_t k = 0; k < loss.class_weights.size(); ++k)
            os << (k ? ", " : "") << fmt_real(loss.class_weights[k]);
        os << "\n";
    }
    os << "contour_weighting = " << (loss.contour_weighting ? "true" : "false") << "\n"
       << "contour_sigma = " << fmt_real(loss.contour_sigma) << "\n"
       << "contour_w0 = " << fmt_real(loss.contour_w0) << "\n\n";
    os << "[augment]\n"
       << "enabled = " << (augment_enabled ? "true" : "false") << "\n"
       << "rotation_deg = " << range(augment.rotation_deg) << "\n"
       << "shear_deg = " << range(augment.shear_deg) << "\n"
       << "shift_x = " << range(augment.shift_x) << "\n"
       << "shift_y = " << range(augment.shift_y) << "\n"
       << "scale = " << range(augment.scale) << "\n"
       << "flip_h_prob = " << fmt_real(augment.flip_h_prob) << "\n"
       << "flip_v_prob = " << fmt_real(augment.flip_v_prob) << "\n\n";
    os << "[optimizer]\n"
       << "kind = " << optimizer.kind << "\n"
       << "learning_rate = " << fmt_real(optimizer.learning_rate) << "\n"
       << "beta1 = " << fmt_real(optimizer.beta1) << "\n"
       << "beta2 = " << fmt_real(optimizer.beta2) << "\n"
       << "epsilon = " << fmt_real(optimizer.epsilon) << "\n"
       << "momentum = " << fmt_real(optimizer.momentum) << "\n\n";
    os << "[palette]\n";
    for (const auto& e : palette.entries)
        os << e.name << " = " << int(e.color[0]) << ", " << int(e.color[1]) << ", " << int(e.color[2]) << "\n";
    os << "\n[mask]\n"
       << "exact_only = " << (mask_decode.exact_only ? "true" : "false") << "\n"
       << "far_distance = " << fmt_real(mask_decode.far_distance) << "\n"
       << "far_fraction = " << fmt_real(mask_decode.far_fraction) << "\n\n";
    os << "[data]\n";
    if (!train_images.empty())
        os << "train_images = " << train_images.string() << "\n"
           << "train_masks = " << train_masks.string() << "\n";
    if (!val_images.empty())
        os << "val_images = " << val_images.string() << "\n"
           << "val_masks = " << val_masks.string() << "\n";
    os << "\n[train]\n"
       << "epochs = " << epochs << "\n"
       << "steps_per_epoch = " << steps_per_epoch << "\n"
       << "seed = " << seed << "\n"
       << "output_dir = " << output_dir.string() << "\n"
       << "precision = " << (precision == Precision::float64 ? "float64" : "float32") << "\n";
    return os.str();
}

}  // namespace rescr
