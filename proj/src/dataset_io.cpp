#include "rescr/dataset_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <map>
#include <memory>
#include <ostream>
#include <set>

namespace rescr {

// ---------------------------------------------------------------------------
// PNG

namespace {

struct PngCtx {
    std::string error;
    std::FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    bool writing = false;
    std::vector<png_byte> buffer;
    std::vector<png_bytep> rows;

    ~PngCtx() {
        if (png) {
            if (writing)
                png_destroy_write_struct(&png, info ? &info : nullptr);
            else
                png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        }
        if (fp) std::fclose(fp);
    }
};

void on_png_error(png_structp png, png_const_charp msg) {
    auto* ctx = static_cast<PngCtx*>(png_get_error_ptr(png));
    ctx->error = msg ? msg : "unknown libpng error";
    png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

// libpng reports errors by longjmp; nothing with a destructor may be created
// between setjmp and the end of these functions.
bool read_png_c(PngCtx* ctx, PngImage* out) {
    if (setjmp(png_jmpbuf(ctx->png))) return false;
    png_init_io(ctx->png, ctx->fp);
    png_read_info(ctx->png, ctx->info);

    const int color = png_get_color_type(ctx->png, ctx->info);
    const int depth = png_get_bit_depth(ctx->png, ctx->info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx->png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(ctx->png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(ctx->png);
    png_set_interlace_handling(ctx->png);
    png_read_update_info(ctx->png, ctx->info);

    out->width = png_get_image_width(ctx->png, ctx->info);
    out->height = png_get_image_height(ctx->png, ctx->info);
    out->channels = png_get_channels(ctx->png, ctx->info);
    out->bit_depth = png_get_bit_depth(ctx->png, ctx->info);
    const std::size_t rowbytes = png_get_rowbytes(ctx->png, ctx->info);
    ctx->buffer.resize(rowbytes * out->height);
    ctx->rows.resize(out->height);
    for (std::size_t r = 0; r < out->height; ++r) ctx->rows[r] = ctx->buffer.data() + r * rowbytes;
    png_read_image(ctx->png, ctx->rows.data());
    png_read_end(ctx->png, nullptr);
    return true;
}

bool write_png_c(PngCtx* ctx, const PngImage* img) {
    if (setjmp(png_jmpbuf(ctx->png))) return false;
    png_init_io(ctx->png, ctx->fp);
    png_set_IHDR(ctx->png, ctx->info, static_cast<png_uint_32>(img->width), static_cast<png_uint_32>(img->height),
                 img->bit_depth, img->channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx->png, ctx->info);
    png_write_image(ctx->png, ctx->rows.data());
    png_write_end(ctx->png, nullptr);
    return true;
}

}  // namespace

PngImage read_png(const std::filesystem::path& path) {
    auto ctx = std::make_unique<PngCtx>();
    ctx->fp = std::fopen(path.string().c_str(), "rb");
    if (!ctx->fp) throw IoError("cannot open '" + path.string() + "'");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, ctx->fp) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError("'" + path.string() + "' is not a PNG file");
    std::rewind(ctx->fp);

    ctx->png = png_create_read_struct(PNG_LIBPNG_VER_STRING, ctx.get(), on_png_error, on_png_warning);
    if (!ctx->png) throw IoError("libpng initialisation failed");
    ctx->info = png_create_info_struct(ctx->png);
    if (!ctx->info) throw IoError("libpng initialisation failed");

    PngImage img;
    if (!read_png_c(ctx.get(), &img)) throw IoError("cannot decode '" + path.string() + "': " + ctx->error);
    if (img.channels != 1 && img.channels != 3)
        throw IoError("'" + path.string() + "' decoded to " + std::to_string(img.channels) + " channels");

    const std::size_t n = img.height * img.width * img.channels;
    img.samples.resize(n);
    if (img.bit_depth == 16) {
        for (std::size_t i = 0; i < n; ++i)
            img.samples[i] = static_cast<std::uint16_t>((ctx->buffer[2 * i] << 8) | ctx->buffer[2 * i + 1]);
    } else {
        for (std::size_t i = 0; i < n; ++i) img.samples[i] = ctx->buffer[i];
    }
    return img;
}

void write_png(const std::filesystem::path& path, const PngImage& image) {
    if (image.channels != 1 && image.channels != 3) throw ValueError("PNG output needs 1 or 3 channels");
    if (image.bit_depth != 8 && image.bit_depth != 16) throw ValueError("PNG output needs 8 or 16 bits");
    if (image.height == 0 || image.width == 0) throw ValueError("PNG output has zero size");
    const std::size_t n = image.height * image.width * image.channels;
    if (image.samples.size() != n) throw ShapeError("PNG sample count does not match its dimensions");

    auto ctx = std::make_unique<PngCtx>();
    ctx->writing = true;
    const std::size_t bytes = image.bit_depth == 16 ? 2 : 1;
    ctx->buffer.resize(n * bytes);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = image.samples[i];
        if (v > image.max_value()) throw ValueError("PNG sample exceeds its bit depth");
        if (bytes == 2) {
            ctx->buffer[2 * i] = static_cast<png_byte>(v >> 8);
            ctx->buffer[2 * i + 1] = static_cast<png_byte>(v & 0xff);
        } else {
            ctx->buffer[i] = static_cast<png_byte>(v);
        }
    }
    const std::size_t rowbytes = image.width * image.channels * bytes;
    ctx->rows.resize(image.height);
    for (std::size_t r = 0; r < image.height; ++r) ctx->rows[r] = ctx->buffer.data() + r * rowbytes;

    ctx->fp = std::fopen(path.string().c_str(), "wb");
    if (!ctx->fp) throw IoError("cannot open '" + path.string() + "' for writing");
    ctx->png = png_create_write_struct(PNG_LIBPNG_VER_STRING, ctx.get(), on_png_error, on_png_warning);
    if (!ctx->png) throw IoError("libpng initialisation failed");
    ctx->info = png_create_info_struct(ctx->png);
    if (!ctx->info) throw IoError("libpng initialisation failed");
    if (!write_png_c(ctx.get(), &image)) throw IoError("cannot encode '" + path.string() + "': " + ctx->error);
    if (std::fclose(ctx->fp) != 0) {
        ctx->fp = nullptr;
        throw IoError("failed writing '" + path.string() + "'");
    }
    ctx->fp = nullptr;
}

Tensor<double> image_to_tensor(const PngImage& image) {
    Tensor<double> t(Shape{image.height, image.width, image.channels});
    const double scale = image.max_value();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = image.samples[i] / scale;
    return t;
}

PngImage tensor_to_image(const Tensor<double>& t) {
    if (t.rank() != 3 || (t.dim(2) != 1 && t.dim(2) != 3))
        throw ShapeError("image tensor must be [H,W,1] or [H,W,3], got " + to_string(t.shape()));
    PngImage img{t.dim(0), t.dim(1), t.dim(2), 8, std::vector<std::uint16_t>(t.size())};
    for (std::size_t i = 0; i < t.size(); ++i)
        img.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * 255.0));
    return img;
}

// ---------------------------------------------------------------------------
// palette and mask codec

std::vector<std::string> ClassPalette::names() const {
    std::vector<std::string> out;
    for (const auto& e : entries) out.push_back(e.name);
    return out;
}

void ClassPalette::validate() const {
    if (entries.empty()) throw ValueError("palette is empty");
    std::set<Rgb> colors;
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (e.name.empty()) throw ValueError("palette class with an empty name");
        if (!seen.insert(e.name).second) throw ValueError("palette class '" + e.name + "' appears twice");
        if (!colors.insert(e.color).second) throw ValueError("palette color of '" + e.name + "' is not unique");
    }
}

ClassPalette ClassPalette::rgb3() {
    return ClassPalette{{{"red", {255, 0, 0}}, {"green", {0, 255, 0}}, {"blue", {0, 0, 255}}}};
}

DecodedMask decode_mask(const PngImage& png, const ClassPalette& palette, const MaskDecodeOptions& opts) {
    palette.validate();
    const std::size_t H = png.height, W = png.width, K = palette.size();
    if (png.channels != 1 && png.channels != 3) throw ShapeError("mask PNG must be gray or RGB");
    DecodedMask out{Tensor<double>(Shape{H, W, K})};
    const int shift = png.bit_depth == 16 ? 8 : 0;
    const double far2 = opts.far_distance * opts.far_distance;
    for (std::size_t p = 0; p < H * W; ++p) {
        int rgb[3];
        for (int c = 0; c < 3; ++c)
            rgb[c] = png.samples[p * png.channels + (png.channels == 3 ? c : 0)] >> shift;
        std::size_t best = 0;
        double best_d2 = 0;
        for (std::size_t k = 0; k < K; ++k) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = rgb[c] - palette.entries[k].color[c];
                d2 += d * d;
            }
            if (k == 0 || d2 < best_d2) {
                best = k;
                best_d2 = d2;
            }
        }
        if (opts.exact_only && best_d2 != 0)
            throw ValueError("mask pixel (" + std::to_string(p / W) + "," + std::to_string(p % W) + ") color (" +
                             std::to_string(rgb[0]) + "," + std::to_string(rgb[1]) + "," + std::to_string(rgb[2]) +
                             ") is not in the palette");
        if (best_d2 > far2) ++out.far_pixels;
        out.onehot[p * K + best] = 1.0;
    }
    out.far_warning = double(out.far_pixels) > opts.far_fraction * double(H * W);
    return out;
}

namespace {

template <typename T>
PngImage encode_labels(const Tensor<T>& t, const ClassPalette& palette, bool require_onehot) {
    palette.validate();
    if (t.rank() != 3) throw ShapeError("expected [H,W,K], got " + to_string(t.shape()));
    const std::size_t H = t.dim(0), W = t.dim(1), K = t.dim(2);
    if (K != palette.size())
        throw ShapeError("tensor has " + std::to_string(K) + " classes, palette has " + std::to_string(palette.size()));
    PngImage img{H, W, 3, 8, std::vector<std::uint16_t>(H * W * 3)};
    for (std::size_t p = 0; p < H * W; ++p) {
        const T* v = &t[p * K];
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (v[k] > v[best]) best = k;
        if (require_onehot) {
            for (std::size_t k = 0; k < K; ++k)
                if (v[k] != (k == best ? T(1) : T(0)))
                    throw ValueError("mask is not one-hot at pixel (" + std::to_string(p / W) + "," +
                                     std::to_string(p % W) + ")");
        }
        for (int c = 0; c < 3; ++c) img.samples[p * 3 + c] = palette.entries[best].color[c];
    }
    return img;
}

std::string lower(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
}

// stem -> path for every *.png in `dir`
std::map<std::string, std::filesystem::path> png_files(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("'" + dir.string() + "' is not a directory");
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || lower(entry.path().extension().string()) != ".png") continue;
        const auto stem = entry.path().stem().string();
        if (!out.emplace(stem, entry.path()).second)
            throw IoError("two PNG files in '" + dir.string() + "' share the stem '" + stem + "'");
    }
    if (out.empty()) throw IoError("no PNG files in '" + dir.string() + "' (empty dataset)");
    return out;
}

}  // namespace

PngImage encode_mask(const Tensor<double>& onehot, const ClassPalette& palette) {
    return encode_labels(onehot, palette, true);
}

template <typename T>
PngImage encode_prediction(const Tensor<T>& probs, const ClassPalette& palette) {
    return encode_labels(probs, palette, false);
}

template PngImage encode_prediction(const Tensor<float>&, const ClassPalette&);
template PngImage encode_prediction(const Tensor<double>&, const ClassPalette&);

// ---------------------------------------------------------------------------
// datasets

SegDataset load_dataset(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                        const ClassPalette& palette, const MaskDecodeOptions& opts, std::ostream* warn) {
    palette.validate();
    const auto images = png_files(images_dir);
    const auto masks = png_files(masks_dir);
    for (const auto& [stem, path] : images)
        if (!masks.count(stem)) throw IoError("image '" + path.string() + "' has no mask with the same stem");
    for (const auto& [stem, path] : masks)
        if (!images.count(stem)) throw IoError("mask '" + path.string() + "' has no image with the same stem");

    SegDataset ds{{}, palette};
    for (const auto& [stem, image_path] : images) {
        auto image = image_to_tensor(read_png(image_path));
        auto decoded = decode_mask(read_png(masks.at(stem)), palette, opts);
        if (image.dim(0) != decoded.onehot.dim(0) || image.dim(1) != decoded.onehot.dim(1))
            throw ShapeError("'" + stem + "': image is " + std::to_string(image.dim(0)) + "x" +
                             std::to_string(image.dim(1)) + " but mask is " + std::to_string(decoded.onehot.dim(0)) +
                             "x" + std::to_string(decoded.onehot.dim(1)));
        if (decoded.far_warning && warn)
            *warn << "warning: mask '" << stem << "': " << decoded.far_pixels
                  << " pixels are far from every palette color\n";
        ds.items.push_back(Sample{std::move(image), std::move(decoded.onehot), stem});
    }
    return ds;
}

std::vector<Sample> load_images(const std::filesystem::path& images_dir) {
    std::vector<Sample> out;
    for (const auto& [stem, path] : png_files(images_dir))
        out.push_back(Sample{image_to_tensor(read_png(path)), Tensor<double>(), stem});
    return out;
}

}  // namespace rescr
