#include "lacoste/imageio.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace lacoste::io {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWrite() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngRead() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

void write_png_impl(const std::string& path, int64_t h, int64_t w, int color_type,
                    int bit_depth, const std::vector<png_bytep>& rows) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw data_error("png: cannot open for write: " + path);
    PngWrite ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw data_error("png: writer alloc failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw data_error("png: info alloc failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw data_error("png: write error: " + path);
    png_init_io(ctx.png, f.get());
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    if (bit_depth == 16) png_set_swap(ctx.png);  // in-memory little endian
    png_write_image(ctx.png, const_cast<png_bytepp>(rows.data()));
    png_write_end(ctx.png, nullptr);
}

}  // namespace

void save_png(const std::string& path, const ImageU8& img) {
    if (img.c != 1 && img.c != 3) throw argument_error("save_png: channels must be 1 or 3");
    std::vector<png_bytep> rows(static_cast<size_t>(img.h));
    for (int64_t y = 0; y < img.h; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(img.data.data() + y * img.w * img.c);
    write_png_impl(path, img.h, img.w,
                   img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8, rows);
}

ImageU8 load_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw data_error("png: cannot open: " + path);
    PngRead ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw data_error("png: reader alloc failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw data_error("png: info alloc failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw data_error("png: read error: " + path);
    png_init_io(ctx.png, f.get());
    png_read_info(ctx.png, ctx.info);
    png_set_strip_16(ctx.png);
    png_set_palette_to_rgb(ctx.png);
    png_set_expand_gray_1_2_4_to_8(ctx.png);
    png_set_strip_alpha(ctx.png);
    png_read_update_info(ctx.png, ctx.info);
    const int64_t h = png_get_image_height(ctx.png, ctx.info);
    const int64_t w = png_get_image_width(ctx.png, ctx.info);
    const int ch = png_get_channels(ctx.png, ctx.info);
    if (ch != 1 && ch != 3) throw data_error("png: unsupported channel count in " + path);
    ImageU8 img(h, w, ch);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] = img.data.data() + y * w * ch;
    png_read_image(ctx.png, rows.data());
    return img;
}

void save_png16(const std::string& path, const ImageU16& img) {
    std::vector<png_bytep> rows(static_cast<size_t>(img.h));
    for (int64_t y = 0; y < img.h; ++y)
        rows[static_cast<size_t>(y)] =
            reinterpret_cast<png_bytep>(const_cast<uint16_t*>(img.data.data() + y * img.w));
    write_png_impl(path, img.h, img.w, PNG_COLOR_TYPE_GRAY, 16, rows);
}

ImageU16 load_png16(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw data_error("png: cannot open: " + path);
    PngRead ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw data_error("png: reader alloc failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw data_error("png: info alloc failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw data_error("png: read error: " + path);
    png_init_io(ctx.png, f.get());
    png_read_info(ctx.png, ctx.info);
    if (png_get_bit_depth(ctx.png, ctx.info) != 16 ||
        png_get_color_type(ctx.png, ctx.info) != PNG_COLOR_TYPE_GRAY)
        throw data_error("png: expected 16-bit grayscale: " + path);
    png_set_swap(ctx.png);
    png_read_update_info(ctx.png, ctx.info);
    const int64_t h = png_get_image_height(ctx.png, ctx.info);
    const int64_t w = png_get_image_width(ctx.png, ctx.info);
    ImageU16 img(h, w);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] = reinterpret_cast<png_bytep>(img.data.data() + y * w);
    png_read_image(ctx.png, rows.data());
    return img;
}

void save_pfm(const std::string& path, int64_t h, int64_t w, const std::vector<double>& data) {
    if (static_cast<int64_t>(data.size()) != h * w)
        throw argument_error("save_pfm: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("pfm: cannot open for write: " + path);
    out << "Pf\n" << w << " " << h << "\n-1.0\n";
    std::vector<float> row(static_cast<size_t>(w));
    for (int64_t y = h - 1; y >= 0; --y) {  // PFM rows run bottom-up
        for (int64_t x = 0; x < w; ++x)
            row[static_cast<size_t>(x)] = static_cast<float>(data[static_cast<size_t>(y * w + x)]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
}

void load_pfm(const std::string& path, int64_t& h, int64_t& w, std::vector<double>& data) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("pfm: cannot open: " + path);
    std::string magic;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (magic != "Pf" || w <= 0 || h <= 0) throw data_error("pfm: malformed header: " + path);
    if (scale >= 0.0) throw data_error("pfm: big-endian files unsupported: " + path);
    in.get();  // single whitespace after header
    data.assign(static_cast<size_t>(h * w), 0.0);
    std::vector<float> row(static_cast<size_t>(w));
    for (int64_t y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!in) throw data_error("pfm: short read: " + path);
        for (int64_t x = 0; x < w; ++x)
            data[static_cast<size_t>(y * w + x)] = row[static_cast<size_t>(x)];
    }
}

void save_mask_png(const std::string& path, int64_t h, int64_t w,
                   const std::vector<uint8_t>& valid) {
    if (static_cast<int64_t>(valid.size()) != h * w)
        throw argument_error("save_mask_png: size mismatch");
    ImageU8 img(h, w, 1);
    for (size_t i = 0; i < valid.size(); ++i) img.data[i] = valid[i] ? 255 : 0;
    save_png(path, img);
}

std::vector<uint8_t> load_mask_png(const std::string& path, int64_t& h, int64_t& w) {
    ImageU8 img = load_png(path);
    if (img.c != 1) throw data_error("mask png: expected grayscale: " + path);
    h = img.h;
    w = img.w;
    std::vector<uint8_t> valid(img.data.size());
    for (size_t i = 0; i < valid.size(); ++i) valid[i] = img.data[i] >= 128 ? 1 : 0;
    return valid;
}

}  // namespace lacoste::io
