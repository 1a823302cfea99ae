#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lacoste/common.hpp"

namespace lacoste {

// 8-bit image, row-major HWC (c = 1 or 3).
struct ImageU8 {
    int64_t h = 0, w = 0, c = 0;
    std::vector<uint8_t> data;

    ImageU8() = default;
    ImageU8(int64_t h_, int64_t w_, int64_t c_)
        : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_ * w_ * c_), 0) {}
    uint8_t& at(int64_t y, int64_t x, int64_t ch) {
        return data[static_cast<size_t>((y * w + x) * c + ch)];
    }
    uint8_t at(int64_t y, int64_t x, int64_t ch) const {
        return data[static_cast<size_t>((y * w + x) * c + ch)];
    }
};

// 16-bit single-channel image (instance id maps).
struct ImageU16 {
    int64_t h = 0, w = 0;
    std::vector<uint16_t> data;

    ImageU16() = default;
    ImageU16(int64_t h_, int64_t w_) : h(h_), w(w_), data(static_cast<size_t>(h_ * w_), 0) {}
    uint16_t& at(int64_t y, int64_t x) { return data[static_cast<size_t>(y * w + x)]; }
    uint16_t at(int64_t y, int64_t x) const { return data[static_cast<size_t>(y * w + x)]; }
};

namespace io {

void save_png(const std::string& path, const ImageU8& img);
ImageU8 load_png(const std::string& path);

void save_png16(const std::string& path, const ImageU16& img);
ImageU16 load_png16(const std::string& path);

// Grayscale PFM ("Pf"), float32, scale -1.0 (little endian), rows bottom-up.
void save_pfm(const std::string& path, int64_t h, int64_t w, const std::vector<double>& data);
void load_pfm(const std::string& path, int64_t& h, int64_t& w, std::vector<double>& data);

// Valid masks as 8-bit PNG {0,255}.
void save_mask_png(const std::string& path, int64_t h, int64_t w,
                   const std::vector<uint8_t>& valid);
std::vector<uint8_t> load_mask_png(const std::string& path, int64_t& h, int64_t& w);

}  // namespace io
}  // namespace lacoste
