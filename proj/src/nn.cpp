#include "lacoste/nn.hpp"

#include <cmath>

namespace lacoste::nn {

Tensor positional_encoding_2d(int64_t h, int64_t w, int64_t dim) {
    if (dim % 4 != 0) throw argument_error("positional_encoding_2d: dim % 4 != 0");
    const int64_t quarter = dim / 4;
    Tensor pe({h * w, dim});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t row = y * w + x;
            for (int64_t i = 0; i < quarter; ++i) {
                const double freq =
                    std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
                pe.at2(row, 2 * i) = std::sin(static_cast<double>(y) * freq);
                pe.at2(row, 2 * i + 1) = std::cos(static_cast<double>(y) * freq);
                pe.at2(row, 2 * quarter + 2 * i) = std::sin(static_cast<double>(x) * freq);
                pe.at2(row, 2 * quarter + 2 * i + 1) = std::cos(static_cast<double>(x) * freq);
            }
        }
    return pe;
}

}  // namespace lacoste::nn
