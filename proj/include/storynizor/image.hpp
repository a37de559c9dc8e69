#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "storynizor/tensor.hpp"

namespace storynizor {

// 8-bit interleaved image. Masks use one channel with values 0 or 1.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, fill) {}

    uint8_t& at(int x, int y, int c = 0) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
    uint8_t at(int x, int y, int c = 0) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
    bool operator==(const Image&) const = default;
};

struct BoundingBox {
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
    bool empty() const { return x1 < x0 || y1 < y0; }
};

// Grayscale (1 channel) or RGB (3 channel) 8-bit PNG.
void write_png(const std::string& path, const Image& image);
// Binary mask (values 0/1) stored as a 1-bit grayscale PNG.
void write_mask_png(const std::string& path, const Image& mask);
// Returns 8-bit gray or RGB; 1-bit files expand to 0/255.
Image read_png(const std::string& path);
// Reads a mask PNG and maps nonzero pixels to 1.
Image read_mask_png(const std::string& path);

BoundingBox mask_bounds(const Image& mask);
// Square crop around `box` with `margin` pixels, clamped to the image, resized
// bilinearly to size x size.
Image crop_resize(const Image& image, const BoundingBox& box, int margin, int size);
Image resize_bilinear(const Image& image, int width, int height);

// Stack equally sized images into [F, H, W, C] with values mapped to [-1, 1].
Tensor<float> images_to_tensor(const std::vector<Image>& images);
// Inverse of images_to_tensor; values are clipped to [-1, 1] and rounded.
std::vector<Image> tensor_to_images(const Tensor<float>& t);

}  // namespace storynizor
