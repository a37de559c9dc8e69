#include "storynizor/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace storynizor {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_png_rows(const std::string& path, int width, int height, int color_type, int bit_depth,
                    const std::vector<std::vector<uint8_t>>& rows) {
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw std::runtime_error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path);
    }
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (const auto& row : rows) png_write_row(png, const_cast<png_bytep>(row.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::string& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3)
        throw std::invalid_argument("write_png: only gray or RGB images are supported");
    std::vector<std::vector<uint8_t>> rows(static_cast<size_t>(image.height));
    const size_t stride = static_cast<size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y)
        rows[y].assign(image.pixels.begin() + y * stride, image.pixels.begin() + (y + 1) * stride);
    write_png_rows(path, image.width, image.height, image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 8,
                   rows);
}

void write_mask_png(const std::string& path, const Image& mask) {
    if (mask.channels != 1) throw std::invalid_argument("write_mask_png: mask must have one channel");
    std::vector<std::vector<uint8_t>> rows(static_cast<size_t>(mask.height),
                                           std::vector<uint8_t>(static_cast<size_t>((mask.width + 7) / 8), 0));
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) rows[y][x / 8] |= static_cast<uint8_t>(0x80 >> (x % 8));
    write_png_rows(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, rows);
}

Image read_png(const std::string& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw std::runtime_error("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng failed reading " + path);
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    Image image(static_cast<int>(png_get_image_width(png, info)), static_cast<int>(png_get_image_height(png, info)),
                static_cast<int>(png_get_channels(png, info)));
    std::vector<png_bytep> rows(static_cast<size_t>(image.height));
    for (int y = 0; y < image.height; ++y)
        rows[y] = image.pixels.data() + static_cast<size_t>(y) * image.width * image.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return image;
}

Image read_mask_png(const std::string& path) {
    Image raw = read_png(path);
    Image mask(raw.width, raw.height, 1);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x) mask.at(x, y) = raw.at(x, y, 0) ? 1 : 0;
    return mask;
}

BoundingBox mask_bounds(const Image& mask) {
    BoundingBox box{mask.width, mask.height, -1, -1};
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) {
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.x1 = std::max(box.x1, x);
                box.y1 = std::max(box.y1, y);
            }
    return box;
}

Image resize_bilinear(const Image& image, int width, int height) {
    Image out(width, height, image.channels);
    auto tap = [](int o, int in, int outn) {
        double src = (o + 0.5) * in / outn - 0.5;
        return std::clamp(src, 0.0, static_cast<double>(in - 1));
    };
    for (int y = 0; y < height; ++y) {
        const double sy = tap(y, image.height, height);
        const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, image.height - 1);
        const double fy = sy - y0;
        for (int x = 0; x < width; ++x) {
            const double sx = tap(x, image.width, width);
            const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, image.width - 1);
            const double fx = sx - x0;
            for (int c = 0; c < image.channels; ++c) {
                const double v = (1 - fy) * ((1 - fx) * image.at(x0, y0, c) + fx * image.at(x1, y0, c)) +
                                 fy * ((1 - fx) * image.at(x0, y1, c) + fx * image.at(x1, y1, c));
                out.at(x, y, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

Image crop_resize(const Image& image, const BoundingBox& box, int margin, int size) {
    if (box.empty()) throw std::invalid_argument("crop_resize: empty bounding box");
    const int cx2 = box.x0 + box.x1, cy2 = box.y0 + box.y1;  // doubled centre
    int side = std::max(box.x1 - box.x0, box.y1 - box.y0) + 1 + 2 * margin;
    side = std::min(side, std::min(image.width, image.height));
    int x0 = std::clamp((cx2 + 1 - side) / 2, 0, image.width - side);
    int y0 = std::clamp((cy2 + 1 - side) / 2, 0, image.height - side);
    Image crop(side, side, image.channels);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < image.channels; ++c) crop.at(x, y, c) = image.at(x0 + x, y0 + y, c);
    return resize_bilinear(crop, size, size);
}

Tensor<float> images_to_tensor(const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("images_to_tensor: no images");
    const auto& f = images.front();
    Tensor<float> t({static_cast<int64_t>(images.size()), f.height, f.width, f.channels});
    size_t o = 0;
    for (const auto& im : images) {
        if (im.width != f.width || im.height != f.height || im.channels != f.channels)
            throw std::invalid_argument("images_to_tensor: images differ in size");
        for (uint8_t p : im.pixels) t.data[o++] = p / 127.5f - 1.0f;
    }
    return t;
}

std::vector<Image> tensor_to_images(const Tensor<float>& t) {
    if (t.rank() != 4) throw std::invalid_argument("tensor_to_images: expected [F, H, W, C]");
    const int h = static_cast<int>(t.dim(1)), w = static_cast<int>(t.dim(2)), c = static_cast<int>(t.dim(3));
    std::vector<Image> out;
    size_t o = 0;
    for (int64_t f = 0; f < t.dim(0); ++f) {
        Image im(w, h, c);
        for (auto& p : im.pixels) {
            const float v = std::clamp(t.data[o++], -1.0f, 1.0f);
            p = static_cast<uint8_t>(std::lround((v + 1.0f) * 127.5f));
        }
        out.push_back(std::move(im));
    }
    return out;
}

}  // namespace storynizor
