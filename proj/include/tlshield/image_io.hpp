#pragma once

#include <cstdio>
#include <filesystem>

#include <png.h>

#include "tlshield/dataset.hpp"

namespace tlshield {

// PNG read/write via libpng. Images normalize to [0,1]; grayscale PNGs load
// as 1 channel, color as 3.
inline Tensor read_png(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng init failure");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("unreadable PNG file: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info), depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    std::size_t channels = png_get_channels(png, info);
    std::vector<std::uint8_t> row(w * channels);
    Tensor img(Shape{channels, h, w});
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t c = 0; c < channels; ++c)
            for (png_uint_32 x = 0; x < w; ++x)
                img.data[c * h * w + y * w + x] = static_cast<float>(row[x * channels + c]) / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

inline void write_png(const Tensor& img, const std::string& path) {
    if (img.shape.size() != 3 || (img.shape[0] != 1 && img.shape[0] != 3))
        throw std::invalid_argument("write_png expects (1|3,H,W)");
    std::size_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("PNG write failure: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<std::uint8_t> row(W * C);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t x = 0; x < W; ++x)
                row[x * C + c] = static_cast<std::uint8_t>(
                    std::clamp(img.data[c * H * W + y * W + x], 0.0f, 1.0f) * 255.0f + 0.5f);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// Directory layout: one subdirectory per class, PNG images inside. Classes are
// labeled 1..K in lexicographic subdirectory order.
inline LabeledDataset ingest_dataset(const std::string& directory) {
    namespace fs = std::filesystem;
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(directory))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw std::runtime_error("no class subdirectories in " + directory);

    LabeledDataset ds;
    ds.num_classes = static_cast<int>(class_dirs.size());
    int label = 0;
    for (const fs::path& dir : class_dirs) {
        ++label;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files) {
            Tensor img = read_png(f.string());
            if (ds.images.empty()) {
                ds.channels = img.shape[0];
                ds.height = img.shape[1];
                ds.width = img.shape[2];
            } else if (img.shape != ds.image_shape()) {
                throw std::runtime_error("inconsistent image size: " + f.string());
            }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(label);
        }
    }
    if (ds.images.empty()) throw std::runtime_error("no PNG images found under " + directory);
    return ds;
}

}  // namespace tlshield
