#pragma once
// RGB images in [0,1], stored height x width x 3 interleaved.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace idfuse {

struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;  // (y * width + x) * 3 + c

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), pixels(h * w * 3, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    bool operator==(const Image&) const = default;
};

/// Throws InputError unless the image is at least 8x8, sized consistently,
/// and every value is finite and inside [0,1].
void validate(const Image& img);

/// Center crop to the given size (must fit).
Image center_crop(const Image& img, std::size_t height, std::size_t width);

/// Bilinear resampling with pixel-center alignment. Same-size input is copied.
Image resize_bilinear(const Image& img, std::size_t height, std::size_t width);

/// Box-filter downsampling by an integer factor; dimensions must divide.
Image downsample_box(const Image& img, std::size_t factor);

/// Rounds every value to the nearest multiple of 1/255.
Image quantize8(Image img);

std::vector<std::uint8_t> to_bytes8(const Image& img);
Image from_bytes8(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& rgb);

/// 8-bit RGB PNG. The encoder writes no timestamps, so equal images give equal files.
std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace idfuse
