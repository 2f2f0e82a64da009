#include "idfuse/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "idfuse/errors.hpp"
#include "idfuse/io.hpp"

namespace idfuse {

void validate(const Image& img) {
    if (img.height < 8 || img.width < 8)
        throw InputError("image must be at least 8x8, got " + std::to_string(img.height) + "x" +
                         std::to_string(img.width));
    if (img.pixels.size() != img.height * img.width * 3) throw InputError("image pixel buffer has the wrong size");
    for (float v : img.pixels)
        if (!std::isfinite(v) || v < 0.f || v > 1.f) throw InputError("image values must be finite and in [0,1]");
}

Image center_crop(const Image& img, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw InputError("crop to zero area");
    if (height > img.height || width > img.width) throw InputError("crop larger than image");
    const std::size_t y0 = (img.height - height) / 2, x0 = (img.width - width) / 2;
    Image out(height, width);
    for (std::size_t y = 0; y < height; ++y)
        std::copy_n(&img.pixels[((y0 + y) * img.width + x0) * 3], width * 3, &out.pixels[y * width * 3]);
    return out;
}

Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0 || img.height == 0 || img.width == 0) throw InputError("resize with zero area");
    if (height == img.height && width == img.width) return img;
    Image out(height, width);
    const double sy = static_cast<double>(img.height) / height, sx = static_cast<double>(img.width) / width;
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
                const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Image downsample_box(const Image& img, std::size_t factor) {
    if (factor == 0 || img.height % factor || img.width % factor)
        throw InputError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " is not divisible by " + std::to_string(factor));
    Image out(img.height / factor, img.width / factor);
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double s = 0;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx) s += img.at(y * factor + dy, x * factor + dx, c);
                out.at(y, x, c) = static_cast<float>(s * inv);
            }
    return out;
}

Image quantize8(Image img) {
    for (float& v : img.pixels) v = std::round(std::clamp(v, 0.f, 1.f) * 255.f) / 255.f;
    return img;
}

std::vector<std::uint8_t> to_bytes8(const Image& img) {
    std::vector<std::uint8_t> out(img.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.f, 1.f) * 255.f));
    return out;
}

Image from_bytes8(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != height * width * 3) throw InputError("byte buffer does not match image size");
    Image img(height, width);
    for (std::size_t i = 0; i < rgb.size(); ++i) img.pixels[i] = rgb[i] / 255.f;
    return img;
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    const auto bytes = to_bytes8(img);
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, bytes.data(), 0, nullptr))
        throw Error(std::string("png encode failed: ") + pi.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, bytes.data(), 0, nullptr))
        throw Error(std::string("png encode failed: ") + pi.message);
    out.resize(size);
    return out;
}

Image decode_png(const std::vector<std::uint8_t>& data) {
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&pi, data.data(), data.size()))
        throw InputError(std::string("not a readable png: ") + pi.message);
    pi.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, rgb.data(), 0, nullptr))
        throw InputError(std::string("png decode failed: ") + pi.message);
    return from_bytes8(pi.height, pi.width, rgb);
}

void write_png(const std::filesystem::path& path, const Image& img) { write_file_atomic(path, encode_png(img)); }

Image read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

}  // namespace idfuse
