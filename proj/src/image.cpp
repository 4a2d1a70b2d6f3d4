#include "ddvr/image.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include <png.h>

#include "ddvr/error.hpp"

namespace ddvr::image {

namespace fs = std::filesystem;

ImageF::ImageF(int w, int h, int c, double fill)
    : width(w), height(h), channels(c),
      data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), fill)
{
    if (w < 0 || h < 0 || c < 0)
        throw ShapeError("negative image dimension");
}

ImageF channels_of(const ImageF& img, int first, int count)
{
    if (first < 0 || count < 0 || first + count > img.channels)
        throw ShapeError("channel range out of bounds");
    ImageF out(img.width, img.height, count);
    for (std::size_t p = 0; p < img.pixel_count(); ++p)
        for (int c = 0; c < count; ++c)
            out.data[p * count + c] = img.data[p * img.channels + first + c];
    return out;
}

void write_pfm(const ImageF& img, const fs::path& file)
{
    if (img.channels != 1 && img.channels != 3)
        throw ShapeError("PFM holds 1 or 3 channels");
    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + file.string());
    out << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n-1.0\n";
    static_assert(std::endian::native == std::endian::little);
    std::vector<float> row(static_cast<std::size_t>(img.width) * img.channels);
    for (int y = img.height - 1; y >= 0; --y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[static_cast<std::size_t>(x) * img.channels + c] = static_cast<float>(img.at(x, y, c));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    }
    if (!out)
        throw IoError("short write to " + file.string());
}

ImageF read_pfm(const fs::path& file)
{
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + file.string());
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (!in || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0)
        throw FormatError(file.string() + ": not a PFM file");
    in.get();
    const int c = magic == "PF" ? 3 : 1;
    ImageF img(w, h, c);
    std::vector<float> row(static_cast<std::size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
        if (!in)
            throw FormatError(file.string() + ": truncated PFM data");
        if (scale > 0.0)
            for (auto& v : row) {
                std::uint32_t bits;
                std::memcpy(&bits, &v, 4);
                bits = __builtin_bswap32(bits);
                std::memcpy(&v, &bits, 4);
            }
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k)
                img.at(x, y, k) = row[static_cast<std::size_t>(x) * c + k];
    }
    return img;
}

void write_png(const ImageF& img, const fs::path& file)
{
    const int color_type = [&] {
        switch (img.channels) {
        case 1: return PNG_COLOR_TYPE_GRAY;
        case 3: return PNG_COLOR_TYPE_RGB;
        case 4: return PNG_COLOR_TYPE_RGBA;
        default: throw ShapeError("PNG holds 1, 3 or 4 channels");
        }
    }();
    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(file.c_str(), "wb"), &std::fclose);
    if (!fp)
        throw IoError("cannot write " + file.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialization failed");
    }
    std::vector<png_byte> bytes(img.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<png_byte>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[y] = bytes.data() + static_cast<std::size_t>(y) * img.width * img.channels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing " + file.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageF box_downsample(const ImageF& img, int factor)
{
    if (factor < 1 || img.width % factor != 0 || img.height % factor != 0)
        throw ShapeError("image size must be divisible by the downsampling factor");
    ImageF out(img.width / factor, img.height / factor, img.channels);
    const double norm = 1.0 / (static_cast<double>(factor) * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double s = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        s += img.at(x * factor + dx, y * factor + dy, c);
                out.at(x, y, c) = s * norm;
            }
    return out;
}

} // namespace ddvr::image
