#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace ddvr::image {

/// H x W x C float image, channel-innermost, row-major, top-left origin.
struct ImageF {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    ImageF() = default;
    ImageF(int w, int h, int c, double fill = 0.0);

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    bool same_shape(const ImageF& o) const
    {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

/// Keeps channels [first, first + count).
ImageF channels_of(const ImageF& img, int first, int count);

/// 1 channel -> "Pf", 3 channels -> "PF"; rows stored bottom-to-top, little endian.
void write_pfm(const ImageF& img, const std::filesystem::path& file);
ImageF read_pfm(const std::filesystem::path& file);

/// 8-bit PNG of a 1-, 3- or 4-channel image; values are clamped and rounded.
void write_png(const ImageF& img, const std::filesystem::path& file);

/// Mean over factor x factor blocks; dimensions must be divisible by factor.
ImageF box_downsample(const ImageF& img, int factor);

} // namespace ddvr::image
