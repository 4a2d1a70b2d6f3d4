#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "ddvr/grid.hpp"

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("ddvr_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Smooth random-ish 8^3 phantom: a sphere plus a shell with values inside (0,1).
inline ddvr::grid::Volume3D small_phantom(std::uint64_t seed, std::size_t n = 8)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ddvr::grid::Volume3D v({n, n, n}, {1.0, 1.0, 1.0}, 1);
    const double a = u(rng), b = u(rng), c = u(rng);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) {
                const auto x = v.geometry.voxel_center(i, j, k);
                const double r = ddvr::length(x);
                v.at(i, j, k) = 0.05 + 0.9 * (0.5 + 0.5 * std::sin(6.0 * r + a * 6.0 + b * x[0] * 4.0 + c * x[1] * 3.0));
            }
    return v;
}

} // namespace testutil

#include <unistd.h>
