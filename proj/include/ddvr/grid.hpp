#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddvr/vec3.hpp"

namespace ddvr::grid {

struct Dims3 {
    std::size_t nx = 1, ny = 1, nz = 1;

    std::size_t count() const { return nx * ny * nz; }
    std::size_t operator[](int a) const { return a == 0 ? nx : (a == 1 ? ny : nz); }
    bool operator==(const Dims3&) const = default;
};

struct Box {
    Vec3 lo, hi;
};

/// Placement of a voxel grid in world space.
///
/// The grid is centered at the origin and uniformly scaled so that its
/// longest physical edge has length 1. Voxel centers sit at
/// -extent/2 + (i + 0.5) * voxel for i in [0, n).
class GridGeometry {
public:
    GridGeometry() = default;
    GridGeometry(Dims3 dims, std::array<double, 3> spacing);

    const Dims3& dims() const { return dims_; }
    const std::array<double, 3>& spacing() const { return spacing_; }
    /// Voxel edge lengths in world units.
    const std::array<double, 3>& voxel() const { return voxel_; }
    double min_voxel() const;
    Box bbox() const;
    Vec3 voxel_center(std::size_t i, std::size_t j, std::size_t k) const;

    /// The 8 voxels enclosing x (clamped to the edge) and their trilinear weights.
    struct Corners {
        std::array<std::size_t, 8> voxel;
        std::array<double, 8> weight;
    };
    Corners corners(const Vec3& x) const;

private:
    Dims3 dims_;
    std::array<double, 3> spacing_{1.0, 1.0, 1.0};
    std::array<double, 3> voxel_{1.0, 1.0, 1.0};
    std::array<double, 3> half_extent_{0.5, 0.5, 0.5};
};

/// Dense 3D grid of `channels`-vectors, channel-innermost, x fastest.
struct Volume3D {
    GridGeometry geometry;
    std::size_t channels = 1;
    std::vector<double> data;
    /// Intensity window applied at load time, if any.
    std::optional<std::array<double, 2>> window;

    Volume3D() = default;
    Volume3D(Dims3 dims, std::array<double, 3> spacing, std::size_t channels);

    const Dims3& dims() const { return geometry.dims(); }
    std::size_t voxel_count() const { return geometry.dims().count(); }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const
    {
        const auto& d = geometry.dims();
        return (k * d.ny + j) * d.nx + i;
    }
    double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t c = 0)
    {
        return data[index(i, j, k) * channels + c];
    }
    double at(std::size_t i, std::size_t j, std::size_t k, std::size_t c = 0) const
    {
        return data[index(i, j, k) * channels + c];
    }
};

enum class ScalarType { u8, u16, f32 };

std::string to_string(ScalarType t);
ScalarType scalar_type_from_string(const std::string& s);
std::size_t element_size(ScalarType t);

struct VolumeManifest {
    std::filesystem::path path;
    Dims3 dims;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    ScalarType dtype = ScalarType::f32;
    std::size_t channels = 1;
    std::optional<std::array<double, 2>> window;
};

/// Reads a manifest JSON file. Relative raw paths resolve against the manifest's directory.
VolumeManifest read_manifest(const std::filesystem::path& file);
void write_manifest(const VolumeManifest& m, const std::filesystem::path& file);
nlohmann::json manifest_to_json(const VolumeManifest& m);
VolumeManifest manifest_from_json(const nlohmann::json& j);

Volume3D load_volume(const VolumeManifest& m);
Volume3D load_volume(const std::filesystem::path& manifest_file);

/// Writes the raw file named by `m`, inverting the window. Integer encodings round to nearest.
void save_volume(const Volume3D& vol, const VolumeManifest& m);

/// Interpolates all channels at world position x into `out` (size = channels).
void sample_trilinear(const GridGeometry& g, std::span<const double> data, std::size_t channels,
                      const Vec3& x, std::span<double> out);
std::vector<double> sample_trilinear(const Volume3D& vol, const Vec3& x);

/// Central differences of the trilinear field in channel 0 with a one-voxel step.
Vec3 gradient_central(const Volume3D& vol, const Vec3& x);

// -- synthetic phantoms -----------------------------------------------------

enum class PrimitiveKind { sphere, shell, box };
enum class Blend { replace, add };

struct Primitive {
    PrimitiveKind kind = PrimitiveKind::sphere;
    Vec3 center;
    double radius = 0.25;     // sphere, shell
    double thickness = 0.05;  // shell
    Vec3 size{0.5, 0.5, 0.5}; // box edge lengths
    std::vector<double> value{1.0};
    Blend blend = Blend::replace;
};

struct SceneRecipe {
    std::vector<Primitive> primitives;
    std::size_t channels = 1;
};

SceneRecipe recipe_from_json(const nlohmann::json& j);
nlohmann::json recipe_to_json(const SceneRecipe& r);

/// Rasterizes the recipe in world units (grid centered at origin, longest edge 1).
/// Primitive boundaries get a linear one-voxel falloff.
Volume3D synth_volume(const SceneRecipe& recipe, Dims3 dims, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

/// Three concentric shells at intensities 0.3 / 0.6 / 0.9 (outermost first).
SceneRecipe three_shell_recipe();

} // namespace ddvr::grid
