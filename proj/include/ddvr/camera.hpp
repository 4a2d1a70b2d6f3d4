#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

#include "ddvr/grid.hpp"
#include "ddvr/vec3.hpp"

namespace ddvr::camera {

struct Camera {
    Vec3 eye{0.0, 0.0, 2.2};
    Vec3 center{0.0, 0.0, 0.0};
    Vec3 up{0.0, 1.0, 0.0};
    double fov_deg = 45.0;
    double aspect = 1.0;

    /// Throws ConfigError when eye == center, up is parallel to the view
    /// direction, or fov is outside (0, 180).
    void validate() const;
};

struct Ray {
    Vec3 origin;
    Vec3 dir;
    double t_near = 1.0;
    double t_far = 0.0;

    bool hits() const { return t_near <= t_far; }
};

/// Slab test against `box`. Misses leave t_near > t_far. t_near is clamped to
/// zero so a camera inside the box starts marching at the eye.
void clip_to_box(Ray& ray, const grid::Box& box);

/// One ray per pixel center, row-major with the top-left pixel first.
std::vector<Ray> generate_rays(const Camera& cam, int width, int height, const grid::Box& box);
Ray generate_ray(const Camera& cam, int width, int height, int px, int py, const grid::Box& box);

/// Fibonacci-spiral cameras on a sphere around the origin, fov 45 degrees.
/// Index 0 sits on +z. A nonzero seed applies a fixed rotation about z.
std::vector<Camera> sphere_views(int n, double radius = 2.2, std::uint64_t seed = 0);

nlohmann::json camera_to_json(const Camera& c);
Camera camera_from_json(const nlohmann::json& j);

// -- jitter -------------------------------------------------------------------

/// SplitMix64 step; used as a counter-based hash for per-ray random streams.
std::uint64_t splitmix64(std::uint64_t x);

/// Uniform double in [0, 1) from 53 high bits.
inline double to_unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

/// Counter-based generator: the n-th draw depends only on (key, n), so ray
/// offsets do not depend on how rays are scheduled across workers.
class JitterRng {
public:
    explicit JitterRng(std::uint64_t key) : state_(key) {}
    double next_unit()
    {
        state_ += 0x9E3779B97F4A7C15ull;
        return to_unit(splitmix64(state_));
    }

private:
    std::uint64_t state_;
};

/// t_o ~ U(0, t_jmax); exactly 0 when t_jmax == 0.
double jitter_offset(JitterRng& rng, double t_jmax);

/// Key of the random stream for one pixel of one render pass.
std::uint64_t ray_key(std::uint64_t seed, std::uint64_t pass, std::uint64_t pixel);

} // namespace ddvr::camera
