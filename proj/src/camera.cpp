#include "ddvr/camera.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ddvr/error.hpp"

namespace ddvr::camera {

using nlohmann::json;

void Camera::validate() const
{
    const Vec3 view = center - eye;
    if (length(view) == 0.0)
        throw ConfigError("camera eye and center coincide");
    if (length(cross(normalize(view), up)) < 1e-9)
        throw ConfigError("camera up vector is parallel to the view direction");
    if (!(fov_deg > 0.0 && fov_deg < 180.0))
        throw ConfigError("camera fov must lie in (0, 180) degrees");
    if (!(aspect > 0.0))
        throw ConfigError("camera aspect must be positive");
}

void clip_to_box(Ray& ray, const grid::Box& box)
{
    double t0 = 0.0;
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        const double o = ray.origin[a];
        const double d = ray.dir[a];
        if (d == 0.0) {
            if (o < box.lo[a] || o > box.hi[a]) {
                ray.t_near = 1.0;
                ray.t_far = 0.0;
                return;
            }
            continue;
        }
        double ta = (box.lo[a] - o) / d;
        double tb = (box.hi[a] - o) / d;
        if (ta > tb)
            std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (t0 > t1) {
        ray.t_near = 1.0;
        ray.t_far = 0.0;
        return;
    }
    ray.t_near = t0;
    ray.t_far = t1;
}

Ray generate_ray(const Camera& cam, int width, int height, int px, int py, const grid::Box& box)
{
    const Vec3 forward = normalize(cam.center - cam.eye);
    const Vec3 right = normalize(cross(forward, cam.up));
    const Vec3 up = cross(right, forward);
    const double tan_half = std::tan(0.5 * cam.fov_deg * std::numbers::pi / 180.0);
    const double sx = (2.0 * (px + 0.5) / width - 1.0) * tan_half * cam.aspect;
    const double sy = (1.0 - 2.0 * (py + 0.5) / height) * tan_half;
    Ray r;
    r.origin = cam.eye;
    r.dir = normalize(forward + sx * right + sy * up);
    clip_to_box(r, box);
    return r;
}

std::vector<Ray> generate_rays(const Camera& cam, int width, int height, const grid::Box& box)
{
    if (width < 1 || height < 1)
        throw ConfigError("image size must be at least 1x1");
    cam.validate();
    std::vector<Ray> rays;
    rays.reserve(static_cast<std::size_t>(width) * height);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            rays.push_back(generate_ray(cam, width, height, x, y, box));
    return rays;
}

std::vector<Camera> sphere_views(int n, double radius, std::uint64_t seed)
{
    if (n < 1)
        throw ConfigError("sphere_views needs at least one view");
    const double golden_angle = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const double rotation = seed == 0 ? 0.0 : 2.0 * std::numbers::pi * to_unit(splitmix64(seed));
    std::vector<Camera> cams;
    cams.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double z = n == 1 ? 1.0 : 1.0 - 2.0 * i / (n - 1);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden_angle * i + rotation;
        const Vec3 dir{r * std::cos(phi), r * std::sin(phi), z};
        Camera c;
        c.eye = dir * radius;
        c.center = {0.0, 0.0, 0.0};
        c.up = std::abs(dir.y) > 0.95 ? Vec3{0.0, 0.0, 1.0} : Vec3{0.0, 1.0, 0.0};
        c.fov_deg = 45.0;
        cams.push_back(c);
    }
    return cams;
}

json camera_to_json(const Camera& c)
{
    return json{{"eye", to_array(c.eye)},
                {"center", to_array(c.center)},
                {"up", to_array(c.up)},
                {"fov_deg", c.fov_deg}};
}

Camera camera_from_json(const json& j)
{
    Camera c;
    try {
        c.eye = from_array(j.at("eye").get<std::array<double, 3>>());
        c.center = from_array(j.at("center").get<std::array<double, 3>>());
        c.up = from_array(j.at("up").get<std::array<double, 3>>());
        c.fov_deg = j.value("fov_deg", 45.0);
        c.aspect = j.value("aspect", 1.0);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed camera: ") + e.what());
    }
    c.validate();
    return c;
}

std::uint64_t splitmix64(std::uint64_t z)
{
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double jitter_offset(JitterRng& rng, double t_jmax)
{
    if (t_jmax <= 0.0)
        return 0.0;
    return rng.next_unit() * t_jmax;
}

std::uint64_t ray_key(std::uint64_t seed, std::uint64_t pass, std::uint64_t pixel)
{
    std::uint64_t k = splitmix64(seed + 0x632BE59BD9B4E019ull);
    k = splitmix64(k ^ (pass + 0x9E3779B97F4A7C15ull));
    return splitmix64(k ^ (pixel * 0xD1B54A32D192ED03ull));
}

} // namespace ddvr::camera
