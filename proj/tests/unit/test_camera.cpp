#include <cmath>
#include <set>

#include "doctest.h"

#include "ddvr/camera.hpp"
#include "ddvr/error.hpp"

using namespace ddvr;
using namespace ddvr::camera;

namespace {
const grid::Box kUnitBox{Vec3{-0.5, -0.5, -0.5}, Vec3{0.5, 0.5, 0.5}};
}

TEST_CASE("central ray of an axis-aligned camera")
{
    Camera cam;
    cam.eye = Vec3{0, 0, 2};
    const Ray r = generate_ray(cam, 1, 1, 0, 0, kUnitBox);
    CHECK(r.dir[2] == doctest::Approx(-1.0));
    CHECK(r.t_near == doctest::Approx(1.5));
    CHECK(r.t_far == doctest::Approx(2.5));
}

TEST_CASE("ray generation layout")
{
    Camera cam;
    const auto rays = generate_rays(cam, 200, 200, kUnitBox);
    CHECK(rays.size() == 40000);
    // Top-left pixel looks up and to the left.
    CHECK(rays.front().dir[0] < 0.0);
    CHECK(rays.front().dir[1] > 0.0);
    CHECK(rays.back().dir[0] > 0.0);
    CHECK(rays.back().dir[1] < 0.0);
    CHECK_THROWS_AS(generate_rays(cam, 0, 5, kUnitBox), ConfigError);
}

TEST_CASE("box clipping")
{
    SUBCASE("miss")
    {
        Ray r{Vec3{0, 2, 2}, normalize(Vec3{0, 0, -1})};
        clip_to_box(r, kUnitBox);
        CHECK_FALSE(r.hits());
    }
    SUBCASE("origin inside")
    {
        Ray r{Vec3{0, 0, 0}, Vec3{1, 0, 0}};
        clip_to_box(r, kUnitBox);
        CHECK(r.t_near == 0.0);
        CHECK(r.t_far == doctest::Approx(0.5));
    }
    SUBCASE("axis-parallel ray on a slab boundary plane")
    {
        Ray r{Vec3{0.5, 0, 2}, Vec3{0, 0, -1}};
        clip_to_box(r, kUnitBox);
        CHECK(r.hits());
    }
}

TEST_CASE("degenerate cameras are rejected")
{
    Camera c;
    c.center = c.eye;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    Camera d;
    d.up = Vec3{0, 0, 1};
    CHECK_THROWS_AS(d.validate(), ConfigError);
    Camera e;
    e.fov_deg = 180.0;
    CHECK_THROWS_AS(e.validate(), ConfigError);
}

TEST_CASE("sphere views")
{
    SUBCASE("n = 1 sits on +z")
    {
        const auto v = sphere_views(1, 2.2);
        REQUIRE(v.size() == 1);
        CHECK(v[0].eye[2] == doctest::Approx(2.2));
        CHECK(std::abs(v[0].eye[0]) < 1e-12);
    }
    SUBCASE("16 views are well separated")
    {
        const auto v = sphere_views(16, 2.2);
        REQUIRE(v.size() == 16);
        double min_angle = 180.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            CHECK(length(v[i].eye) == doctest::Approx(2.2));
            CHECK(v[i].fov_deg == 45.0);
            v[i].validate();
            for (std::size_t j = i + 1; j < v.size(); ++j) {
                const double c = dot(normalize(v[i].eye), normalize(v[j].eye));
                min_angle = std::min(min_angle, std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI);
            }
        }
        CHECK(min_angle > 20.0);
    }
    SUBCASE("32 views cover the sphere evenly")
    {
        Vec3 mean;
        for (const auto& c : sphere_views(32, 1.0))
            mean = mean + normalize(c.eye) * (1.0 / 32);
        CHECK(length(mean) < 0.15);
    }
    SUBCASE("deterministic; seed rotates about z")
    {
        const auto a = sphere_views(8, 2.0, 7), b = sphere_views(8, 2.0, 7), c = sphere_views(8, 2.0, 0);
        for (int i = 0; i < 8; ++i) {
            CHECK(a[i].eye == b[i].eye);
            CHECK(a[i].eye[2] == doctest::Approx(c[i].eye[2]));
        }
        CHECK_FALSE(a[3].eye == c[3].eye);
    }
}

TEST_CASE("camera JSON round trip")
{
    Camera c;
    c.eye = Vec3{0.3, -1.2, 1.9};
    c.up = Vec3{0, 0, 1};
    c.fov_deg = 30.0;
    const Camera d = camera_from_json(camera_to_json(c));
    CHECK(d.eye == c.eye);
    CHECK(d.up == c.up);
    CHECK(d.fov_deg == 30.0);
}

TEST_CASE("jitter offsets")
{
    JitterRng z(1);
    CHECK(jitter_offset(z, 0.0) == 0.0);

    const double dt = 0.037;
    JitterRng rng(ray_key(42, 0, 0));
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double t = jitter_offset(rng, dt);
        REQUIRE(t >= 0.0);
        REQUIRE(t < dt);
        sum += t;
    }
    const double sigma = dt / std::sqrt(12.0) / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(sum / n - dt / 2) < 3 * sigma);

    JitterRng a(ray_key(9, 3, 17)), b(ray_key(9, 3, 17));
    for (int i = 0; i < 10; ++i)
        CHECK(a.next_unit() == b.next_unit());

    std::set<std::uint64_t> keys;
    for (std::uint64_t p = 0; p < 1000; ++p)
        keys.insert(ray_key(1, p % 3, p));
    CHECK(keys.size() == 1000);
}
