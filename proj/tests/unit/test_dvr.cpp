#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"

#include "ddvr/dvr.hpp"
#include "ddvr/error.hpp"
#include "ddvr/loss_metrics.hpp"

using namespace ddvr;
using namespace ddvr::dvr;

namespace {

/// Volume whose voxels hold (r, g, b, kappa) directly.
grid::Volume3D constant_medium(std::size_t n, std::array<double, 3> rgb, double kappa)
{
    grid::Volume3D v({n, n, n}, {1, 1, 1}, 4);
    for (std::size_t i = 0; i < v.voxel_count(); ++i) {
        for (int c = 0; c < 3; ++c)
            v.data[i * 4 + c] = rgb[c];
        v.data[i * 4 + 3] = kappa;
    }
    return v;
}

camera::Camera front_camera()
{
    camera::Camera c;
    c.eye = Vec3{0, 0, 2};
    return c;
}

/// Smooth ramp TF with moderate absorption.
tf::LookupTF smooth_tf(ad::ParamStore& s)
{
    std::vector<double> rgb(tf::kLookupBins * 3), kappa(tf::kLookupBins);
    for (std::size_t i = 0; i < tf::kLookupBins; ++i) {
        const double u = i / 255.0;
        rgb[i * 3] = u;
        rgb[i * 3 + 1] = 1.0 - u;
        rgb[i * 3 + 2] = 0.5 + 0.4 * std::sin(6.0 * u);
        kappa[i] = 4.0 * u * u;
    }
    return tf::LookupTF::from_mapped(s, rgb, kappa);
}

} // namespace

TEST_CASE("opacity from absorption")
{
    CHECK(opacity_from_kappa(0.0, 0.1) == 0.0);
    CHECK(opacity_from_kappa(1.0, 1.0) == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-15));
    CHECK(opacity_from_kappa(1.0, 1.0) == doctest::Approx(0.63212).epsilon(1e-5));
    CHECK(opacity_from_kappa(1e-12, 1e-6) > 0.0);
    CHECK(opacity_from_kappa(1e6, 1.0) <= 1.0);
}

TEST_CASE("front-to-back compositing")
{
    CHECK(composite_front_to_back({}, 3).color == std::vector<double>{0, 0, 0});
    CHECK(composite_front_to_back({}, 3).alpha == 0.0);

    const ColorAlpha opaque[] = {{{0.2, 0.3, 0.4}, 1.0}, {{0.9, 0.9, 0.9}, 0.5}};
    const auto one = composite_front_to_back(std::span(opaque, 1), 3);
    CHECK(one.color == std::vector<double>{0.2, 0.3, 0.4});
    CHECK(one.alpha == 1.0);
    CHECK(composite_front_to_back(opaque, 3).color == std::vector<double>{0.2, 0.3, 0.4});

    const ColorAlpha two[] = {{{0.5}, 0.5}, {{0.25}, 0.5}};
    const auto r = composite_front_to_back(two, 1);
    CHECK(r.color[0] == 0.625);
    CHECK(r.alpha == 0.75);
}

TEST_CASE("render configuration checks")
{
    RenderConfig c;
    c.sampling_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.width = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.alpha_stop = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    const auto vol = testutil::small_phantom(1);
    ad::ParamStore s;
    const LookupClassifier cls(tf::LookupTF::create(s), s);
    const Scene scene{&vol.geometry, vol.data, 1, &cls};
    RenderConfig bad;
    bad.width = bad.height = 4;
    bad.background = {0.0, 0.0};
    CHECK_THROWS_AS(render(scene, front_camera(), bad), ConfigError);

    const PreclassifiedClassifier latent(5);
    const auto feats = constant_medium(4, {0, 0, 0}, 0.0);
    const Scene s5{&feats.geometry, feats.data, 4, &latent};
    CHECK_THROWS_AS(render(s5, front_camera(), RenderConfig{}), ConfigError);
}

TEST_CASE("ray missing the volume returns the background")
{
    const auto v = constant_medium(4, {1, 1, 1}, 5.0);
    const PreclassifiedClassifier cls(3);
    const Scene scene{&v.geometry, v.data, 4, &cls};
    camera::Ray ray{Vec3{0, 3, 2}, Vec3{0, 0, -1}};
    camera::clip_to_box(ray, v.geometry.bbox());
    ClassifyWorkspace ws;
    const auto r = raymarch(ray, scene, RenderConfig{}, 0.0, ws);
    CHECK(r.samples == 0);
    CHECK(r.alpha == 0.0);
    CHECK(r.color == std::vector<double>{0, 0, 0});

    auto cam = front_camera();
    cam.center = Vec3{0, 3, 0};
    cam.eye = Vec3{0, 3, 2};
    RenderConfig cfg;
    cfg.width = cfg.height = 3;
    cfg.background = {0.1, 0.2, 0.3};
    const auto img = render_composite(scene, cam, cfg);
    for (int p = 0; p < 9; ++p) {
        CHECK(img.data[p * 4] == 0.1);
        CHECK(img.data[p * 4 + 2] == 0.3);
        CHECK(img.data[p * 4 + 3] == 0.0);
    }
}

TEST_CASE("homogeneous medium converges to Beer-Lambert transmittance")
{
    const double kappa = 2.0;
    const auto v = constant_medium(16, {0.5, 0.5, 0.5}, kappa);
    const PreclassifiedClassifier cls(3);
    const Scene scene{&v.geometry, v.data, 4, &cls};
    const auto ray = camera::generate_ray(front_camera(), 1, 1, 0, 0, v.geometry.bbox());
    const double exact = 1.0 - std::exp(-kappa * 1.0);
    double prev_err = 1.0;
    for (double s : {1.0, 2.0, 4.0, 8.0}) {
        RenderConfig cfg;
        cfg.sampling_rate = s;
        cfg.early_termination = false;
        ClassifyWorkspace ws;
        const auto r = raymarch(ray, scene, cfg, 0.0, ws);
        const double err = std::abs(r.alpha - exact) / exact;
        CHECK(err <= prev_err);
        prev_err = err;
    }
    CHECK(prev_err < 0.01);
}

TEST_CASE("fully transparent transfer function renders the background")
{
    ad::ParamStore s;
    const auto tf = tf::LookupTF::create(s);
    // Emission is not scaled by opacity, so transparency also needs black colors.
    for (auto& k : s.value(tf.kappa))
        k = tf::kTransparentRaw;
    for (auto& c : s.value(tf.color))
        c = 0.0;
    const auto vol = grid::synth_volume(grid::three_shell_recipe(), {16, 16, 16});
    const LookupClassifier cls(tf, s);
    const Scene scene{&vol.geometry, vol.data, 1, &cls};
    RenderConfig cfg;
    cfg.width = cfg.height = 12;
    cfg.background = {0.2, 0.4, 0.6};
    cfg.jitter = true;
    const auto img = render(scene, front_camera(), cfg);
    for (int p = 0; p < 144; ++p) {
        CHECK(img.data[p * 4 + 1] == 0.4);
        CHECK(img.data[p * 4 + 3] == 0.0);
    }
}

TEST_CASE("sample count of the central ray")
{
    const auto vol = grid::synth_volume(grid::three_shell_recipe(), {64, 64, 64});
    ad::ParamStore s;
    const LookupClassifier cls(smooth_tf(s), s);
    const Scene scene{&vol.geometry, vol.data, 1, &cls};
    const auto ray = camera::generate_ray(front_camera(), 1, 1, 0, 0, vol.geometry.bbox());
    RenderConfig cfg;
    cfg.early_termination = false;
    ClassifyWorkspace ws;
    const auto r = raymarch(ray, scene, cfg, 0.0, ws);
    const double expected = 64.0 * (ray.t_far - ray.t_near) / 1.0;
    CHECK(std::abs(static_cast<double>(r.samples) - expected) <= 1.0);

    std::vector<RaySampleRecord> recs;
    const auto rr = raymarch(ray, scene, cfg, 0.0, ws, &recs);
    CHECK(rr.samples == r.samples);
    CHECK(rr.alpha == r.alpha);
    CHECK(recs.size() >= rr.samples);
}

TEST_CASE("rendering at a higher sampling rate or resolution keeps the structure")
{
    const auto vol = grid::synth_volume(grid::three_shell_recipe(), {32, 32, 32});
    ad::ParamStore s;
    const LookupClassifier cls(smooth_tf(s), s);
    const Scene scene{&vol.geometry, vol.data, 1, &cls};
    auto cam = camera::sphere_views(3, 1.6)[1];
    RenderConfig cfg;
    cfg.width = cfg.height = 48;
    cfg.sampling_rate = 1.0;
    const auto a = render(scene, cam, cfg);
    cfg.sampling_rate = 3.0;
    const auto b = render(scene, cam, cfg);
    CHECK(loss::ssim(a, b) > 0.98);

    cfg.width = cfg.height = 144;
    const auto hi = render(scene, cam, cfg);
    CHECK(hi.width == 144);
    CHECK(loss::ssim(image::box_downsample(hi, 3), b) > 0.95);
}

TEST_CASE("rendering is deterministic and independent of the thread count")
{
    const auto vol = testutil::small_phantom(2, 16);
    ad::ParamStore s;
    const LookupClassifier cls(smooth_tf(s), s);
    const Scene scene{&vol.geometry, vol.data, 1, &cls};
    RenderConfig cfg;
    cfg.width = cfg.height = 20;
    cfg.jitter = true;
    cfg.seed = 5;
    const auto a = render(scene, front_camera(), cfg);
    cfg.threads = 3;
    const auto b = render(scene, front_camera(), cfg);
    CHECK(a.data == b.data);
    cfg.pass = 1;
    const auto c = render(scene, front_camera(), cfg);
    CHECK(a.data != c.data);
}

namespace {

struct LookupPipeline {
    grid::Volume3D vol = testutil::small_phantom(7);
    ad::ParamStore store;
    tf::LookupTF tf;
    image::ImageF ref{4, 4, 3};
    RenderConfig cfg;
    camera::Camera cam;

    LookupPipeline()
    {
        tf = tf::LookupTF::create(store);
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(0.1, 0.9);
        auto col = store.value(tf.color);
        for (auto& x : col)
            x = u(rng);
        for (auto& x : store.value(tf.kappa))
            x = std::uniform_real_distribution<double>(-3.0, 0.0)(rng);
        for (auto& x : ref.data)
            x = u(rng);
        cfg.width = cfg.height = 4;
        cfg.jitter = true;
        cfg.seed = 11;
        cfg.background = {0.3, 0.1, 0.6};
        cam = camera::sphere_views(5, 1.4)[2];
    }

    ad::Var image(ad::Tape& t, ad::ParamStore& st, const LookupClassifier& cls)
    {
        const ad::Var params[] = {t.param(st, tf.color), t.param(st, tf.kappa)};
        const auto out = render_on_tape(t, vol.geometry, t.constant(vol.data), 1, false, cls, params, cam, cfg);
        return t.select_channels(out, 4, 0, 3);
    }
};

} // namespace

TEST_CASE("render-loss pipeline gradient matches finite differences")
{
    LookupPipeline p;
    const auto f = [&](ad::ParamStore& st) {
        const LookupClassifier cls(p.tf, st);
        ad::Tape t;
        const auto l = loss::loss_on_tape(t, p.image(t, st, cls), p.ref, loss::LossMode::mse_ssim);
        t.backward(l);
        return t.scalar(l);
    };
    const auto rep = ad::finite_diff_check(f, p.store, 1e-5, {}, 1e-6);
    CHECK(rep.checked > 50);
    INFO(rep.worst, " tape ", rep.worst_tape, " fd ", rep.worst_fd);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("rays sharing a parameter sum their gradients")
{
    LookupPipeline p;
    const auto grad_with = [&](const std::vector<double>& weight) {
        p.store.zero_grad();
        const LookupClassifier cls(p.tf, p.store);
        ad::Tape t;
        const auto img = p.image(t, p.store, cls);
        t.backward(t.dot(img, t.constant(weight)));
        std::vector<double> g(p.store.grad(p.tf.kappa).begin(), p.store.grad(p.tf.kappa).end());
        const auto gc = p.store.grad(p.tf.color);
        g.insert(g.end(), gc.begin(), gc.end());
        return g;
    };
    std::vector<double> w_all(48, 0.0), w_a(48, 0.0), w_b(48, 0.0);
    for (int c = 0; c < 3; ++c) {
        w_all[5 * 3 + c] = w_a[5 * 3 + c] = 1.0;
        w_all[10 * 3 + c] = w_b[10 * 3 + c] = 1.0;
    }
    const auto ga = grad_with(w_a), gb = grad_with(w_b), gab = grad_with(w_all);
    double max_a = 0.0, max_b = 0.0;
    for (std::size_t i = 0; i < gab.size(); ++i) {
        CHECK(gab[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12).scale(1e-12));
        max_a = std::max(max_a, std::abs(ga[i]));
        max_b = std::max(max_b, std::abs(gb[i]));
    }
    CHECK(max_a > 0.0);
    CHECK(max_b > 0.0);
}

TEST_CASE("feature gradients through a preclassified volume")
{
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.1, 2.0);
    auto v = constant_medium(5, {0, 0, 0}, 0.0);
    for (auto& x : v.data)
        x = u(rng);
    ad::ParamStore s;
    const auto fb = s.add("features", {v.data.size()}, v.data);
    image::ImageF ref(3, 3, 3, 0.4);
    const PreclassifiedClassifier cls(3);
    RenderConfig cfg;
    cfg.width = cfg.height = 3;
    cfg.sampling_rate = 2.0;
    const auto cam = camera::sphere_views(4, 1.5)[1];
    const auto f = [&](ad::ParamStore& st) {
        ad::Tape t;
        const auto out = render_on_tape(t, v.geometry, t.param(st, fb), 4, true, cls, {}, cam, cfg);
        const auto l = loss::loss_on_tape(t, t.select_channels(out, 4, 0, 3), ref, loss::LossMode::mse);
        t.backward(l);
        return t.scalar(l);
    };
    const auto rep = ad::finite_diff_check(f, s, 1e-5, {}, 1e-6);
    CHECK(rep.checked > 100);
    INFO(rep.worst, " tape ", rep.worst_tape, " fd ", rep.worst_fd);
    CHECK(rep.max_rel_error < 1e-4);
}
