#include "ddvr/gradcheck.hpp"

#include <cmath>
#include <random>

#include "ddvr/loss_metrics.hpp"

namespace ddvr::train {

namespace {

/// Sum of a few random Gaussian blobs, kept inside (0.05, 0.95).
grid::Volume3D blob_volume(std::mt19937_64& rng, std::size_t n)
{
    std::uniform_real_distribution<double> pos(-0.35, 0.35), amp(0.2, 0.6), width(0.15, 0.35);
    struct Blob {
        Vec3 c;
        double a, w;
    };
    std::vector<Blob> blobs;
    for (int b = 0; b < 4; ++b)
        blobs.push_back({{pos(rng), pos(rng), pos(rng)}, amp(rng), width(rng)});
    grid::Volume3D v({n, n, n}, {1.0, 1.0, 1.0}, 1);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) {
                const Vec3 x = v.geometry.voxel_center(i, j, k);
                double s = 0.05;
                for (const auto& b : blobs) {
                    const Vec3 d = x - b.c;
                    s += b.a * std::exp(-dot(d, d) / (2.0 * b.w * b.w));
                }
                v.data[v.index(i, j, k)] = std::min(s, 0.95);
            }
    return v;
}

} // namespace

ad::FdReport gradcheck_tiny(ModelKind kind, std::uint64_t seed, double eps)
{
    std::mt19937_64 rng(camera::splitmix64(seed));
    const auto vol = blob_volume(rng, 8);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    image::ImageF ref(4, 4, 3, 0.0);
    for (auto& x : ref.data)
        x = u(rng);
    const auto views = camera::sphere_views(4, 1.4, seed);
    const auto cam = views[seed % views.size()];

    dvr::RenderConfig rc;
    rc.width = rc.height = 4;
    rc.sampling_rate = 1.0;
    rc.jitter = true;
    rc.seed = seed;
    rc.background = {0.1, 0.2, 0.3};

    ModelConfig mc;
    mc.kind = kind;
    mc.seed = seed + 1;
    mc.n_features = 3;
    mc.encoder_hidden = 3;
    mc.kappa_hidden = 4;
    mc.decoder_hidden = 4;
    mc.mlp_hidden = {5, 4};
    mc.kappa_max = 16.0;
    auto model = Model::create(mc);
    if (kind == ModelKind::lookup) {
        // Colors strictly inside (0, 1) so the projection gate is differentiable.
        auto col = model.store().value(model.lookup()->color);
        for (auto& c : col)
            c = u(rng);
    }
    const auto f = [&](ad::ParamStore&) {
        ad::Tape t;
        auto step = model.begin_step(t, vol);
        const auto l = loss::loss_on_tape(t, model.record_image(t, step, cam, rc), ref, loss::LossMode::mse_ssim);
        t.backward(l);
        return t.scalar(l);
    };
    return ad::finite_diff_check(f, model.store(), eps, {}, kGradcheckFloor);
}

} // namespace ddvr::train
