#include <cmath>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"

#include "ddvr/dataset.hpp"
#include "ddvr/error.hpp"
#include "ddvr/model.hpp"
#include "ddvr/train.hpp"

using namespace ddvr;
using namespace ddvr::train;

namespace {

/// 16^3 three-shell phantom with a ground-truth lookup TF, written to `dir`.
struct TinyScene {
    std::filesystem::path volume;
    std::filesystem::path tf;

    explicit TinyScene(const std::filesystem::path& dir, std::size_t n = 16)
    {
        const auto v = grid::synth_volume(grid::three_shell_recipe(), {n, n, n});
        grid::VolumeManifest m;
        m.path = "phantom.raw";
        m.dims = v.dims();
        m.dtype = grid::ScalarType::f32;
        volume = dir / "phantom.json";
        write_manifest(m, volume);
        m.path = dir / "phantom.raw";
        save_volume(v, m);
        ad::ParamStore s;
        tf = dir / "gt.json";
        tf::tf_save(three_shell_tf(s), s, tf);
    }
};

DatasetSpec tiny_spec(const TinyScene& sc, const std::filesystem::path& out, int views = 6)
{
    DatasetSpec spec;
    spec.volume_manifest = sc.volume;
    spec.tf_file = sc.tf;
    spec.views = views;
    spec.width = spec.height = 12;
    spec.split = {views - 2, 1, 1};
    spec.s_render = 2.0;
    spec.seed = 3;
    spec.out_dir = out;
    return spec;
}

} // namespace

TEST_CASE("annealing schedule")
{
    CHECK(annealed_sampling_rate(0, 100, 0.1, 2.0) == 0.1);
    CHECK(annealed_sampling_rate(100, 100, 0.1, 2.0) == 2.0);
    CHECK(annealed_sampling_rate(50, 100, 0.1, 2.0) == doctest::Approx(0.575).epsilon(1e-14));
    double prev = 0.0;
    for (int e = 0; e <= 100; ++e) {
        const double s = annealed_sampling_rate(e, 100, 0.1, 2.0);
        CHECK(s >= prev);
        prev = s;
    }
}

TEST_CASE("batch size presets")
{
    CHECK(batch_size_preset(0.25) == 12);
    CHECK(batch_size_preset(0.5) == 6);
    CHECK(batch_size_preset(1.0) == 3);
    CHECK(batch_size_preset(2.0) == 2);
    CHECK(batch_size_preset(3.0) == 1);
    CHECK(batch_size_preset(0.1) == 12);
    CHECK(batch_size_preset(1.5) == 2);
    TrainConfig c;
    c.annealed = true;
    c.s_high = 2.0;
    CHECK(c.resolved_batch_size() == 2);
    c.batch_size = 5;
    CHECK(c.resolved_batch_size() == 5);
}

TEST_CASE("adam")
{
    SUBCASE("zero gradient leaves parameters unchanged")
    {
        ad::ParamStore s;
        const auto b = s.add("w", {3}, {0.1, -2.0, 3.5});
        AdamState st(s);
        for (int i = 0; i < 3; ++i)
            adam_step(st, s, 0.1);
        CHECK(s.value(b)[0] == 0.1);
        CHECK(s.value(b)[1] == -2.0);
        CHECK(s.value(b)[2] == 3.5);
    }
    SUBCASE("first step moves by about lr")
    {
        ad::ParamStore s;
        const auto b = s.add("w", {1}, {1.0});
        AdamState st(s);
        s.grad(b)[0] = 1.0;
        adam_step(st, s, 0.1);
        CHECK(s.value(b)[0] == doctest::Approx(0.9).epsilon(1e-7));
        CHECK(s.grad(b)[0] == 0.0);
        s.grad(b)[0] = 1.0;
        adam_step(st, s, 0.1);
        CHECK(s.value(b)[0] == doctest::Approx(0.8).epsilon(1e-7));
    }
}

TEST_CASE("training config")
{
    TrainConfig c;
    CHECK(c.learning_rate() == 0.3);
    CHECK(c.loss_mode() == loss::LossMode::mse);
    c.model.kind = ModelKind::latent;
    CHECK(c.learning_rate() == 0.003);
    CHECK(c.loss_mode() == loss::LossMode::mse_ssim);
    c.model.kind = ModelKind::mlp_tf;
    CHECK(c.learning_rate() == 0.05);
    c.lr = 0.01;
    c.loss = loss::LossMode::mse_ssim;
    c.annealed = true;
    c.s_low = 0.2;
    const auto back = train_config_from_json(to_json(c));
    CHECK(back.model.kind == ModelKind::mlp_tf);
    CHECK(back.lr == 0.01);
    CHECK(back.loss_mode() == loss::LossMode::mse_ssim);
    CHECK(back.annealed);
    CHECK(back.s_low == 0.2);

    TrainConfig bad;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.s = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(model_kind_from_string("mlp-tf") == ModelKind::mlp_tf);
    CHECK_THROWS_AS(model_kind_from_string("voxel"), ConfigError);
}

TEST_CASE("every model's step gradient matches finite differences")
{
    const auto vol = testutil::small_phantom(6);
    image::ImageF ref(4, 4, 3, 0.0);
    for (std::size_t i = 0; i < ref.data.size(); ++i)
        ref.data[i] = 0.2 + 0.6 * std::fmod(0.37 * static_cast<double>(i), 1.0);
    const auto cam = camera::sphere_views(4, 1.4)[1];
    dvr::RenderConfig rc;
    rc.width = rc.height = 4;
    rc.jitter = true;
    rc.seed = 2;
    rc.background = {0.1, 0.2, 0.3};

    for (auto kind : {ModelKind::lookup, ModelKind::mlp_tf, ModelKind::latent}) {
        CAPTURE(to_string(kind));
        ModelConfig mc;
        mc.kind = kind;
        mc.n_features = 3;
        mc.encoder_hidden = 3;
        mc.kappa_hidden = 4;
        mc.decoder_hidden = 4;
        mc.mlp_hidden = {5, 4};
        mc.kappa_max = 16.0;
        auto model = Model::create(mc);
        if (kind == ModelKind::lookup) {
            // Keep colors inside (0,1) so the projection gate is smooth.
            auto col = model.store().value(model.lookup()->color);
            for (std::size_t i = 0; i < col.size(); ++i)
                col[i] = 0.2 + 0.6 * std::fmod(0.61 * static_cast<double>(i), 1.0);
        }
        const auto mode = kind == ModelKind::latent ? loss::LossMode::mse_ssim : loss::LossMode::mse;
        const auto f = [&](ad::ParamStore&) {
            ad::Tape t;
            auto step = model.begin_step(t, vol);
            const auto l = loss::loss_on_tape(t, model.record_image(t, step, cam, rc), ref, mode);
            t.backward(l);
            return t.scalar(l);
        };
        // The loss is O(1), so gradients near 1e-6 sit at the differencing roundoff.
        const auto rep = ad::finite_diff_check(f, model.store(), 1e-5, {}, 1e-5);
        CHECK(rep.checked > 0);
        INFO(rep.worst, " tape ", rep.worst_tape, " fd ", rep.worst_fd);
        CHECK(rep.max_rel_error < 1e-4);
    }
}

TEST_CASE("dataset creation")
{
    testutil::TempDir dir("dataset");
    const TinyScene sc(dir.path());
    const auto d = make_dataset(tiny_spec(sc, dir / "a"));
    CHECK(d.views.size() == 6);
    CHECK(d.indices(Split::train).size() == 4);
    CHECK(d.indices(Split::val).size() == 1);
    CHECK(d.indices(Split::test).size() == 1);
    const auto img = d.load_image(0);
    CHECK(img.width == 12);
    CHECK(img.channels == 3);
    double peak = 0.0;
    for (double x : img.data)
        peak = std::max(peak, x);
    CHECK(peak > 0.05);

    const auto again = make_dataset(tiny_spec(sc, dir / "b"));
    for (std::size_t i = 0; i < d.views.size(); ++i) {
        CHECK(testutil::read_bytes(d.resolve(d.views[i].image)) == testutil::read_bytes(again.resolve(again.views[i].image)));
        CHECK(d.views[i].split == again.views[i].split);
    }
    const auto reread = read_dataset(dir / "a" / "dataset.json");
    CHECK(reread.views.size() == 6);
    CHECK(reread.load_image(3).data == d.load_image(3).data);

    auto bad = tiny_spec(sc, dir / "c");
    bad.split = {3, 1};
    CHECK_THROWS_AS(make_dataset(bad), ConfigError);
    CHECK(parse_split("25/7") == std::vector<int>{25, 7});
    CHECK_THROWS_AS(parse_split("25"), ConfigError);
    CHECK_THROWS_AS(parse_split("a/b"), ConfigError);
}

TEST_CASE("training runs, improves, is deterministic and checkpoints")
{
    testutil::TempDir dir("train");
    const TinyScene sc(dir.path());
    const auto data = make_dataset(tiny_spec(sc, dir / "data", 8));

    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.s = 1.0;
    cfg.batch_size = 2;
    cfg.seed = 9;
    auto m1 = Model::create(cfg.model);
    const auto r1 = train::train(cfg, data, m1);
    REQUIRE(r1.log.size() == 6);
    CHECK(r1.log.back().train_loss < r1.log.front().train_loss);
    CHECK(r1.best_val_ssim == doctest::Approx(r1.log[static_cast<std::size_t>(r1.best_epoch)].val_ssim));

    auto m2 = Model::create(cfg.model);
    const auto r2 = train::train(cfg, data, m2);
    for (std::size_t e = 0; e < 6; ++e) {
        CHECK(r1.log[e].train_loss == r2.log[e].train_loss);
        CHECK(r1.log[e].val_ssim == r2.log[e].val_ssim);
    }
    CHECK(m1.params_to_json() == m2.params_to_json());

    save_checkpoint(m1, cfg, r1, dir / "ck.json");
    const auto ck = load_checkpoint(dir / "ck.json");
    CHECK(ck.best_epoch == r1.best_epoch);
    CHECK(ck.model.params_to_json() == m1.params_to_json());
    const auto e1 = evaluate(m1, data, Split::val, 2.0);
    const auto e2 = evaluate(ck.model, data, Split::val, 2.0);
    CHECK(e1.mean_ssim == e2.mean_ssim);
    REQUIRE(e1.views.size() == 1);

    auto other = Model::create(ModelConfig{.kind = ModelKind::mlp_tf});
    CHECK_THROWS_AS(other.params_from_json(m1.params_to_json()), ConfigError);
}

TEST_CASE("ground-truth parameters score perfectly against their own dataset")
{
    testutil::TempDir dir("selfeval");
    const TinyScene sc(dir.path());
    auto spec = tiny_spec(sc, dir / "data");
    spec.s_render = 3.0;
    const auto data = make_dataset(spec);
    auto model = Model::create(ModelConfig{});
    ad::ParamStore gt;
    const auto gt_tf = tf::tf_load_lookup(sc.tf, gt);
    std::copy(gt.value(gt_tf.color).begin(), gt.value(gt_tf.color).end(), model.store().value(model.lookup()->color).begin());
    std::copy(gt.value(gt_tf.kappa).begin(), gt.value(gt_tf.kappa).end(), model.store().value(model.lookup()->kappa).begin());
    const auto rep = evaluate(model, data, Split::train, 3.0);
    CHECK(rep.mean_ssim == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(rep.mean_mse < 1e-12);
}

TEST_CASE("a fully transparent lookup table is a stationary point")
{
    testutil::TempDir dir("stall");
    const TinyScene sc(dir.path());
    // Black ground truth over a black background.
    ad::ParamStore s;
    auto black = tf::LookupTF::create(s);
    for (auto& x : s.value(black.kappa))
        x = tf::kTransparentRaw;
    for (auto& x : s.value(black.color))
        x = 0.0;
    tf::tf_save(black, s, dir / "black.json");
    auto spec = tiny_spec(sc, dir / "data");
    spec.tf_file = dir / "black.json";
    const auto data = make_dataset(spec);

    auto model = Model::create(ModelConfig{});
    for (auto& x : model.store().value(model.lookup()->kappa))
        x = tf::kTransparentRaw;
    for (auto& x : model.store().value(model.lookup()->color))
        x = 0.0;
    const auto before = model.params_to_json();

    const auto vol = grid::load_volume(data.resolve(data.volume));
    ad::Tape t;
    auto step = model.begin_step(t, vol);
    dvr::RenderConfig rc;
    rc.width = rc.height = 12;
    rc.jitter = true;
    rc.background = data.background;
    const auto l = loss::loss_on_tape(t, model.record_image(t, step, data.views[0].camera, rc), data.load_image(0),
                                      loss::LossMode::mse);
    t.backward(l);
    for (std::size_t b = 0; b < model.store().block_count(); ++b)
        for (double g : model.store().grad(b))
            CHECK(g == 0.0);
    model.store().zero_grad();

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    train::train(cfg, data, model);
    CHECK(model.params_to_json() == before);
}

TEST_CASE("a non-finite loss aborts with parameter statistics")
{
    testutil::TempDir dir("nan");
    const TinyScene sc(dir.path());
    auto data = make_dataset(tiny_spec(sc, dir / "data"));
    for (auto i : data.indices(Split::train)) {
        auto img = data.load_image(i);
        img.data[5] = std::nan("");
        image::write_pfm(img, data.resolve(data.views[i].image));
    }
    TrainConfig cfg;
    cfg.epochs = 1;
    auto model = Model::create(cfg.model);
    try {
        train::train(cfg, data, model);
        FAIL("expected an abort");
    } catch (const NumericalAbort& e) {
        CHECK(std::string(e.what()).find("lookup.kappa") != std::string::npos);
    }
}
