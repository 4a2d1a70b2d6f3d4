#include "ddvr/dvr.hpp"

#include <algorithm>
#include <cmath>

#include "ddvr/error.hpp"
#include "ddvr/parallel.hpp"

namespace ddvr::dvr {

void RenderConfig::validate() const
{
    if (!(sampling_rate > 0.0) || !std::isfinite(sampling_rate))
        throw ConfigError("sampling rate must be positive");
    if (!(alpha_stop > 0.0 && alpha_stop <= 1.0))
        throw ConfigError("alpha_stop must lie in (0, 1]");
    if (width < 1 || height < 1)
        throw ConfigError("image size must be at least 1x1");
}

double opacity_from_kappa(double kappa, double dt)
{
    return -std::expm1(-kappa * dt);
}

ColorAlpha composite_front_to_back(std::span<const ColorAlpha> samples, std::size_t n_colors)
{
    ColorAlpha acc{std::vector<double>(n_colors, 0.0), 0.0};
    for (const auto& s : samples) {
        if (s.color.size() != n_colors)
            throw ShapeError("sample color has the wrong channel count");
        const double t = 1.0 - acc.alpha;
        for (std::size_t c = 0; c < n_colors; ++c)
            acc.color[c] += t * s.color[c];
        acc.alpha += t * s.alpha;
    }
    return acc;
}

// -- classifiers ------------------------------------------------------------------

std::size_t Classifier::gradient_size(const ad::ParamStore& store) const
{
    std::size_t n = 0;
    for (auto b : blocks())
        n += store.value(b).size();
    return n;
}

LookupClassifier::LookupClassifier(const tf::LookupTF& tf, const ad::ParamStore& store)
    : tf_(tf), table_(tf.mapped(store))
{
    const auto raw_c = store.value(tf.color);
    const auto raw_k = store.value(tf.kappa);
    color_gate_.resize(raw_c.size());
    for (std::size_t i = 0; i < raw_c.size(); ++i)
        color_gate_[i] = raw_c[i] >= 0.0 && raw_c[i] <= 1.0 ? 1.0 : 0.0;
    kappa_slope_.resize(raw_k.size());
    for (std::size_t i = 0; i < raw_k.size(); ++i) {
        const double s = ad::kernels::sigmoid(raw_k[i]);
        kappa_slope_[i] = tf.kappa_max * s * (1.0 - s);
    }
}

void LookupClassifier::classify(std::span<const double> f, std::span<double> color, double& kappa,
                                ClassifyWorkspace&) const
{
    const auto [lo, w] = tf::lookup_position(f[0]);
    const double* c0 = &table_.color[lo * 3];
    for (int c = 0; c < 3; ++c)
        color[c] = (1.0 - w) * c0[c] + w * c0[c + 3];
    kappa = (1.0 - w) * table_.kappa[lo] + w * table_.kappa[lo + 1];
}

void LookupClassifier::backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                                std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace&) const
{
    const auto [lo, w] = tf::lookup_position(f[0]);
    double* dc = d_params.data() + lo * 3;
    for (int c = 0; c < 3; ++c) {
        dc[c] += (1.0 - w) * d_color[c];
        dc[c + 3] += w * d_color[c];
    }
    double* dk = d_params.data() + tf::kLookupBins * 3;
    dk[lo] += (1.0 - w) * d_kappa;
    dk[lo + 1] += w * d_kappa;
    if (!d_f.empty() && f[0] >= 0.0 && f[0] <= 1.0) {
        const double* c0 = &table_.color[lo * 3];
        double g = d_kappa * (table_.kappa[lo + 1] - table_.kappa[lo]);
        for (int c = 0; c < 3; ++c)
            g += d_color[c] * (c0[c + 3] - c0[c]);
        d_f[0] += g * static_cast<double>(tf::kLookupBins - 1);
    }
}

void LookupClassifier::finalize_gradient(std::span<double> g) const
{
    for (std::size_t i = 0; i < color_gate_.size(); ++i)
        g[i] *= color_gate_[i];
    for (std::size_t i = 0; i < kappa_slope_.size(); ++i)
        g[color_gate_.size() + i] *= kappa_slope_[i];
}

namespace {

std::vector<ad::BlockId> mlp_blocks(const tf::MlpTF& m)
{
    std::vector<ad::BlockId> b;
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
        b.push_back(m.weights[l]);
        b.push_back(m.biases[l]);
    }
    return b;
}

} // namespace

MlpClassifier::MlpClassifier(const tf::MlpTF& mlp, const ad::ParamStore& store) : mlp_(mlp), store_(&store)
{
    if (mlp.head != tf::MlpTF::Head::color_kappa || mlp.n_out < 2)
        throw ConfigError("MLP transfer function needs a color+kappa head");
}

std::vector<ad::BlockId> MlpClassifier::blocks() const { return mlp_blocks(mlp_); }

void MlpClassifier::classify(std::span<const double> f, std::span<double> color, double& kappa,
                             ClassifyWorkspace& ws) const
{
    mlp_.forward(*store_, f, ws.mlp);
    const auto out = mlp_.output(ws.mlp);
    std::copy(out.begin(), out.end() - 1, color.begin());
    kappa = out.back();
}

void MlpClassifier::backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                             std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const
{
    if (!ws.primed)
        mlp_.forward(*store_, f, ws.mlp);
    ws.primed = false;
    ws.buf.assign(d_color.begin(), d_color.end());
    ws.buf.push_back(d_kappa);
    mlp_.backward(*store_, ws.mlp, ws.buf, d_params, d_f);
}

LatentClassifier::LatentClassifier(const tf::MlpTF& kappa_mlp, const ad::ParamStore& store)
    : mlp_(kappa_mlp), store_(&store)
{
    if (kappa_mlp.head != tf::MlpTF::Head::kappa)
        throw ConfigError("latent classifier needs a kappa-head MLP");
}

std::vector<ad::BlockId> LatentClassifier::blocks() const { return mlp_blocks(mlp_); }

void LatentClassifier::classify(std::span<const double> f, std::span<double> color, double& kappa,
                                ClassifyWorkspace& ws) const
{
    std::copy(f.begin(), f.end(), color.begin());
    mlp_.forward(*store_, f, ws.mlp);
    kappa = mlp_.output(ws.mlp)[0];
}

void LatentClassifier::backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                                std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const
{
    if (!d_f.empty())
        for (std::size_t c = 0; c < d_color.size(); ++c)
            d_f[c] += d_color[c];
    if (!ws.primed)
        mlp_.forward(*store_, f, ws.mlp);
    ws.primed = false;
    mlp_.backward(*store_, ws.mlp, std::span<const double>(&d_kappa, 1), d_params, d_f);
}

namespace {

void save_activations(const tf::MlpTF::Workspace& ws, std::vector<double>& state)
{
    state.clear();
    for (std::size_t l = 1; l < ws.act.size(); ++l)
        state.insert(state.end(), ws.act[l].begin(), ws.act[l].end());
}

void load_activations(std::span<const double> f, std::span<const double> state, ClassifyWorkspace& ws)
{
    auto& act = ws.mlp.act;
    if (state.empty() || act.empty())
        return;
    act[0].assign(f.begin(), f.end());
    std::size_t off = 0;
    for (std::size_t l = 1; l < act.size(); ++l) {
        std::copy_n(state.begin() + static_cast<std::ptrdiff_t>(off), act[l].size(), act[l].begin());
        off += act[l].size();
    }
    ws.primed = true;
}

} // namespace

void MlpClassifier::save_state(const ClassifyWorkspace& ws, std::vector<double>& state) const
{
    save_activations(ws.mlp, state);
}

void MlpClassifier::load_state(std::span<const double> f, std::span<const double> state, ClassifyWorkspace& ws) const
{
    load_activations(f, state, ws);
}

void LatentClassifier::save_state(const ClassifyWorkspace& ws, std::vector<double>& state) const
{
    save_activations(ws.mlp, state);
}

void LatentClassifier::load_state(std::span<const double> f, std::span<const double> state,
                                  ClassifyWorkspace& ws) const
{
    load_activations(f, state, ws);
}

void PreclassifiedClassifier::classify(std::span<const double> f, std::span<double> color, double& kappa,
                                       ClassifyWorkspace&) const
{
    std::copy(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(n_colors_), color.begin());
    kappa = std::max(0.0, f[n_colors_]);
}

void PreclassifiedClassifier::backward(std::span<const double> f, std::span<const double> d_color,
                                       double d_kappa, std::span<double>, std::span<double> d_f,
                                       ClassifyWorkspace&) const
{
    if (d_f.empty())
        return;
    for (std::size_t c = 0; c < n_colors_; ++c)
        d_f[c] += d_color[c];
    if (f[n_colors_] > 0.0)
        d_f[n_colors_] += d_kappa;
}

// -- ray marching -----------------------------------------------------------------

double ray_offset(const RenderConfig& cfg, std::size_t pixel, double dt)
{
    if (!cfg.jitter)
        return 0.0;
    camera::JitterRng rng(camera::ray_key(cfg.seed, cfg.pass, pixel));
    return camera::jitter_offset(rng, cfg.jitter_max < 0.0 ? dt : cfg.jitter_max);
}

RayResult raymarch(const camera::Ray& ray, const Scene& scene, const RenderConfig& cfg, double t_o,
                   ClassifyWorkspace& ws, std::vector<RaySampleRecord>* records)
{
    const std::size_t nc = scene.classifier->n_colors();
    const std::size_t nf = scene.n_features;
    RayResult r{std::vector<double>(nc, 0.0), 0.0, 0};
    if (!ray.hits())
        return r;
    const double dt = cfg.step(*scene.geometry);
    const bool stop_early = cfg.early_termination && records == nullptr;

    std::vector<double> f(nf), color(nc);
    double transmittance = 1.0;
    for (std::size_t i = 0;; ++i) {
        const double t = ray.t_near + t_o + static_cast<double>(i) * dt;
        if (t > ray.t_far)
            break;
        const Vec3 x = ray.origin + ray.dir * t;
        grid::sample_trilinear(*scene.geometry, scene.features, nf, x, f);
        double kappa = 0.0;
        scene.classifier->classify(f, color, kappa, ws);
        const double a = opacity_from_kappa(kappa, dt);
        if (records) {
            if (records->size() <= i)
                records->emplace_back();
            auto& rec = (*records)[i];
            rec.position = x;
            rec.transmittance = transmittance;
            rec.alpha = a;
            rec.feature.assign(f.begin(), f.end());
            rec.emission.resize(nc);
            for (std::size_t c = 0; c < nc; ++c)
                rec.emission[c] = color[c] * dt;
            scene.classifier->save_state(ws, rec.state);
        }
        for (std::size_t c = 0; c < nc; ++c)
            r.color[c] += transmittance * color[c] * dt;
        r.alpha += transmittance * a;
        transmittance *= 1.0 - a;
        ++r.samples;
        if (stop_early && r.alpha >= cfg.alpha_stop)
            break;
    }
    return r;
}

namespace {

void check_scene(const Scene& scene, const RenderConfig& cfg)
{
    cfg.validate();
    if (!scene.geometry || !scene.classifier)
        throw ConfigError("scene needs geometry and a classifier");
    if (scene.n_features != scene.classifier->n_features())
        throw ConfigError("feature volume has " + std::to_string(scene.n_features) + " channels, classifier expects " +
                          std::to_string(scene.classifier->n_features()));
    if (scene.features.size() != scene.geometry->dims().count() * scene.n_features)
        throw ShapeError("feature data does not match the grid");
    if (!cfg.background.empty() && cfg.background.size() != scene.classifier->n_colors())
        throw ConfigError("background needs one value per color channel");
}

std::vector<double> background_of(const RenderConfig& cfg, std::size_t nc)
{
    return cfg.background.empty() ? std::vector<double>(nc, 0.0) : cfg.background;
}

} // namespace

image::ImageF render_composite(const Scene& scene, const camera::Camera& cam, const RenderConfig& cfg)
{
    check_scene(scene, cfg);
    cam.validate();
    const std::size_t nc = scene.classifier->n_colors();
    const auto bg = background_of(cfg, nc);
    const auto box = scene.geometry->bbox();
    const double dt = cfg.step(*scene.geometry);
    image::ImageF img(cfg.width, cfg.height, static_cast<int>(nc + 1));
    parallel_ranges(static_cast<std::size_t>(cfg.height), cfg.threads, [&](std::size_t, std::size_t y0, std::size_t y1) {
        ClassifyWorkspace ws;
        for (std::size_t y = y0; y < y1; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                const std::size_t pixel = y * static_cast<std::size_t>(cfg.width) + x;
                const auto ray = camera::generate_ray(cam, cfg.width, cfg.height, x, static_cast<int>(y), box);
                const auto r = raymarch(ray, scene, cfg, ray_offset(cfg, pixel, dt), ws);
                double* out = img.data.data() + pixel * (nc + 1);
                for (std::size_t c = 0; c < nc; ++c)
                    out[c] = r.color[c] + (1.0 - r.alpha) * bg[c];
                out[nc] = r.alpha;
            }
    });
    return img;
}

image::ImageF render(const Scene& scene, const camera::Camera& cam, const RenderConfig& cfg,
                     const enc::ImageDecoder* decoder, const ad::ParamStore* store)
{
    const std::size_t nc = scene.classifier ? scene.classifier->n_colors() : 0;
    if (decoder) {
        if (decoder->n_colors != nc)
            throw ConfigError("decoder expects " + std::to_string(decoder->n_colors) + " colors, scene produces " +
                              std::to_string(nc));
        if (!store && !decoder->identity)
            throw ConfigError("decoder needs a parameter store");
        const ad::ParamStore empty;
        return enc::decode_image(*decoder, store ? *store : empty, render_composite(scene, cam, cfg));
    }
    if (nc != 3)
        throw ConfigError("a " + std::to_string(nc) + "-channel color space needs a decoder");
    auto img = render_composite(scene, cam, cfg);
    for (std::size_t p = 0; p < img.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c)
            img.data[p * 4 + c] = std::clamp(img.data[p * 4 + c], 0.0, 1.0);
    return img;
}

// -- differentiable rendering -------------------------------------------------------

ad::Var render_on_tape(ad::Tape& tape, const grid::GridGeometry& geometry, ad::Var features,
                       std::size_t n_features, bool feature_grad, const Classifier& classifier,
                       std::span<const ad::Var> params, const camera::Camera& cam, const RenderConfig& cfg_in)
{
    RenderConfig cfg = cfg_in;
    cfg.early_termination = false;
    const Scene scene{&geometry, tape.value(features), n_features, &classifier};
    auto composite = render_composite(scene, cam, cfg);

    std::vector<ad::Var> inputs{features};
    inputs.insert(inputs.end(), params.begin(), params.end());
    const std::vector<ad::Var> pvars(params.begin(), params.end());

    // Re-marches every ray with records and replays the compositing adjoint
    // back to front. Per-worker buffers are reduced in worker order.
    auto backward = [cfg, cam, geometry, features, pvars, n_features, feature_grad,
                     &classifier](ad::Tape& t, ad::Var self) {
        const std::size_t nc = classifier.n_colors();
        const std::size_t nf = n_features;
        const auto bg = background_of(cfg, nc);
        const auto box = geometry.bbox();
        const double dt = cfg.step(geometry);
        const std::span<const double> g_out = t.adjoint(self);
        const std::span<const double> fvals = t.value(features);
        std::size_t n_params = 0;
        for (auto v : pvars)
            n_params += t.size(v);

        const std::size_t rows = static_cast<std::size_t>(cfg.height);
        const std::size_t workers = worker_count(rows, cfg.threads);
        std::vector<std::vector<double>> d_params(workers, std::vector<double>(n_params, 0.0));
        std::vector<std::vector<double>> d_feat(workers);
        const Scene sc{&geometry, fvals, nf, &classifier};

        parallel_ranges(rows, cfg.threads, [&](std::size_t w, std::size_t y0, std::size_t y1) {
            ClassifyWorkspace ws;
            std::vector<RaySampleRecord> recs;
            std::vector<double> R(nc), d_color(nc), d_f(nf);
            auto& dp = d_params[w];
            auto& dF = d_feat[w];
            if (feature_grad)
                dF.assign(fvals.size(), 0.0);
            for (std::size_t y = y0; y < y1; ++y)
                for (int x = 0; x < cfg.width; ++x) {
                    const std::size_t pixel = y * static_cast<std::size_t>(cfg.width) + x;
                    const double* g = g_out.data() + pixel * (nc + 1);
                    if (std::all_of(g, g + nc + 1, [](double v) { return v == 0.0; }))
                        continue;
                    double g_alpha = g[nc];
                    for (std::size_t c = 0; c < nc; ++c)
                        g_alpha -= g[c] * bg[c];

                    const auto ray = camera::generate_ray(cam, cfg.width, cfg.height, x, static_cast<int>(y), box);
                    const auto r = raymarch(ray, sc, cfg, ray_offset(cfg, pixel, dt), ws, &recs);
                    std::fill(R.begin(), R.end(), 0.0);
                    double RA = 0.0;
                    for (std::size_t i = r.samples; i-- > 0;) {
                        const auto& rec = recs[i];
                        const double T = rec.transmittance;
                        const double A = rec.alpha;
                        double d_a = g_alpha * (1.0 - RA);
                        for (std::size_t c = 0; c < nc; ++c) {
                            d_a -= g[c] * R[c];
                            d_color[c] = g[c] * T * dt;
                        }
                        d_a *= T;
                        const double d_kappa = d_a * dt * (1.0 - A);
                        if (feature_grad)
                            std::fill(d_f.begin(), d_f.end(), 0.0);
                        classifier.load_state(rec.feature, rec.state, ws);
                        classifier.backward(rec.feature, d_color, d_kappa, dp,
                                            feature_grad ? std::span<double>(d_f) : std::span<double>{}, ws);
                        if (feature_grad) {
                            const auto corners = geometry.corners(rec.position);
                            for (int k = 0; k < 8; ++k) {
                                const double wk = corners.weight[k];
                                if (wk == 0.0)
                                    continue;
                                double* dst = dF.data() + corners.voxel[k] * nf;
                                for (std::size_t ch = 0; ch < nf; ++ch)
                                    dst[ch] += wk * d_f[ch];
                            }
                        }
                        for (std::size_t c = 0; c < nc; ++c)
                            R[c] = rec.emission[c] + (1.0 - A) * R[c];
                        RA = A + (1.0 - A) * RA;
                    }
                }
        });

        std::vector<double> total(n_params, 0.0);
        for (const auto& dp : d_params)
            for (std::size_t i = 0; i < n_params; ++i)
                total[i] += dp[i];
        classifier.finalize_gradient(total);
        std::size_t off = 0;
        for (auto v : pvars) {
            auto a = t.adjoint(v);
            for (std::size_t i = 0; i < a.size(); ++i)
                a[i] += total[off + i];
            off += a.size();
        }
        if (feature_grad) {
            auto a = t.adjoint(features);
            for (const auto& dF : d_feat)
                for (std::size_t i = 0; i < a.size(); ++i)
                    a[i] += dF[i];
        }
    };
    return tape.custom(inputs, std::move(composite.data), std::move(backward));
}

} // namespace ddvr::dvr
