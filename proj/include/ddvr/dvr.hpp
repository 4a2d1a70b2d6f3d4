#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "ddvr/adjoint.hpp"
#include "ddvr/camera.hpp"
#include "ddvr/encoder.hpp"
#include "ddvr/grid.hpp"
#include "ddvr/image.hpp"
#include "ddvr/tf.hpp"

namespace ddvr::dvr {

struct RenderConfig {
    /// Samples per voxel length; the step is min_voxel / sampling_rate.
    double sampling_rate = 1.0;
    bool jitter = false;
    /// Upper bound of the first-sample offset; negative means one step.
    double jitter_max = -1.0;
    double alpha_stop = 0.99;
    bool early_termination = true;
    /// One value per color channel; empty means black.
    std::vector<double> background;
    int width = 128;
    int height = 128;
    std::uint64_t seed = 0;
    /// Selects an independent jitter stream (e.g. one per training step).
    std::uint64_t pass = 0;
    int threads = 1;

    void validate() const;
    double step(const grid::GridGeometry& g) const { return g.min_voxel() / sampling_rate; }
};

/// A = 1 - exp(-kappa * dt).
double opacity_from_kappa(double kappa, double dt);

struct ColorAlpha {
    std::vector<double> color;
    double alpha = 0.0;
};

/// Front-to-back alpha blending starting from zero color and opacity.
ColorAlpha composite_front_to_back(std::span<const ColorAlpha> samples, std::size_t n_colors);

// -- classification -------------------------------------------------------------

/// Per-worker scratch space for classifier evaluation.
struct ClassifyWorkspace {
    tf::MlpTF::Workspace mlp;
    std::vector<double> buf;
    bool primed = false; // mlp already holds the activations for the next backward()
};

/// Maps a sampled feature vector to emissive color and absorption.
///
/// Gradients are accumulated into a flat buffer whose layout follows
/// blocks(); finalize_gradient() converts it to gradients of those blocks.
class Classifier {
public:
    virtual ~Classifier() = default;

    virtual std::size_t n_features() const = 0;
    virtual std::size_t n_colors() const = 0;
    virtual std::vector<ad::BlockId> blocks() const { return {}; }
    std::size_t gradient_size(const ad::ParamStore& store) const;

    virtual void classify(std::span<const double> f, std::span<double> color, double& kappa,
                          ClassifyWorkspace& ws) const = 0;
    /// Accumulates d/dparams and d/dfeature (d_f may be empty).
    virtual void backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                          std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const = 0;
    virtual void finalize_gradient(std::span<double>) const {}

    /// Optional activation cache so backward() can skip re-evaluation.
    virtual void save_state(const ClassifyWorkspace&, std::vector<double>& state) const { state.clear(); }
    virtual void load_state(std::span<const double>, std::span<const double>, ClassifyWorkspace&) const {}
};

/// Intensity -> (rgb, kappa) via the mapped lookup table.
///
/// The mapped table is cached at construction; rebuild after parameter updates.
class LookupClassifier final : public Classifier {
public:
    LookupClassifier(const tf::LookupTF& tf, const ad::ParamStore& store);

    std::size_t n_features() const override { return 1; }
    std::size_t n_colors() const override { return 3; }
    std::vector<ad::BlockId> blocks() const override { return {tf_.color, tf_.kappa}; }
    void classify(std::span<const double> f, std::span<double> color, double& kappa,
                  ClassifyWorkspace& ws) const override;
    void backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                  std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const override;
    void finalize_gradient(std::span<double> g) const override;

private:
    tf::LookupTF tf_;
    tf::LookupTF::Table table_;
    std::vector<double> color_gate_;
    std::vector<double> kappa_slope_;
};

/// Features -> (n_out - 1 colors, kappa) from one color_kappa MLP.
class MlpClassifier final : public Classifier {
public:
    MlpClassifier(const tf::MlpTF& mlp, const ad::ParamStore& store);

    std::size_t n_features() const override { return mlp_.n_in; }
    std::size_t n_colors() const override { return mlp_.n_out - 1; }
    std::vector<ad::BlockId> blocks() const override;
    void classify(std::span<const double> f, std::span<double> color, double& kappa,
                  ClassifyWorkspace& ws) const override;
    void backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                  std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const override;

    void save_state(const ClassifyWorkspace& ws, std::vector<double>& state) const override;
    void load_state(std::span<const double> f, std::span<const double> state, ClassifyWorkspace& ws) const override;

private:
    tf::MlpTF mlp_;
    const ad::ParamStore* store_;
};

/// Latent colors are the features themselves; kappa comes from a kappa-head MLP.
class LatentClassifier final : public Classifier {
public:
    LatentClassifier(const tf::MlpTF& kappa_mlp, const ad::ParamStore& store);

    std::size_t n_features() const override { return mlp_.n_in; }
    std::size_t n_colors() const override { return mlp_.n_in; }
    std::vector<ad::BlockId> blocks() const override;
    void classify(std::span<const double> f, std::span<double> color, double& kappa,
                  ClassifyWorkspace& ws) const override;
    void backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                  std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const override;

    void save_state(const ClassifyWorkspace& ws, std::vector<double>& state) const override;
    void load_state(std::span<const double> f, std::span<const double> state, ClassifyWorkspace& ws) const override;

private:
    tf::MlpTF mlp_;
    const ad::ParamStore* store_;
};

/// Feature volume already holds (color..., kappa) per voxel.
class PreclassifiedClassifier final : public Classifier {
public:
    explicit PreclassifiedClassifier(std::size_t n_colors) : n_colors_(n_colors) {}

    std::size_t n_features() const override { return n_colors_ + 1; }
    std::size_t n_colors() const override { return n_colors_; }
    void classify(std::span<const double> f, std::span<double> color, double& kappa,
                  ClassifyWorkspace& ws) const override;
    void backward(std::span<const double> f, std::span<const double> d_color, double d_kappa,
                  std::span<double> d_params, std::span<double> d_f, ClassifyWorkspace& ws) const override;

private:
    std::size_t n_colors_;
};

// -- ray marching -----------------------------------------------------------------

/// One sample along a ray, kept for the reverse replay.
struct RaySampleRecord {
    Vec3 position;
    double transmittance = 1.0; // before this sample
    double alpha = 0.0;
    std::vector<double> feature;
    std::vector<double> emission; // color * dt
    std::vector<double> state;    // classifier activations, see Classifier::save_state
};

struct RayResult {
    std::vector<double> color;
    double alpha = 0.0;
    std::size_t samples = 0;
};

/// Scene data shared by every ray of a render.
struct Scene {
    const grid::GridGeometry* geometry = nullptr;
    std::span<const double> features;
    std::size_t n_features = 1;
    const Classifier* classifier = nullptr;
};

/// First-sample offset for `pixel` under `cfg`.
double ray_offset(const RenderConfig& cfg, std::size_t pixel, double dt);

/// Marches one ray with sample offset t_o. With `records` set, every sample
/// is recorded and early termination is disabled.
RayResult raymarch(const camera::Ray& ray, const Scene& scene, const RenderConfig& cfg, double t_o,
                   ClassifyWorkspace& ws, std::vector<RaySampleRecord>* records = nullptr);

/// Composited image, H x W x (n_C + 1): C' + (1 - A') * background, then A'.
image::ImageF render_composite(const Scene& scene, const camera::Camera& cam, const RenderConfig& cfg);

/// Display image (RGBA in [0,1]). Without a decoder the color space must be RGB;
/// it is clamped to [0,1]. With a decoder the composite is decoded per pixel.
image::ImageF render(const Scene& scene, const camera::Camera& cam, const RenderConfig& cfg,
                     const enc::ImageDecoder* decoder = nullptr, const ad::ParamStore* store = nullptr);

/// Records render_composite on a tape (early termination off). `params` are
/// tape variables for classifier.blocks(). When `feature_grad` is false the
/// feature adjoint is not accumulated.
ad::Var render_on_tape(ad::Tape& tape, const grid::GridGeometry& geometry, ad::Var features,
                       std::size_t n_features, bool feature_grad, const Classifier& classifier,
                       std::span<const ad::Var> params, const camera::Camera& cam, const RenderConfig& cfg);

} // namespace ddvr::dvr
