#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddvr/adjoint.hpp"
#include "ddvr/camera.hpp"
#include "ddvr/dvr.hpp"
#include "ddvr/encoder.hpp"
#include "ddvr/grid.hpp"
#include "ddvr/image.hpp"
#include "ddvr/tf.hpp"

namespace ddvr::train {

enum class ModelKind { lookup, mlp_tf, latent };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

struct ModelConfig {
    ModelKind kind = ModelKind::lookup;
    double kappa_max = tf::kDefaultKappaMax;
    /// 1D transfer-function MLP hidden widths.
    std::vector<std::size_t> mlp_hidden{16, 16};
    /// Latent pipeline: encoder feature channels (= latent colors), kappa MLP and decoder widths.
    std::size_t n_features = 8;
    std::size_t encoder_hidden = 8;
    std::size_t kappa_hidden = 16;
    std::size_t decoder_hidden = 16;
    std::uint64_t seed = 1;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Trainable rendering pipeline: encoder -> classifier -> compositing -> decoder.
///
///   lookup : identity features, 256-bin table
///   mlp_tf : identity features, 1 -> hidden -> 4 MLP
///   latent : TinyEncoder features used as latent colors, kappa MLP, per-pixel decoder
class Model {
public:
    static Model create(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& store() { return store_; }
    const ad::ParamStore& store() const { return store_; }
    std::size_t n_colors() const;

    const std::optional<tf::LookupTF>& lookup() const { return lookup_; }
    const std::optional<tf::MlpTF>& mlp() const { return mlp_; }
    const std::optional<enc::TinyEncoder>& encoder() const { return encoder_; }
    const std::optional<enc::ImageDecoder>& decoder() const { return decoder_; }

    /// Classifier over the current parameter values.
    std::unique_ptr<dvr::Classifier> classifier() const;
    enc::FeatureVolume encode(const grid::Volume3D& vol) const;

    /// RGBA display image. The latent model composites over black and its
    /// decoder produces the whole pixel, so cfg.background is ignored there.
    image::ImageF render(const enc::FeatureVolume& features, const camera::Camera& cam,
                         const dvr::RenderConfig& cfg) const;
    image::ImageF render(const grid::Volume3D& vol, const camera::Camera& cam, const dvr::RenderConfig& cfg) const;

    /// Per-step tape state: features and classifier variables shared by every image of a batch.
    struct StepGraph {
        ad::Var features;
        bool feature_grad = false;
        std::unique_ptr<dvr::Classifier> classifier;
        std::vector<ad::Var> classifier_params;
        grid::GridGeometry geometry;
        std::size_t n_features = 1;
    };
    StepGraph begin_step(ad::Tape& tape, const grid::Volume3D& vol);
    /// RGB prediction (pixels x 3) on the tape.
    ad::Var record_image(ad::Tape& tape, StepGraph& step, const camera::Camera& cam, const dvr::RenderConfig& cfg);

    /// Keeps parameters inside their valid range after an optimizer step.
    void project();
    /// Learning rate used when the training config leaves it unset.
    double default_learning_rate() const;

    nlohmann::json params_to_json() const;
    /// Throws ConfigError when names or shapes disagree with this model.
    void params_from_json(const nlohmann::json& j);

private:
    ModelConfig cfg_;
    ad::ParamStore store_;
    std::optional<tf::LookupTF> lookup_;
    std::optional<tf::MlpTF> mlp_;
    std::optional<enc::TinyEncoder> encoder_;
    std::optional<enc::ImageDecoder> decoder_;
};

} // namespace ddvr::train
