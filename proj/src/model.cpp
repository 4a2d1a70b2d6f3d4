#include "ddvr/model.hpp"

#include <algorithm>

#include "ddvr/error.hpp"

namespace ddvr::train {

using nlohmann::json;

std::string to_string(ModelKind k)
{
    switch (k) {
    case ModelKind::lookup: return "lookup";
    case ModelKind::mlp_tf: return "mlp-tf";
    case ModelKind::latent: return "latent";
    }
    return "?";
}

ModelKind model_kind_from_string(const std::string& s)
{
    if (s == "lookup")
        return ModelKind::lookup;
    if (s == "mlp-tf" || s == "mlp")
        return ModelKind::mlp_tf;
    if (s == "latent")
        return ModelKind::latent;
    throw ConfigError("unknown model '" + s + "' (expected lookup, mlp-tf or latent)");
}

json to_json(const ModelConfig& c)
{
    return json{{"kind", to_string(c.kind)},           {"kappa_max", c.kappa_max},
                {"mlp_hidden", c.mlp_hidden},          {"n_features", c.n_features},
                {"encoder_hidden", c.encoder_hidden},  {"kappa_hidden", c.kappa_hidden},
                {"decoder_hidden", c.decoder_hidden},  {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j)
{
    ModelConfig c;
    try {
        c.kind = model_kind_from_string(j.at("kind").get<std::string>());
        c.kappa_max = j.value("kappa_max", c.kappa_max);
        c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
        c.n_features = j.value("n_features", c.n_features);
        c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
        c.kappa_hidden = j.value("kappa_hidden", c.kappa_hidden);
        c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    return c;
}

Model Model::create(const ModelConfig& cfg)
{
    if (!(cfg.kappa_max > 0.0))
        throw ConfigError("kappa_max must be positive");
    Model m;
    m.cfg_ = cfg;
    switch (cfg.kind) {
    case ModelKind::lookup:
        m.lookup_ = tf::LookupTF::create(m.store_, cfg.kappa_max);
        break;
    case ModelKind::mlp_tf:
        m.mlp_ = tf::MlpTF::create(m.store_, "mlp", 1, cfg.mlp_hidden, 4, tf::MlpTF::Head::color_kappa,
                                   cfg.kappa_max, cfg.seed);
        break;
    case ModelKind::latent:
        if (cfg.n_features == 0)
            throw ConfigError("latent model needs at least one feature channel");
        m.encoder_ = enc::TinyEncoder::create(m.store_, cfg.n_features, cfg.seed, "encoder", cfg.encoder_hidden);
        m.mlp_ = tf::MlpTF::create(m.store_, "kappa", cfg.n_features, {cfg.kappa_hidden}, 1, tf::MlpTF::Head::kappa,
                                   cfg.kappa_max, cfg.seed + 1);
        m.decoder_ = enc::ImageDecoder::create(m.store_, cfg.n_features, cfg.seed + 2, "decoder", cfg.decoder_hidden);
        break;
    }
    return m;
}

std::size_t Model::n_colors() const
{
    return cfg_.kind == ModelKind::latent ? cfg_.n_features : 3;
}

std::unique_ptr<dvr::Classifier> Model::classifier() const
{
    switch (cfg_.kind) {
    case ModelKind::lookup: return std::make_unique<dvr::LookupClassifier>(*lookup_, store_);
    case ModelKind::mlp_tf: return std::make_unique<dvr::MlpClassifier>(*mlp_, store_);
    case ModelKind::latent: return std::make_unique<dvr::LatentClassifier>(*mlp_, store_);
    }
    return nullptr;
}

enc::FeatureVolume Model::encode(const grid::Volume3D& vol) const
{
    if (vol.channels != 1)
        throw ShapeError("models take a single-channel intensity volume");
    return encoder_ ? enc::encode_tiny(*encoder_, store_, vol) : enc::encode_identity(vol);
}

image::ImageF Model::render(const enc::FeatureVolume& features, const camera::Camera& cam,
                            const dvr::RenderConfig& cfg) const
{
    const auto cls = classifier();
    const dvr::Scene scene{&features.volume.geometry, features.volume.data, features.volume.channels, cls.get()};
    if (cfg_.kind != ModelKind::latent)
        return dvr::render(scene, cam, cfg);
    dvr::RenderConfig latent_cfg = cfg;
    latent_cfg.background.clear();
    return dvr::render(scene, cam, latent_cfg, &*decoder_, &store_);
}

image::ImageF Model::render(const grid::Volume3D& vol, const camera::Camera& cam, const dvr::RenderConfig& cfg) const
{
    return render(encode(vol), cam, cfg);
}

Model::StepGraph Model::begin_step(ad::Tape& tape, const grid::Volume3D& vol)
{
    if (vol.channels != 1)
        throw ShapeError("models take a single-channel intensity volume");
    StepGraph s;
    s.geometry = vol.geometry;
    const ad::Var intensity = tape.leaf(vol.data);
    if (encoder_) {
        s.features = encoder_->record(tape, store_, intensity, vol.dims());
        s.feature_grad = true;
        s.n_features = encoder_->n_features;
    } else {
        s.features = intensity;
        s.n_features = 1;
    }
    s.classifier = classifier();
    for (auto b : s.classifier->blocks())
        s.classifier_params.push_back(tape.param(store_, b));
    return s;
}

ad::Var Model::record_image(ad::Tape& tape, StepGraph& step, const camera::Camera& cam, const dvr::RenderConfig& cfg)
{
    dvr::RenderConfig c = cfg;
    if (cfg_.kind == ModelKind::latent)
        c.background.clear();
    const ad::Var out = dvr::render_on_tape(tape, step.geometry, step.features, step.n_features, step.feature_grad,
                                            *step.classifier, step.classifier_params, cam, c);
    const std::size_t nc = n_colors();
    const ad::Var colors = tape.select_channels(out, nc + 1, 0, nc);
    if (cfg_.kind == ModelKind::latent)
        return decoder_->record(tape, store_, colors);
    return tape.clamp01(colors);
}

void Model::project()
{
    if (lookup_)
        lookup_->project(store_);
}

double Model::default_learning_rate() const
{
    switch (cfg_.kind) {
    case ModelKind::lookup: return 0.3;
    case ModelKind::mlp_tf: return 0.05;
    case ModelKind::latent: return 0.003;
    }
    return 0.0;
}

json Model::params_to_json() const
{
    json arr = json::array();
    for (std::size_t b = 0; b < store_.block_count(); ++b) {
        const auto v = store_.value(b);
        arr.push_back({{"name", store_.name(b)},
                       {"shape", store_.shape(b)},
                       {"values", std::vector<double>(v.begin(), v.end())}});
    }
    return arr;
}

void Model::params_from_json(const json& j)
{
    try {
        if (j.size() != store_.block_count())
            throw ConfigError("checkpoint holds " + std::to_string(j.size()) + " parameter blocks, model has " +
                              std::to_string(store_.block_count()));
        for (const auto& e : j) {
            const auto name = e.at("name").get<std::string>();
            if (!store_.contains(name))
                throw ConfigError("checkpoint parameter '" + name + "' does not belong to this model");
            const auto b = store_.find(name);
            if (e.at("shape").get<std::vector<std::size_t>>() != store_.shape(b))
                throw ConfigError("checkpoint parameter '" + name + "' has the wrong shape");
            const auto values = e.at("values").get<std::vector<double>>();
            auto dst = store_.value(b);
            if (values.size() != dst.size())
                throw ConfigError("checkpoint parameter '" + name + "' has the wrong size");
            std::copy(values.begin(), values.end(), dst.begin());
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint parameters: ") + e.what());
    }
}

} // namespace ddvr::train
