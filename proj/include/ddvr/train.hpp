#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddvr/adjoint.hpp"
#include "ddvr/dataset.hpp"
#include "ddvr/loss_metrics.hpp"
#include "ddvr/model.hpp"

namespace ddvr::train {

struct TrainConfig {
    ModelConfig model;
    int epochs = 100;
    /// Non-positive: the model's preset (0.3 lookup, 0.05 MLP, 0.003 latent).
    double lr = 0.0;
    /// Non-positive: preset from the (final) sampling rate.
    int batch_size = 0;
    bool annealed = false;
    double s = 1.0;
    double s_low = 0.1;
    double s_high = 2.0;
    bool jitter = true;
    /// Unset: MSE for 1D transfer functions, MSE + SSIM for the latent model.
    std::optional<loss::LossMode> loss;
    std::uint64_t seed = 0;
    int threads = 1;
    std::filesystem::path dataset;
    std::filesystem::path out_dir;

    void validate() const;
    double learning_rate() const;
    loss::LossMode loss_mode() const;
    int resolved_batch_size() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Fields present in `j` override `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// s(e) = s_l (1 - (e/E)^2) + (e/E)^2 s_h.
double annealed_sampling_rate(int e, int epochs, double s_low, double s_high);

/// {12, 6, 3, 2, 1} for s in {0.25, 0.5, 1, 2, 3}; other rates use the next listed rate at or above s.
int batch_size_preset(double s);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    AdamState() = default;
    explicit AdamState(const ad::ParamStore& store);
};

/// Bias-corrected Adam update of every block, then zeroes the gradients.
void adam_step(AdamState& state, ad::ParamStore& store, double lr);

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double val_ssim = 0.0;
    double val_mse = 0.0;
    double s = 0.0;
    double wall_ms = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

struct TrainResult {
    std::vector<EpochMetrics> log;
    int best_epoch = -1;
    double best_val_ssim = -1.0;
    double total_wall_ms = 0.0;
};

/// Runs the epoch loop. On return `model` holds the parameters of the best
/// validation epoch. `on_epoch` is called after every epoch.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, Model& model,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Reads cfg.dataset, trains a fresh model and writes out_dir/checkpoint.json
/// and out_dir/metrics.jsonl.
TrainResult train(const TrainConfig& cfg);

struct Checkpoint {
    Model model;
    nlohmann::json config;
    int best_epoch = -1;
    double best_val_ssim = -1.0;
};

void save_checkpoint(const Model& model, const TrainConfig& cfg, const TrainResult& result,
                     const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

struct ViewScore {
    std::size_t view = 0;
    double ssim = 0.0;
    double mse = 0.0;
};

struct EvalReport {
    Split split = Split::test;
    double s = 3.0;
    std::vector<ViewScore> views;
    double mean_ssim = 0.0;
    double mean_mse = 0.0;
};

nlohmann::json to_json(const EvalReport& r);

/// Renders every view of `split` at s_eval without jitter and compares to the ground truth.
EvalReport evaluate(const Model& model, const DatasetManifest& data, Split split, double s_eval = 3.0,
                    int threads = 1);

} // namespace ddvr::train
