#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "ddvr/adjoint.hpp"

namespace ddvr::tf {

constexpr std::size_t kLookupBins = 256;
constexpr double kDefaultKappaMax = 64.0;
/// Raw opacity parameter that maps to exactly zero absorption.
constexpr double kTransparentRaw = -1000.0;

/// 256 bins of (r, g, b, kappa_raw) over normalized intensity.
///
/// Colors are clamped to [0,1]; kappa = kappa_max * sigmoid(kappa_raw).
/// Evaluation interpolates the mapped bins linearly at u = intensity * 255.
struct LookupTF {
    double kappa_max = kDefaultKappaMax;
    ad::BlockId color = 0; // [256, 3]
    ad::BlockId kappa = 0; // [256]

    /// Grayscale ramp, kappa ~= 0.05 * kappa_max in every bin.
    static LookupTF create(ad::ParamStore& store, double kappa_max = kDefaultKappaMax,
                           const std::string& prefix = "lookup");
    /// Inverse of the mapping; zero kappa becomes kTransparentRaw.
    static LookupTF from_mapped(ad::ParamStore& store, std::span<const double> rgb, std::span<const double> kappa,
                                double kappa_max = kDefaultKappaMax, const std::string& prefix = "lookup");

    struct Table {
        std::vector<double> color; // 256 x 3
        std::vector<double> kappa; // 256
    };
    Table mapped(const ad::ParamStore& store) const;

    /// Projects raw colors back into [0,1] (applied after optimizer steps).
    void project(ad::ParamStore& store) const;
};

struct Optical {
    std::array<double, 3> rgb{};
    double kappa = 0.0;
};

struct BinPosition {
    std::size_t lo = 0;
    double frac = 0.0;
};
/// Lower bin and interpolation weight; intensity is clamped to [0,1] first.
BinPosition lookup_position(double intensity);

Optical lookup_eval(const LookupTF::Table& table, double intensity);
Optical lookup_eval(const LookupTF& tf, const ad::ParamStore& store, double intensity);

/// Fully connected network: affine + ReLU hidden layers, sigmoid output.
///
/// With head == color_kappa the last output is an absorption coefficient and
/// is scaled by kappa_max; with head == kappa the single output is.
struct MlpTF {
    enum class Head { color, kappa, color_kappa };

    std::size_t n_in = 1;
    std::vector<std::size_t> hidden;
    std::size_t n_out = 4;
    Head head = Head::color_kappa;
    double kappa_max = kDefaultKappaMax;
    std::vector<ad::BlockId> weights;
    std::vector<ad::BlockId> biases;

    /// Uniform fan-in initialization; a kappa output starts near 0.05 * kappa_max.
    static MlpTF create(ad::ParamStore& store, const std::string& prefix, std::size_t n_in,
                        std::vector<std::size_t> hidden, std::size_t n_out, Head head,
                        double kappa_max = kDefaultKappaMax, std::uint64_t seed = 1);

    std::size_t layer_count() const { return weights.size(); }
    std::size_t layer_in(std::size_t l) const { return l == 0 ? n_in : hidden[l - 1]; }
    std::size_t layer_out(std::size_t l) const { return l == hidden.size() ? n_out : hidden[l]; }
    std::size_t parameter_count() const;
    bool scales_output(std::size_t o) const
    {
        return head == Head::kappa || (head == Head::color_kappa && o + 1 == n_out);
    }

    /// Activations kept for a hand-written backward pass.
    struct Workspace {
        std::vector<std::vector<double>> act; // act[0] = input, act[l+1] = layer l output
        std::vector<std::vector<double>> delta;
    };
    void forward(const ad::ParamStore& store, std::span<const double> in, Workspace& ws) const;
    /// Output of the last forward (after sigmoid and kappa scaling).
    std::span<const double> output(const Workspace& ws) const { return ws.act.back(); }
    /// Given d(loss)/d(output), accumulates parameter gradients into `grad`
    /// (layout: w0, b0, w1, b1, ...) and d(loss)/d(input) into `d_in` if non-empty.
    void backward(const ad::ParamStore& store, Workspace& ws, std::span<const double> d_out,
                  std::span<double> grad, std::span<double> d_in) const;

    /// Same network recorded on a tape.
    ad::Var record(ad::Tape& tape, ad::ParamStore& store, ad::Var input) const;
};

std::vector<double> mlp_eval(const MlpTF& tf, const ad::ParamStore& store, std::span<const double> feature);

// -- files --------------------------------------------------------------------

nlohmann::json to_json(const LookupTF& tf, const ad::ParamStore& store);
nlohmann::json to_json(const MlpTF& tf, const ad::ParamStore& store);

void tf_save(const LookupTF& tf, const ad::ParamStore& store, const std::filesystem::path& file);
void tf_save(const MlpTF& tf, const ad::ParamStore& store, const std::filesystem::path& file);

using AnyTF = std::variant<LookupTF, MlpTF>;

/// Adds the file's parameters to `store` under `prefix`.
AnyTF tf_from_json(const nlohmann::json& j, ad::ParamStore& store, const std::string& prefix);
AnyTF tf_load(const std::filesystem::path& file, ad::ParamStore& store, const std::string& prefix = "tf");
/// Throws TfKindError when the file holds another kind.
LookupTF tf_load_lookup(const std::filesystem::path& file, ad::ParamStore& store,
                        const std::string& prefix = "lookup");
MlpTF tf_load_mlp(const std::filesystem::path& file, ad::ParamStore& store, const std::string& prefix = "mlp");

/// 256 lines "r,g,b,kappa" of the mapped table.
void export_lookup_csv(const LookupTF& tf, const ad::ParamStore& store, const std::filesystem::path& file);

} // namespace ddvr::tf
