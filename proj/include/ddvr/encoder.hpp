#pragma once

#include <cstdint>
#include <string>

#include "ddvr/adjoint.hpp"
#include "ddvr/grid.hpp"
#include "ddvr/image.hpp"
#include "ddvr/tf.hpp"

namespace ddvr::enc {

enum class Provenance { identity, analytic, learned, preclassified };

struct FeatureVolume {
    grid::Volume3D volume;
    Provenance provenance = Provenance::identity;

    std::size_t n_features() const { return volume.channels; }
};

FeatureVolume encode_identity(const grid::Volume3D& vol);

/// Channel 0: intensity. Channel 1: central-difference gradient magnitude
/// divided by its 99th percentile over all voxels, clamped to [0,1].
FeatureVolume encode_analytic(const grid::Volume3D& vol);

/// conv3 (1 -> hidden) -> ReLU -> conv3 (hidden -> n_features).
struct TinyEncoder {
    std::size_t hidden = 8;
    std::size_t n_features = 8;
    ad::BlockId w0 = 0, b0 = 0, w1 = 0, b1 = 0;

    static TinyEncoder create(ad::ParamStore& store, std::size_t n_features = 8, std::uint64_t seed = 1,
                              const std::string& prefix = "encoder", std::size_t hidden = 8);

    /// `intensity` holds one value per voxel of `dims`; the result holds n_features per voxel.
    ad::Var record(ad::Tape& tape, ad::ParamStore& store, ad::Var intensity, grid::Dims3 dims) const;
};

FeatureVolume encode_tiny(const TinyEncoder& enc, const ad::ParamStore& store, const grid::Volume3D& vol);

/// Per-pixel n_C -> 16 -> 3 MLP applied after compositing. Alpha is not touched.
struct ImageDecoder {
    std::size_t n_colors = 3;
    bool identity = false;
    tf::MlpTF mlp;

    static ImageDecoder create(ad::ParamStore& store, std::size_t n_colors, std::uint64_t seed = 1,
                               const std::string& prefix = "decoder", std::size_t hidden = 16);
    /// Bypass mode for n_C = 3: output equals input.
    static ImageDecoder identity_decoder();

    /// `colors` holds n_colors values per pixel; returns 3 per pixel.
    ad::Var record(ad::Tape& tape, ad::ParamStore& store, ad::Var colors) const;
};

/// `latent` is H x W x (n_C + 1) with alpha last; the result is RGBA.
image::ImageF decode_image(const ImageDecoder& dec, const ad::ParamStore& store, const image::ImageF& latent);

} // namespace ddvr::enc
