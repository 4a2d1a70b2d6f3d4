#include "ddvr/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ddvr/error.hpp"

namespace ddvr::enc {

FeatureVolume encode_identity(const grid::Volume3D& vol)
{
    return {vol, Provenance::identity};
}

FeatureVolume encode_analytic(const grid::Volume3D& vol)
{
    if (vol.channels != 1)
        throw ShapeError("encode_analytic expects a single-channel volume");
    const auto& d = vol.dims();
    std::vector<double> mag(vol.voxel_count());
    for (std::size_t k = 0; k < d.nz; ++k)
        for (std::size_t j = 0; j < d.ny; ++j)
            for (std::size_t i = 0; i < d.nx; ++i)
                mag[vol.index(i, j, k)] = length(grid::gradient_central(vol, vol.geometry.voxel_center(i, j, k)));

    std::vector<double> sorted = mag;
    const std::size_t rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(sorted.size()))) - 1;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
    // Below this the field is constant up to interpolation roundoff.
    const double p99 = sorted[rank] > 1e-9 ? sorted[rank] : 0.0;

    FeatureVolume out{grid::Volume3D(d, vol.geometry.spacing(), 2), Provenance::analytic};
    for (std::size_t v = 0; v < mag.size(); ++v) {
        out.volume.data[v * 2] = vol.data[v];
        out.volume.data[v * 2 + 1] = p99 > 0.0 ? std::clamp(mag[v] / p99, 0.0, 1.0) : 0.0;
    }
    return out;
}

TinyEncoder TinyEncoder::create(ad::ParamStore& store, std::size_t n_features, std::uint64_t seed,
                                const std::string& prefix, std::size_t hidden)
{
    TinyEncoder e;
    e.hidden = hidden;
    e.n_features = n_features;
    std::mt19937_64 rng(seed);
    auto init = [&](std::size_t c_out, std::size_t c_in) {
        const double bound = 1.0 / std::sqrt(27.0 * static_cast<double>(c_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        std::vector<double> w(c_out * c_in * 27);
        for (auto& v : w)
            v = u(rng);
        return w;
    };
    e.w0 = store.add(prefix + ".w0", {hidden, 1, 3, 3, 3}, init(hidden, 1));
    e.b0 = store.add(prefix + ".b0", {hidden});
    e.w1 = store.add(prefix + ".w1", {n_features, hidden, 3, 3, 3}, init(n_features, hidden));
    e.b1 = store.add(prefix + ".b1", {n_features});
    return e;
}

ad::Var TinyEncoder::record(ad::Tape& tape, ad::ParamStore& store, ad::Var intensity, grid::Dims3 dims) const
{
    ad::Var h = tape.conv3x3x3(intensity, tape.param(store, w0), tape.param(store, b0), dims, 1, hidden);
    h = tape.relu(h);
    return tape.conv3x3x3(h, tape.param(store, w1), tape.param(store, b1), dims, hidden, n_features);
}

FeatureVolume encode_tiny(const TinyEncoder& enc, const ad::ParamStore& store, const grid::Volume3D& vol)
{
    if (vol.channels != 1)
        throw ShapeError("encode_tiny expects a single-channel volume");
    const auto& d = vol.dims();
    std::vector<double> h(vol.voxel_count() * enc.hidden);
    ad::kernels::conv3x3x3_forward(vol.data, store.value(enc.w0), store.value(enc.b0), d, 1, enc.hidden, h);
    for (auto& v : h)
        v = v > 0.0 ? v : 0.0;
    FeatureVolume out{grid::Volume3D(d, vol.geometry.spacing(), enc.n_features), Provenance::learned};
    ad::kernels::conv3x3x3_forward(h, store.value(enc.w1), store.value(enc.b1), d, enc.hidden, enc.n_features,
                                   out.volume.data);
    return out;
}

ImageDecoder ImageDecoder::create(ad::ParamStore& store, std::size_t n_colors, std::uint64_t seed,
                                  const std::string& prefix, std::size_t hidden)
{
    ImageDecoder d;
    d.n_colors = n_colors;
    d.mlp = tf::MlpTF::create(store, prefix, n_colors, {hidden}, 3, tf::MlpTF::Head::color, 1.0, seed);
    return d;
}

ImageDecoder ImageDecoder::identity_decoder()
{
    ImageDecoder d;
    d.n_colors = 3;
    d.identity = true;
    return d;
}

ad::Var ImageDecoder::record(ad::Tape& tape, ad::ParamStore& store, ad::Var colors) const
{
    if (tape.size(colors) % n_colors != 0)
        throw ShapeError("decoder input is not a whole number of pixels");
    if (identity)
        return colors;
    return mlp.record(tape, store, colors);
}

image::ImageF decode_image(const ImageDecoder& dec, const ad::ParamStore& store, const image::ImageF& latent)
{
    if (latent.channels != static_cast<int>(dec.n_colors) + 1)
        throw ShapeError("latent image has " + std::to_string(latent.channels) + " channels, decoder expects " +
                         std::to_string(dec.n_colors + 1));
    image::ImageF out(latent.width, latent.height, 4);
    tf::MlpTF::Workspace ws;
    const std::size_t nc = dec.n_colors;
    for (std::size_t p = 0; p < latent.pixel_count(); ++p) {
        std::span<const double> in(latent.data.data() + p * (nc + 1), nc);
        if (dec.identity) {
            std::copy(in.begin(), in.end(), out.data.begin() + static_cast<std::ptrdiff_t>(p * 4));
        } else {
            dec.mlp.forward(store, in, ws);
            const auto rgb = dec.mlp.output(ws);
            std::copy(rgb.begin(), rgb.end(), out.data.begin() + static_cast<std::ptrdiff_t>(p * 4));
        }
        out.data[p * 4 + 3] = latent.data[p * (nc + 1) + nc];
    }
    return out;
}

} // namespace ddvr::enc
