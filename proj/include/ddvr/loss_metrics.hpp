#pragma once

#include <string>
#include <vector>

#include "ddvr/adjoint.hpp"
#include "ddvr/image.hpp"

namespace ddvr::loss {

enum class LossMode { mse, mse_ssim };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

/// SSIM parameters: 11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1.
struct SsimParams {
    int radius = 5;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double range = 1.0;
};

/// Rec. 601 luma of an RGB(A) image; 1-channel images pass through.
std::vector<double> luminance(const image::ImageF& img);

/// Mean squared difference over all pixels and channels.
double mse(const image::ImageF& a, const image::ImageF& b);
/// Also writes d(mse)/da.
double mse(const image::ImageF& a, const image::ImageF& b, std::vector<double>& grad_a);

/// Mean SSIM map on luminance. At each pixel the Gaussian window is cut to
/// the image and renormalized, so any image size is accepted.
double ssim(const image::ImageF& a, const image::ImageF& b, const SsimParams& p = {});
/// Also writes d(ssim)/da.
double ssim(const image::ImageF& a, const image::ImageF& b, std::vector<double>& grad_a,
            const SsimParams& p = {});

/// mse + (1 - ssim), or mse alone.
double combined_loss(const image::ImageF& pred, const image::ImageF& ref, LossMode mode = LossMode::mse_ssim);
double combined_loss(const image::ImageF& pred, const image::ImageF& ref, std::vector<double>& grad_pred,
                     LossMode mode = LossMode::mse_ssim);

/// Scalar loss node over `pred`, which must hold ref.pixel_count() * ref.channels values.
ad::Var loss_on_tape(ad::Tape& tape, ad::Var pred, const image::ImageF& ref, LossMode mode);

} // namespace ddvr::loss
