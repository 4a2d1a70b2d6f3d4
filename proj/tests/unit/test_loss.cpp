#include <cmath>
#include <random>

#include "doctest.h"

#include "ddvr/error.hpp"
#include "ddvr/loss_metrics.hpp"

using namespace ddvr;
using namespace ddvr::loss;
using image::ImageF;

namespace {

ImageF structured(int w, int h, int c, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    ImageF img(w, h, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k)
                img.at(x, y, k) = std::clamp(0.5 + 0.35 * std::sin(0.7 * x + 0.3 * k) * std::cos(0.5 * y) + u(rng), 0.0, 1.0);
    return img;
}

/// Worst relative error of f's analytic gradient against central differences.
double max_fd_error(const std::function<double(const ImageF&, std::vector<double>*)>& f, ImageF img)
{
    std::vector<double> g;
    f(img, &g);
    double worst = 0.0;
    const double eps = 1e-5;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double keep = img.data[i];
        img.data[i] = keep + eps;
        const double fp = f(img, nullptr);
        img.data[i] = keep - eps;
        const double fm = f(img, nullptr);
        img.data[i] = keep;
        const double fd = (fp - fm) / (2 * eps);
        worst = std::max(worst, std::abs(fd - g[i]) / std::max(1e-8, std::abs(fd) + std::abs(g[i])));
    }
    return worst;
}

} // namespace

TEST_CASE("mean squared error")
{
    const auto a = structured(5, 4, 3, 1);
    CHECK(mse(a, a) == 0.0);
    CHECK(mse(ImageF(3, 3, 1, 0.0), ImageF(3, 3, 1, 1.0)) == 1.0);
    ImageF p(2, 1, 1), q(2, 1, 1);
    p.data = {0.2, 0.8};
    q.data = {0.5, 0.8};
    CHECK(mse(p, q) == doctest::Approx(0.045).epsilon(1e-14));
    CHECK_THROWS_AS(mse(p, ImageF(1, 2, 1)), ShapeError);
}

TEST_CASE("structural similarity")
{
    const auto a = structured(24, 20, 3, 2);
    CHECK(ssim(a, a) == 1.0);

    ImageF inv = a;
    for (auto& x : inv.data)
        x = 1.0 - x;
    CHECK(ssim(a, inv) < 0.2);

    const auto b = structured(24, 20, 3, 3);
    const double s = ssim(a, b);
    CHECK(s < 1.0);
    CHECK(s > 0.5);
    CHECK(ssim(b, a) == doctest::Approx(s).epsilon(1e-14));

    // Luminance weighting: a pure-blue change counts for less than a green one.
    ImageF blue = a, green = a;
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 24; ++x) {
            blue.at(x, y, 2) = 0.0;
            green.at(x, y, 1) = 0.0;
        }
    CHECK(ssim(a, blue) > ssim(a, green));

    // Images smaller than the window are still scored.
    const auto tiny = structured(3, 2, 1, 4);
    CHECK(ssim(tiny, tiny) == 1.0);
    // Pixel counts whose reciprocal does not round trip.
    for (int n : {7, 13, 49})
        CHECK(ssim(structured(n, 1, 1, 5), structured(n, 1, 1, 5)) == 1.0);
    CHECK_THROWS_AS(ssim(a, structured(20, 24, 3, 2)), ShapeError);
}

TEST_CASE("luminance conversion")
{
    ImageF px(1, 1, 3);
    px.data = {1.0, 0.5, 0.25};
    CHECK(luminance(px)[0] == doctest::Approx(0.299 + 0.587 * 0.5 + 0.114 * 0.25).epsilon(1e-15));
    ImageF gray(1, 1, 1, 0.3);
    CHECK(luminance(gray)[0] == 0.3);
}

TEST_CASE("combined loss")
{
    const auto a = structured(8, 8, 3, 5), b = structured(8, 8, 3, 6);
    CHECK(combined_loss(a, a) == 0.0);
    CHECK(combined_loss(a, b, LossMode::mse) == mse(a, b));
    CHECK(combined_loss(a, b) == doctest::Approx(mse(a, b) + 1.0 - ssim(a, b)).epsilon(1e-14));
    CHECK(to_string(LossMode::mse_ssim) == "mse+ssim");
    CHECK(loss_mode_from_string("mse") == LossMode::mse);
    CHECK_THROWS_AS(loss_mode_from_string("l1"), ConfigError);
}

TEST_CASE("loss gradients match finite differences on 8x8 images")
{
    const auto ref = structured(8, 8, 3, 7);
    const auto pred = structured(8, 8, 3, 8);
    CHECK(max_fd_error([&](const ImageF& x, std::vector<double>* g) { return g ? mse(x, ref, *g) : mse(x, ref); },
                       pred) < 1e-7);
    CHECK(max_fd_error([&](const ImageF& x, std::vector<double>* g) { return g ? ssim(x, ref, *g) : ssim(x, ref); },
                       pred) < 1e-5);
    CHECK(max_fd_error(
              [&](const ImageF& x, std::vector<double>* g) {
                  return g ? combined_loss(x, ref, *g) : combined_loss(x, ref);
              },
              pred) < 1e-5);
    // Rectangular and 4-channel inputs go through the same path.
    const auto r4 = structured(9, 6, 4, 9), p4 = structured(9, 6, 4, 10);
    CHECK(max_fd_error(
              [&](const ImageF& x, std::vector<double>* g) {
                  return g ? combined_loss(x, r4, *g) : combined_loss(x, r4);
              },
              p4) < 1e-5);
}

TEST_CASE("loss node on the tape")
{
    const auto ref = structured(6, 5, 3, 11);
    const auto pred = structured(6, 5, 3, 12);
    ad::ParamStore s;
    const auto b = s.add("pred", {pred.data.size()}, pred.data);
    ad::Tape t;
    const auto l = loss_on_tape(t, t.param(s, b), ref, LossMode::mse_ssim);
    CHECK(t.scalar(l) == doctest::Approx(combined_loss(pred, ref)).epsilon(1e-14));
    t.backward(l);
    std::vector<double> g;
    combined_loss(pred, ref, g);
    for (std::size_t i = 0; i < g.size(); ++i)
        CHECK(s.grad(b)[i] == doctest::Approx(g[i]).epsilon(1e-14));
    ad::Tape t2;
    CHECK_THROWS_AS(loss_on_tape(t2, t2.constant(std::vector<double>(4)), ref, LossMode::mse), ShapeError);
}
