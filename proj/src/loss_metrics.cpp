#include "ddvr/loss_metrics.hpp"

#include <cmath>

#include "ddvr/error.hpp"

namespace ddvr::loss {

using image::ImageF;

std::string to_string(LossMode m)
{
    return m == LossMode::mse ? "mse" : "mse+ssim";
}

LossMode loss_mode_from_string(const std::string& s)
{
    if (s == "mse")
        return LossMode::mse;
    if (s == "mse+ssim" || s == "combined")
        return LossMode::mse_ssim;
    throw ConfigError("unknown loss mode '" + s + "'");
}

namespace {

void check_pair(const ImageF& a, const ImageF& b)
{
    if (!a.same_shape(b))
        throw ShapeError("images differ in shape");
    if (a.channels != 1 && a.channels != 3 && a.channels != 4)
        throw ShapeError("images must have 1, 3 or 4 channels");
}

constexpr double kLuma[3] = {0.299, 0.587, 0.114};

/// Separable Gaussian window truncated to the image, with per-position normalizers.
struct Window {
    int radius;
    std::vector<double> g;  // g[d + radius]
    std::vector<double> zx; // sum of in-image taps per column
    std::vector<double> zy;

    Window(const SsimParams& p, int w, int h) : radius(p.radius), g(2 * p.radius + 1)
    {
        for (int d = -radius; d <= radius; ++d)
            g[d + radius] = std::exp(-(d * d) / (2.0 * p.sigma * p.sigma));
        zx = norms(w);
        zy = norms(h);
    }

    std::vector<double> norms(int n) const
    {
        std::vector<double> z(n, 0.0);
        for (int i = 0; i < n; ++i)
            for (int d = -radius; d <= radius; ++d)
                if (i + d >= 0 && i + d < n)
                    z[i] += g[d + radius];
        return z;
    }

    /// Unnormalized truncated separable convolution (the kernel is symmetric).
    std::vector<double> blur(const std::vector<double>& x, int w, int h) const
    {
        std::vector<double> tmp(x.size(), 0.0), out(x.size(), 0.0);
        for (int y = 0; y < h; ++y)
            for (int i = 0; i < w; ++i) {
                double s = 0.0;
                for (int d = std::max(-radius, -i); d <= std::min(radius, w - 1 - i); ++d)
                    s += g[d + radius] * x[static_cast<std::size_t>(y) * w + i + d];
                tmp[static_cast<std::size_t>(y) * w + i] = s;
            }
        for (int y = 0; y < h; ++y)
            for (int i = 0; i < w; ++i) {
                double s = 0.0;
                for (int d = std::max(-radius, -y); d <= std::min(radius, h - 1 - y); ++d)
                    s += g[d + radius] * tmp[static_cast<std::size_t>(y + d) * w + i];
                out[static_cast<std::size_t>(y) * w + i] = s;
            }
        return out;
    }

    double z(int i, int y) const { return zx[i] * zy[y]; }
};

/// SSIM of two luminance planes; optionally d(ssim)/d(la).
double ssim_plane(const std::vector<double>& la, const std::vector<double>& lb, int w, int h,
                  const SsimParams& p, std::vector<double>* grad)
{
    const std::size_t n = la.size();
    const Window win(p, w, h);
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = la[i] * la[i];
        bb[i] = lb[i] * lb[i];
        ab[i] = la[i] * lb[i];
    }
    auto mu_a = win.blur(la, w, h), mu_b = win.blur(lb, w, h);
    auto e_aa = win.blur(aa, w, h), e_bb = win.blur(bb, w, h), e_ab = win.blur(ab, w, h);
    const double c1 = (p.k1 * p.range) * (p.k1 * p.range);
    const double c2 = (p.k2 * p.range) * (p.k2 * p.range);

    std::vector<double> alpha, beta, gamma;
    if (grad) {
        alpha.resize(n);
        beta.resize(n);
        gamma.resize(n);
    }
    double total = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const double z = win.z(x, y);
            const double ma = mu_a[i] / z, mb = mu_b[i] / z;
            const double va = e_aa[i] / z - ma * ma;
            const double vb = e_bb[i] / z - mb * mb;
            const double cov = e_ab[i] / z - ma * mb;
            const double n1 = 2.0 * ma * mb + c1, n2 = 2.0 * cov + c2;
            const double d1 = ma * ma + mb * mb + c1, d2 = va + vb + c2;
            const double num = n1 * n2, den = d1 * d2;
            total += num / den;
            if (grad) {
                // Partials w.r.t. the windowed moments mu_a, E[a^2], E[ab], divided by z for the adjoint blur.
                const double dnum = 2.0 * mb * n2 - 2.0 * mb * n1;
                const double dden = 2.0 * ma * d2 - 2.0 * ma * d1;
                alpha[i] = (dnum * den - num * dden) / (den * den) / z;
                beta[i] = -num * d1 / (den * den) / z;
                gamma[i] = 2.0 * n1 / den / z;
            }
        }
    const double inv_n = 1.0 / static_cast<double>(n);
    if (grad) {
        const auto ba = win.blur(alpha, w, h), bbt = win.blur(beta, w, h), bg = win.blur(gamma, w, h);
        grad->resize(n);
        for (std::size_t i = 0; i < n; ++i)
            (*grad)[i] = (ba[i] + 2.0 * la[i] * bbt[i] + lb[i] * bg[i]) * inv_n;
    }
    return total / static_cast<double>(n); // n * (1/n) need not round to 1
}

} // namespace

std::vector<double> luminance(const ImageF& img)
{
    std::vector<double> l(img.pixel_count());
    if (img.channels == 1)
        return img.data;
    if (img.channels < 3)
        throw ShapeError("luminance needs 1, 3 or 4 channels");
    for (std::size_t p = 0; p < l.size(); ++p) {
        const double* px = img.data.data() + p * img.channels;
        l[p] = kLuma[0] * px[0] + kLuma[1] * px[1] + kLuma[2] * px[2];
    }
    return l;
}

double mse(const ImageF& a, const ImageF& b)
{
    check_pair(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

double mse(const ImageF& a, const ImageF& b, std::vector<double>& grad_a)
{
    const double v = mse(a, b);
    grad_a.resize(a.data.size());
    const double k = 2.0 / static_cast<double>(std::max<std::size_t>(a.data.size(), 1));
    for (std::size_t i = 0; i < a.data.size(); ++i)
        grad_a[i] = k * (a.data[i] - b.data[i]);
    return v;
}

double ssim(const ImageF& a, const ImageF& b, const SsimParams& p)
{
    check_pair(a, b);
    return ssim_plane(luminance(a), luminance(b), a.width, a.height, p, nullptr);
}

double ssim(const ImageF& a, const ImageF& b, std::vector<double>& grad_a, const SsimParams& p)
{
    check_pair(a, b);
    std::vector<double> gl;
    const double v = ssim_plane(luminance(a), luminance(b), a.width, a.height, p, &gl);
    grad_a.assign(a.data.size(), 0.0);
    for (std::size_t q = 0; q < gl.size(); ++q) {
        if (a.channels == 1) {
            grad_a[q] = gl[q];
            continue;
        }
        for (int c = 0; c < 3; ++c)
            grad_a[q * a.channels + c] = kLuma[c] * gl[q];
    }
    return v;
}

double combined_loss(const ImageF& pred, const ImageF& ref, LossMode mode)
{
    const double m = mse(pred, ref);
    return mode == LossMode::mse ? m : m + (1.0 - ssim(pred, ref));
}

double combined_loss(const ImageF& pred, const ImageF& ref, std::vector<double>& grad_pred, LossMode mode)
{
    const double m = mse(pred, ref, grad_pred);
    if (mode == LossMode::mse)
        return m;
    std::vector<double> gs;
    const double s = ssim(pred, ref, gs);
    for (std::size_t i = 0; i < grad_pred.size(); ++i)
        grad_pred[i] -= gs[i];
    return m + (1.0 - s);
}

ad::Var loss_on_tape(ad::Tape& tape, ad::Var pred, const ImageF& ref, LossMode mode)
{
    ImageF p(ref.width, ref.height, ref.channels);
    const auto v = tape.value(pred);
    if (v.size() != p.data.size())
        throw ShapeError("prediction size does not match the reference image");
    std::copy(v.begin(), v.end(), p.data.begin());
    std::vector<double> grad;
    const double value = combined_loss(p, ref, grad, mode);
    const ad::Var inputs[] = {pred};
    return tape.custom(inputs, {value}, [pred, grad = std::move(grad)](ad::Tape& t, ad::Var self) {
        const double g = t.adjoint(self)[0];
        auto a = t.adjoint(pred);
        for (std::size_t i = 0; i < a.size(); ++i)
            a[i] += g * grad[i];
    });
}

} // namespace ddvr::loss
