#pragma once

// Full-reference image metrics for [-1, 1] data: PSNR, SSIM and the
// high-frequency energy fraction used as the detail proxy.

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "tadsr/tensor.hpp"

namespace tadsr {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / MSE), capped at kPsnrCap (identical images).
template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& b, double peak = 2.0) {
    const double mse = mean_squared_diff(a, b);
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

namespace detail {

inline std::vector<double> ssim_window() {
    constexpr int size = 11;
    constexpr double sigma = 1.5;
    std::vector<double> w(size);
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        const double d = i - size / 2;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

/// 'valid' separable filtering of one plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k,
                                        int& oh, int& ow) {
    const int n = static_cast<int>(k.size());
    oh = h - n + 1;
    ow = w - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y) * w + x + i];
            tmp[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    }
    return out;
}

}  // namespace detail

/// Mean SSIM over all samples and channels: Gaussian window 11, sigma 1.5,
/// k1 = 0.01, k2 = 0.03, dynamic range `range` (2 for [-1, 1] data).
template <class S>
double ssim(const Tensor<S>& a, const Tensor<S>& b, double range = 2.0) {
    require_same_shape(a.shape(), b.shape(), "ssim");
    const Shape s = a.shape();
    if (s.h < 11 || s.w < 11) throw ShapeError("ssim: images must be at least 11x11");
    const auto k = detail::ssim_window();
    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);
    double total = 0;
    int planes = 0;
    for (int p = 0; p < s.n * s.c; ++p) {
        std::vector<double> x(s.plane()), y(s.plane()), xx(s.plane()), yy(s.plane()), xy(s.plane());
        for (std::size_t i = 0; i < s.plane(); ++i) {
            x[i] = a[p * s.plane() + i];
            y[i] = b[p * s.plane() + i];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        int oh = 0, ow = 0;
        const auto mx = detail::filter_valid(x, s.h, s.w, k, oh, ow);
        const auto my = detail::filter_valid(y, s.h, s.w, k, oh, ow);
        const auto sxx = detail::filter_valid(xx, s.h, s.w, k, oh, ow);
        const auto syy = detail::filter_valid(yy, s.h, s.w, k, oh, ow);
        const auto sxy = detail::filter_valid(xy, s.h, s.w, k, oh, ow);
        double acc = 0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i];
            const double vy = syy[i] - my[i] * my[i];
            const double cxy = sxy[i] - mx[i] * my[i];
            acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / static_cast<double>(mx.size());
        ++planes;
    }
    return planes == 0 ? 1.0 : total / planes;
}

/// Fraction of 2-D spectral power (pooled over channels) at radial frequency
/// above half-Nyquist, i.e. sqrt(fx^2 + fy^2) > 0.25 cycles/pixel. One value
/// per sample; 0 for an all-zero image.
template <class S>
std::vector<double> hf_energy(const Tensor<S>& img) {
    const Shape s = img.shape();
    std::vector<std::complex<double>> twx(static_cast<std::size_t>(s.w)), twy(static_cast<std::size_t>(s.h));
    for (int i = 0; i < s.w; ++i) twx[static_cast<std::size_t>(i)] = std::polar(1.0, -2.0 * std::numbers::pi * i / s.w);
    for (int i = 0; i < s.h; ++i) twy[static_cast<std::size_t>(i)] = std::polar(1.0, -2.0 * std::numbers::pi * i / s.h);
    auto freq = [](int k, int n) { return static_cast<double>(k <= n / 2 ? k : k - n) / n; };
    std::vector<double> out;
    for (int n = 0; n < s.n; ++n) {
        double total = 0, high = 0;
        for (int c = 0; c < s.c; ++c) {
            const S* src = img.data() + (static_cast<std::size_t>(n) * s.c + c) * s.plane();
            // The DC bin is taken from the exact sum; every other bin from the
            // mean-removed plane, so constant images have exactly zero AC power.
            double sum = 0;
            for (std::size_t i = 0; i < s.plane(); ++i) sum += static_cast<double>(src[i]);
            const double mean = sum / static_cast<double>(s.plane());
            total += sum * sum;
            // Row DFTs then column DFTs.
            std::vector<std::complex<double>> rows(s.plane());
            for (int y = 0; y < s.h; ++y) {
                for (int kx = 0; kx < s.w; ++kx) {
                    std::complex<double> acc = 0;
                    for (int x = 0; x < s.w; ++x) acc += (static_cast<double>(src[y * s.w + x]) - mean) * twx[static_cast<std::size_t>((kx * x) % s.w)];
                    rows[static_cast<std::size_t>(y) * s.w + kx] = acc;
                }
            }
            for (int ky = 0; ky < s.h; ++ky) {
                for (int kx = 0; kx < s.w; ++kx) {
                    if (kx == 0 && ky == 0) continue;
                    std::complex<double> acc = 0;
                    for (int y = 0; y < s.h; ++y) acc += rows[static_cast<std::size_t>(y) * s.w + kx] * twy[static_cast<std::size_t>((ky * y) % s.h)];
                    const double pw = std::norm(acc);
                    total += pw;
                    const double fx = freq(kx, s.w), fy = freq(ky, s.h);
                    if (std::sqrt(fx * fx + fy * fy) > 0.25) high += pw;
                }
            }
        }
        out.push_back(total > 0 ? high / total : 0.0);
    }
    return out;
}

/// |E_hf(sr) - E_hf(hr)| per sample.
template <class S>
std::vector<double> hf_gap(const Tensor<S>& sr, const Tensor<S>& hr) {
    require_same_shape(sr.shape(), hr.shape(), "hf_gap");
    const auto a = hf_energy(sr), b = hf_energy(hr);
    std::vector<double> g(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = std::abs(a[i] - b[i]);
    return g;
}

}  // namespace tadsr
