#pragma once

// Synthetic paired SR data: procedural HR images, a blur / area-downsample /
// noise degradation, bicubic re-upsampling to HR size, storage and shuffled
// batch iteration. Pixel space stands in for the latent space.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "tadsr/io.hpp"
#include "tadsr/tensor.hpp"

namespace tadsr {

class DataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct DegradeParams {
    double blur_sigma = 1.2;
    double noise_sigma = 0.02;

    friend bool operator==(const DegradeParams&, const DegradeParams&) = default;
};

struct DataParams {
    int train_count = 2048;
    int eval_count = 128;
    int size = 32;
    int scale = 4;
    int channels = 3;
    double hf_mix = 0.5;
    std::uint64_t seed = 1234;
    DegradeParams degrade;

    friend bool operator==(const DataParams&, const DataParams&) = default;
};

/// One training example; tensors are (1, C, ., .).
template <class S>
struct PairedSample {
    Tensor<S> hr;
    Tensor<S> lr;
    Tensor<S> zy;
    int scale = 1;
};

/// A split stored as three batched tensors.
template <class S>
struct PairedDataset {
    Tensor<S> hr;  // (N, C, H, W)
    Tensor<S> lr;  // (N, C, H/s, W/s)
    Tensor<S> zy;  // (N, C, H, W)
    int scale = 1;

    [[nodiscard]] int size() const noexcept { return hr.shape().n; }
    [[nodiscard]] bool empty() const noexcept { return size() == 0; }
    [[nodiscard]] PairedSample<S> sample(int i) const {
        return {hr.batch_slice(i, 1), lr.batch_slice(i, 1), zy.batch_slice(i, 1), scale};
    }
    [[nodiscard]] PairedDataset subset(int first, int count) const {
        return {hr.batch_slice(first, count), lr.batch_slice(first, count), zy.batch_slice(first, count), scale};
    }
};

/// splitmix64 finalizer; derives independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

inline int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

/// Keys cubic convolution kernel, a = -0.75.
inline double cubic_weight(double x) {
    constexpr double a = -0.75;
    x = std::abs(x);
    if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
    if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
    return 0;
}

}  // namespace detail

/// Separable Gaussian blur with reflected borders; sigma = 0 is the identity.
template <class S>
Tensor<S> gaussian_blur(const Tensor<S>& img, double sigma) {
    if (sigma < 0) throw DataError("blur sigma must be >= 0");
    if (sigma == 0) return img;
    const auto k = detail::gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const Shape s = img.shape();
    Tensor<S> tmp(s), out(s);
    for (int p = 0; p < s.n * s.c; ++p) {
        const S* src = img.data() + p * s.plane();
        S* t = tmp.data() + p * s.plane();
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                double acc = 0;
                for (int d = -r; d <= r; ++d) acc += k[d + r] * src[y * s.w + detail::reflect(x + d, s.w)];
                t[y * s.w + x] = static_cast<S>(acc);
            }
        }
        S* o = out.data() + p * s.plane();
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                double acc = 0;
                for (int d = -r; d <= r; ++d) acc += k[d + r] * t[detail::reflect(y + d, s.h) * s.w + x];
                o[y * s.w + x] = static_cast<S>(acc);
            }
        }
    }
    return out;
}

/// Mean over non-overlapping factor x factor blocks.
template <class S>
Tensor<S> area_downsample(const Tensor<S>& img, int factor) {
    const Shape s = img.shape();
    if (factor < 1 || s.h % factor != 0 || s.w % factor != 0) throw DataError("area_downsample: bad factor");
    if (factor == 1) return img;
    const Shape so{s.n, s.c, s.h / factor, s.w / factor};
    Tensor<S> out(so);
    const double inv = 1.0 / (factor * factor);
    for (int p = 0; p < s.n * s.c; ++p) {
        for (int y = 0; y < so.h; ++y) {
            for (int x = 0; x < so.w; ++x) {
                double acc = 0;
                for (int dy = 0; dy < factor; ++dy) {
                    for (int dx = 0; dx < factor; ++dx) {
                        acc += img[p * s.plane() + (y * factor + dy) * s.w + x * factor + dx];
                    }
                }
                out[p * so.plane() + y * so.w + x] = static_cast<S>(acc * inv);
            }
        }
    }
    return out;
}

/// Bicubic upsampling with half-pixel centres and clamped borders.
template <class S>
Tensor<S> bicubic_upsample(const Tensor<S>& img, int factor) {
    if (factor < 1) throw DataError("bicubic_upsample: bad factor");
    if (factor == 1) return img;
    const Shape s = img.shape();
    const Shape so{s.n, s.c, s.h * factor, s.w * factor};
    // Separable weights per output coordinate; identical for rows and columns up to extent.
    auto taps = [factor](int out_len, int in_len) {
        std::vector<std::array<std::pair<int, double>, 4>> t(static_cast<std::size_t>(out_len));
        for (int o = 0; o < out_len; ++o) {
            const double src = (o + 0.5) / factor - 0.5;
            const int base = static_cast<int>(std::floor(src));
            for (int i = 0; i < 4; ++i) {
                const int idx = base - 1 + i;
                t[static_cast<std::size_t>(o)][static_cast<std::size_t>(i)] = {std::clamp(idx, 0, in_len - 1),
                                                                              detail::cubic_weight(src - idx)};
            }
        }
        return t;
    };
    const auto tx = taps(so.w, s.w), ty = taps(so.h, s.h);
    Tensor<S> out(so);
    std::vector<double> rows(static_cast<std::size_t>(s.h) * so.w);
    for (int p = 0; p < s.n * s.c; ++p) {
        const S* src = img.data() + p * s.plane();
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < so.w; ++x) {
                double acc = 0;
                for (const auto& [i, w] : tx[static_cast<std::size_t>(x)]) acc += w * src[y * s.w + i];
                rows[static_cast<std::size_t>(y) * so.w + x] = acc;
            }
        }
        S* dst = out.data() + p * so.plane();
        for (int y = 0; y < so.h; ++y) {
            for (int x = 0; x < so.w; ++x) {
                double acc = 0;
                for (const auto& [i, w] : ty[static_cast<std::size_t>(y)]) {
                    acc += w * rows[static_cast<std::size_t>(i) * so.w + x];
                }
                dst[y * so.w + x] = static_cast<S>(acc);
            }
        }
    }
    return out;
}

template <class S>
struct Degraded {
    Tensor<S> lr;
    Tensor<S> zy;
};

/// blur -> area downsample -> additive white noise -> bicubic upsample.
/// Both outputs are clamped to [-1.5, 1.5].
template <class S>
Degraded<S> degrade(const Tensor<S>& hr, int scale, double blur_sigma, double noise_sigma, std::uint64_t seed) {
    if (scale != 1 && scale != 2 && scale != 4) throw DataError("degrade: scale must be 1, 2 or 4");
    if (blur_sigma < 0 || noise_sigma < 0) throw DataError("degrade: sigmas must be >= 0");
    Tensor<S> lr = area_downsample(gaussian_blur(hr, blur_sigma), scale);
    if (noise_sigma > 0) {
        Rng rng(seed);
        std::normal_distribution<double> n(0.0, noise_sigma);
        for (auto& v : lr.span()) v = static_cast<S>(v + n(rng));
    }
    auto clamp = [](Tensor<S>& t) {
        for (auto& v : t.span()) v = std::clamp(v, S(-1.5), S(1.5));
    };
    clamp(lr);
    Tensor<S> zy = bicubic_upsample(lr, scale);
    clamp(zy);
    return {std::move(lr), std::move(zy)};
}

namespace detail {

/// Smooth colour field built from low-frequency Fourier modes
/// (radial frequency <= 1/8 cycle per pixel).
template <class S>
void paint_base(S* img, int c, int n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    const int kmax = std::max(1, n / 8);
    std::vector<double> lum(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<std::vector<double>> chroma(static_cast<std::size_t>(c), std::vector<double>(lum.size(), 0.0));
    auto add_mode = [&](std::vector<double>& f, int kx, int ky, double amp) {
        const double ph = u(rng);
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                f[static_cast<std::size_t>(y) * n + x] +=
                    amp * std::cos(2.0 * std::numbers::pi * (kx * x + ky * y) / n + ph);
            }
        }
    };
    for (int ky = -kmax; ky <= kmax; ++ky) {
        for (int kx = 0; kx <= kmax; ++kx) {
            if (kx == 0 && ky <= 0) continue;
            if (kx * kx + ky * ky > kmax * kmax) continue;
            const double decay = 1.0 / (1.0 + kx * kx + ky * ky);
            add_mode(lum, kx, ky, g(rng) * decay);
            for (auto& ch : chroma) add_mode(ch, kx, ky, 0.3 * g(rng) * decay);
        }
    }
    double peak = 1e-12;
    for (int ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < lum.size(); ++i) peak = std::max(peak, std::abs(lum[i] + chroma[ch][i]));
    }
    const double offset = 0.2 * g(rng);
    for (int ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < lum.size(); ++i) {
            img[static_cast<std::size_t>(ch) * lum.size() + i] =
                static_cast<S>(std::clamp(0.7 * (lum[i] + chroma[ch][i]) / peak + offset, -1.0, 1.0));
        }
    }
}

/// High-frequency layer: checkerboard patch, thin lines and texture noise, in [-1, 1].
inline std::vector<double> paint_high_frequency(int n, Rng& rng) {
    std::uniform_int_distribution<int> pos(0, n - 1);
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> f(static_cast<std::size_t>(n) * n, 0.0);
    // Checkerboard region with period 2 or 4.
    const int period = coin(rng) ? 2 : 4;
    int x0 = pos(rng), y0 = pos(rng), x1 = pos(rng), y1 = pos(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    x1 = std::max(x1, std::min(n - 1, x0 + n / 3));
    y1 = std::max(y1, std::min(n - 1, y0 + n / 3));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            f[static_cast<std::size_t>(y) * n + x] = (((x / (period / 2)) + (y / (period / 2))) % 2 == 0) ? 1.0 : -1.0;
        }
    }
    // Thin lines: horizontal, vertical or diagonal, one pixel wide.
    const int lines = 2 + coin(rng) + coin(rng);
    for (int l = 0; l < lines; ++l) {
        const int kind = pos(rng) % 3;
        const int at = pos(rng);
        const double v = coin(rng) ? 1.0 : -1.0;
        for (int i = 0; i < n; ++i) {
            int x = i, y = at;
            if (kind == 1) std::swap(x, y);
            if (kind == 2) y = (at + i) % n;
            f[static_cast<std::size_t>(y) * n + x] = v;
        }
    }
    // Texture noise in a band of rows.
    const int band0 = pos(rng), band_h = n / 4;
    for (int y = band0; y < std::min(n, band0 + band_h); ++y) {
        for (int x = 0; x < n; ++x) f[static_cast<std::size_t>(y) * n + x] += 0.6 * u(rng);
    }
    return f;
}

}  // namespace detail

/// n HR images (C x size x size) in [-1, 1]: smooth base plus hf_mix-weighted
/// high-frequency content; deterministic in seed. Each image is degraded with
/// a per-image seed.
template <class S>
PairedDataset<S> generate_dataset(int n, int size, int scale, std::uint64_t seed, double hf_mix,
                                  const DegradeParams& deg = {}, int channels = 3) {
    if (n < 0) throw DataError("generate_dataset: n must be >= 0");
    if (size <= 0 || scale <= 0 || size % scale != 0) throw DataError("generate_dataset: size must divide by scale");
    if (hf_mix < 0 || hf_mix > 1) throw DataError("generate_dataset: hf_mix must lie in [0, 1]");
    PairedDataset<S> ds;
    ds.scale = scale;
    ds.hr = Tensor<S>(Shape{n, channels, size, size});
    ds.lr = Tensor<S>(Shape{n, channels, size / scale, size / scale});
    ds.zy = Tensor<S>(Shape{n, channels, size, size});
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        S* img = ds.hr.data() + static_cast<std::size_t>(i) * channels * plane;
        detail::paint_base(img, channels, size, rng);
        if (hf_mix > 0) {
            const auto hf = detail::paint_high_frequency(size, rng);
            std::uniform_real_distribution<double> tint(0.6, 1.0);
            for (int c = 0; c < channels; ++c) {
                const double w = hf_mix * tint(rng);
                for (std::size_t p = 0; p < plane; ++p) {
                    const double v = (1.0 - hf_mix) * img[c * plane + p] + w * hf[p];
                    img[c * plane + p] = static_cast<S>(std::clamp(v, -1.0, 1.0));
                }
            }
        }
        const auto d = degrade(ds.hr.batch_slice(i, 1), scale, deg.blur_sigma, deg.noise_sigma,
                               mix_seed(seed ^ 0xd3a7u, static_cast<std::uint64_t>(i)));
        std::copy(d.lr.vec().begin(), d.lr.vec().end(), ds.lr.data() + static_cast<std::size_t>(i) * d.lr.size());
        std::copy(d.zy.vec().begin(), d.zy.vec().end(), ds.zy.data() + static_cast<std::size_t>(i) * d.zy.size());
    }
    return ds;
}

template <class S>
struct Batch {
    Tensor<S> hr;
    Tensor<S> zy;
    std::vector<int> indices;
};

template <class S>
Batch<S> gather(const PairedDataset<S>& ds, std::span<const int> idx) {
    std::vector<Tensor<S>> hr, zy;
    for (int i : idx) {
        hr.push_back(ds.hr.batch_slice(i, 1));
        zy.push_back(ds.zy.batch_slice(i, 1));
    }
    return {stack_batch<S>(hr), stack_batch<S>(zy), std::vector<int>(idx.begin(), idx.end())};
}

/// Permutation of [0, n) for a given epoch; a pure function of (seed, epoch).
inline std::vector<int> epoch_order(int n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, epoch));
    for (int i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<int> d(0, i);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(d(rng))]);
    }
    return order;
}

/// Endless shuffled iteration. Each epoch visits every sample once; the final
/// batch of an epoch may be short.
template <class S>
class BatchIterator {
public:
    BatchIterator(const PairedDataset<S>& ds, int batch_size, std::uint64_t seed)
        : ds_(&ds), batch_(batch_size), seed_(seed) {
        if (batch_size < 1) throw DataError("batch size must be >= 1");
    }

    /// Indices of the batches making up one epoch.
    [[nodiscard]] std::vector<std::vector<int>> epoch_batches(std::uint64_t epoch) const {
        const auto order = epoch_order(ds_->size(), seed_, epoch);
        std::vector<std::vector<int>> out;
        for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_)) {
            out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_)));
        }
        return out;
    }

    /// Next batch; empty when the dataset is empty.
    Batch<S> next() {
        if (ds_->empty()) return {};
        if (cursor_ >= current_.size()) {
            current_ = epoch_batches(epoch_++);
            cursor_ = 0;
        }
        const auto& idx = current_[cursor_++];
        return gather(*ds_, std::span<const int>(idx));
    }

private:
    const PairedDataset<S>* ds_;
    int batch_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::vector<int>> current_;
};

// ---------------------------------------------------------------------------
// Storage: <dir>/manifest.json plus <split>_{hr,lr,zy}.f32

inline nlohmann::json data_params_json(const DataParams& p) {
    return {{"train_count", p.train_count},
            {"eval_count", p.eval_count},
            {"size", p.size},
            {"scale", p.scale},
            {"channels", p.channels},
            {"hf_mix", p.hf_mix},
            {"seed", p.seed},
            {"blur_sigma", p.degrade.blur_sigma},
            {"noise_sigma", p.degrade.noise_sigma}};
}

inline DataParams data_params_from_json(const nlohmann::json& j, DataParams p = {}) {
    p.train_count = j.value("train_count", p.train_count);
    p.eval_count = j.value("eval_count", p.eval_count);
    p.size = j.value("size", p.size);
    p.scale = j.value("scale", p.scale);
    p.channels = j.value("channels", p.channels);
    p.hf_mix = j.value("hf_mix", p.hf_mix);
    p.seed = j.value("seed", p.seed);
    p.degrade.blur_sigma = j.value("blur_sigma", p.degrade.blur_sigma);
    p.degrade.noise_sigma = j.value("noise_sigma", p.degrade.noise_sigma);
    return p;
}

template <class S>
struct DatasetSplits {
    PairedDataset<S> train;
    PairedDataset<S> eval;
    DataParams params;
};

/// Train and eval splits come from disjoint seed streams.
template <class S>
DatasetSplits<S> generate_splits(const DataParams& p) {
    return {generate_dataset<S>(p.train_count, p.size, p.scale, mix_seed(p.seed, 0), p.hf_mix, p.degrade, p.channels),
            generate_dataset<S>(p.eval_count, p.size, p.scale, mix_seed(p.seed, 1), p.hf_mix, p.degrade, p.channels),
            p};
}

template <class S>
void save_dataset(const std::filesystem::path& dir, const DatasetSplits<S>& d) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["format"] = "tadsr-dataset-v1";
    m["params"] = data_params_json(d.params);
    for (const auto& [name, split] : {std::pair{"train", &d.train}, std::pair{"eval", &d.eval}}) {
        write_tensor_f32(dir / (std::string(name) + "_hr.f32"), split->hr);
        write_tensor_f32(dir / (std::string(name) + "_lr.f32"), split->lr);
        write_tensor_f32(dir / (std::string(name) + "_zy.f32"), split->zy);
        m["splits"][name] = {{"hr_shape", shape_json(split->hr.shape())},
                             {"lr_shape", shape_json(split->lr.shape())},
                             {"zy_shape", shape_json(split->zy.shape())},
                             {"scale", split->scale}};
    }
    write_json(dir / "manifest.json", m);
}

template <class S>
DatasetSplits<S> load_dataset(const std::filesystem::path& dir) {
    const auto m = read_json(dir / "manifest.json");
    if (m.value("format", "") != "tadsr-dataset-v1") throw IoError(dir.string() + ": not a dataset directory");
    DatasetSplits<S> d;
    d.params = data_params_from_json(m.at("params"));
    for (auto [name, split] : {std::pair{"train", &d.train}, std::pair{"eval", &d.eval}}) {
        const auto& sj = m.at("splits").at(name);
        split->hr = read_tensor_f32<S>(dir / (std::string(name) + "_hr.f32"), shape_from_json(sj.at("hr_shape")));
        split->lr = read_tensor_f32<S>(dir / (std::string(name) + "_lr.f32"), shape_from_json(sj.at("lr_shape")));
        split->zy = read_tensor_f32<S>(dir / (std::string(name) + "_zy.f32"), shape_from_json(sj.at("zy_shape")));
        split->scale = sj.at("scale").template get<int>();
    }
    return d;
}

}  // namespace tadsr
