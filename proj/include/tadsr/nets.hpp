#pragma once

// Conditional U-Net denoiser shared by teacher and student, its encoder
// feature pyramid, and the time-aware latent discriminator that scores
// modulated teacher-encoder features.

#include <numeric>
#include <string>
#include <vector>

#include "tadsr/layers.hpp"

namespace tadsr {

struct UNetConfig {
    int image_channels = 3;
    int base_channels = 32;
    std::vector<int> channel_mults{1, 2, 2};
    int blocks_per_scale = 2;
    int time_embed_dim = 128;
    int groups = 8;

    [[nodiscard]] int scales() const noexcept { return static_cast<int>(channel_mults.size()); }
    [[nodiscard]] int channels_at(int level) const { return base_channels * channel_mults.at(level); }
    [[nodiscard]] std::vector<int> feature_channels() const {
        std::vector<int> c;
        for (int l = 0; l < scales(); ++l) c.push_back(channels_at(l));
        return c;
    }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

namespace detail {
inline int norm_groups(int requested, int channels) { return std::gcd(requested, channels); }
}  // namespace detail

/// Group norm followed by a learned per-channel affine transform.
struct AffineNorm {
    std::size_t gamma = 0, beta = 0;
    int groups = 1;
};

template <class S>
AffineNorm make_affine_norm(ParamStore<S>& ps, const std::string& name, int channels, int groups) {
    AffineNorm n;
    n.gamma = ps.add(name + ".gamma", Tensor<S>(Shape{1, channels, 1, 1}, S(1)));
    n.beta = ps.add(name + ".beta", Tensor<S>(Shape{1, channels, 1, 1}));
    n.groups = detail::norm_groups(groups, channels);
    return n;
}

template <class S>
Var<S> apply(const ParamStore<S>& ps, const AffineNorm& n, const Var<S>& x) {
    return add_channel(mul_channel(group_norm(x, n.groups), ps.var(n.gamma)), ps.var(n.beta));
}

struct ResBlock {
    AffineNorm norm1, norm2;
    Conv2dLayer conv1, conv2;
    LinearLayer time_proj;
    bool has_skip = false;
    Conv2dLayer skip;
};

template <class S>
ResBlock make_resblock(ParamStore<S>& ps, const std::string& name, int cin, int cout, int temb, int groups,
                       Rng& rng) {
    ResBlock r;
    r.norm1 = make_affine_norm(ps, name + ".norm1", cin, groups);
    r.conv1 = make_conv(ps, name + ".conv1", cin, cout, 3, 1, rng);
    r.time_proj = make_linear(ps, name + ".time_proj", temb, cout, rng);
    r.norm2 = make_affine_norm(ps, name + ".norm2", cout, groups);
    r.conv2 = make_conv(ps, name + ".conv2", cout, cout, 3, 1, rng);
    if (cin != cout) {
        r.has_skip = true;
        r.skip = make_conv(ps, name + ".skip", cin, cout, 1, 1, rng);
    }
    return r;
}

template <class S>
Var<S> apply(const ParamStore<S>& ps, const ResBlock& r, const Var<S>& x, const Var<S>& temb_act) {
    Var<S> h = apply(ps, r.conv1, silu(apply(ps, r.norm1, x)));
    h = add_channel(h, apply(ps, r.time_proj, temb_act));
    h = apply(ps, r.conv2, silu(apply(ps, r.norm2, h)));
    return add(r.has_skip ? apply(ps, r.skip, x) : x, h);
}

/// Ordered encoder activations, one per resolution scale (finest first).
template <class S>
struct FeaturePyramid {
    std::vector<Var<S>> maps;
    [[nodiscard]] int size() const noexcept { return static_cast<int>(maps.size()); }
};

/// U-Net predicting z0 from (z_t, z_y, t). Input is the channel concat of
/// z_t and z_y; the output is z_y plus a learned correction, so it has the
/// shape of z_t. Copies are deep (value semantics).
template <class S>
class UNet {
public:
    UNet() = default;
    UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        if (cfg_.scales() < 1 || cfg_.blocks_per_scale < 1 || cfg_.base_channels < 1) {
            throw std::invalid_argument("UNetConfig: need >= 1 scale, block and channel");
        }
        Rng rng(seed);
        const int temb = cfg_.time_embed_dim;
        time_fc1_ = make_linear(ps_, "time.fc1", temb, temb, rng);
        time_fc2_ = make_linear(ps_, "time.fc2", temb, temb, rng);
        in_conv_ = make_conv(ps_, "in_conv", 2 * cfg_.image_channels, cfg_.channels_at(0), 3, 1, rng);

        int ch = cfg_.channels_at(0);
        for (int l = 0; l < cfg_.scales(); ++l) {
            const int out = cfg_.channels_at(l);
            std::vector<ResBlock> blocks;
            for (int b = 0; b < cfg_.blocks_per_scale; ++b) {
                blocks.push_back(make_resblock(ps_, "enc" + std::to_string(l) + "." + std::to_string(b), ch, out,
                                               temb, cfg_.groups, rng));
                ch = out;
            }
            enc_.push_back(std::move(blocks));
            if (l + 1 < cfg_.scales()) down_.push_back(make_conv(ps_, "down" + std::to_string(l), ch, ch, 3, 2, rng));
        }
        mid_ = make_resblock(ps_, "mid", ch, ch, temb, cfg_.groups, rng);
        dec_.resize(static_cast<std::size_t>(cfg_.scales()));
        up_.resize(static_cast<std::size_t>(cfg_.scales()));
        for (int l = cfg_.scales() - 1; l >= 0; --l) {
            const int out = cfg_.channels_at(l);
            std::vector<ResBlock> blocks;
            for (int b = 0; b < cfg_.blocks_per_scale; ++b) {
                const int cin = b == 0 ? ch + out : out;
                blocks.push_back(make_resblock(ps_, "dec" + std::to_string(l) + "." + std::to_string(b), cin, out,
                                               temb, cfg_.groups, rng));
            }
            ch = out;
            dec_[static_cast<std::size_t>(l)] = std::move(blocks);
            if (l > 0) {
                up_[static_cast<std::size_t>(l)] =
                    make_conv(ps_, "up" + std::to_string(l), ch, cfg_.channels_at(l - 1), 3, 1, rng);
                ch = cfg_.channels_at(l - 1);
            }
        }
        out_norm_ = make_affine_norm(ps_, "out_norm", ch, cfg_.groups);
        out_conv_ = make_conv(ps_, "out_conv", ch, cfg_.image_channels, 3, 1, rng, S(0.1));
    }

    [[nodiscard]] const UNetConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] ParamStore<S>& params() noexcept { return ps_; }
    [[nodiscard]] const ParamStore<S>& params() const noexcept { return ps_; }

    /// Differentiable prediction of z0 with one timestep per batch element.
    [[nodiscard]] Var<S> forward(const Var<S>& z_t, const Var<S>& zy, std::span<const int> t) const {
        std::vector<Var<S>> skips;
        Var<S> temb;
        Var<S> h = encode_impl(z_t, zy, t, &skips, &temb);
        h = apply(ps_, mid_, h, temb);
        for (int l = cfg_.scales() - 1; l >= 0; --l) {
            const auto& blocks = dec_[static_cast<std::size_t>(l)];
            h = concat_channels(h, skips[static_cast<std::size_t>(l)]);
            for (const auto& b : blocks) h = apply(ps_, b, h, temb);
            if (l > 0) h = apply(ps_, up_[static_cast<std::size_t>(l)], upsample2x(h));
        }
        h = apply(ps_, out_conv_, silu(apply(ps_, out_norm_, h)));
        return add(zy, h);
    }

    [[nodiscard]] Var<S> forward(const Var<S>& z_t, const Var<S>& zy, int t) const {
        const std::vector<int> ts(static_cast<std::size_t>(z_t.shape().n), t);
        return forward(z_t, zy, std::span<const int>(ts));
    }

    /// Encoder activations at every scale (before downsampling).
    [[nodiscard]] FeaturePyramid<S> encode(const Var<S>& z_t, const Var<S>& zy, int t) const {
        const std::vector<int> ts(static_cast<std::size_t>(z_t.shape().n), t);
        FeaturePyramid<S> fp;
        Var<S> temb;
        (void)encode_impl(z_t, zy, std::span<const int>(ts), &fp.maps, &temb);
        return fp;
    }

    /// Non-differentiable denoising; satisfies the Denoiser concept.
    Tensor<S> operator()(const Tensor<S>& z_t, const Tensor<S>& zy, int t) const {
        NoGradGuard ng;
        return forward(Var<S>(z_t), Var<S>(zy), t).value();
    }

    [[nodiscard]] std::size_t parameter_count() const noexcept { return ps_.element_count(); }

private:
    Var<S> encode_impl(const Var<S>& z_t, const Var<S>& zy, std::span<const int> t, std::vector<Var<S>>* skips,
                       Var<S>* temb_out) const {
        require_same_shape(z_t.shape(), zy.shape(), "UNet(z_t, zy)");
        if (z_t.shape().c != cfg_.image_channels) {
            throw ShapeError("UNet: expected " + std::to_string(cfg_.image_channels) + " channels, got " +
                             z_t.shape().str());
        }
        const int factor = 1 << (cfg_.scales() - 1);
        if (z_t.shape().h % factor != 0 || z_t.shape().w % factor != 0) {
            throw ShapeError("UNet: spatial size must be divisible by " + std::to_string(factor));
        }
        if (static_cast<int>(t.size()) != z_t.shape().n) throw ShapeError("UNet: one timestep per sample");
        Var<S> emb(timestep_embedding<S>(t, cfg_.time_embed_dim));
        Var<S> temb = silu(apply(ps_, time_fc2_, silu(apply(ps_, time_fc1_, emb))));
        *temb_out = temb;
        Var<S> h = apply(ps_, in_conv_, concat_channels(z_t, zy));
        for (int l = 0; l < cfg_.scales(); ++l) {
            for (const auto& b : enc_[static_cast<std::size_t>(l)]) h = apply(ps_, b, h, temb);
            skips->push_back(h);
            if (l + 1 < cfg_.scales()) h = apply(ps_, down_[static_cast<std::size_t>(l)], h);
        }
        return h;
    }

    UNetConfig cfg_;
    ParamStore<S> ps_;
    LinearLayer time_fc1_, time_fc2_;
    Conv2dLayer in_conv_;
    std::vector<std::vector<ResBlock>> enc_;
    std::vector<Conv2dLayer> down_;
    ResBlock mid_;
    std::vector<std::vector<ResBlock>> dec_;
    std::vector<Conv2dLayer> up_;
    AffineNorm out_norm_;
    Conv2dLayer out_conv_;
};

/// Runs the denoiser without building a graph.
template <class S>
Tensor<S> denoise(const UNet<S>& net, const Tensor<S>& z_t, const Tensor<S>& zy, int t) {
    return net(z_t, zy, t);
}

/// Frozen-teacher encoder features. Teacher parameters never receive
/// gradient; gradient still reaches z_t when z_t requires it.
template <class S>
FeaturePyramid<S> extract_features(const UNet<S>& teacher, const Var<S>& z_t, const Tensor<S>& zy, int t) {
    if (t < 0) throw std::invalid_argument("extract_features: t must be >= 0");
    if (teacher.params().trainable()) {
        UNet<S> frozen = teacher;
        frozen.params().set_trainable(false);
        return frozen.encode(z_t, Var<S>(zy), t);
    }
    return teacher.encode(z_t, Var<S>(zy), t);
}

struct DiscriminatorConfig {
    std::vector<int> feature_channels{32, 64, 64};
    int time_embed_dim = 128;
    int hidden = 128;
    int groups = 8;
    bool time_aware = true;

    friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

template <class S>
struct DiscScores {
    std::vector<Var<S>> per_scale;  // each (B,1,1,1)
    Var<S> mean;                    // (B,1,1,1), average over scales
};

/// Per-scale heads over normalized teacher features, modulated by
/// (1 + gamma_k(t), beta_k(t)). The gamma/beta producers start at zero, so
/// an untrained discriminator ignores t.
template <class S>
class TimeAwareDiscriminator {
public:
    TimeAwareDiscriminator() = default;
    TimeAwareDiscriminator(DiscriminatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        if (cfg_.feature_channels.empty()) throw std::invalid_argument("discriminator needs >= 1 scale");
        Rng rng(seed);
        time_fc_ = make_linear(ps_, "time.fc1", cfg_.time_embed_dim, cfg_.hidden, rng);
        for (std::size_t k = 0; k < cfg_.feature_channels.size(); ++k) {
            const int c = cfg_.feature_channels[k];
            const std::string p = "scale" + std::to_string(k);
            Scale sc;
            sc.gamma = make_linear(ps_, p + ".gamma", cfg_.hidden, c, rng, S(0));
            sc.beta = make_linear(ps_, p + ".beta", cfg_.hidden, c, rng, S(0));
            sc.conv1 = make_conv(ps_, p + ".head.conv1", c, c, 3, 2, rng);
            sc.conv2 = make_conv(ps_, p + ".head.conv2", c, 1, 3, 2, rng);
            sc.groups = detail::norm_groups(cfg_.groups, c);
            scales_.push_back(sc);
        }
    }

    [[nodiscard]] const DiscriminatorConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] ParamStore<S>& params() noexcept { return ps_; }
    [[nodiscard]] const ParamStore<S>& params() const noexcept { return ps_; }
    [[nodiscard]] int scales() const noexcept { return static_cast<int>(scales_.size()); }

    /// (gamma_k, beta_k) for timestep t, each (1, C_k, 1, 1).
    [[nodiscard]] std::pair<Var<S>, Var<S>> modulation(int k, int t) const {
        const int ts[1] = {t};
        Var<S> emb(timestep_embedding<S>(std::span<const int>(ts), cfg_.time_embed_dim));
        Var<S> h = silu(apply(ps_, time_fc_, emb));
        const auto& sc = scales_.at(static_cast<std::size_t>(k));
        return {apply(ps_, sc.gamma, h), apply(ps_, sc.beta, h)};
    }

    [[nodiscard]] DiscScores<S> discriminate(const FeaturePyramid<S>& feats, int t) const {
        if (feats.size() != scales()) {
            throw std::invalid_argument("discriminate: pyramid has " + std::to_string(feats.size()) +
                                        " scales, discriminator has " + std::to_string(scales()));
        }
        Var<S> temb_act;
        if (cfg_.time_aware) {
            const int ts[1] = {t};
            temb_act = silu(apply(ps_, time_fc_, Var<S>(timestep_embedding<S>(std::span<const int>(ts),
                                                                             cfg_.time_embed_dim))));
        }
        DiscScores<S> out;
        std::vector<std::pair<S, Var<S>>> terms;
        for (int k = 0; k < scales(); ++k) {
            const auto& sc = scales_[static_cast<std::size_t>(k)];
            const Var<S>& f = feats.maps[static_cast<std::size_t>(k)];
            if (f.shape().c != cfg_.feature_channels[static_cast<std::size_t>(k)]) {
                throw ShapeError("discriminate: feature channel mismatch at scale " + std::to_string(k));
            }
            Var<S> x = group_norm(f, sc.groups);
            if (cfg_.time_aware) {
                Var<S> gamma = apply(ps_, sc.gamma, temb_act);
                Var<S> beta = apply(ps_, sc.beta, temb_act);
                x = add_channel(mul_channel(x, add_scalar(gamma, S(1))), beta);
            }
            Var<S> h = silu(apply(ps_, sc.conv1, x));
            Var<S> score = spatial_mean(apply(ps_, sc.conv2, h));
            terms.emplace_back(S(1) / static_cast<S>(scales()), score);
            out.per_scale.push_back(std::move(score));
        }
        out.mean = lincomb(terms);
        return out;
    }

private:
    struct Scale {
        LinearLayer gamma, beta;
        Conv2dLayer conv1, conv2;
        int groups = 1;
    };

    DiscriminatorConfig cfg_;
    ParamStore<S> ps_;
    LinearLayer time_fc_;
    std::vector<Scale> scales_;
};

template <class S>
DiscScores<S> discriminate(const TimeAwareDiscriminator<S>& disc, const FeaturePyramid<S>& feats, int t) {
    return disc.discriminate(feats, t);
}

}  // namespace tadsr
