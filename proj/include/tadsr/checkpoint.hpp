#pragma once

// Checkpoints: <dir>/params.f32 holds every parameter as little-endian
// float32, concatenated in store order; <dir>/manifest.json maps parameter
// path -> (shape, element offset) and records the architecture, the
// schedule (including the realized eta table), step count and seed.

#include <filesystem>
#include <fstream>
#include <string>

#include "tadsr/io.hpp"
#include "tadsr/nets.hpp"
#include "tadsr/schedule.hpp"

namespace tadsr {

inline constexpr const char* kCheckpointFormat = "tadsr-checkpoint-v1";

inline nlohmann::json unet_config_json(const UNetConfig& c) {
    return {{"image_channels", c.image_channels}, {"base_channels", c.base_channels},
            {"channel_mults", c.channel_mults},   {"blocks_per_scale", c.blocks_per_scale},
            {"time_embed_dim", c.time_embed_dim}, {"groups", c.groups}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j, UNetConfig c = {}) {
    c.image_channels = j.value("image_channels", c.image_channels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.channel_mults = j.value("channel_mults", c.channel_mults);
    c.blocks_per_scale = j.value("blocks_per_scale", c.blocks_per_scale);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.groups = j.value("groups", c.groups);
    return c;
}

inline nlohmann::json disc_config_json(const DiscriminatorConfig& c) {
    return {{"feature_channels", c.feature_channels}, {"time_embed_dim", c.time_embed_dim},
            {"hidden", c.hidden},                     {"groups", c.groups},
            {"time_aware", c.time_aware}};
}

inline DiscriminatorConfig disc_config_from_json(const nlohmann::json& j, DiscriminatorConfig c = {}) {
    c.feature_channels = j.value("feature_channels", c.feature_channels);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.groups = j.value("groups", c.groups);
    c.time_aware = j.value("time_aware", c.time_aware);
    return c;
}

inline nlohmann::json schedule_params_json(const ScheduleParams& p) {
    return {{"T", p.steps}, {"kappa", p.kappa}, {"eta_min", p.eta_min}, {"eta_max", p.eta_max}, {"p", p.power}};
}

inline ScheduleParams schedule_params_from_json(const nlohmann::json& j, ScheduleParams p = {}) {
    p.steps = j.value("T", p.steps);
    p.kappa = j.value("kappa", p.kappa);
    p.eta_min = j.value("eta_min", p.eta_min);
    p.eta_max = j.value("eta_max", p.eta_max);
    p.power = j.value("p", p.power);
    return p;
}

struct CheckpointMeta {
    ScheduleParams schedule;
    long step = 0;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

template <class S>
void save_store(const std::filesystem::path& dir, const ParamStore<S>& ps, nlohmann::json manifest) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "params.f32", std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "params.f32").string());
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& v = ps.value(i);
        append_f32<S>(os, v.span());
        tensors.push_back({{"name", ps.name(i)}, {"shape", shape_json(v.shape())}, {"offset", offset}});
        offset += v.size();
    }
    manifest["tensors"] = std::move(tensors);
    manifest["element_count"] = offset;
    write_json(dir / "manifest.json", manifest);
}

template <class S>
void load_store(const std::filesystem::path& dir, const nlohmann::json& manifest, ParamStore<S>& ps) {
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != ps.size()) {
        throw IoError(dir.string() + ": checkpoint has " + std::to_string(tensors.size()) +
                      " tensors, architecture expects " + std::to_string(ps.size()));
    }
    const std::size_t total = manifest.at("element_count").get<std::size_t>();
    std::ifstream is(dir / "params.f32", std::ios::binary);
    if (!is) throw IoError("cannot open " + (dir / "params.f32").string());
    const auto flat = read_f32<S>(is, total);
    for (const auto& t : tensors) {
        const auto name = t.at("name").get<std::string>();
        const std::size_t i = ps.find(name);
        const Shape shape = shape_from_json(t.at("shape"));
        if (shape != ps.value(i).shape()) throw IoError(name + ": shape mismatch in checkpoint");
        const auto off = t.at("offset").get<std::size_t>();
        if (off + shape.size() > flat.size()) throw IoError(name + ": offset out of range");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), shape.size(), ps.value(i).data());
    }
}

inline nlohmann::json meta_json(const CheckpointMeta& m) {
    const auto sched = build_schedule(m.schedule);
    return {{"format", kCheckpointFormat},
            {"schedule", {{"params", schedule_params_json(m.schedule)}, {"eta", sched.eta()}}},
            {"step", m.step},
            {"seed", m.seed},
            {"extra", m.extra}};
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != kCheckpointFormat) throw IoError("not a tadsr checkpoint");
    CheckpointMeta m;
    m.schedule = schedule_params_from_json(j.at("schedule").at("params"));
    m.step = j.value("step", 0L);
    m.seed = j.value("seed", std::uint64_t{0});
    m.extra = j.value("extra", nlohmann::json::object());
    return m;
}

}  // namespace detail

template <class S>
void save_unet(const std::filesystem::path& dir, const UNet<S>& net, const CheckpointMeta& meta) {
    auto m = detail::meta_json(meta);
    m["kind"] = "unet";
    m["arch"] = unet_config_json(net.config());
    detail::save_store(dir, net.params(), std::move(m));
}

template <class S>
struct LoadedUNet {
    UNet<S> net;
    CheckpointMeta meta;
};

template <class S>
LoadedUNet<S> load_unet(const std::filesystem::path& dir) {
    const auto m = read_json(dir / "manifest.json");
    if (m.value("kind", "") != "unet") throw IoError(dir.string() + ": not a U-Net checkpoint");
    LoadedUNet<S> out{UNet<S>(unet_config_from_json(m.at("arch")), 0), detail::meta_from_json(m)};
    detail::load_store(dir, m, out.net.params());
    return out;
}

template <class S>
void save_discriminator(const std::filesystem::path& dir, const TimeAwareDiscriminator<S>& d,
                        const CheckpointMeta& meta) {
    auto m = detail::meta_json(meta);
    m["kind"] = "discriminator";
    m["arch"] = disc_config_json(d.config());
    detail::save_store(dir, d.params(), std::move(m));
}

template <class S>
struct LoadedDiscriminator {
    TimeAwareDiscriminator<S> disc;
    CheckpointMeta meta;
};

template <class S>
LoadedDiscriminator<S> load_discriminator(const std::filesystem::path& dir) {
    const auto m = read_json(dir / "manifest.json");
    if (m.value("kind", "") != "discriminator") throw IoError(dir.string() + ": not a discriminator checkpoint");
    LoadedDiscriminator<S> out{TimeAwareDiscriminator<S>(disc_config_from_json(m.at("arch")), 0),
                               detail::meta_from_json(m)};
    detail::load_store(dir, m, out.disc.params());
    return out;
}

}  // namespace tadsr
