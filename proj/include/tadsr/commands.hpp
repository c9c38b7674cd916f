#pragma once

// Library side of the command-line tool: run configuration, evaluation,
// the score-difference probe and the ablation harness. Every command is a
// pure function of (config, seed) apart from wall-clock timings.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tadsr/metrics.hpp"
#include "tadsr/trainer.hpp"

namespace tadsr {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kSeedEnv = "TADSR_SEED";

struct EvalParams {
    int steps = 0;   // 0: T for the teacher, 1 for a student
    int count = 0;   // 0: the whole split
    std::uint64_t seed = 0;
};

struct RunConfig {
    DataParams data;
    TrainConfig train;
    EvalParams eval;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const char* section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(std::string(section) + ": expected an object");
    const std::set<std::string> k(known.begin(), known.end());
    for (const auto& [key, _] : j.items()) {
        if (k.count(key) == 0) throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
    }
}

}  // namespace detail

/// Applies a JSON document on top of `base`. Sections: data, schedule, unet,
/// train, eval, plus a top-level seed. Unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
    try {
        detail::reject_unknown(j, "config", {"seed", "data", "schedule", "unet", "train", "eval"});
        RunConfig c = std::move(base);
        if (j.contains("seed")) {
            c.train.seed = j.at("seed").get<std::uint64_t>();
            c.eval.seed = c.train.seed;
        }
        if (j.contains("data")) {
            detail::reject_unknown(j["data"], "data",
                                   {"train_count", "eval_count", "size", "scale", "channels", "hf_mix", "seed",
                                    "blur_sigma", "noise_sigma"});
            c.data = data_params_from_json(j["data"], c.data);
        }
        if (j.contains("schedule")) {
            detail::reject_unknown(j["schedule"], "schedule", {"T", "kappa", "eta_min", "eta_max", "p"});
            c.train.schedule = schedule_params_from_json(j["schedule"], c.train.schedule);
        }
        if (j.contains("unet")) {
            detail::reject_unknown(j["unet"], "unet",
                                   {"image_channels", "base_channels", "channel_mults", "blocks_per_scale",
                                    "time_embed_dim", "groups"});
            c.train.unet = unet_config_from_json(j["unet"], c.train.unet);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            detail::reject_unknown(t, "train",
                                   {"teacher_steps", "distill_steps", "batch_size", "lr_teacher", "lr_gen", "lr_disc",
                                    "lambda1", "lambda2", "grad_clip", "disc_hidden", "time_aware", "score_distill",
                                    "deterministic_teacher", "weighted_teacher_loss", "resample_adv_noise",
                                    "checkpoint_every", "log_every"});
            auto& tc = c.train;
            tc.teacher_steps = t.value("teacher_steps", tc.teacher_steps);
            tc.distill_steps = t.value("distill_steps", tc.distill_steps);
            tc.batch_size = t.value("batch_size", tc.batch_size);
            tc.lr_teacher = t.value("lr_teacher", tc.lr_teacher);
            tc.lr_gen = t.value("lr_gen", tc.lr_gen);
            tc.lr_disc = t.value("lr_disc", tc.lr_disc);
            tc.lambda1 = t.value("lambda1", tc.lambda1);
            tc.lambda2 = t.value("lambda2", tc.lambda2);
            tc.grad_clip = t.value("grad_clip", tc.grad_clip);
            tc.disc_hidden = t.value("disc_hidden", tc.disc_hidden);
            tc.time_aware = t.value("time_aware", tc.time_aware);
            if (t.contains("score_distill")) tc.score_distill = score_distill_from_string(t["score_distill"]);
            tc.deterministic_teacher = t.value("deterministic_teacher", tc.deterministic_teacher);
            tc.weighted_teacher_loss = t.value("weighted_teacher_loss", tc.weighted_teacher_loss);
            tc.resample_adv_noise = t.value("resample_adv_noise", tc.resample_adv_noise);
            tc.checkpoint_every = t.value("checkpoint_every", tc.checkpoint_every);
            tc.log_every = t.value("log_every", tc.log_every);
        }
        if (j.contains("eval")) {
            detail::reject_unknown(j["eval"], "eval", {"steps", "count"});
            c.eval.steps = j["eval"].value("steps", c.eval.steps);
            c.eval.count = j["eval"].value("count", c.eval.count);
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
    try {
        return run_config_from_json(read_json(path), std::move(base));
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
}

/// The seed from the environment, if set; it takes precedence over flags and
/// config files.
inline std::optional<std::uint64_t> seed_from_env() {
    const char* v = std::getenv(kSeedEnv);
    if (v == nullptr || *v == '\0') return std::nullopt;
    char* end = nullptr;
    const unsigned long long s = std::strtoull(v, &end, 10);
    if (end == nullptr || *end != '\0') throw ConfigError(std::string(kSeedEnv) + " is not an unsigned integer");
    return static_cast<std::uint64_t>(s);
}

/// Smaller network and step counts that fit a single CPU core.
inline RunConfig desk_preset() {
    RunConfig c;
    c.train.unet.base_channels = 16;
    c.train.unet.channel_mults = {1, 2, 2};
    c.train.unet.blocks_per_scale = 1;
    c.train.unet.time_embed_dim = 64;
    c.train.unet.groups = 8;
    c.train.disc_hidden = 64;
    c.train.teacher_steps = 5000;
    c.train.distill_steps = 500;
    c.train.lr_teacher = 5e-4;
    return c;
}

// ---------------------------------------------------------------------------
// Super-resolution with a trained network

/// n-step restoration from z_T = zy + sqrt(eta_T) kappa eps. A single step
/// returns the network's z0 prediction at t = T directly.
template <class S>
Tensor<S> super_resolve(const UNet<S>& net, const DiffusionSchedule& s, const Tensor<S>& zy, const Tensor<S>& eps,
                        int steps) {
    if (steps == 1) return net(terminal_state(s, zy, eps), zy, s.steps());
    return teacher_sample(net, s, zy, eps, {true, steps});
}

/// Per-image evaluation noise; a pure function of (seed, image index).
template <class S>
Tensor<S> eval_noise(std::uint64_t seed, int index, Shape sample_shape) {
    Rng rng(mix_seed(mix_seed(seed, 0xe7a1u), static_cast<std::uint64_t>(index)));
    return randn<S>(sample_shape, rng);
}

struct EvalReport {
    std::string label;
    int steps = 0;
    std::vector<double> psnr, ssim, hf_gap, seconds;

    [[nodiscard]] static double mean(const std::vector<double>& v) {
        if (v.empty()) return 0;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    }
    [[nodiscard]] double mean_psnr() const { return mean(psnr); }
    [[nodiscard]] double mean_ssim() const { return mean(ssim); }
    [[nodiscard]] double mean_hf_gap() const { return mean(hf_gap); }
    [[nodiscard]] double median_seconds() const {
        if (seconds.empty()) return 0;
        auto v = seconds;
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size() / 2;
        return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    }
};

/// Restores each image of `data` at batch size 1 and scores it against HR.
template <class S>
EvalReport evaluate(const UNet<S>& net, const DiffusionSchedule& s, const PairedDataset<S>& data, int steps,
                    std::string label, std::uint64_t seed, int count = 0) {
    if (steps < 1 || steps > s.steps()) {
        throw ConfigError("eval: steps must lie in [1, " + std::to_string(s.steps()) + "]");
    }
    const int n = count > 0 ? std::min(count, data.size()) : data.size();
    EvalReport r;
    r.label = std::move(label);
    r.steps = steps;
    for (int i = 0; i < n; ++i) {
        const auto sample = data.sample(i);
        const auto eps = eval_noise<S>(seed, i, sample.zy.shape());
        const auto t0 = std::chrono::steady_clock::now();
        const auto sr = super_resolve(net, s, sample.zy, eps, steps);
        const auto t1 = std::chrono::steady_clock::now();
        r.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        r.psnr.push_back(psnr(sr, sample.hr));
        r.ssim.push_back(ssim(sr, sample.hr));
        r.hf_gap.push_back(hf_gap(sr, sample.hr).front());
    }
    return r;
}

inline void write_eval_csv(const std::filesystem::path& dir, const EvalReport& r) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "eval_per_image.csv", std::ios::trunc);
        if (!os) throw IoError("cannot write " + (dir / "eval_per_image.csv").string());
        os.precision(9);
        os << "index,label,steps,psnr,ssim,hf_gap,seconds\n";
        for (std::size_t i = 0; i < r.psnr.size(); ++i) {
            os << i << ',' << r.label << ',' << r.steps << ',' << r.psnr[i] << ',' << r.ssim[i] << ',' << r.hf_gap[i]
               << ',' << r.seconds[i] << '\n';
        }
    }
    std::ofstream os(dir / "eval_summary.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "eval_summary.csv").string());
    os.precision(9);
    os << "label,steps,images,psnr,ssim,hf_gap,median_seconds\n";
    os << r.label << ',' << r.steps << ',' << r.psnr.size() << ',' << r.mean_psnr() << ',' << r.mean_ssim() << ','
       << r.mean_hf_gap() << ',' << r.median_seconds() << '\n';
}

inline void require_same_schedule(const CheckpointMeta& a, const CheckpointMeta& b, const char* where) {
    if (!(a.schedule == b.schedule)) throw ConfigError(std::string(where) + ": checkpoints use different schedules");
}

// ---------------------------------------------------------------------------
// Score-difference probe

struct ProbeRow {
    int t = 0;
    double stu_tch_diff = 0;  // mean |F(z_t(z0_tch)) - F(z_t(z0_stu))|
    double real_error = 0;    // mean |F(z_t(z0)) - z0|
};

struct ProbeResult {
    std::vector<ProbeRow> rows;
    std::vector<Tensor<float>> diff_maps;  // per t: |F(z_t(z0_tch)) - F(z_t(z0_stu))|, (N, C, H, W)
};

/// Noises the teacher's multi-step output and the student's one-step output
/// with a shared eps' at each t, denoises both with the teacher, and reports
/// the mean absolute difference of the two predictions.
template <class S>
ProbeResult probe_scores(const UNet<S>& teacher, const UNet<S>& student, const DiffusionSchedule& s,
                         const PairedDataset<S>& data, const std::vector<int>& t_list, std::uint64_t seed,
                         int count = 0, int teacher_steps = 0) {
    if (t_list.empty()) throw ConfigError("probe: empty t list");
    for (int t : t_list) {
        if (t < 1 || t > s.steps()) {
            throw ConfigError("probe: t = " + std::to_string(t) + " outside [1, " + std::to_string(s.steps()) + "]");
        }
    }
    const int n = count > 0 ? std::min(count, data.size()) : data.size();
    const int tsteps = teacher_steps == 0 ? s.steps() : teacher_steps;
    std::vector<Tensor<S>> stu, tch;
    for (int i = 0; i < n; ++i) {
        const auto sample = data.sample(i);
        const auto eps = eval_noise<S>(seed, i, sample.zy.shape());
        tch.push_back(super_resolve(teacher, s, sample.zy, eps, tsteps));
        stu.push_back(super_resolve(student, s, sample.zy, eps, 1));
    }
    ProbeResult out;
    for (int t : t_list) {
        ProbeRow row{t, 0, 0};
        Tensor<float> map(Shape{n, data.hr.shape().c, data.hr.shape().h, data.hr.shape().w});
        std::size_t elems = 0;
        for (int i = 0; i < n; ++i) {
            const auto sample = data.sample(i);
            Rng rng(mix_seed(mix_seed(seed, 0x9b0eu + static_cast<std::uint64_t>(t)), static_cast<std::uint64_t>(i)));
            const auto ep = randn<S>(sample.zy.shape(), rng);
            const auto f_tch = teacher(forward_sample(s, tch[static_cast<std::size_t>(i)], sample.zy, t, ep), sample.zy, t);
            const auto f_stu = teacher(forward_sample(s, stu[static_cast<std::size_t>(i)], sample.zy, t, ep), sample.zy, t);
            const auto f_real = teacher(forward_sample(s, sample.hr, sample.zy, t, ep), sample.zy, t);
            const std::size_t per = f_tch.size();
            for (std::size_t k = 0; k < per; ++k) {
                const double d = std::abs(static_cast<double>(f_tch[k]) - f_stu[k]);
                row.stu_tch_diff += d;
                row.real_error += std::abs(static_cast<double>(f_real[k]) - sample.hr[k]);
                map[static_cast<std::size_t>(i) * per + k] = static_cast<float>(d);
            }
            elems += per;
        }
        if (elems > 0) {
            row.stu_tch_diff /= static_cast<double>(elems);
            row.real_error /= static_cast<double>(elems);
        }
        out.rows.push_back(row);
        out.diff_maps.push_back(std::move(map));
    }
    return out;
}

inline void write_probe(const std::filesystem::path& dir, const ProbeResult& p) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "probe.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "probe.csv").string());
    os.precision(9);
    os << "t,mean_abs_tch_minus_stu,mean_abs_real_error\n";
    nlohmann::json maps = nlohmann::json::array();
    for (std::size_t i = 0; i < p.rows.size(); ++i) {
        const auto& r = p.rows[i];
        os << r.t << ',' << r.stu_tch_diff << ',' << r.real_error << '\n';
        const std::string file = "probe_diff_t" + std::to_string(r.t) + ".f32";
        write_tensor_f32(dir / file, p.diff_maps[i]);
        maps.push_back({{"t", r.t}, {"file", file}, {"shape", shape_json(p.diff_maps[i].shape())}});
    }
    write_json(dir / "probe_manifest.json", {{"maps", maps}});
}

// ---------------------------------------------------------------------------
// Ablation over score-distillation variant x discriminator time modulation

struct AblationCell {
    std::string name;
    ScoreDistill score = ScoreDistill::hsd;
    bool time_aware = true;
};

inline std::vector<AblationCell> ablation_cells() {
    return {{"SDS+GAN", ScoreDistill::sds, false},
            {"SDS+t-GAN", ScoreDistill::sds, true},
            {"HSD+GAN", ScoreDistill::hsd, false},
            {"HSD+t-GAN", ScoreDistill::hsd, true}};
}

struct AblationRun {
    std::string cell;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double psnr = 0, ssim = 0, hf_gap = 0;
};

struct AblationRow {
    AblationCell cell;
    int runs_ok = 0;
    double psnr_mean = 0, psnr_std = 0, ssim_mean = 0, ssim_std = 0, hf_gap_mean = 0, hf_gap_std = 0;
};

struct AblationResult {
    std::vector<AblationRun> runs;
    std::vector<AblationRow> rows;

    [[nodiscard]] const AblationRun* find(const std::string& cell, std::uint64_t seed) const {
        for (const auto& r : runs) {
            if (r.cell == cell && r.seed == seed) return &r;
        }
        return nullptr;
    }
};

namespace detail {
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0, 0};
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0};
    double q = 0;
    for (double x : v) q += (x - m) * (x - m);
    return {m, std::sqrt(q / static_cast<double>(v.size() - 1))};
}
}  // namespace detail

/// One distillation + evaluation per (cell, seed). Runs already present in
/// `done` are taken as given. A failing run is recorded and skipped.
template <class S>
AblationResult run_ablation(const TrainConfig& base, const UNet<S>& teacher, const PairedDataset<S>& train,
                            const PairedDataset<S>& eval, const std::vector<std::uint64_t>& seeds,
                            std::uint64_t eval_seed, int eval_count = 0, const std::vector<AblationRun>& done = {}) {
    if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
    const auto sched = build_schedule(base.schedule);
    AblationResult out;
    for (const auto& cell : ablation_cells()) {
        for (auto seed : seeds) {
            auto prior = std::find_if(done.begin(), done.end(),
                                      [&](const AblationRun& r) { return r.cell == cell.name && r.seed == seed; });
            if (prior != done.end()) {
                out.runs.push_back(*prior);
                continue;
            }
            AblationRun run{cell.name, seed, false, {}, 0, 0, 0};
            try {
                TrainConfig cfg = base;
                cfg.seed = seed;
                cfg.score_distill = cell.score;
                cfg.time_aware = cell.time_aware;
                if (!cfg.out_dir.empty()) cfg.out_dir = base.out_dir / (cell.name + "_seed" + std::to_string(seed));
                const auto res = distill<S>(cfg, teacher, train);
                const auto rep = evaluate(res.student, sched, eval, 1, cell.name, eval_seed, eval_count);
                run.ok = true;
                run.psnr = rep.mean_psnr();
                run.ssim = rep.mean_ssim();
                run.hf_gap = rep.mean_hf_gap();
            } catch (const std::exception& e) {
                run.error = e.what();
            }
            out.runs.push_back(run);
        }
    }
    for (const auto& cell : ablation_cells()) {
        AblationRow row{cell};
        std::vector<double> p, q, h;
        for (const auto& r : out.runs) {
            if (r.cell != cell.name || !r.ok) continue;
            p.push_back(r.psnr);
            q.push_back(r.ssim);
            h.push_back(r.hf_gap);
        }
        row.runs_ok = static_cast<int>(p.size());
        std::tie(row.psnr_mean, row.psnr_std) = detail::mean_std(p);
        std::tie(row.ssim_mean, row.ssim_std) = detail::mean_std(q);
        std::tie(row.hf_gap_mean, row.hf_gap_std) = detail::mean_std(h);
        out.rows.push_back(row);
    }
    return out;
}

inline void write_ablation(const std::filesystem::path& dir, const AblationResult& a) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "ablation.csv", std::ios::trunc);
        if (!os) throw IoError("cannot write " + (dir / "ablation.csv").string());
        os.precision(9);
        os << "setting,score_distill,time_aware,runs_ok,psnr_mean,psnr_std,ssim_mean,ssim_std,hf_gap_mean,hf_gap_std\n";
        for (const auto& r : a.rows) {
            os << r.cell.name << ',' << to_string(r.cell.score) << ',' << (r.cell.time_aware ? 1 : 0) << ','
               << r.runs_ok << ',' << r.psnr_mean << ',' << r.psnr_std << ',' << r.ssim_mean << ',' << r.ssim_std
               << ',' << r.hf_gap_mean << ',' << r.hf_gap_std << '\n';
        }
    }
    std::ofstream os(dir / "ablation_runs.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "ablation_runs.csv").string());
    os.precision(9);
    os << "setting,seed,ok,psnr,ssim,hf_gap,error\n";
    for (const auto& r : a.runs) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        os << r.cell << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << r.psnr << ',' << r.ssim << ',' << r.hf_gap
           << ',' << err << '\n';
    }
}

inline void write_teacher_losses(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os.precision(9);
    os << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
}

// ---------------------------------------------------------------------------
// Sampling to disk

template <class S>
Tensor<S> sample_split(const UNet<S>& net, const DiffusionSchedule& s, const PairedDataset<S>& data, int steps,
                       std::uint64_t seed, int count = 0) {
    if (steps < 1 || steps > s.steps()) {
        throw ConfigError("sample: steps must lie in [1, " + std::to_string(s.steps()) + "]");
    }
    const int n = count > 0 ? std::min(count, data.size()) : data.size();
    std::vector<Tensor<S>> out;
    for (int i = 0; i < n; ++i) {
        const auto sample = data.sample(i);
        out.push_back(super_resolve(net, s, sample.zy, eval_noise<S>(seed, i, sample.zy.shape()), steps));
    }
    return stack_batch<S>(out);
}

}  // namespace tadsr
