#pragma once

// Teacher pre-training and one-step distillation with alternating
// discriminator / generator updates.

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tadsr/checkpoint.hpp"
#include "tadsr/data.hpp"
#include "tadsr/diffusion.hpp"
#include "tadsr/losses.hpp"
#include "tadsr/nets.hpp"
#include "tadsr/optim.hpp"

namespace tadsr {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ScoreDistill { none, sds, hsd };

inline const char* to_string(ScoreDistill s) {
    switch (s) {
        case ScoreDistill::none: return "none";
        case ScoreDistill::sds: return "sds";
        case ScoreDistill::hsd: return "hsd";
    }
    return "?";
}

inline ScoreDistill score_distill_from_string(const std::string& s) {
    if (s == "none") return ScoreDistill::none;
    if (s == "sds") return ScoreDistill::sds;
    if (s == "hsd") return ScoreDistill::hsd;
    throw std::invalid_argument("unknown score distillation variant '" + s + "'");
}

struct TrainConfig {
    int teacher_steps = 5000;
    int distill_steps = 3000;
    int batch_size = 8;
    double lr_teacher = 1e-4;
    double lr_gen = 1e-4;
    double lr_disc = 1e-4;
    double lambda1 = 1.0;
    double lambda2 = 0.02;
    double grad_clip = 1.0;
    ScheduleParams schedule;
    UNetConfig unet;
    int disc_hidden = 128;
    bool time_aware = true;
    ScoreDistill score_distill = ScoreDistill::hsd;
    bool deterministic_teacher = true;
    bool weighted_teacher_loss = false;
    /// Draw fresh (t, eps) for the generator's adversarial term instead of
    /// reusing the discriminator step's.
    bool resample_adv_noise = false;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0: only the final checkpoint
    int log_every = 0;         // progress lines on stderr; 0: silent
    std::filesystem::path out_dir;  // empty: nothing written

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
        if (teacher_steps < 0 || distill_steps < 0) fail("step counts must be >= 0");
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (!(lr_teacher > 0) || !(lr_gen > 0) || !(lr_disc > 0)) fail("learning rates must be positive");
        if (lambda1 < 0 || lambda2 < 0) fail("lambdas must be >= 0");
        if (!(grad_clip > 0)) fail("grad_clip must be positive");
        if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
        const auto s = build_schedule(schedule);
        if (!s.satisfies_boundary_limits()) fail("schedule must satisfy eta[0] <= 1e-3 and eta[T] >= 0.999");
    }

    [[nodiscard]] DiscriminatorConfig disc_config() const {
        DiscriminatorConfig d;
        d.feature_channels = unet.feature_channels();
        d.time_embed_dim = unet.time_embed_dim;
        d.hidden = disc_hidden;
        d.groups = unet.groups;
        d.time_aware = time_aware;
        return d;
    }
};

/// Named RNG streams derived from the run seed.
enum class Stream : std::uint64_t { teacher_init = 1, teacher_noise, data_order, disc_init, distill_noise, distill_order };

inline Rng stream_rng(std::uint64_t seed, Stream s) { return Rng(mix_seed(seed, static_cast<std::uint64_t>(s))); }

namespace detail {

inline void progress(int every, int step, int total, const char* what, double loss) {
    if (every > 0 && (step % every == 0 || step == total)) {
        std::fprintf(stderr, "[%s] step %d/%d loss %.6f\n", what, step, total, loss);
    }
}

template <class S>
[[noreturn]] void abort_non_finite(const TrainConfig& cfg, const char* what, int step, const Batch<S>& batch) {
    std::string where;
    if (!cfg.out_dir.empty()) {
        const auto dir = cfg.out_dir / ("failed_batch_step" + std::to_string(step));
        std::filesystem::create_directories(dir);
        write_tensor_f32(dir / "hr.f32", batch.hr);
        write_tensor_f32(dir / "zy.f32", batch.zy);
        write_json(dir / "manifest.json",
                   {{"step", step}, {"loss", what}, {"indices", batch.indices}, {"shape", shape_json(batch.hr.shape())}});
        where = " (batch written to " + dir.string() + ")";
    }
    throw TrainingError(std::string("non-finite ") + what + " at step " + std::to_string(step) + where);
}

}  // namespace detail

template <class S>
struct TeacherResult {
    UNet<S> net;
    std::vector<double> losses;
};

/// Trains F_phi with the denoiser objective: t ~ U{1..T} per sample,
/// eps ~ N(0, I), minimize ||F(z_t, z_y, t) - z0||^2 (mean over elements).
template <class S>
TeacherResult<S> pretrain_teacher(const TrainConfig& cfg, const PairedDataset<S>& data,
                                  std::optional<UNet<S>> init = std::nullopt) {
    cfg.validate();
    const auto sched = build_schedule(cfg.schedule);
    TeacherResult<S> out{init ? std::move(*init) : UNet<S>(cfg.unet, mix_seed(cfg.seed, 1)), {}};
    if (cfg.teacher_steps == 0) return out;
    if (data.empty()) throw TrainingError("pretrain_teacher: empty training set");
    UNet<S>& net = out.net;
    net.params().set_trainable(true);
    Adam<S> opt(net.params(), {cfg.lr_teacher});
    BatchIterator<S> it(data, cfg.batch_size, mix_seed(cfg.seed, static_cast<std::uint64_t>(Stream::data_order)));
    Rng rng = stream_rng(cfg.seed, Stream::teacher_noise);
    std::uniform_int_distribution<int> tdist(1, sched.steps());
    for (int step = 1; step <= cfg.teacher_steps; ++step) {
        const Batch<S> b = it.next();
        const Shape sh = b.hr.shape();
        std::vector<int> ts(static_cast<std::size_t>(sh.n));
        if (cfg.weighted_teacher_loss) {
            std::fill(ts.begin(), ts.end(), tdist(rng));
        } else {
            for (auto& t : ts) t = tdist(rng);
        }
        const Tensor<S> eps = randn<S>(sh, rng);
        const Tensor<S> zt = forward_sample(sched, b.hr, b.zy, std::span<const int>(ts), eps);
        Var<S> pred = net.forward(Var<S>(zt), Var<S>(b.zy), std::span<const int>(ts));
        Var<S> loss = teacher_loss(sched, pred, b.hr, ts.front(), cfg.weighted_teacher_loss);
        if (!std::isfinite(loss.item())) detail::abort_non_finite(cfg, "teacher loss", step, b);
        backward(loss);
        net.params().clip_grad_norm(cfg.grad_clip);
        opt.step();
        net.params().zero_grad();
        out.losses.push_back(loss.item());
        detail::progress(cfg.log_every, step, cfg.teacher_steps, "teacher", loss.item());
        const bool last = step == cfg.teacher_steps;
        if (!cfg.out_dir.empty() && (last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0))) {
            save_unet(cfg.out_dir / (last ? std::string("teacher") : "teacher_step" + std::to_string(step)), net,
                      {cfg.schedule, step, cfg.seed, {}});
        }
    }
    return out;
}

struct DistillLogRow {
    int step = 0;
    int t = 0;
    int t_prime = 0;
    double l_distill = 0;
    double l_hsd = 0;
    double l_adv_g = 0;
    double l_adv_d = 0;
    double total = 0;
};

inline void write_distill_log(const std::filesystem::path& path, const std::vector<DistillLogRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << "step,l_distill,l_hsd,l_adv_g,l_adv_d,total\n";
    os.precision(9);
    for (const auto& r : rows) {
        os << r.step << ',' << r.l_distill << ',' << r.l_hsd << ',' << r.l_adv_g << ',' << r.l_adv_d << ',' << r.total
           << '\n';
    }
}

/// What one distillation iteration did, for tests and diagnostics.
template <class S>
struct DistillStepTrace {
    int step = 0;
    int t = 0;
    int t_prime = 0;
    Tensor<S> eps;            // noise behind z_T
    Tensor<S> eps_disc_fake;  // noise used to perturb z0_stu in the discriminator step
    Tensor<S> eps_disc_real;  // noise used to perturb z0 in the discriminator step
    Tensor<S> z0_stu;
    Tensor<S> z0_tch;
    std::vector<std::string> order;  // "disc_update", "gen_update"
    bool disc_step_touched_student = false;
    bool gen_step_touched_disc = false;
    bool disc_updated = false;
};

template <class S>
struct DistillResult {
    UNet<S> student;
    TimeAwareDiscriminator<S> disc;
    std::vector<DistillLogRow> log;
};

/// One-step distillation. Per iteration:
///  1. z_T from (z_y, eps); z0_stu = f(z_T, z_y, T); z0_tch = T-step
///     deterministic teacher rollout (constant).
///  2. Discriminator: t ~ U{1..T}; perturb detached z0_stu and the real z0
///     with the same eps; hinge loss on modulated teacher features.
///  3. Generator: t' ~ U{1..max(1, T/5)}, eps'; vanilla + lambda1 * score
///     distillation + lambda2 * adversarial (reusing step 2's t and eps).
template <class S>
DistillResult<S> distill(const TrainConfig& cfg, const UNet<S>& teacher_in, const PairedDataset<S>& data,
                         const std::function<void(const DistillStepTrace<S>&)>& on_step = {}) {
    cfg.validate();
    if (!(teacher_in.config() == cfg.unet)) throw std::invalid_argument("distill: teacher architecture differs from config");
    const auto sched = build_schedule(cfg.schedule);
    UNet<S> teacher = teacher_in;
    teacher.params().set_trainable(false);

    DistillResult<S> out{teacher_in, TimeAwareDiscriminator<S>(cfg.disc_config(), mix_seed(cfg.seed, 4)), {}};
    UNet<S>& student = out.student;
    auto& disc = out.disc;
    student.params().set_trainable(true);
    disc.params().set_trainable(true);
    if (cfg.distill_steps == 0) return out;
    if (data.empty()) throw TrainingError("distill: empty training set");

    Adam<S> opt_g(student.params(), {cfg.lr_gen});
    Adam<S> opt_d(disc.params(), {cfg.lr_disc});
    BatchIterator<S> it(data, cfg.batch_size, mix_seed(cfg.seed, static_cast<std::uint64_t>(Stream::distill_order)));
    Rng rng = stream_rng(cfg.seed, Stream::distill_noise);
    std::uniform_int_distribution<int> tdist(1, sched.steps());
    std::uniform_int_distribution<int> tpdist(1, sched.small_step_limit());
    const int T = sched.steps();
    const SamplerOptions rollout{cfg.deterministic_teacher, 0};

    for (int step = 1; step <= cfg.distill_steps; ++step) {
        DistillStepTrace<S> trace;
        trace.step = step;
        const Batch<S> b = it.next();
        const Shape sh = b.hr.shape();

        // 1. generated images
        const Tensor<S> eps = randn<S>(sh, rng);
        const Tensor<S> zT = terminal_state(sched, b.zy, eps);
        Var<S> z0_stu = student.forward(Var<S>(zT), Var<S>(b.zy), T);
        std::vector<Tensor<S>> step_noise;
        if (!cfg.deterministic_teacher) {
            for (int i = 0; i < T; ++i) step_noise.push_back(randn<S>(sh, rng));
        }
        const Tensor<S> z0_tch =
            teacher_sample(teacher, sched, b.zy, eps, rollout, std::span<const Tensor<S>>(step_noise));

        // 2. discriminator update
        const int t = tdist(rng);
        double l_adv_d = 0;
        {
            const Tensor<S> zt_fake = forward_sample(sched, z0_stu.value(), b.zy, t, eps);
            const Tensor<S> zt_real = forward_sample(sched, b.hr, b.zy, t, eps);
            auto fake = disc.discriminate(extract_features(teacher, Var<S>(zt_fake), b.zy, t), t);
            auto real = disc.discriminate(extract_features(teacher, Var<S>(zt_real), b.zy, t), t);
            Var<S> ld = adv_disc_loss(fake.per_scale, real.per_scale);
            if (!std::isfinite(ld.item())) detail::abort_non_finite(cfg, "discriminator loss", step, b);
            backward(ld);
            trace.disc_step_touched_student = student.params().any_grad();
            disc.params().clip_grad_norm(cfg.grad_clip);
            trace.disc_updated = disc.params().any_grad();
            opt_d.step();
            disc.params().zero_grad();
            l_adv_d = ld.item();
            trace.order.emplace_back("disc_update");
            if (on_step) {
                trace.eps_disc_fake = eps;
                trace.eps_disc_real = eps;
            }
        }

        // 3. generator update
        disc.params().set_trainable(false);
        const int t_prime = tpdist(rng);
        const Tensor<S> eps_prime = randn<S>(sh, rng);
        Var<S> l_distill = vanilla_distill_loss(z0_stu, z0_tch);
        Var<S> l_score(Tensor<S>::scalar(0));
        if (cfg.lambda1 > 0) {
            if (cfg.score_distill == ScoreDistill::hsd) {
                l_score = hsd_loss(teacher, sched, z0_stu, z0_tch, b.zy, t_prime, eps_prime);
            } else if (cfg.score_distill == ScoreDistill::sds) {
                l_score = sds_loss(teacher, sched, z0_stu, b.zy, t_prime, eps_prime);
            }
        }
        Var<S> l_adv(Tensor<S>::scalar(0));
        if (cfg.lambda2 > 0) {
            int t_adv = t;
            Tensor<S> eps_adv = eps;
            if (cfg.resample_adv_noise) {
                t_adv = tdist(rng);
                eps_adv = randn<S>(sh, rng);
            }
            Var<S> zt_stu = forward_sample(sched, z0_stu, b.zy, t_adv, eps_adv);
            auto scores = disc.discriminate(extract_features(teacher, zt_stu, b.zy, t_adv), t_adv);
            l_adv = adv_gen_loss(scores.per_scale);
        }
        Var<S> total = total_gen_loss(l_distill, l_score, l_adv, cfg.lambda1, cfg.lambda2);
        if (!std::isfinite(total.item())) detail::abort_non_finite(cfg, "generator loss", step, b);
        backward(total);
        trace.gen_step_touched_disc = disc.params().any_grad();
        student.params().clip_grad_norm(cfg.grad_clip);
        opt_g.step();
        student.params().zero_grad();
        disc.params().set_trainable(true);
        trace.order.emplace_back("gen_update");

        out.log.push_back({step, t, t_prime, l_distill.item(), l_score.item(), l_adv.item(), l_adv_d, total.item()});
        detail::progress(cfg.log_every, step, cfg.distill_steps, "distill", total.item());
        if (on_step) {
            trace.t = t;
            trace.t_prime = t_prime;
            trace.eps = eps;
            trace.z0_stu = z0_stu.value();
            trace.z0_tch = z0_tch;
            on_step(trace);
        }
        const bool last = step == cfg.distill_steps;
        if (!cfg.out_dir.empty() && (last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0))) {
            const std::string suffix = last ? "" : "_step" + std::to_string(step);
            const nlohmann::json extra = {{"score_distill", to_string(cfg.score_distill)},
                                          {"time_aware", cfg.time_aware},
                                          {"lambda1", cfg.lambda1},
                                          {"lambda2", cfg.lambda2}};
            save_unet(cfg.out_dir / ("student" + suffix), student, {cfg.schedule, step, cfg.seed, extra});
            save_discriminator(cfg.out_dir / ("discriminator" + suffix), disc, {cfg.schedule, step, cfg.seed, extra});
            write_distill_log(cfg.out_dir / "distill_log.csv", out.log);
        }
    }
    return out;
}

}  // namespace tadsr
