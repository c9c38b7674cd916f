// Command-line front end. Every failure ends with one stderr line
//   error code=<kind> message="<text>"
// and a nonzero exit status.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>

#include "tadsr/commands.hpp"

namespace {

using namespace tadsr;
namespace fs = std::filesystem;

enum Exit { ok = 0, other = 1, usage = 2, config = 3, io = 4, training = 5 };

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::string device = "cpu";
    std::string preset = "default";
};

struct Fail {
    Exit code;
    std::string message;
};

[[noreturn]] void fail(Exit code, std::string msg) { throw Fail{code, std::move(msg)}; }

const char* kind(Exit e) {
    switch (e) {
        case usage: return "usage";
        case config: return "config";
        case io: return "io";
        case training: return "training";
        default: return "internal";
    }
}

void print_error(Exit e, std::string msg) {
    for (auto& ch : msg) {
        if (ch == '\n' || ch == '\r') ch = ' ';
        if (ch == '"') ch = '\'';
    }
    std::fprintf(stderr, "error code=%s message=\"%s\"\n", kind(e), msg.c_str());
}

RunConfig resolve(const Globals& g) {
    if (g.device != "cpu") fail(usage, "unsupported device '" + g.device + "' (only cpu is available)");
    RunConfig c;
    if (g.preset == "desk") {
        c = desk_preset();
    } else if (g.preset != "default") {
        fail(usage, "unknown preset '" + g.preset + "'");
    }
    if (!g.config_path.empty()) c = load_run_config(g.config_path, c);
    std::optional<std::uint64_t> seed = g.seed;
    if (auto env = seed_from_env()) seed = env;
    if (seed) {
        c.train.seed = *seed;
        c.eval.seed = *seed;
        c.data.seed = *seed;
    }
    return c;
}

/// Adopts the architecture and schedule stored with a teacher checkpoint.
void adopt_teacher(RunConfig& c, const LoadedUNet<float>& t) {
    c.train.unet = t.net.config();
    c.train.schedule = t.meta.schedule;
}

bool is_student(const CheckpointMeta& m) { return m.extra.contains("score_distill"); }

const PairedDataset<float>& pick_split(const DatasetSplits<float>& d, const std::string& split) {
    if (split == "train") return d.train;
    if (split == "eval") return d.eval;
    fail(usage, "split must be train or eval");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Residual-shifting diffusion SR teacher and one-step distilled student"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Seed for every random stream (the TADSR_SEED environment variable wins)");
    app.add_option("--out-dir", g.out_dir, "Output directory");
    app.add_option("--device", g.device, "Compute device (cpu)");
    app.add_option("--preset", g.preset, "Base configuration: default or desk");
    app.fallthrough();

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic paired dataset");
    std::optional<int> train_count, eval_count, size, scale, channels;
    std::optional<double> hf_mix, blur_sigma, noise_sigma;
    gen->add_option("--train-count", train_count);
    gen->add_option("--eval-count", eval_count);
    gen->add_option("--size", size);
    gen->add_option("--scale", scale);
    gen->add_option("--channels", channels);
    gen->add_option("--hf-mix", hf_mix);
    gen->add_option("--blur-sigma", blur_sigma);
    gen->add_option("--noise-sigma", noise_sigma);

    // train-teacher
    auto* tt = app.add_subcommand("train-teacher", "Pretrain the multi-step teacher");
    std::string data_dir;
    std::optional<int> steps, batch_size, checkpoint_every, log_every;
    std::optional<double> lr;
    tt->add_option("--data", data_dir, "Dataset directory")->required();
    tt->add_option("--steps", steps);
    tt->add_option("--batch-size", batch_size);
    tt->add_option("--lr", lr);
    tt->add_option("--checkpoint-every", checkpoint_every);
    tt->add_option("--log-every", log_every);

    // distill
    auto* ds = app.add_subcommand("distill", "Distill a one-step student from a teacher checkpoint");
    std::string teacher_dir, score;
    std::optional<double> lambda1, lambda2, lr_disc;
    bool no_time_aware = false, stochastic_teacher = false, resample_adv = false;
    ds->add_option("--data", data_dir)->required();
    ds->add_option("--teacher", teacher_dir)->required();
    ds->add_option("--steps", steps);
    ds->add_option("--batch-size", batch_size);
    ds->add_option("--lr", lr, "Generator learning rate");
    ds->add_option("--lr-disc", lr_disc);
    ds->add_option("--lambda1", lambda1);
    ds->add_option("--lambda2", lambda2);
    ds->add_option("--score", score, "hsd, sds or none");
    ds->add_flag("--no-time-aware", no_time_aware);
    ds->add_flag("--stochastic-teacher", stochastic_teacher);
    ds->add_flag("--resample-adv-noise", resample_adv);
    ds->add_option("--checkpoint-every", checkpoint_every);
    ds->add_option("--log-every", log_every);

    // sample / eval
    std::string ckpt_dir, split = "eval", label;
    std::optional<int> count;
    auto* sm = app.add_subcommand("sample", "Restore a split and write the outputs as raw float32");
    sm->add_option("--checkpoint", ckpt_dir)->required();
    sm->add_option("--data", data_dir)->required();
    sm->add_option("--split", split);
    sm->add_option("--steps", steps);
    sm->add_option("--count", count);
    auto* ev = app.add_subcommand("eval", "Score a checkpoint with PSNR, SSIM and HF-energy gap");
    ev->add_option("--checkpoint", ckpt_dir)->required();
    ev->add_option("--data", data_dir)->required();
    ev->add_option("--split", split);
    ev->add_option("--steps", steps);
    ev->add_option("--count", count);
    ev->add_option("--label", label);

    // probe
    auto* pr = app.add_subcommand("probe", "Teacher-denoised difference between teacher and student outputs");
    std::string student_dir;
    std::vector<int> t_list;
    std::optional<int> teacher_steps;
    pr->add_option("--teacher", teacher_dir)->required();
    pr->add_option("--student", student_dir)->required();
    pr->add_option("--data", data_dir)->required();
    pr->add_option("--t", t_list, "Timesteps, comma separated")->delimiter(',')->required();
    pr->add_option("--count", count);
    pr->add_option("--teacher-steps", teacher_steps);

    // ablate
    auto* ab = app.add_subcommand("ablate", "Score-distillation variant x discriminator time modulation");
    std::vector<std::uint64_t> seeds{1, 2, 3};
    ab->add_option("--teacher", teacher_dir)->required();
    ab->add_option("--data", data_dir)->required();
    ab->add_option("--seeds", seeds)->delimiter(',');
    ab->add_option("--steps", steps);
    ab->add_option("--count", count, "Eval images per run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error(usage, e.what());
        return usage;
    }

    try {
        RunConfig c = resolve(g);
        const fs::path out(g.out_dir);
        fs::create_directories(out);

        if (*gen) {
            if (train_count) c.data.train_count = *train_count;
            if (eval_count) c.data.eval_count = *eval_count;
            if (size) c.data.size = *size;
            if (scale) c.data.scale = *scale;
            if (channels) c.data.channels = *channels;
            if (hf_mix) c.data.hf_mix = *hf_mix;
            if (blur_sigma) c.data.degrade.blur_sigma = *blur_sigma;
            if (noise_sigma) c.data.degrade.noise_sigma = *noise_sigma;
            save_dataset(out, generate_splits<float>(c.data));
        } else if (*tt) {
            const auto data = load_dataset<float>(data_dir);
            auto& t = c.train;
            if (steps) t.teacher_steps = *steps;
            if (batch_size) t.batch_size = *batch_size;
            if (lr) t.lr_teacher = *lr;
            if (checkpoint_every) t.checkpoint_every = *checkpoint_every;
            if (log_every) t.log_every = *log_every;
            t.unet.image_channels = data.params.channels;
            t.out_dir = out;
            const auto res = pretrain_teacher<float>(t, data.train);
            write_teacher_losses(out / "teacher_loss.csv", res.losses);
        } else if (*ds) {
            const auto data = load_dataset<float>(data_dir);
            const auto teacher = load_unet<float>(teacher_dir);
            adopt_teacher(c, teacher);
            auto& t = c.train;
            if (steps) t.distill_steps = *steps;
            if (batch_size) t.batch_size = *batch_size;
            if (lr) t.lr_gen = *lr;
            if (lr_disc) t.lr_disc = *lr_disc;
            if (lambda1) t.lambda1 = *lambda1;
            if (lambda2) t.lambda2 = *lambda2;
            if (!score.empty()) t.score_distill = score_distill_from_string(score);
            if (no_time_aware) t.time_aware = false;
            if (stochastic_teacher) t.deterministic_teacher = false;
            if (resample_adv) t.resample_adv_noise = true;
            if (checkpoint_every) t.checkpoint_every = *checkpoint_every;
            if (log_every) t.log_every = *log_every;
            t.out_dir = out;
            distill<float>(t, teacher.net, data.train);
        } else if (*sm || *ev) {
            const auto data = load_dataset<float>(data_dir);
            const auto net = load_unet<float>(ckpt_dir);
            const auto sched = build_schedule(net.meta.schedule);
            const int n_steps = steps.value_or(c.eval.steps > 0 ? c.eval.steps : (is_student(net.meta) ? 1 : sched.steps()));
            const int n = count.value_or(c.eval.count);
            const auto& part = pick_split(data, split);
            if (*sm) {
                const auto sr = sample_split(net.net, sched, part, n_steps, c.eval.seed, n);
                write_tensor_f32(out / "samples.f32", sr);
                write_json(out / "samples_manifest.json",
                           {{"shape", shape_json(sr.shape())}, {"steps", n_steps}, {"split", split},
                            {"seed", c.eval.seed}, {"checkpoint", ckpt_dir}});
            } else {
                if (label.empty()) label = is_student(net.meta) ? "student" : "teacher";
                const auto rep = evaluate(net.net, sched, part, n_steps, label, c.eval.seed, n);
                write_eval_csv(out, rep);
                std::printf("%s steps=%d psnr=%.4f ssim=%.4f hf_gap=%.5f median_s=%.5f\n", rep.label.c_str(),
                            rep.steps, rep.mean_psnr(), rep.mean_ssim(), rep.mean_hf_gap(), rep.median_seconds());
            }
        } else if (*pr) {
            const auto data = load_dataset<float>(data_dir);
            const auto teacher = load_unet<float>(teacher_dir);
            const auto student = load_unet<float>(student_dir);
            require_same_schedule(teacher.meta, student.meta, "probe");
            const auto sched = build_schedule(teacher.meta.schedule);
            const auto res = probe_scores(teacher.net, student.net, sched, data.eval, t_list, c.eval.seed,
                                          count.value_or(c.eval.count), teacher_steps.value_or(0));
            write_probe(out, res);
        } else if (*ab) {
            const auto data = load_dataset<float>(data_dir);
            const auto teacher = load_unet<float>(teacher_dir);
            adopt_teacher(c, teacher);
            if (steps) c.train.distill_steps = *steps;
            c.train.out_dir = out;
            const auto res = run_ablation(c.train, teacher.net, data.train, data.eval, seeds, c.eval.seed,
                                          count.value_or(c.eval.count));
            write_ablation(out, res);
            for (const auto& r : res.runs) {
                if (!r.ok) std::fprintf(stderr, "warning: %s seed %llu failed: %s\n", r.cell.c_str(),
                                        static_cast<unsigned long long>(r.seed), r.error.c_str());
            }
        }
        return ok;
    } catch (const Fail& f) {
        print_error(f.code, f.message);
        return f.code;
    } catch (const ConfigError& e) {
        print_error(config, e.what());
        return config;
    } catch (const ScheduleError& e) {
        print_error(config, e.what());
        return config;
    } catch (const IoError& e) {
        print_error(io, e.what());
        return io;
    } catch (const DataError& e) {
        print_error(config, e.what());
        return config;
    } catch (const TrainingError& e) {
        print_error(training, e.what());
        return training;
    } catch (const std::exception& e) {
        print_error(other, e.what());
        return other;
    }
}
