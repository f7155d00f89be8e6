#pragma once

// Three-phase experiment driver: teacher training, cold-start distillation,
// then joint distillation + RL. Writes, under <output root>/<run.name>/:
//   config.txt       the effective configuration
//   metrics.csv      one row per evaluation, flushed as written
//   teacher.ckpt     after the teacher phase
//   coldstart.ckpt   after the cold-start phase
//   latest.ckpt      every run.checkpoint_every iterations (optional)
//   final.ckpt       at the end
//   failure.ckpt     state at the first non-finite loss
//   summary.txt      headline metrics
//
// Each run draws from independent streams forked from the seed (teacher,
// distillation, RL, reference samples, per-row evaluation), so evaluation
// never perturbs training and a resumed run replays the unbroken one.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmdrlab/checkpoint.hpp"
#include "dmdrlab/config.hpp"
#include "dmdrlab/diffusion.hpp"
#include "dmdrlab/distill.hpp"
#include "dmdrlab/errors.hpp"
#include "dmdrlab/metrics.hpp"
#include "dmdrlab/rl.hpp"
#include "dmdrlab/schedules.hpp"

namespace dmdrlab {

namespace fs = std::filesystem;

inline fs::path output_root(const RunConfig& c) {
    if (const char* env = std::getenv("DMDRLAB_OUT"); env && *env) {
        return fs::path(env);
    }
    return fs::path(c.run.output_root);
}

inline fs::path run_dir(const RunConfig& c) { return output_root(c) / c.run.name; }

inline Rng stream(long seed, const std::string& label) {
    return Rng(static_cast<std::uint64_t>(seed)).fork(label);
}

inline Rng eval_stream(long seed, long iter) { return stream(seed, "eval/" + std::to_string(iter)); }

// Teacher samples with labels from the mixture's class prior.
inline Value sample_teacher(const RunConfig& cfg, const MixtureSpec& m, const NetParams& teacher, std::size_t n,
                            Rng& rng) {
    const auto labels = sample_labels(m, n, rng);
    return teacher_sample(cfg.diffusion, teacher, n, static_cast<std::size_t>(cfg.teacher.sample_steps), rng, labels,
                          cfg.diffusion.guidance_scale);
}

inline HistogramGrid eval_grid(const RunConfig& cfg, const MixtureSpec& m) {
    return default_grid(m, static_cast<std::size_t>(cfg.eval.bins));
}

// KL(reference || samples), coverage and diversity of `samples`.
inline void fill_sample_metrics(MetricsRecord& rec, const Value& reference, const Value& samples,
                                const MixtureSpec& m, const RunConfig& cfg) {
    rec.hist_kl_to_teacher = histogram_kl(reference, samples, eval_grid(cfg, m), cfg.eval.kl_alpha).nats;
    rec.mode_coverage = mode_coverage(samples, m);
    rec.diversity_mpd = diversity_mpd(samples);
}

// Teacher quality against fresh ground-truth samples.
inline MetricsRecord evaluate_teacher(const RunConfig& cfg, const MixtureSpec& m, const NetParams& teacher, Rng rng,
                                      std::size_t n) {
    MetricsRecord rec;
    rec.phase = Phase::teacher;
    const Value truth = sample_mixture(m, n, rng).x;
    const Value samples = sample_teacher(cfg, m, teacher, n, rng);
    fill_sample_metrics(rec, truth, samples, m, cfg);
    return rec;
}

struct Trainer {
    RunConfig cfg;
    MixtureSpec mixture;
    NetParams teacher;
    // CSV iteration of the teacher phase's last row; distillation rows follow it.
    long teacher_rows_end = 0;
    bool teacher_done = false;
    bool distill_started = false;
    std::optional<DistillState> st;
    ScheduleState sched;
    RlRuntime rl;
    Rng distill_rng;
    long distill_iter = 0;
    Value reference;  // teacher samples for KL; regenerated, not stored

    Phase phase() const {
        if (!distill_started) {
            return Phase::teacher;
        }
        return distill_iter < cfg.phases.coldstart_iters ? Phase::coldstart : Phase::joint;
    }
    long total_distill_iters() const { return cfg.phases.coldstart_iters + cfg.phases.joint_iters; }
    long csv_iter() const { return teacher_rows_end + distill_iter; }
};

inline Trainer make_trainer(const RunConfig& cfg) {
    validate_config(cfg);
    Trainer t;
    t.cfg = cfg;
    t.mixture = build_mixture(cfg);
    t.sched = build_schedule(cfg);
    t.rl.config = cfg.rl;
    t.rl.reward = build_reward(cfg);
    t.rl.has_reward = true;
    t.rl.rng = stream(cfg.run.seed, "rl");
    t.distill_rng = stream(cfg.run.seed, "distill");
    return t;
}

inline void rebuild_reference(Trainer& t) {
    Rng rng = stream(t.cfg.run.seed, "reference");
    t.reference = sample_teacher(t.cfg, t.mixture, t.teacher, static_cast<std::size_t>(t.cfg.eval.samples), rng);
}

inline void begin_distill(Trainer& t) {
    t.st = make_distill_state(t.cfg.diffusion, t.teacher, t.cfg.distill, t.mixture.class_weights(), t.distill_rng);
    t.distill_started = true;
    t.distill_iter = 0;
    rebuild_reference(t);
}

inline MetricsRecord evaluate_student(const Trainer& t, MetricsRecord rec) {
    Rng rng = eval_stream(t.cfg.run.seed, t.csv_iter());
    const auto n = static_cast<std::size_t>(t.cfg.eval.samples);
    const auto labels = draw_labels(*t.st, n, rng);
    const Value samples = student_sample(*t.st, n, rng, labels);
    fill_sample_metrics(rec, t.reference, samples, t.mixture, t.cfg);
    return rec;
}

// Student metrics plus reward statistics on n fresh samples drawn from the
// given stream.
inline MetricsRecord evaluate_trainer(const Trainer& t, std::size_t n, Rng rng) {
    MetricsRecord rec;
    rec.iter = t.csv_iter();
    rec.phase = t.phase();
    const auto labels = draw_labels(*t.st, n, rng);
    const Value samples = student_sample(*t.st, n, rng, labels);
    fill_sample_metrics(rec, t.reference, samples, t.mixture, t.cfg);
    const auto stats = reward_stats(reward_values(t.rl.reward, samples, labels));
    rec.reward_mean = stats.mean;
    rec.reward_var = stats.variance;
    return rec;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline Checkpoint trainer_checkpoint(const Trainer& t) {
    Checkpoint ck;
    put_text(ck, "config", emit_config(t.cfg));
    put_scalar(ck, "state.teacher_done", t.teacher_done ? 1.0 : 0.0);
    put_scalar(ck, "state.teacher_rows_end", static_cast<double>(t.teacher_rows_end));
    put_scalar(ck, "state.distill_started", t.distill_started ? 1.0 : 0.0);
    put_scalar(ck, "state.distill_iter", static_cast<double>(t.distill_iter));
    if (t.teacher_done) {
        put_params(ck, "teacher", t.teacher);
    }
    put_rng(ck, "rng.distill", t.distill_rng);
    put_rng(ck, "rng.rl", t.rl.rng);
    if (t.distill_started) {
        const DistillState& st = *t.st;
        put_params(ck, "generator", st.generator);
        put_adam(ck, "generator_opt", st.generator_opt);
        put_params(ck, "fake", st.fake_est);
        put_adam(ck, "fake_opt", st.fake_opt);
        put_params(ck, "real", st.real_est, true);
        put_adam(ck, "real_opt", st.real_opt);
        put_scalar(ck, "rl.active", t.rl.active ? 1.0 : 0.0);
        put_scalar(ck, "rl.coeff", t.rl.coeff);
        put_scalar(ck, "rl.balanced", t.rl.balanced ? 1.0 : 0.0);
        put_scalar(ck, "rl.steps", static_cast<double>(t.rl.steps));
        put_scalar(ck, "rl.has_reference", t.rl.reference ? 1.0 : 0.0);
        if (t.rl.reference) {
            put_params(ck, "reference", *t.rl.reference);
        }
    }
    return ck;
}

inline RunConfig checkpoint_config(const Checkpoint& ck) {
    try {
        return parse_config(get_text(ck, "config"));
    } catch (const ParseError& e) {
        throw FormatError(std::string("checkpoint: stored config is invalid: ") + e.what(), 0);
    }
}

// Sections that must agree for a resume: everything except run placement,
// the joint-phase length and wall-clock recording. Before RL has activated
// the rl and reward sections may change too, so joint-phase variants can
// branch from one cold-start checkpoint.
inline bool resume_compatible(RunConfig a, RunConfig b, bool rl_started = true) {
    for (RunConfig* c : {&a, &b}) {
        c->run.name.clear();
        c->run.output_root.clear();
        c->run.checkpoint_every = 0;
        c->phases.joint_iters = 0;
        c->eval.record_wallclock = false;
        if (!rl_started) {
            c->rl = RlConfig{};
            c->reward = RewardSpec{};
        }
    }
    return a == b;
}

inline Trainer restore_trainer(const Checkpoint& ck, const RunConfig& cfg) {
    const bool rl_started = ck.has("rl.active") && get_scalar(ck, "rl.active") != 0.0;
    if (!resume_compatible(checkpoint_config(ck), cfg, rl_started)) {
        throw ConfigError("resume: config differs from the checkpoint's beyond run placement, phase lengths" +
                          std::string(rl_started ? "" : " and the rl/reward sections"));
    }
    if (get_scalar(ck, "state.teacher_done") == 0.0) {
        throw ConfigError("resume: checkpoint was taken before the teacher finished");
    }
    Trainer t = make_trainer(cfg);
    t.teacher_done = true;
    Rng scratch(0);
    t.teacher = net_init(scratch, build_net_dims(cfg));
    get_params(ck, "teacher", t.teacher);
    t.teacher_rows_end = get_integer(ck, "state.teacher_rows_end");
    t.distill_rng = get_rng(ck, "rng.distill");
    t.rl.rng = get_rng(ck, "rng.rl");
    if (get_scalar(ck, "state.distill_started") != 0.0) {
        t.st = make_distill_state(cfg.diffusion, t.teacher, cfg.distill, t.mixture.class_weights(), scratch);
        t.distill_started = true;
        DistillState& st = *t.st;
        get_params(ck, "generator", st.generator);
        get_adam(ck, "generator_opt", st.generator_opt);
        get_params(ck, "fake", st.fake_est);
        get_adam(ck, "fake_opt", st.fake_opt);
        get_params(ck, "real", st.real_est, true);
        get_adam(ck, "real_opt", st.real_opt);
        st.verify_real_base();
        t.distill_iter = get_integer(ck, "state.distill_iter");
        t.rl.active = get_scalar(ck, "rl.active") != 0.0;
        t.rl.coeff = get_scalar(ck, "rl.coeff");
        t.rl.balanced = get_scalar(ck, "rl.balanced") != 0.0;
        t.rl.steps = get_integer(ck, "rl.steps");
        if (get_scalar(ck, "rl.has_reference") != 0.0) {
            t.rl.reference = clone_params(st.generator);
            get_params(ck, "reference", *t.rl.reference);
        }
        rebuild_reference(t);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Metrics log

class MetricsLog {
public:
    // Keeps rows with iter <= keep_through when resuming; starts fresh otherwise.
    MetricsLog(const fs::path& path, std::optional<long> keep_through) {
        std::vector<std::string> kept;
        if (keep_through && fs::exists(path)) {
            std::ifstream in(path);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                const auto c1 = line.find(',');
                const auto c2 = line.find(',', c1 + 1);
                if (c1 == std::string::npos || c2 == std::string::npos) {
                    break;
                }
                if (std::stol(line.substr(c1 + 1, c2 - c1 - 1)) > *keep_through) {
                    break;
                }
                kept.push_back(line);
            }
        }
        out_.open(path, std::ios::trunc);
        if (!out_) {
            throw Error("cannot open '" + path.string() + "' for writing");
        }
        out_ << metrics_csv_header() << '\n';
        for (const auto& l : kept) {
            out_ << l << '\n';
        }
        out_.flush();
    }

    void write(const MetricsRecord& rec) {
        out_ << to_csv_row(rec) << '\n';
        out_.flush();
        if (!out_) {
            throw Error("metrics write failed");
        }
        ++rows_;
    }

    long rows() const { return rows_; }

private:
    std::ofstream out_;
    long rows_ = 0;
};

// ---------------------------------------------------------------------------
// Driver

struct RunOptions {
    std::optional<fs::path> resume;
    // Stop after the teacher phase.
    bool teacher_only = false;
    std::ostream* log = nullptr;
};

struct RunSummary {
    fs::path dir;
    MetricsRecord last;
    MetricsRecord teacher;
    long rows = 0;
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    out << text;
    if (!out) {
        throw Error("cannot write '" + p.string() + "'");
    }
}

inline std::string summary_text(const RunSummary& s) {
    std::ostringstream os;
    const auto line = [&](const char* k, double v) { os << k << " = " << format_double(v) << '\n'; };
    os << "final_phase = " << phase_name(s.last.phase) << '\n';
    os << "final_iter = " << s.last.iter << '\n';
    line("hist_kl_to_teacher", s.last.hist_kl_to_teacher);
    line("mode_coverage", s.last.mode_coverage);
    line("diversity_mpd", s.last.diversity_mpd);
    line("reward_mean", s.last.reward_mean);
    line("reward_var", s.last.reward_var);
    line("teacher_hist_kl_to_data", s.teacher.hist_kl_to_teacher);
    line("teacher_mode_coverage", s.teacher.mode_coverage);
    line("teacher_diversity_mpd", s.teacher.diversity_mpd);
    return os.str();
}

}  // namespace detail

inline RunSummary run_experiment(const RunConfig& cfg, const RunOptions& opts = {}) {
    validate_config(cfg);
    const auto clock_start = std::chrono::steady_clock::now();
    const auto stamp = [&](MetricsRecord& r) {
        r.wallclock_ms =
            cfg.eval.record_wallclock
                ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock_start).count()
                : 0.0;
    };
    auto say = [&](const std::string& msg) {
        if (opts.log) {
            *opts.log << msg << std::endl;
        }
    };

    RunSummary summary;
    summary.dir = run_dir(cfg);
    fs::create_directories(summary.dir);
    detail::write_text(summary.dir / "config.txt", emit_config(cfg));

    Trainer t;
    if (opts.resume) {
        t = restore_trainer(load_checkpoint(opts.resume->string()), cfg);
        say("resumed from " + opts.resume->string() + " at iteration " + std::to_string(t.csv_iter()));
    } else {
        t = make_trainer(cfg);
    }
    MetricsLog log(summary.dir / "metrics.csv",
                   opts.resume ? std::optional<long>(t.csv_iter()) : std::optional<long>());
    const auto n_eval = static_cast<std::size_t>(cfg.eval.samples);

    auto fail = [&](const std::string& what, long iter) {
        save_checkpoint((summary.dir / "failure.ckpt").string(), trainer_checkpoint(t));
        throw TrainingError(what, iter);
    };

    if (t.teacher_done) {
        summary.teacher =
            evaluate_teacher(cfg, t.mixture, t.teacher, eval_stream(cfg.run.seed, t.teacher_rows_end), n_eval);
    } else {
        if (!cfg.teacher.checkpoint.empty()) {
            Checkpoint tck = load_checkpoint(cfg.teacher.checkpoint);
            Rng scratch(0);
            t.teacher = net_init(scratch, build_net_dims(cfg));
            get_params(tck, "teacher", t.teacher);
            MetricsRecord rec = evaluate_teacher(cfg, t.mixture, t.teacher, eval_stream(cfg.run.seed, 0), n_eval);
            stamp(rec);
            log.write(rec);
            summary.teacher = rec;
            t.teacher_rows_end = 0;
            say("teacher loaded from " + cfg.teacher.checkpoint);
        } else {
            Rng teacher_rng = stream(cfg.run.seed, "teacher");
            double window = 0.0;
            long in_window = 0;
            const long iters = cfg.teacher.iters;
            auto observe = [&](long done, double loss, const NetParams& net) {
                window += loss;
                ++in_window;
                if (done % cfg.eval.every != 0 && done != iters) {
                    return;
                }
                MetricsRecord rec = evaluate_teacher(cfg, t.mixture, net, eval_stream(cfg.run.seed, done), n_eval);
                rec.iter = done;
                rec.l_diff_real_adapter = window / static_cast<double>(in_window);
                window = 0.0;
                in_window = 0;
                stamp(rec);
                log.write(rec);
                summary.teacher = rec;
            };
            try {
                t.teacher = train_teacher(cfg.diffusion, t.mixture, iters, teacher_rng, build_teacher_options(cfg),
                                          observe);
            } catch (const TrainingError& e) {
                fail(e.what(), e.iteration());
            }
            if (iters == 0) {
                MetricsRecord rec = evaluate_teacher(cfg, t.mixture, t.teacher, eval_stream(cfg.run.seed, 0), n_eval);
                stamp(rec);
                log.write(rec);
                summary.teacher = rec;
            }
            t.teacher_rows_end = iters;
            say("teacher trained for " + std::to_string(iters) + " iterations");
        }
        t.teacher_done = true;
        save_checkpoint((summary.dir / "teacher.ckpt").string(), trainer_checkpoint(t));
    }
    if (opts.teacher_only) {
        summary.last = summary.teacher;
        summary.rows = log.rows();
        detail::write_text(summary.dir / "summary.txt", detail::summary_text(summary));
        return summary;
    }
    if (!t.distill_started) {
        begin_distill(t);
    }

    const long coldstart = cfg.phases.coldstart_iters, total = t.total_distill_iters();
    MetricsRecord last;
    while (t.distill_iter < total) {
        const Phase phase = t.phase();
        if (phase == Phase::joint && cfg.rl.algo != RlAlgo::none && !t.rl.active) {
            t.rl.active = true;
            say("RL active (" + std::string(rl_algo_name(cfg.rl.algo)) + ") at iteration " +
                std::to_string(t.csv_iter()));
        }
        t.sched.iter = t.distill_iter;
        MetricsRecord rec;
        try {
            rec = combined_step(*t.st, &t.rl, t.sched, t.distill_rng);
        } catch (const NumericError& e) {
            fail(e.what(), t.csv_iter() + 1);
        } catch (const DomainError& e) {
            fail(e.what(), t.csv_iter() + 1);
        }
        ++t.distill_iter;
        rec.phase = phase;
        rec.iter = t.csv_iter();
        if (!rec.all_finite()) {
            fail("non-finite loss", rec.iter);
        }
        const bool boundary = t.distill_iter == coldstart || t.distill_iter == total;
        if (t.distill_iter % cfg.eval.every == 0 || boundary) {
            rec = evaluate_student(t, rec);
            stamp(rec);
            log.write(rec);
            last = rec;
        }
        if (t.distill_iter == coldstart) {
            save_checkpoint((summary.dir / "coldstart.ckpt").string(), trainer_checkpoint(t));
            say("cold start finished at iteration " + std::to_string(t.csv_iter()));
        }
        if (cfg.run.checkpoint_every > 0 && t.distill_iter % cfg.run.checkpoint_every == 0) {
            save_checkpoint((summary.dir / "latest.ckpt").string(), trainer_checkpoint(t));
        }
    }
    save_checkpoint((summary.dir / "final.ckpt").string(), trainer_checkpoint(t));
    summary.last = total > 0 ? last : summary.teacher;
    summary.rows = log.rows();
    detail::write_text(summary.dir / "summary.txt", detail::summary_text(summary));
    say("done: " + (summary.dir / "metrics.csv").string());
    return summary;
}

}  // namespace dmdrlab
