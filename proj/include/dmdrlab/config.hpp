#pragma once

// Run configuration in a line-oriented `section.key = value` format with `#`
// comments. Every key has a default; an empty file is a valid config.
//
// Value syntax:
//   numbers and booleans (true / false) as usual
//   lists:   1, 0.75, 0.5
//   points:  2, 0; -2, 0
//   enums:   one of the names listed by --help
//   rl.coeff accepts `auto`

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dmdrlab/diffusion.hpp"
#include "dmdrlab/distill.hpp"
#include "dmdrlab/errors.hpp"
#include "dmdrlab/metrics.hpp"
#include "dmdrlab/nets.hpp"
#include "dmdrlab/rl.hpp"
#include "dmdrlab/schedules.hpp"

namespace dmdrlab {

enum class MixtureKind { ring, line, custom };

struct RunConfig {
    struct Run {
        long seed = 0;
        std::string name = "default";
        // Overridden by the DMDRLAB_OUT environment variable.
        std::string output_root = "runs";
        // Extra checkpoints every n distillation iterations; 0 = phase ends only.
        long checkpoint_every = 0;
        bool operator==(const Run&) const = default;
    } run;

    struct Mixture {
        MixtureKind kind = MixtureKind::ring;
        long modes = 8;
        double radius = 4.0;
        double stddev = 0.15;
        long classes = 4;
        std::vector<std::vector<double>> means;  // custom only
        std::vector<double> weights;             // custom only; empty = uniform
        std::vector<double> labels;              // custom only; empty = unconditional
        bool operator==(const Mixture&) const = default;
    } mixture;

    DiffusionSpec diffusion;

    struct Net {
        long hidden_dim = 128;
        long depth = 4;
        long time_embed_dim = 32;
        bool operator==(const Net&) const = default;
    } net;

    struct Teacher {
        long iters = 8000;
        long batch = 256;
        double lr = 1e-3;
        double lr_final_frac = 0.1;
        double label_dropout = 0.1;
        long sample_steps = 64;
        // Load instead of training when set.
        std::string checkpoint;
        bool operator==(const Teacher&) const = default;
    } teacher;

    DistillConfig distill;

    struct Schedule {
        bool dynadg = true;
        double lambda0 = 0.5;
        long dynadg_horizon = 0;  // 0 = cold-start length
        bool dynars = true;
        double kappa0 = 3.0;
        long dynars_horizon = 0;  // 0 = cold-start length
        ScheduleShape shape = ScheduleShape::linear;
        bool frozen = false;
        bool operator==(const Schedule&) const = default;
    } schedule;

    RlConfig rl;
    RewardSpec reward;

    struct Phases {
        long coldstart_iters = 2000;
        long joint_iters = 2000;
        bool operator==(const Phases&) const = default;
    } phases;

    struct Eval {
        long every = 100;
        long samples = 2048;
        long bins = 64;
        double kl_alpha = 0.5;
        bool record_wallclock = false;
        bool operator==(const Eval&) const = default;
    } eval;

    bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Derived objects

inline MixtureSpec build_mixture(const RunConfig& c) {
    const auto& m = c.mixture;
    MixtureSpec out;
    switch (m.kind) {
        case MixtureKind::ring:
            out = make_ring(static_cast<std::size_t>(m.modes), m.radius, m.stddev, static_cast<std::size_t>(m.classes));
            break;
        case MixtureKind::line: {
            out.stddev = m.stddev;
            for (long i = 0; i < m.modes; ++i) {
                const double pos = m.modes == 1 ? 0.0 : -m.radius + 2.0 * m.radius * static_cast<double>(i) /
                                                                         static_cast<double>(m.modes - 1);
                out.means.push_back({pos});
                out.weights.push_back(1.0 / static_cast<double>(m.modes));
                if (m.classes > 0) {
                    out.classes.push_back(static_cast<int>(i * m.classes / m.modes));
                }
            }
            break;
        }
        case MixtureKind::custom:
            out.means = m.means;
            out.stddev = m.stddev;
            out.weights = m.weights.empty() ? std::vector<double>(m.means.size(), 1.0 / static_cast<double>(m.means.size()))
                                            : m.weights;
            for (double l : m.labels) {
                out.classes.push_back(static_cast<int>(l));
            }
            break;
    }
    out.validate();
    return out;
}

inline NetDims build_net_dims(const RunConfig& c) {
    const MixtureSpec m = build_mixture(c);
    NetDims d;
    d.in_dim = d.out_dim = m.dim();
    d.hidden_dim = static_cast<std::size_t>(c.net.hidden_dim);
    d.depth = static_cast<std::size_t>(c.net.depth);
    d.time_embed_dim = static_cast<std::size_t>(c.net.time_embed_dim);
    d.num_classes = m.num_classes();
    return d;
}

inline TeacherOptions build_teacher_options(const RunConfig& c) {
    TeacherOptions t;
    t.dims = build_net_dims(c);
    t.batch = static_cast<std::size_t>(c.teacher.batch);
    t.adam.lr = c.teacher.lr;
    t.lr_final_frac = c.teacher.lr_final_frac;
    t.label_dropout = c.teacher.label_dropout;
    return t;
}

inline ScheduleState build_schedule(const RunConfig& c) {
    ScheduleState s;
    s.dynadg_enabled = c.schedule.dynadg;
    s.lambda0 = c.schedule.lambda0;
    s.dynadg_horizon = c.schedule.dynadg_horizon > 0 ? c.schedule.dynadg_horizon : std::max(1L, c.phases.coldstart_iters);
    s.dynars_enabled = c.schedule.dynars;
    s.kappa0 = c.schedule.kappa0;
    s.dynars_horizon = c.schedule.dynars_horizon > 0 ? c.schedule.dynars_horizon : std::max(1L, c.phases.coldstart_iters);
    s.shape = c.schedule.shape;
    s.frozen = c.schedule.frozen;
    return s;
}

// Reward with defaults filled in: region_rbf centers on the first mixture
// mean; alignment_rbf on the first component of each class.
inline RewardSpec build_reward(const RunConfig& c) {
    RewardSpec r = c.reward;
    if (!r.centers.empty()) {
        return r;
    }
    const MixtureSpec m = build_mixture(c);
    if (r.kind == RewardKind::region_rbf) {
        r.centers = {m.means.front()};
        return r;
    }
    r.centers.assign(std::max<std::size_t>(1, m.num_classes()), m.means.front());
    std::vector<bool> seen(r.centers.size(), false);
    for (std::size_t i = 0; i < m.classes.size(); ++i) {
        const auto k = static_cast<std::size_t>(m.classes[i]);
        if (!seen[k]) {
            r.centers[k] = m.means[i];
            seen[k] = true;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Key table

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) {
            return out;
        }
        start = pos + 1;
    }
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("expected a number, got '" + s + "'");
    }
    return v;
}

inline long parse_long(const std::string& s) {
    long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("expected an integer, got '" + s + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true") {
        return true;
    }
    if (s == "false") {
        return false;
    }
    throw ConfigError("expected true or false, got '" + s + "'");
}

inline std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    if (s.empty()) {
        return out;
    }
    for (const auto& part : split(s, ',')) {
        out.push_back(parse_double(part));
    }
    return out;
}

inline std::vector<std::vector<double>> parse_points(const std::string& s) {
    std::vector<std::vector<double>> out;
    if (s.empty()) {
        return out;
    }
    for (const auto& part : split(s, ';')) {
        out.push_back(parse_list(part));
    }
    return out;
}

inline std::string emit_list(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? ", " : "") + format_double(v[i]);
    }
    return s;
}

inline std::string emit_points(const std::vector<std::vector<double>>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "; " : "") + emit_list(v[i]);
    }
    return s;
}

template <class E>
struct EnumNames {
    std::vector<std::pair<std::string, E>> entries;

    E parse(const std::string& s) const {
        for (const auto& [name, value] : entries) {
            if (name == s) {
                return value;
            }
        }
        throw ConfigError("unknown value '" + s + "', expected one of: " + options());
    }

    std::string name(E e) const {
        for (const auto& [n, value] : entries) {
            if (value == e) {
                return n;
            }
        }
        return "?";
    }

    std::string options() const {
        std::string s;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            s += (i ? ", " : "") + entries[i].first;
        }
        return s;
    }
};

inline const EnumNames<MixtureKind> mixture_kinds{
    {{"ring", MixtureKind::ring}, {"line", MixtureKind::line}, {"custom", MixtureKind::custom}}};
inline const EnumNames<Parameterization> parameterizations{
    {{"velocity", Parameterization::velocity}, {"noise_pred", Parameterization::noise_pred}}};
inline const EnumNames<WeightMode> weight_modes{{{"unit", WeightMode::unit}, {"sigma_sq", WeightMode::sigma_sq}}};
inline const EnumNames<FakeSamples> fake_sample_sources{
    {{"final", FakeSamples::final_output}, {"levels", FakeSamples::all_levels}}};
inline const EnumNames<GeneratorInit> generator_inits{{{"teacher", GeneratorInit::teacher}, {"fresh", GeneratorInit::fresh}}};
inline const EnumNames<FakeTraining> fake_trainings{
    {{"all", FakeTraining::all}, {"adapters_only", FakeTraining::adapters_only}}};
inline const EnumNames<ScheduleShape> schedule_shapes{
    {{"linear", ScheduleShape::linear}, {"cosine", ScheduleShape::cosine}}};
inline const EnumNames<RlAlgo> rl_algos{
    {{"none", RlAlgo::none}, {"refl", RlAlgo::refl}, {"dpo", RlAlgo::dpo}, {"grpo", RlAlgo::grpo}}};
inline const EnumNames<RewardKind> reward_kinds{
    {{"region_rbf", RewardKind::region_rbf}, {"alignment_rbf", RewardKind::alignment_rbf}}};

}  // namespace detail

struct ConfigKey {
    std::string name;
    std::string type;
    std::string doc;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

namespace detail {

inline ConfigKey long_key(std::string name, std::string doc, std::function<long&(RunConfig&)> ref, long lo,
                          long hi = std::numeric_limits<long>::max()) {
    auto get = [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); };
    auto set = [ref, lo, hi, name](RunConfig& c, const std::string& v) {
        const long x = parse_long(v);
        if (x < lo || x > hi) {
            throw ConfigError(name + " must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        }
        ref(c) = x;
    };
    return {std::move(name), "int", std::move(doc), set, get};
}

inline ConfigKey size_key(std::string name, std::string doc, std::function<std::size_t&(RunConfig&)> ref,
                          long lo) {
    auto get = [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); };
    auto set = [ref, lo, name](RunConfig& c, const std::string& v) {
        const long x = parse_long(v);
        if (x < lo) {
            throw ConfigError(name + " must be >= " + std::to_string(lo));
        }
        ref(c) = static_cast<std::size_t>(x);
    };
    return {std::move(name), "int", std::move(doc), set, get};
}

// `open_lo` excludes the lower bound.
inline ConfigKey real_key(std::string name, std::string doc, std::function<double&(RunConfig&)> ref, double lo,
                          double hi, bool open_lo = false) {
    auto get = [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); };
    auto set = [ref, lo, hi, open_lo, name](RunConfig& c, const std::string& v) {
        const double x = parse_double(v);
        if (!std::isfinite(x) || x < lo || x > hi || (open_lo && x == lo)) {
            throw ConfigError(name + " must lie in " + (open_lo ? "(" : "[") + format_double(lo) + ", " +
                              format_double(hi) + "]");
        }
        ref(c) = x;
    };
    return {std::move(name), "real", std::move(doc), set, get};
}

inline ConfigKey bool_key(std::string name, std::string doc, std::function<bool&(RunConfig&)> ref) {
    auto get = [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); };
    auto set = [ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(v); };
    return {std::move(name), "bool", std::move(doc), set, get};
}

inline ConfigKey string_key(std::string name, std::string doc, std::function<std::string&(RunConfig&)> ref) {
    auto get = [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); };
    auto set = [ref, name](RunConfig& c, const std::string& v) {
        if (v.find_first_of(" \t") != std::string::npos) {
            throw ConfigError(name + " may not contain whitespace");
        }
        ref(c) = v;
    };
    return {std::move(name), "string", std::move(doc), set, get};
}

template <class E>
ConfigKey enum_key(std::string name, std::string doc, const EnumNames<E>& names, std::function<E&(RunConfig&)> ref) {
    auto get = [ref, &names](const RunConfig& c) { return names.name(ref(const_cast<RunConfig&>(c))); };
    auto set = [ref, &names](RunConfig& c, const std::string& v) { ref(c) = names.parse(v); };
    return {std::move(name), "{" + names.options() + "}", std::move(doc), set, get};
}

inline ConfigKey list_key(std::string name, std::string doc, std::function<std::vector<double>&(RunConfig&)> ref) {
    auto get = [ref](const RunConfig& c) { return emit_list(ref(const_cast<RunConfig&>(c))); };
    auto set = [ref](RunConfig& c, const std::string& v) { ref(c) = parse_list(v); };
    return {std::move(name), "list", std::move(doc), set, get};
}

inline ConfigKey points_key(std::string name, std::string doc,
                            std::function<std::vector<std::vector<double>>&(RunConfig&)> ref) {
    auto get = [ref](const RunConfig& c) { return emit_points(ref(const_cast<RunConfig&>(c))); };
    auto set = [ref](RunConfig& c, const std::string& v) { ref(c) = parse_points(v); };
    return {std::move(name), "points", std::move(doc), set, get};
}

inline std::vector<ConfigKey> make_key_table() {
    constexpr double inf = std::numeric_limits<double>::infinity();
    using C = RunConfig;
    std::vector<ConfigKey> k;
    k.push_back(long_key("run.seed", "master seed", [](C& c) -> long& { return c.run.seed; }, 0));
    k.push_back(string_key("run.name", "run directory name under the output root",
                           [](C& c) -> std::string& { return c.run.name; }));
    k.push_back(string_key("run.output_root", "output root (DMDRLAB_OUT overrides)",
                           [](C& c) -> std::string& { return c.run.output_root; }));
    k.push_back(long_key("run.checkpoint_every", "extra checkpoint period in distillation iterations (0 = off)",
                         [](C& c) -> long& { return c.run.checkpoint_every; }, 0));

    k.push_back(enum_key("mixture.kind", "data layout", mixture_kinds,
                         std::function<MixtureKind&(C&)>([](C& c) -> MixtureKind& { return c.mixture.kind; })));
    k.push_back(long_key("mixture.modes", "components (ring, line)", [](C& c) -> long& { return c.mixture.modes; }, 1));
    k.push_back(real_key("mixture.radius", "ring radius or line half-width",
                         [](C& c) -> double& { return c.mixture.radius; }, 0.0, inf, true));
    k.push_back(real_key("mixture.stddev", "component standard deviation",
                         [](C& c) -> double& { return c.mixture.stddev; }, 0.0, inf, true));
    k.push_back(long_key("mixture.classes", "contiguous classes over the modes (ring, line); 0 = unconditional",
                         [](C& c) -> long& { return c.mixture.classes; }, 0));
    k.push_back(points_key("mixture.means", "component means (custom)",
                           [](C& c) -> std::vector<std::vector<double>>& { return c.mixture.means; }));
    k.push_back(list_key("mixture.weights", "component weights (custom); empty = uniform",
                         [](C& c) -> std::vector<double>& { return c.mixture.weights; }));
    k.push_back(list_key("mixture.labels", "component classes (custom); empty = unconditional",
                         [](C& c) -> std::vector<double>& { return c.mixture.labels; }));

    k.push_back(enum_key("diffusion.kind", "network parameterization", parameterizations,
                         std::function<Parameterization&(C&)>(
                             [](C& c) -> Parameterization& { return c.diffusion.kind; })));
    k.push_back(list_key("diffusion.step_grid", "descending student timesteps in (0, 1]",
                         [](C& c) -> std::vector<double>& { return c.diffusion.step_grid; }));
    k.push_back(real_key("diffusion.t_floor", "smallest time fed to score conversions",
                         [](C& c) -> double& { return c.diffusion.t_floor; }, 0.0, 1.0, true));
    k.push_back(real_key("diffusion.guidance_scale", "teacher sampling guidance (>= 1)",
                         [](C& c) -> double& { return c.diffusion.guidance_scale; }, 1.0, inf));

    k.push_back(long_key("net.hidden_dim", "hidden width", [](C& c) -> long& { return c.net.hidden_dim; }, 1));
    k.push_back(long_key("net.depth", "linear layers", [](C& c) -> long& { return c.net.depth; }, 1));
    k.push_back(long_key("net.time_embed_dim", "sinusoidal time features (even)",
                         [](C& c) -> long& { return c.net.time_embed_dim; }, 0));

    k.push_back(long_key("teacher.iters", "teacher training iterations", [](C& c) -> long& { return c.teacher.iters; },
                         0));
    k.push_back(long_key("teacher.batch", "teacher batch size", [](C& c) -> long& { return c.teacher.batch; }, 1));
    k.push_back(real_key("teacher.lr", "teacher peak learning rate", [](C& c) -> double& { return c.teacher.lr; }, 0.0,
                         inf, true));
    k.push_back(real_key("teacher.lr_final_frac", "final / peak learning rate",
                         [](C& c) -> double& { return c.teacher.lr_final_frac; }, 0.0, 1.0));
    k.push_back(real_key("teacher.label_dropout", "label dropout probability",
                         [](C& c) -> double& { return c.teacher.label_dropout; }, 0.0, 1.0));
    k.push_back(long_key("teacher.sample_steps", "teacher sampler steps",
                         [](C& c) -> long& { return c.teacher.sample_steps; }, 1));
    k.push_back(string_key("teacher.checkpoint", "load the teacher from this checkpoint instead of training",
                           [](C& c) -> std::string& { return c.teacher.checkpoint; }));

    k.push_back(size_key("distill.batch", "generator and estimator batch",
                         [](C& c) -> std::size_t& { return c.distill.batch; }, 1));
    k.push_back(size_key("distill.fake_updates", "fake-estimator updates per generator update",
                         [](C& c) -> std::size_t& { return c.distill.fake_updates_per_gen; }, 1));
    k.push_back(size_key("distill.adapter_rank", "estimator adapter rank",
                         [](C& c) -> std::size_t& { return c.distill.adapter_rank; }, 1));
    k.push_back(enum_key("distill.weight_mode", "score-difference weighting over t", weight_modes,
                         std::function<WeightMode&(C&)>([](C& c) -> WeightMode& { return c.distill.weight_mode; })));
    k.push_back(enum_key("distill.generator_init", "generator starting weights", generator_inits,
                         std::function<GeneratorInit&(C&)>([](C& c) -> GeneratorInit& { return c.distill.generator_init; })));
    k.push_back(enum_key("distill.fake_samples", "fake-estimator data: final K-step samples or per-level outputs",
                         fake_sample_sources,
                         std::function<FakeSamples&(C&)>([](C& c) -> FakeSamples& { return c.distill.fake_samples; })));
    k.push_back(real_key("distill.normalizer_eps", "score-difference normalizer floor",
                         [](C& c) -> double& { return c.distill.normalizer_eps; }, 0.0, inf, true));
    k.push_back(bool_key("distill.deterministic_renoise", "renoise with the implied noise during backward simulation",
                         [](C& c) -> bool& { return c.distill.deterministic_renoise; }));
    k.push_back(bool_key("distill.shared_adapters", "real and fake estimators share adapters",
                         [](C& c) -> bool& { return c.distill.shared_adapters; }));
    k.push_back(enum_key("distill.fake_training", "fake-estimator parameters updated", fake_trainings,
                         std::function<FakeTraining&(C&)>(
                             [](C& c) -> FakeTraining& { return c.distill.fake_training; })));
    k.push_back(real_key("distill.generator_lr", "generator learning rate",
                         [](C& c) -> double& { return c.distill.generator_adam.lr; }, 0.0, inf, true));
    k.push_back(real_key("distill.fake_lr", "fake-estimator learning rate",
                         [](C& c) -> double& { return c.distill.fake_adam.lr; }, 0.0, inf, true));
    k.push_back(real_key("distill.real_adapter_lr", "real-estimator adapter learning rate",
                         [](C& c) -> double& { return c.distill.real_adapter_adam.lr; }, 0.0, inf, true));
    k.push_back(real_key("distill.beta1", "Adam beta1 for all distillation optimizers",
                         [](C& c) -> double& { return c.distill.generator_adam.beta1; }, 0.0, 1.0));
    k.push_back(real_key("distill.beta2", "Adam beta2 for all distillation optimizers",
                         [](C& c) -> double& { return c.distill.generator_adam.beta2; }, 0.0, 1.0));

    k.push_back(bool_key("schedule.dynadg", "guidance adapters on the real estimator",
                         [](C& c) -> bool& { return c.schedule.dynadg; }));
    k.push_back(real_key("schedule.lambda0", "initial adapter scale", [](C& c) -> double& { return c.schedule.lambda0; },
                         0.0, inf));
    k.push_back(long_key("schedule.dynadg_horizon", "iterations until the adapter scale reaches 0 (0 = cold start)",
                         [](C& c) -> long& { return c.schedule.dynadg_horizon; }, 0));
    k.push_back(bool_key("schedule.dynars", "high-noise bias in renoise levels",
                         [](C& c) -> bool& { return c.schedule.dynars; }));
    k.push_back(real_key("schedule.kappa0", "initial renoise bias", [](C& c) -> double& { return c.schedule.kappa0; },
                         0.0, inf));
    k.push_back(long_key("schedule.dynars_horizon", "iterations until sampling is uniform (0 = cold start)",
                         [](C& c) -> long& { return c.schedule.dynars_horizon; }, 0));
    k.push_back(enum_key("schedule.shape", "decay shape", schedule_shapes,
                         std::function<ScheduleShape&(C&)>([](C& c) -> ScheduleShape& { return c.schedule.shape; })));
    k.push_back(bool_key("schedule.frozen", "hold both schedules at their initial strength",
                         [](C& c) -> bool& { return c.schedule.frozen; }));

    k.push_back(enum_key("rl.algo", "RL objective in the joint phase", rl_algos,
                         std::function<RlAlgo&(C&)>([](C& c) -> RlAlgo& { return c.rl.algo; })));
    k.push_back({"rl.coeff", "real|auto", "RL loss weight; auto balances against the distillation loss at activation",
                 [](C& c, const std::string& v) {
                     if (v == "auto") {
                         c.rl.coeff.reset();
                         return;
                     }
                     const double x = parse_double(v);
                     if (!(x >= 0.0) || !std::isfinite(x)) {
                         throw ConfigError("rl.coeff must be auto or a finite value >= 0");
                     }
                     c.rl.coeff = x;
                 },
                 [](const C& c) { return c.rl.coeff ? format_double(*c.rl.coeff) : std::string("auto"); }});
    k.push_back(real_key("rl.balance_ratio", "target |coeff L_rl| / |L_dmd| for auto",
                         [](C& c) -> double& { return c.rl.balance_ratio; }, 0.0, inf, true));
    k.push_back(bool_key("rl.dmd", "keep the distillation term during the joint phase",
                         [](C& c) -> bool& { return c.rl.dmd_enabled; }));
    k.push_back(size_key("rl.batch", "DPO pairs or GRPO chains per step", [](C& c) -> std::size_t& { return c.rl.batch; },
                         1));
    k.push_back(real_key("rl.dpo_beta", "DPO inverse temperature", [](C& c) -> double& { return c.rl.dpo_beta; }, 0.0,
                         inf, true));
    k.push_back(long_key("rl.reference_refresh", "reference snapshot period in RL steps (0 = never)",
                         [](C& c) -> long& { return c.rl.reference_refresh; }, 0));
    k.push_back(size_key("rl.grpo_group", "GRPO group size", [](C& c) -> std::size_t& { return c.rl.grpo.group; }, 2));
    k.push_back(real_key("rl.grpo_clip", "GRPO ratio clip", [](C& c) -> double& { return c.rl.grpo.clip; }, 0.0, 1.0,
                         true));
    k.push_back(real_key("rl.grpo_sigma_frac", "GRPO transition std as a fraction of s(t)",
                         [](C& c) -> double& { return c.rl.grpo.sigma_frac; }, 0.0, inf, true));
    k.push_back(bool_key("rl.grpo_snapshot_behavior", "collect GRPO chains with the reference snapshot",
                         [](C& c) -> bool& { return c.rl.grpo_snapshot_behavior; }));

    k.push_back(enum_key("reward.kind", "reward model", reward_kinds,
                         std::function<RewardKind&(C&)>([](C& c) -> RewardKind& { return c.reward.kind; })));
    k.push_back(points_key("reward.centers", "reward centers; empty = first mixture mean (per class for alignment)",
                           [](C& c) -> std::vector<std::vector<double>>& { return c.reward.centers; }));
    k.push_back(real_key("reward.bandwidth", "RBF bandwidth", [](C& c) -> double& { return c.reward.bandwidth; }, 0.0,
                         inf, true));
    k.push_back(list_key("reward.hack_probe", "linear exploit direction; empty = none",
                         [](C& c) -> std::vector<double>& { return c.reward.hack_probe; }));

    k.push_back(long_key("phases.coldstart_iters", "distillation-only iterations before RL",
                         [](C& c) -> long& { return c.phases.coldstart_iters; }, 0));
    k.push_back(long_key("phases.joint_iters", "iterations with RL active", [](C& c) -> long& { return c.phases.joint_iters; },
                         0));

    k.push_back(long_key("eval.every", "iterations between metric rows", [](C& c) -> long& { return c.eval.every; }, 1));
    k.push_back(long_key("eval.samples", "samples per evaluation", [](C& c) -> long& { return c.eval.samples; }, 2));
    k.push_back(long_key("eval.bins", "histogram bins per dimension", [](C& c) -> long& { return c.eval.bins; }, 1));
    k.push_back(real_key("eval.kl_alpha", "histogram smoothing count", [](C& c) -> double& { return c.eval.kl_alpha; },
                         0.0, inf));
    k.push_back(bool_key("eval.record_wallclock", "write wall-clock times (breaks byte-identical CSVs)",
                         [](C& c) -> bool& { return c.eval.record_wallclock; }));
    return k;
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> table = detail::make_key_table();
    return table;
}

inline const ConfigKey* find_key(std::string_view name) {
    for (const auto& k : config_keys()) {
        if (k.name == name) {
            return &k;
        }
    }
    return nullptr;
}

// Cross-field checks. Returns (message, key to blame) on the first violation.
inline std::optional<std::pair<std::string, std::string>> config_violation(const RunConfig& c) {
    using V = std::pair<std::string, std::string>;
    try {
        const MixtureSpec m = build_mixture(c);
        if (c.mixture.kind == MixtureKind::custom && !c.mixture.labels.empty()) {
            for (double l : c.mixture.labels) {
                if (l != std::floor(l)) {
                    return V{"mixture.labels must be integers", "mixture.labels"};
                }
            }
        }
        if (m.num_classes() == 0 && c.reward.kind == RewardKind::alignment_rbf) {
            return V{"alignment_rbf needs a labeled mixture", "reward.kind"};
        }
        build_reward(c).validate(m.dim());
    } catch (const ConfigError& e) {
        return V{e.what(), c.mixture.kind == MixtureKind::custom ? "mixture.means" : "mixture.modes"};
    }
    try {
        c.diffusion.validate();
    } catch (const ConfigError& e) {
        return V{e.what(), "diffusion.step_grid"};
    }
    if (generator_signal_vanishes(c.diffusion)) {
        return V{"the first student step has no signal under noise_pred; start the grid below 1",
                 "diffusion.step_grid"};
    }
    if (c.net.time_embed_dim % 2 != 0) {
        return V{"net.time_embed_dim must be even", "net.time_embed_dim"};
    }
    if (c.rl.algo == RlAlgo::grpo && c.diffusion.steps() < 2) {
        return V{"grpo needs at least two student steps", "rl.algo"};
    }
    if (c.distill.adapter_rank > static_cast<std::size_t>(c.net.hidden_dim)) {
        return V{"distill.adapter_rank exceeds net.hidden_dim", "distill.adapter_rank"};
    }
    const long total = c.phases.coldstart_iters + c.phases.joint_iters;
    if (c.schedule.dynadg_horizon > total) {
        return V{"schedule.dynadg_horizon exceeds coldstart + joint iterations", "schedule.dynadg_horizon"};
    }
    if (c.schedule.dynars_horizon > total) {
        return V{"schedule.dynars_horizon exceeds coldstart + joint iterations", "schedule.dynars_horizon"};
    }
    if (!c.rl.dmd_enabled && c.rl.algo == RlAlgo::none) {
        return V{"rl.dmd = false needs an RL objective", "rl.dmd"};
    }
    return std::nullopt;
}

// Copies the shared Adam betas into every distillation optimizer.
inline void sync_adam_betas(RunConfig& c) {
    c.distill.fake_adam.beta1 = c.distill.real_adapter_adam.beta1 = c.distill.generator_adam.beta1;
    c.distill.fake_adam.beta2 = c.distill.real_adapter_adam.beta2 = c.distill.generator_adam.beta2;
}

inline RunConfig parse_config(std::string_view text) {
    RunConfig cfg;
    std::map<std::string, std::size_t> key_lines;
    std::size_t line_no = 0, last_line = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto end = text.find('\n', start);
        std::string_view line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
        start = end == std::string_view::npos ? text.size() + 1 : end + 1;
        ++line_no;
        const auto hash = line.find('#');
        const std::string body = detail::trim(line.substr(0, hash));
        if (body.empty()) {
            continue;
        }
        last_line = line_no;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ParseError("expected `section.key = value`", line_no);
        }
        const std::string key = detail::trim(std::string_view(body).substr(0, eq));
        const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
        const ConfigKey* k = find_key(key);
        if (!k) {
            throw ParseError("unknown key '" + key + "'", line_no);
        }
        if (key_lines.count(key)) {
            throw ParseError("duplicate key '" + key + "' (first set on line " + std::to_string(key_lines[key]) + ")",
                             line_no);
        }
        try {
            k->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ParseError(key + ": " + e.what(), line_no);
        }
        key_lines[key] = line_no;
    }
    sync_adam_betas(cfg);
    if (auto v = config_violation(cfg)) {
        const auto it = key_lines.find(v->second);
        throw ParseError(v->first, it != key_lines.end() ? it->second : last_line);
    }
    return cfg;
}

// Every key with its current value, one per line, in table order.
inline std::string emit_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : config_keys()) {
        out += k.name + " = " + k.get(cfg) + "\n";
    }
    return out;
}

// Applies a single `key=value` override (used by sweeps); validation is left
// to the caller.
inline void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    const ConfigKey* k = find_key(key);
    if (!k) {
        throw ConfigError("unknown key '" + key + "'");
    }
    k->set(cfg, value);
    sync_adam_betas(cfg);
}

inline void validate_config(const RunConfig& cfg) {
    if (auto v = config_violation(cfg)) {
        throw ConfigError(v->first);
    }
}

// Default table for --help.
inline std::string config_help() {
    const RunConfig defaults;
    std::ostringstream os;
    std::size_t width = 0;
    for (const auto& k : config_keys()) {
        width = std::max(width, k.name.size());
    }
    std::string section;
    for (const auto& k : config_keys()) {
        const std::string sec = k.name.substr(0, k.name.find('.'));
        if (sec != section) {
            os << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
            section = sec;
        }
        std::string def = k.get(defaults);
        os << "  " << k.name << std::string(width + 2 - k.name.size(), ' ') << k.type << "  default: "
           << (def.empty() ? "(empty)" : def) << "\n      " << k.doc << "\n";
    }
    return os.str();
}

}  // namespace dmdrlab
