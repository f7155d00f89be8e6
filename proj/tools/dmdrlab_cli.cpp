// dmdrlab: command-line front end for the experiment harness.

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dmdrlab/harness.hpp"

namespace {

using namespace dmdrlab;

RunConfig read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open config '" + path + "'");
    }
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config(buf.str());
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what(), e.line());
    }
}

void print_metrics(const std::string& prefix, const MetricsRecord& r) {
    std::cout << prefix << "hist_kl = " << format_double(r.hist_kl_to_teacher) << "\n"
              << prefix << "mode_coverage = " << format_double(r.mode_coverage) << "\n"
              << prefix << "diversity_mpd = " << format_double(r.diversity_mpd) << "\n";
}

int cmd_eval(const std::string& ckpt_path, long samples, long seed) {
    const Checkpoint ck = load_checkpoint(ckpt_path);
    Trainer t = restore_trainer(ck, checkpoint_config(ck));
    t.cfg.eval.samples = samples;
    const RunConfig& cfg = t.cfg;
    if (t.distill_started) {
        rebuild_reference(t);
    }
    const auto n = static_cast<std::size_t>(samples);
    std::cout << "checkpoint = " << ckpt_path << "\n"
              << "samples = " << samples << "\n";
    // Teacher against ground truth.
    const MetricsRecord teacher = evaluate_teacher(cfg, t.mixture, t.teacher, stream(seed, "cli-eval/teacher"), n);
    print_metrics("teacher.", teacher);
    if (t.distill_started) {
        const MetricsRecord rec = evaluate_trainer(t, n, stream(seed, "cli-eval/student"));
        std::cout << "student.iter = " << t.csv_iter() << "\n";
        print_metrics("student.", rec);
        std::cout << "student.reward_mean = " << format_double(rec.reward_mean) << "\n"
                  << "student.reward_var = " << format_double(rec.reward_var) << "\n";
    }
    return 0;
}

struct Axis {
    std::string key;
    std::vector<std::string> values;
};

Axis parse_axis(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
        throw ConfigError("--vary expects key=v1,v2,... got '" + spec + "'");
    }
    Axis a{spec.substr(0, eq), {}};
    if (!find_key(a.key)) {
        throw ConfigError("--vary: unknown key '" + a.key + "'");
    }
    std::stringstream ss(spec.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) {
        a.values.push_back(v);
    }
    return a;
}

std::string cell_name(const std::vector<Axis>& axes, const std::vector<std::size_t>& idx) {
    std::string name;
    for (std::size_t i = 0; i < axes.size(); ++i) {
        std::string part = axes[i].key + "=" + axes[i].values[idx[i]];
        for (char& c : part) {
            if (c == '/' || c == ' ') {
                c = '_';
            }
        }
        name += (i ? "__" : "") + part;
    }
    return name;
}

int run_cell(const RunConfig& cfg) {
    try {
        const RunSummary s = run_experiment(cfg, {std::nullopt, false, &std::cerr});
        std::cout << s.dir.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error (" << cfg.run.name << "): " << e.what() << "\n";
        return 1;
    }
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& vary, int jobs) {
    const RunConfig base = read_config(config_path);
    std::vector<Axis> axes;
    for (const auto& v : vary) {
        axes.push_back(parse_axis(v));
    }
    // Build and validate every cell before running any.
    std::vector<RunConfig> cells;
    std::vector<std::size_t> idx(axes.size(), 0);
    while (true) {
        RunConfig c = base;
        for (std::size_t i = 0; i < axes.size(); ++i) {
            try {
                apply_override(c, axes[i].key, axes[i].values[idx[i]]);
            } catch (const ConfigError& e) {
                throw ConfigError("--vary " + axes[i].key + "=" + axes[i].values[idx[i]] + ": " + e.what());
            }
        }
        c.run.name = base.run.name + "/" + (axes.empty() ? std::string("base") : cell_name(axes, idx));
        validate_config(c);
        cells.push_back(c);
        std::size_t i = 0;
        while (i < axes.size() && ++idx[i] == axes[i].values.size()) {
            idx[i++] = 0;
        }
        if (i == axes.size()) {
            break;
        }
    }
    int failures = 0;
    if (jobs <= 1) {
        for (const auto& c : cells) {
            failures += run_cell(c);
        }
        return failures ? 1 : 0;
    }
    std::size_t next = 0, running = 0;
    std::cout.flush();
    while (next < cells.size() || running > 0) {
        while (next < cells.size() && running < static_cast<std::size_t>(jobs)) {
            const pid_t pid = fork();
            if (pid < 0) {
                throw Error("fork failed");
            }
            if (pid == 0) {
                const int code = run_cell(cells[next]);
                std::cout.flush();
                _exit(code);
            }
            ++next;
            ++running;
        }
        int status = 0;
        if (wait(&status) > 0) {
            --running;
            if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
                ++failures;
            }
        }
    }
    return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dmdrlab: few-step distillation with distribution matching and RL on toy mixtures"};
    app.require_subcommand(1);
    app.footer("Output goes to <run.output_root>/<run.name>; DMDRLAB_OUT overrides the output root.\n\n"
               "Config keys (`section.key = value`, `#` comments):\n\n" +
               config_help());

    std::string config_path, resume_path, ckpt_path;
    std::vector<std::string> vary;
    long samples = 2048, seed = 0;
    int jobs = 1;

    auto* teacher = app.add_subcommand("train-teacher", "train the teacher only");
    teacher->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);

    auto* distill = app.add_subcommand("distill", "run all three phases (teacher, cold start, joint)");
    distill->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
    distill->add_option("--resume", resume_path, "continue from a checkpoint")->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("--samples", samples, "sample count")->check(CLI::Range(2L, 100000000L));
    eval->add_option("--seed", seed, "evaluation seed");

    auto* sweep = app.add_subcommand("sweep", "run the cross product of --vary values, one directory per cell");
    sweep->add_option("--config", config_path, "base config file")->required()->check(CLI::ExistingFile);
    sweep->add_option("--vary", vary, "key=v1,v2,... (repeatable)")->required();
    sweep->add_option("--jobs", jobs, "parallel processes")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help("", CLI::AppFormatMode::Normal);
        return 2;
    }

    try {
        if (*teacher) {
            const RunSummary s = run_experiment(read_config(config_path), {std::nullopt, true, &std::cerr});
            std::cout << s.dir.string() << "\n";
        } else if (*distill) {
            RunOptions opts{std::nullopt, false, &std::cerr};
            if (!resume_path.empty()) {
                opts.resume = resume_path;
            }
            const RunSummary s = run_experiment(read_config(config_path), opts);
            std::cout << s.dir.string() << "\n";
        } else if (*eval) {
            return cmd_eval(ckpt_path, samples, seed);
        } else if (*sweep) {
            return cmd_sweep(config_path, vary, jobs);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
