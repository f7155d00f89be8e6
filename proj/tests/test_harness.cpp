#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmdrlab/harness.hpp"

using namespace dmdrlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

class Harness : public ::testing::Test {
protected:
    void SetUp() override {
        unsetenv("DMDRLAB_OUT");
        root_ = fs::temp_directory_path() / ("dmdrlab_harness_" + std::to_string(::getpid()));
        fs::remove_all(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    RunConfig tiny(const std::string& name) const {
        RunConfig c = parse_config(
            "mixture.kind = line\nmixture.modes = 2\nmixture.radius = 1.5\nmixture.stddev = 0.3\n"
            "mixture.classes = 0\nnet.hidden_dim = 16\nnet.depth = 2\nnet.time_embed_dim = 4\n"
            "teacher.iters = 40\nteacher.batch = 64\nteacher.sample_steps = 8\n"
            "distill.batch = 32\ndistill.fake_updates = 2\ndistill.adapter_rank = 2\n"
            "phases.coldstart_iters = 30\nphases.joint_iters = 30\nrl.algo = dpo\nrl.batch = 16\n"
            "eval.every = 10\neval.samples = 128\neval.bins = 16\n");
        c.run.name = name;
        c.run.output_root = root_.string();
        return c;
    }

    fs::path root_;
};

}  // namespace

TEST_F(Harness, WritesExpectedFilesAndRows) {
    const RunConfig c = tiny("a");
    const RunSummary s = run_experiment(c);
    for (const char* f : {"config.txt", "metrics.csv", "teacher.ckpt", "coldstart.ckpt", "final.ckpt", "summary.txt"}) {
        EXPECT_TRUE(fs::exists(s.dir / f)) << f;
    }
    EXPECT_FALSE(fs::exists(s.dir / "latest.ckpt"));
    // Teacher rows at 10..40, then distillation rows every 10 up to 40 + 60.
    EXPECT_EQ(s.rows, 4 + 6);
    std::istringstream csv(slurp(s.dir / "metrics.csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, metrics_csv_header());
    std::vector<std::string> rows;
    while (std::getline(csv, line)) {
        rows.push_back(line);
    }
    ASSERT_EQ(rows.size(), 10u);
    EXPECT_EQ(rows[3].substr(0, 11), "teacher,40,");
    EXPECT_EQ(rows[4].substr(0, 13), "coldstart,50,");
    EXPECT_EQ(rows[6].substr(0, 13), "coldstart,70,");
    EXPECT_EQ(rows[7].substr(0, 9), "joint,80,");
    EXPECT_EQ(rows[9].substr(0, 10), "joint,100,");
    EXPECT_EQ(parse_config(slurp(s.dir / "config.txt")), c);
    EXPECT_EQ(s.last.iter, 100);
}

TEST_F(Harness, RunsAreByteIdenticalAndSeedSensitive) {
    RunConfig c = tiny("x");
    run_experiment(c);
    c.run.name = "y";
    run_experiment(c);
    EXPECT_EQ(slurp(root_ / "x" / "metrics.csv"), slurp(root_ / "y" / "metrics.csv"));
    // The stored config names the run, so compare everything but that blob.
    Checkpoint a = load_checkpoint((root_ / "x" / "final.ckpt").string());
    Checkpoint b = load_checkpoint((root_ / "y" / "final.ckpt").string());
    a.blobs.erase(a.blobs.begin());
    b.blobs.erase(b.blobs.begin());
    EXPECT_EQ(a, b);
    c.run.name = "z";
    c.run.seed = 1;
    run_experiment(c);
    EXPECT_NE(slurp(root_ / "x" / "metrics.csv"), slurp(root_ / "z" / "metrics.csv"));
}

TEST_F(Harness, ResumeMidJointReproducesTheUninterruptedRun) {
    RunConfig full = tiny("full");
    run_experiment(full);
    RunConfig part = tiny("part");
    part.phases.joint_iters = 10;
    run_experiment(part);
    const fs::path snap = root_ / "snapshot.ckpt";
    fs::copy_file(root_ / "part" / "final.ckpt", snap);
    part.phases.joint_iters = 30;
    run_experiment(part, {snap, false, nullptr});
    EXPECT_EQ(slurp(root_ / "full" / "metrics.csv"), slurp(root_ / "part" / "metrics.csv"));
    Checkpoint a = load_checkpoint((root_ / "full" / "final.ckpt").string());
    Checkpoint b = load_checkpoint((root_ / "part" / "final.ckpt").string());
    a.blobs.erase(a.blobs.begin());
    b.blobs.erase(b.blobs.begin());
    EXPECT_EQ(a, b);
}

TEST_F(Harness, PeriodicCheckpointResume) {
    RunConfig c = tiny("periodic");
    c.run.checkpoint_every = 20;
    c.phases.joint_iters = 10;
    run_experiment(c);
    const Checkpoint latest = load_checkpoint((root_ / "periodic" / "latest.ckpt").string());
    EXPECT_EQ(get_integer(latest, "state.distill_iter"), 40);
    const std::string bytes = slurp(root_ / "periodic" / "latest.ckpt");
    EXPECT_EQ(serialize_checkpoint(parse_checkpoint(bytes)), bytes);
}

TEST_F(Harness, BranchingFromColdStart) {
    RunConfig c = tiny("base");
    run_experiment(c);
    const fs::path cold = root_ / "base" / "coldstart.ckpt";
    // Before RL starts the objective may change.
    RunConfig branch = tiny("branch");
    branch.rl.algo = RlAlgo::refl;
    branch.rl.coeff = 2.0;
    branch.reward.bandwidth = 0.5;
    const RunSummary s = run_experiment(branch, {cold, false, nullptr});
    EXPECT_EQ(s.last.iter, 100);
    // Distillation settings may not.
    RunConfig other = tiny("other");
    other.distill.fake_updates_per_gen = 3;
    EXPECT_THROW(run_experiment(other, {cold, false, nullptr}), ConfigError);
    // After RL starts the rl section is pinned too.
    RunConfig late = tiny("late");
    late.rl.dpo_beta = 3.0;
    EXPECT_THROW(run_experiment(late, {root_ / "base" / "final.ckpt", false, nullptr}), ConfigError);
    late.rl.dpo_beta = 1.0;
    late.eval.record_wallclock = true;
    EXPECT_NO_THROW(run_experiment(late, {root_ / "base" / "final.ckpt", false, nullptr}));
}

TEST_F(Harness, TeacherOnlyAndTeacherReuse) {
    RunConfig c = tiny("teacher");
    const RunSummary t = run_experiment(c, {std::nullopt, true, nullptr});
    EXPECT_EQ(t.rows, 4);
    EXPECT_FALSE(fs::exists(t.dir / "final.ckpt"));
    RunConfig reuse = tiny("reuse");
    reuse.teacher.checkpoint = (t.dir / "teacher.ckpt").string();
    reuse.teacher.iters = 0;
    const RunSummary r = run_experiment(reuse);
    // One teacher row, then the distillation rows.
    EXPECT_EQ(r.rows, 1 + 6);
    const Checkpoint a = load_checkpoint((t.dir / "teacher.ckpt").string());
    const Checkpoint b = load_checkpoint((r.dir / "final.ckpt").string());
    EXPECT_EQ(a.get("teacher.layer0.weight"), b.get("teacher.layer0.weight"));
}

TEST_F(Harness, NonFiniteMetricsLeaveAFailureCheckpoint) {
    RunConfig c = tiny("diverge");
    // Batch reward sums overflow.
    c.reward.hack_probe = {1e308};
    c.rl.algo = RlAlgo::none;
    try {
        run_experiment(c);
        ADD_FAILURE() << "no TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_EQ(e.iteration(), 41);
        EXPECT_TRUE(fs::exists(root_ / "diverge" / "failure.ckpt"));
        const Checkpoint ck = load_checkpoint((root_ / "diverge" / "failure.ckpt").string());
        EXPECT_EQ(get_integer(ck, "state.distill_iter"), 1);
    }
}

TEST_F(Harness, EnvironmentOverridesOutputRoot) {
    RunConfig c = tiny("env");
    const fs::path alt = root_ / "alt";
    setenv("DMDRLAB_OUT", alt.c_str(), 1);
    EXPECT_EQ(run_dir(c), alt / "env");
    unsetenv("DMDRLAB_OUT");
    EXPECT_EQ(run_dir(c), root_ / "env");
}

TEST_F(Harness, InvalidConfigIsRejectedBeforeWriting) {
    RunConfig c = tiny("invalid");
    c.net.time_embed_dim = 3;
    EXPECT_THROW(run_experiment(c), ConfigError);
    EXPECT_FALSE(fs::exists(root_ / "invalid"));
}

TEST(Streams, LabelsSeparateStreams) {
    Rng a = stream(3, "distill"), b = stream(3, "rl"), c = stream(3, "distill");
    EXPECT_EQ(a, c);
    EXPECT_NE(a.next_u64(), b.next_u64());
    EXPECT_NE(eval_stream(3, 10), eval_stream(3, 20));
}
