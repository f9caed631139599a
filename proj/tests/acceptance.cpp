// Acceptance checks. One PASS/FAIL line per criterion; exit status 0 only if
// every line passed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "mnce/cli.hpp"
#include "mnce/errors.hpp"
#include "mnce/io.hpp"
#include "test_support.hpp"

using namespace mnce;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kPoolGradTol = 1e-4;
constexpr double kLossGradTol = 1e-4;
constexpr double kBackwardTol = 1e-3;
constexpr int kGradInstances = 100;
constexpr int kBackwardConfigs = 20;
constexpr double kGradBudget = 30.0;

constexpr double kReductionTol = 1e-15;
constexpr int kReductionMatrices = 1000;
constexpr double kReductionBudget = 5.0;

constexpr int kMonotoneMatrices = 1000;
constexpr double kMonotoneBudget = 5.0;

constexpr double kScalarTol = 1e-6;
constexpr double kScalarExpected = 0.880797;
constexpr double kScalarBudget = 1.0;

constexpr double kMetricTol = 1e-9;
constexpr int kMetricFixtures = 100;
constexpr double kMetricBudget = 5.0;

constexpr int kSweepSeeds = 10;
constexpr double kNoiseFloorPoints = 1.0;  // percentage points
constexpr double kSweepBudget = 600.0;

constexpr int kOpenSetSeeds = 10;
constexpr int kChanceDraws = 200;
constexpr double kChanceSigmas = 3.0;
constexpr double kOpenSetBudget = 300.0;

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string timing(double t, double budget) { return fmt("%.2fs", t) + " (budget " + fmt("%.0fs", budget) + ")"; }

// ---------------------------------------------------------------------------

Verdict gradients() {
  const auto t0 = Clock::now();
  RngStream rng(9002, 0);

  double worst_pool = 0.0;
  for (bool detach : {false, true}) {
    for (int k = 0; k < kGradInstances; ++k) {
      const std::size_t h = 2 + rng.uniform_index(4), w = 2 + rng.uniform_index(4);
      const Mat2 m = testing::random_map(h, w, rng, 0.95);
      const PoolConfig cfg{rng.uniform(0.3, 0.8), 0.03 + 0.3 * rng.uniform(), detach};
      const Mat2 analytic = soft_threshold_pool_grad(ResponseMap(m), cfg);
      const auto numeric = finite_diff_grad(
          [&](std::span<const double> a) {
            if (!detach) return testing::brute_force_pool(Mat2(h, w, std::vector<double>(a.begin(), a.end())), cfg);
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
              const double wt = sigmoid((m.values()[i] - cfg.epsilon) / cfg.beta);
              num += wt * a[i];
              den += wt;
            }
            return num / den;
          },
          m.values());
      worst_pool = std::max(worst_pool, max_relative_error(analytic.values(), numeric));
    }
  }

  double worst_loss = 0.0;
  for (bool symmetric : {false, true}) {
    for (int k = 0; k < kGradInstances; ++k) {
      const std::size_t n = 2 + rng.uniform_index(10);
      const Mat2 s = testing::random_square(n, rng);
      LossConfig cfg;
      cfg.margin = rng.uniform(-0.4, 0.2);
      cfg.symmetric = symmetric;
      const Mat2 analytic = margin_nce_grad(SimilarityMatrix(s), cfg);
      const auto numeric = finite_diff_grad(
          [&](std::span<const double> v) {
            return margin_nce_loss(SimilarityMatrix(Mat2(n, n, std::vector<double>(v.begin(), v.end()))), cfg);
          },
          s.values());
      worst_loss = std::max(worst_loss, max_relative_error(analytic.values(), numeric));
    }
  }

  double worst_backward = 0.0;
  for (int k = 0; k < kBackwardConfigs; ++k) {
    SynthConfig sc;
    sc.num_classes = 3;
    sc.latent_dim = 4;
    sc.grid_h = sc.grid_w = 3;
    sc.feature_noise_std = 0.3;
    sc.faulty_positive_rate = 0.3;
    sc.seed = static_cast<std::uint64_t>(k);
    const auto protos = prototypes_for(sc);
    std::vector<SyntheticScene> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(generate_scene(sc, protos, i, rng));
    const ToyEncoder enc = ToyEncoder::random(
        EncoderSpec{4, 4, k % 2 == 0 ? std::size_t{0} : std::size_t{5}, 3, k % 3 != 2}, rng);
    LossConfig cfg;
    cfg.pool.epsilon = rng.uniform(-0.2, 0.6);
    cfg.pool.beta = k % 4 < 2 ? 0.03 : 0.3;
    cfg.margin = rng.uniform(-0.3, 0.3);
    cfg.symmetric = k % 5 == 4;
    const ForwardResult fwd = forward_batch(enc, batch, cfg);
    const auto analytic = backward_batch(fwd.cache).flatten();
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> v) {
          ToyEncoder e = enc;
          e.weights().assign(v);
          return forward_batch(e, batch, cfg).loss;
        },
        enc.weights().flatten());
    worst_backward = std::max(worst_backward, max_relative_error(analytic, numeric));
  }

  const double t = seconds_since(t0);
  const bool ok = worst_pool <= kPoolGradTol && worst_loss <= kLossGradTol && worst_backward <= kBackwardTol &&
                  t < kGradBudget;
  return {ok, "pool grad max rel err " + fmt("%.2e", worst_pool) + " over " + std::to_string(2 * kGradInstances) +
                  " maps (tol 1e-4), loss grad " + fmt("%.2e", worst_loss) + " over " +
                  std::to_string(2 * kGradInstances) + " matrices (tol 1e-4), backward " +
                  fmt("%.2e", worst_backward) + " over " + std::to_string(kBackwardConfigs) +
                  " configs (tol 1e-3), " + timing(t, kGradBudget)};
}

Verdict reduction() {
  const auto t0 = Clock::now();
  RngStream rng(9003, 0);
  double worst = 0.0;
  LossConfig cfg;
  cfg.margin = 0.0;
  for (int k = 0; k < kReductionMatrices; ++k) {
    const SimilarityMatrix sm(testing::random_square(1 + rng.uniform_index(16), rng));
    worst = std::max(worst, std::abs(margin_nce_loss(sm, cfg) - info_nce_loss(sm, cfg.tau)));
  }
  const double t = seconds_since(t0);
  return {worst <= kReductionTol && t < kReductionBudget,
          "max |L(m=0) - InfoNCE| " + fmt("%.2e", worst) + " over " + std::to_string(kReductionMatrices) +
              " matrices (tol 1e-15), " + timing(t, kReductionBudget)};
}

Verdict monotonicity() {
  const auto t0 = Clock::now();
  RngStream rng(9004, 0);
  int violations = 0;
  LossConfig neg, zero, pos;
  neg.margin = -0.2;
  zero.margin = 0.0;
  pos.margin = 0.2;
  for (int k = 0; k < kMonotoneMatrices; ++k) {
    const SimilarityMatrix sm(testing::random_square(2 + rng.uniform_index(15), rng));
    const double a = margin_nce_loss(sm, neg), b = margin_nce_loss(sm, zero), c = margin_nce_loss(sm, pos);
    if (!(a < b && b < c)) ++violations;
  }
  const double t = seconds_since(t0);
  return {violations == 0 && t < kMonotoneBudget,
          std::to_string(violations) + " violations of L(-0.2) < L(0) < L(+0.2) in " +
              std::to_string(kMonotoneMatrices) + " matrices, " + timing(t, kMonotoneBudget)};
}

Verdict scalar_case() {
  const auto t0 = Clock::now();
  const double s = soft_threshold_pool(ResponseMap(Mat2(1, 2, {0.0, 1.0})), PoolConfig{0.5, 0.25, false});
  const double err = std::abs(s - kScalarExpected);
  double worst_const = 0.0;
  for (double c : {-1.0, -0.5, 0.0, 0.3, 0.65, 0.99, 1.0}) {
    for (double eps : {-1.0, -0.3, 0.0, 0.5, 0.65, 1.0}) {
      for (double beta : {1e-4, 0.03, 0.25, 1.0, 100.0}) {
        const ResponseMap m(Mat2(3, 3, std::vector<double>(9, c)));
        worst_const = std::max(worst_const, std::abs(soft_threshold_pool(m, PoolConfig{eps, beta, false}) - c));
      }
    }
  }
  const double t = seconds_since(t0);
  return {err <= kScalarTol && worst_const <= kScalarTol && t < kScalarBudget,
          "S({0,1}; eps=0.5, beta=0.25) = " + fmt("%.7f", s) + " vs 0.880797 (tol 1e-6), constant maps max err " +
              fmt("%.1e", worst_const) + ", " + timing(t, kScalarBudget)};
}

Verdict metrics_oracle() {
  const auto t0 = Clock::now();
  Mat2 ex(4, 4);
  ex(0, 0) = ex(0, 1) = ex(1, 0) = ex(1, 1) = 1.0;
  Mat2 ex_gt(4, 4);
  for (std::size_t x = 0; x < 4; ++x) ex_gt(0, x) = 1.0;
  const double worked = ciou(PredictionMap{ex, 4, 4}, ConsensusMap(ex_gt), 0.5);
  double worst = std::abs(worked - 2.0 / 6.0);

  RngStream rng(9006, 0);
  std::vector<double> cious;
  for (int k = 0; k < kMetricFixtures; ++k) {
    Mat2 scores(8, 8), g(8, 8);
    for (double& v : scores.values()) v = rng.uniform();
    for (double& v : g.values()) v = rng.uniform() < 0.4 ? std::round(rng.uniform() * 4.0) / 4.0 : 0.0;
    g(rng.uniform_index(8), rng.uniform_index(8)) = 1.0;
    const double thr = rng.uniform();
    std::vector<std::vector<bool>> mask(8, std::vector<bool>(8));
    std::vector<std::vector<double>> gt(8, std::vector<double>(8));
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        mask[y][x] = scores(y, x) >= thr;
        gt[y][x] = g(y, x);
      }
    }
    const double c = ciou(PredictionMap{scores, 8, 8}, ConsensusMap(g), thr);
    worst = std::max(worst, std::abs(c - testing::brute_force_ciou(mask, gt)));
    cious.push_back(c);
  }
  for (int intervals : {20, 100}) {
    const EvalCurve curve = eval_curve(cious, 1.0 / intervals);
    const auto [rates, area] = testing::brute_force_curve(cious, intervals);
    worst = std::max(worst, std::abs(curve.auc - area));
    for (std::size_t k = 0; k < rates.size() && k < curve.success_rates.size(); ++k) {
      worst = std::max(worst, std::abs(curve.success_rates[k] - rates[k]));
    }
    if (curve.success_rates.size() != rates.size()) worst = INFINITY;
  }
  const double t = seconds_since(t0);
  return {worst <= kMetricTol && t < kMetricBudget,
          "worked example " + fmt("%.4f", worked) + " (2/6), max deviation from enumeration " + fmt("%.1e", worst) +
              " over " + std::to_string(kMetricFixtures) + " 8x8 fixtures (tol 1e-9), " +
              timing(t, kMetricBudget)};
}

unsigned worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

Verdict sweep_direction() {
  const auto t0 = Clock::now();
  ExperimentConfig cfg = cli::default_config().experiment;
  cfg.synth.num_classes = 10;
  cfg.synth.faulty_positive_rate = 0.2;
  cfg.train.batch_size = 64;
  cfg.heard_classes.clear();
  cfg.unheard_classes.clear();
  std::vector<std::uint64_t> seeds;
  for (int s = 1; s <= kSweepSeeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  const ExperimentReport rep = margin_sweep({0.2, 0.0, -0.2}, seeds, cfg, worker_count());
  const double t = seconds_since(t0);

  const MarginAggregate* pos = rep.find(0.2);
  const MarginAggregate* zero = rep.find(0.0);
  const MarginAggregate* neg = rep.find(-0.2);
  const bool complete = pos && zero && neg && pos->runs == seeds.size() && zero->runs == seeds.size() &&
                        neg->runs == seeds.size();
  if (!complete) return {false, "sweep has failed runs"};
  const double acc_pos = 100.0 * pos->retrieval_accuracy.mean, acc_zero = 100.0 * zero->retrieval_accuracy.mean,
               acc_neg = 100.0 * neg->retrieval_accuracy.mean;
  const double c_pos = pos->ciou_at_half.mean, c_zero = zero->ciou_at_half.mean, c_neg = neg->ciou_at_half.mean;
  const bool beats_pos = acc_neg > acc_pos && c_neg > c_pos;
  const bool near_zero = acc_neg >= acc_zero - kNoiseFloorPoints && c_neg >= c_zero - kNoiseFloorPoints;
  const bool ok = beats_pos && near_zero && t < kSweepBudget;
  return {ok, "retrieval % (m=+0.2/0/-0.2) " + fmt("%.2f", acc_pos) + "/" + fmt("%.2f", acc_zero) + "/" +
                  fmt("%.2f", acc_neg) + ", cIoU@0.5 " + fmt("%.2f", c_pos) + "/" + fmt("%.2f", c_zero) + "/" +
                  fmt("%.2f", c_neg) + ", need -0.2 > +0.2 on both and -0.2 >= 0 - 1pt; " +
                  std::to_string(seeds.size()) + " seeds, " + timing(t, kSweepBudget)};
}

Verdict open_set() {
  const auto t0 = Clock::now();
  ExperimentConfig cfg = cli::default_config().experiment;
  cfg.synth.num_classes = 10;
  cfg.heard_classes = class_range(0, 5);
  cfg.unheard_classes = class_range(5, 10);
  std::vector<std::uint64_t> seeds;
  for (int s = 1; s <= kOpenSetSeeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  const OpenSetReport rep = open_set_eval({-0.2}, seeds, cfg, worker_count());

  bool disjoint = true;
  for (int h : rep.heard.classes) {
    for (int u : rep.unheard.classes) disjoint = disjoint && h != u;
  }
  disjoint = disjoint && !rep.heard.classes.empty() && !rep.unheard.classes.empty();
  const MarginAggregate* unheard = rep.unheard.find(-0.2);
  if (!unheard || unheard->runs != seeds.size()) return {false, "open-set run failed"};

  // Chance band: accuracy of random encoders on the same unheard test sets.
  // The trained figure is a mean over seeds, so the band uses the spread of
  // a mean over as many chance runs.
  const std::size_t n = rep.unheard.classes.size();
  std::vector<double> chance;
  RngStream rng(9008, 0);
  for (int k = 0; k < kChanceDraws; ++k) {
    ExperimentConfig run = cfg;
    run.synth.seed = seeds[static_cast<std::size_t>(k) % seeds.size()];
    const Split split = experiment_split(run);
    const ToyEncoder enc =
        ToyEncoder::random(EncoderSpec{static_cast<std::size_t>(cfg.synth.latent_dim),
                                       static_cast<std::size_t>(cfg.synth.latent_dim), cfg.train.hidden_dim,
                                       cfg.train.embed_dim, cfg.train.normalize_output},
                           rng);
    chance.push_back(evaluate(enc, split.unheard_test, cfg.train.loss.pool, cfg.eval).retrieval_accuracy);
  }
  double mean = 0.0, var = 0.0;
  for (double a : chance) mean += a;
  mean /= static_cast<double>(chance.size());
  for (double a : chance) var += (a - mean) * (a - mean);
  const double sd_run = std::sqrt(var / static_cast<double>(chance.size() - 1));
  const double sd = sd_run / std::sqrt(static_cast<double>(seeds.size()));
  const double bar = mean + kChanceSigmas * sd;
  const double acc = unheard->retrieval_accuracy.mean;
  const double t = seconds_since(t0);
  const bool ok = disjoint && acc > bar && t < kOpenSetBudget;
  return {ok, std::string(disjoint ? "disjoint" : "OVERLAPPING") + " class sets (" +
                  std::to_string(rep.heard.classes.size()) + " heard, " + std::to_string(n) +
                  " unheard), unheard retrieval at m=-0.2 " + fmt("%.3f", acc) + " vs chance " + fmt("%.3f", mean) +
                  " + 3 sd of a " + std::to_string(seeds.size()) + "-seed mean " + fmt("%.3f", sd) + " = " + fmt("%.3f", bar) + ", " + timing(t, kOpenSetBudget)};
}

// ---------------------------------------------------------------------------

struct Invocation {
  int code;
  std::string out;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "mnce");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str() + err.str()};
}

Verdict determinism() {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / ("mnce_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream(root / "closed.json") << R"({
      "synth": {"samples_per_class": 8, "test_samples_per_class": 3, "grid_h": 5, "grid_w": 5,
                "latent_dim": 12, "num_classes": 5, "seed": 11},
      "train": {"epochs": 3, "embed_dim": 8, "batch_size": 16, "seed": 11},
      "sweep": {"margins": [0.2, 0.0, -0.2], "num_seeds": 2}})";
    std::ofstream(root / "open.json") << R"({
      "synth": {"samples_per_class": 8, "test_samples_per_class": 3, "grid_h": 5, "grid_w": 5,
                "latent_dim": 12, "num_classes": 6, "seed": 11},
      "train": {"epochs": 3, "embed_dim": 8, "batch_size": 16, "seed": 11},
      "split": {"heard_classes": [0, 1, 2], "unheard_classes": [3, 4, 5]},
      "sweep": {"margins": [0.0, -0.2], "num_seeds": 2}})";
  }
  const std::string closed = (root / "closed.json").string(), open = (root / "open.json").string();
  struct Cmd {
    std::string name;
    std::vector<std::string> args;
  };
  const std::vector<Cmd> cmds = {
      {"print-config", {"print-config", "--config", closed}},
      {"gen-data", {"gen-data", "--config", closed}},
      {"train", {"train", "--config", closed}},
      {"sweep", {"sweep", "--config", closed}},
      {"open-set", {"open-set", "--config", open}},
  };
  int compared = 0;
  std::vector<std::string> mismatched;
  for (const char* run : {"a", "b"}) {
    for (const auto& c : cmds) {
      auto args = c.args;
      args.insert(args.end(), {"--out", (root / run).string()});
      const auto r = invoke(args);
      if (r.code != 0) mismatched.push_back(c.name + " exited " + std::to_string(r.code));
      std::ofstream(root / run / (c.name + ".stdout")) << r.out;
    }
    const fs::path dir = root / run;
    const auto r = invoke({"eval-maps", "--config", closed, "--predictions", (dir / "predictions.json").string(),
                           "--annotations", (dir / "annotations.json").string(), "--out", dir.string()});
    if (r.code != 0) mismatched.push_back("eval-maps exited " + std::to_string(r.code));
    std::ofstream(dir / "eval-maps.stdout") << r.out;
  }
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext != ".csv" && ext != ".stdout") continue;
    const fs::path twin = root / "b" / entry.path().filename();
    ++compared;
    if (!fs::exists(twin) || io::read_file(entry.path()) != io::read_file(twin)) {
      mismatched.push_back(entry.path().filename().string());
    }
  }
  fs::remove_all(root);
  const double t = seconds_since(t0);
  std::string detail = std::to_string(compared) + " CSV/stdout files from 6 commands compared, " +
                       std::to_string(mismatched.size()) + " differ";
  for (const auto& m : mismatched) detail += " [" + m + "]";
  return {mismatched.empty() && compared >= 10, detail + ", " + fmt("%.2fs", t)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> known;
  app.add_option("--known-failures", known,
                 "criteria recorded as negative results; the run succeeds when exactly these fail")
      ->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> expected(known.begin(), known.end());

  struct Criterion {
    int id;
    const char* title;
    std::function<Verdict()> check;
  };
  const std::vector<Criterion> criteria = {
      {2, "gradient correctness", gradients},
      {3, "zero-margin reduction", reduction},
      {4, "margin monotonicity", monotonicity},
      {5, "two-pixel pooling and constant maps", scalar_case},
      {6, "metric oracle equivalence", metrics_oracle},
      {7, "margin sweep direction", sweep_direction},
      {8, "open-set structure", open_set},
      {9, "CLI determinism", determinism},
  };
  std::set<int> failed;
  bool all_ran = true;
  for (const auto& c : criteria) {
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
      all_ran = false;
    }
    if (!v.pass) failed.insert(c.id);
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", c.id, c.title, v.detail.c_str());
    std::fflush(stdout);
  }
  // Full-scale numbers need real video corpora and large backbones; the checks above
  // are the stated substitute. This line records that the substitute ran.
  std::printf("%s criterion 1 (desk-scale substitute for full-scale results): %s\n", all_ran ? "PASS" : "FAIL",
              all_ran ? "criteria 2-9 executed to a verdict" : "a substitute check did not run to completion");
  if (!all_ran) failed.insert(1);

  std::printf("%zu of 9 criteria failed\n", failed.size());
  for (int id : failed) {
    if (!expected.count(id)) std::printf("unexpected failure: criterion %d\n", id);
  }
  for (int id : expected) {
    if (!failed.count(id)) std::printf("XPASS: criterion %d is listed as a known failure but passed\n", id);
  }
  return failed == expected ? 0 : 1;
}
