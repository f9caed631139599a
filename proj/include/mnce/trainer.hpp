#pragma once

// Toy two-branch encoders trained end to end with the margin contrastive
// objective, plus the experiment runners built on top of them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mnce/avmap.hpp"
#include "mnce/marginnce.hpp"
#include "mnce/metrics.hpp"
#include "mnce/numerics.hpp"
#include "mnce/synthdata.hpp"

namespace mnce {

// ---------------------------------------------------------------------------
// Encoders

/// One modality: optional tanh hidden layer followed by a linear projection.
/// No biases.
struct Branch {
  std::optional<Mat2> hidden;  ///< hidden_dim x in_dim
  Mat2 proj;                   ///< out_dim x (hidden_dim or in_dim)

  std::size_t in_dim() const { return hidden ? hidden->cols() : proj.cols(); }
  std::size_t out_dim() const { return proj.rows(); }
  bool operator==(const Branch&) const = default;
};

/// Parameters of both branches. Gradients use the same layout.
struct EncoderWeights {
  Branch visual;
  Branch audio;

  /// Parameter tensors in canonical order, named "visual.hidden",
  /// "visual.proj", "audio.hidden", "audio.proj". Absent layers are skipped.
  std::vector<std::pair<std::string, const Mat2*>> tensors() const;
  std::vector<std::pair<std::string, Mat2*>> tensors();

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  /// Throws DimensionError if `flat` has the wrong length.
  void assign(std::span<const double> flat);
  /// Same layout, all zeros.
  EncoderWeights zeros_like() const;

  bool operator==(const EncoderWeights&) const = default;
};

using EncoderGrads = EncoderWeights;

struct EncoderSpec {
  std::size_t visual_in = 0;
  std::size_t audio_in = 0;
  std::size_t hidden_dim = 0;  ///< 0 disables the hidden layer
  std::size_t out_dim = 0;
  bool normalize_output = true;
};

class ToyEncoder {
 public:
  ToyEncoder() = default;
  /// Throws DimensionError if the branch output dims differ.
  ToyEncoder(EncoderWeights weights, bool normalize_output);

  /// Weights uniform in +-1/sqrt(fan_in).
  static ToyEncoder random(const EncoderSpec& spec, RngStream& rng);
  /// Identity projections on both branches.
  static ToyEncoder identity(std::size_t dim, bool normalize_output = true);

  const EncoderWeights& weights() const noexcept { return weights_; }
  EncoderWeights& weights() noexcept { return weights_; }
  bool normalize_output() const noexcept { return normalize_output_; }
  std::size_t out_dim() const { return weights_.visual.out_dim(); }

  /// Encoded image columns, one row per pixel (row-major over y, x).
  Mat2 encode_image(const Grid3& image) const;
  Mat2 encode_audio(std::span<const Vec1> audios) const;

  bool operator==(const ToyEncoder&) const = default;

 private:
  EncoderWeights weights_;
  bool normalize_output_ = true;
};

// ---------------------------------------------------------------------------
// Forward / backward

/// Intermediate values of one branch for a stack of input rows.
struct BranchCache {
  Mat2 input;             ///< m x in
  std::optional<Mat2> hidden_act;  ///< m x hidden, tanh output
  Mat2 output;            ///< m x out, before normalization
  Mat2 embed;             ///< m x out, after optional normalization
  std::vector<double> output_norms;
};

struct BatchCache {
  ToyEncoder encoder;
  LossConfig loss_cfg;
  std::size_t n = 0;
  std::size_t pixels = 0;
  std::vector<BranchCache> images;  ///< one per batch item
  BranchCache audio;                ///< all n audios stacked
  /// alpha[(i * n + j) * pixels + k]: response of image i to audio j at pixel k.
  std::vector<double> alpha;
  /// dS_ij / d alpha_ijk, same layout.
  std::vector<double> pool_grad;
  SimilarityMatrix similarity;
};

struct ForwardResult {
  double loss = 0.0;
  BatchCache cache;
};

/// Encodes the batch, builds the pooled similarity matrix and evaluates the loss.
ForwardResult forward_batch(const ToyEncoder& enc, std::span<const SyntheticScene> scenes,
                            const LossConfig& loss_cfg);

/// Gradient of the forward loss with respect to every encoder parameter.
EncoderGrads backward_batch(const BatchCache& cache);

/// Response maps (pixels per image) and pooled similarity of a batch without gradient caches.
struct BatchScores {
  SimilarityMatrix similarity;
  std::vector<Mat2> diagonal_maps;  ///< alpha_ii reshaped to h x w
};
BatchScores score_batch(const ToyEncoder& enc, std::span<const SyntheticScene> scenes,
                        const PoolConfig& pool);

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  bool operator==(const OptimizerState&) const = default;
};

/// One update in place. Adam uses bias-corrected moments and decoupled
/// weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
/// SGD: p -= lr * (g + wd * p).
void optimizer_step(const OptimizerConfig& cfg, OptimizerState& state, std::span<double> params,
                    std::span<const double> grads);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  LossConfig loss;
  int batch_size = 64;
  int epochs = 20;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t hidden_dim = 0;
  std::size_t embed_dim = 16;
  bool normalize_output = true;

  void validate() const;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  ToyEncoder encoder;
  OptimizerState optimizer;
  int epochs_done = 0;
  std::vector<double> loss_history;  ///< mean batch loss per epoch
};

/// Random encoder sized for `data` and the config's architecture fields.
ToyEncoder initial_encoder(const TrainConfig& cfg, const std::vector<SyntheticScene>& data);

/// Runs epochs state.epochs_done .. cfg.epochs - 1. Batch order for epoch e
/// depends only on (cfg.seed, e), so split runs match uninterrupted ones.
/// Throws NumericalError naming the epoch and batch on a non-finite loss.
void continue_training(TrainState& state, const std::vector<SyntheticScene>& data,
                       const TrainConfig& cfg);

struct TrainResult {
  ToyEncoder encoder;
  std::vector<double> loss_history;
};

TrainResult train(ToyEncoder enc, const std::vector<SyntheticScene>& data, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
  ThresholdRule threshold = ThresholdRule::median();
  double auc_step = kDefaultAucStep;
  int upsample = 4;        ///< evaluation shape = grid shape * upsample
  int batch_size = 0;      ///< retrieval batch; 0 = number of distinct classes in the test set

  void validate() const;
};

struct EvalResult {
  double retrieval_accuracy = 0.0;  ///< in [0, 1]
  std::vector<std::string> ids;
  std::vector<double> cious;
  std::vector<Mat2> maps;     ///< alpha_ii per sample at grid resolution
  double ciou_at_half = 0.0;  ///< percent
  EvalCurve curve;            ///< auc in [0, 1]
  std::size_t retrieval_batch = 0;
};

/// Retrieval: the test set is cut into consecutive batches; a sample counts
/// as retrieved when its diagonal pooled score strictly exceeds every other
/// entry of its row. Batches of a single sample are skipped.
/// Localization: alpha_ii against the scene's gt_region.
EvalResult evaluate(const ToyEncoder& enc, const std::vector<SyntheticScene>& test,
                    const PoolConfig& pool, const EvalConfig& cfg);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
  SynthConfig synth;
  TrainConfig train;
  EvalConfig eval;
  std::vector<int> heard_classes;    ///< empty = every class
  std::vector<int> unheard_classes;  ///< used by open-set runs only
};

/// The data split of one run: seeded by cfg.synth.seed, closed over the
/// heard classes when unheard_classes is empty, open otherwise.
Split experiment_split(const ExperimentConfig& cfg);

struct RunRecord {
  double margin = 0.0;
  std::uint64_t seed = 0;
  double retrieval_accuracy = 0.0;
  double ciou_at_half = 0.0;  ///< percent
  double auc = 0.0;           ///< percent
  double final_loss = 0.0;
  std::string status = "ok";

  bool ok() const { return status == "ok"; }
  bool operator==(const RunRecord&) const = default;
};

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation, 0 for a single run
};

struct MarginAggregate {
  double margin = 0.0;
  std::size_t runs = 0;  ///< successful runs
  Summary retrieval_accuracy;
  Summary ciou_at_half;
  Summary auc;
  Summary final_loss;
};

struct ExperimentReport {
  std::string label;
  std::vector<int> classes;
  std::vector<RunRecord> runs;
  std::vector<MarginAggregate> aggregates;  ///< in the order margins were given

  const MarginAggregate* find(double margin) const;
};

/// Optional persistence hooks so an interrupted sweep can skip finished runs.
/// `store` may be called concurrently from worker threads.
struct RunCache {
  std::function<std::optional<RunRecord>(const std::string& label, double margin,
                                         std::uint64_t seed)>
      lookup;
  std::function<void(const std::string& label, const RunRecord&)> store;
};

/// Aggregates records per margin, in the order of `margins`. Failed runs are
/// kept in `runs` but excluded from the statistics.
std::vector<MarginAggregate> aggregate_runs(const std::vector<RunRecord>& runs,
                                            const std::vector<double>& margins);

/// One training run per (margin, seed); the seed drives both data and
/// initialization, so margins are compared on identical data. Runs that throw
/// are recorded with a failure status. `threads` workers share the grid.
ExperimentReport margin_sweep(const std::vector<double>& margins,
                              const std::vector<std::uint64_t>& seeds,
                              const ExperimentConfig& base, unsigned threads = 1,
                              const RunCache* cache = nullptr);

struct OpenSetReport {
  ExperimentReport heard;
  ExperimentReport unheard;
};

/// Trains on heard classes and evaluates on heard-test and unheard-test
/// scenes separately. Throws ConfigError if either class set is empty or they overlap.
OpenSetReport open_set_eval(const std::vector<double>& margins,
                            const std::vector<std::uint64_t>& seeds,
                            const ExperimentConfig& base, unsigned threads = 1,
                            const RunCache* cache = nullptr);

/// {+0.2, 0, -0.1, -0.2, -0.3, -0.4}.
std::vector<double> default_sweep_margins();

}  // namespace mnce
