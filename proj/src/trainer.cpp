#include "mnce/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "mnce/errors.hpp"

namespace mnce {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kSplitStream = 0x73706c74ULL;

// a (m x k) times b^T (n x k) -> m x n
Mat2 mul_transposed(const Mat2& a, const Mat2& b) {
  if (a.cols() != b.cols()) throw DimensionError("mul_transposed: inner dimension mismatch");
  Mat2 out(a.rows(), b.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ar = a.row(r);
    for (std::size_t c = 0; c < b.rows(); ++c) {
      const auto bc = b.row(c);
      double acc = 0.0;
      for (std::size_t k = 0; k < ar.size(); ++k) acc += ar[k] * bc[k];
      out(r, c) = acc;
    }
  }
  return out;
}

// grad += d^T x, with d (m x p), x (m x q) -> p x q
void accumulate_outer(const Mat2& d, const Mat2& x, Mat2& grad) {
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const auto dr = d.row(r);
    const auto xr = x.row(r);
    for (std::size_t p = 0; p < dr.size(); ++p) {
      const double dp = dr[p];
      if (dp == 0.0) continue;
      auto gp = grad.row(p);
      for (std::size_t q = 0; q < xr.size(); ++q) gp[q] += dp * xr[q];
    }
  }
}

double row_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

BranchCache branch_forward(const Branch& br, Mat2 input, bool normalize) {
  BranchCache c;
  c.input = std::move(input);
  if (br.hidden) {
    Mat2 act = mul_transposed(c.input, *br.hidden);
    for (double& v : act.values()) v = std::tanh(v);
    c.hidden_act = std::move(act);
  }
  c.output = mul_transposed(c.hidden_act ? *c.hidden_act : c.input, br.proj);
  c.embed = c.output;
  c.output_norms.resize(c.output.rows());
  for (std::size_t r = 0; r < c.output.rows(); ++r) {
    c.output_norms[r] = row_norm(c.output.row(r));
    if (normalize) {
      const double inv = 1.0 / std::max(c.output_norms[r], kCosineFloor);
      for (double& v : c.embed.row(r)) v *= inv;
    }
  }
  return c;
}

void branch_backward(const Branch& br, const BranchCache& c, Mat2 d_embed, bool normalize,
                     Branch& grad) {
  Mat2& d_out = d_embed;
  if (normalize) {
    for (std::size_t r = 0; r < d_out.rows(); ++r) {
      auto dz = d_out.row(r);
      const double norm = c.output_norms[r];
      if (norm < kCosineFloor) {
        for (double& v : dz) v /= kCosineFloor;
        continue;
      }
      const auto z = c.embed.row(r);
      double proj = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) proj += z[k] * dz[k];
      for (std::size_t k = 0; k < z.size(); ++k) dz[k] = (dz[k] - z[k] * proj) / norm;
    }
  }
  const Mat2& features = c.hidden_act ? *c.hidden_act : c.input;
  accumulate_outer(d_out, features, grad.proj);
  if (!br.hidden) return;

  // d hidden = d_out * proj, then through tanh.
  Mat2 d_hidden(d_out.rows(), br.proj.cols());
  for (std::size_t r = 0; r < d_out.rows(); ++r) {
    const auto dr = d_out.row(r);
    auto hr = d_hidden.row(r);
    for (std::size_t o = 0; o < dr.size(); ++o) {
      if (dr[o] == 0.0) continue;
      const auto pr = br.proj.row(o);
      for (std::size_t q = 0; q < hr.size(); ++q) hr[q] += dr[o] * pr[q];
    }
    const auto act = c.hidden_act->row(r);
    for (std::size_t q = 0; q < hr.size(); ++q) hr[q] *= 1.0 - act[q] * act[q];
  }
  accumulate_outer(d_hidden, c.input, *grad.hidden);
}

void check_batch(const ToyEncoder& enc, std::span<const SyntheticScene* const> scenes) {
  if (scenes.empty()) throw DimensionError("empty batch");
  const std::size_t h = scenes.front()->image.height();
  const std::size_t w = scenes.front()->image.width();
  for (const SyntheticScene* s : scenes) {
    if (s->image.channels() != enc.weights().visual.in_dim()) {
      throw DimensionError("image channels " + std::to_string(s->image.channels()) +
                           " != visual encoder input " +
                           std::to_string(enc.weights().visual.in_dim()));
    }
    if (s->audio.size() != enc.weights().audio.in_dim()) {
      throw DimensionError("audio length " + std::to_string(s->audio.size()) +
                           " != audio encoder input " + std::to_string(enc.weights().audio.in_dim()));
    }
    if (s->image.height() != h || s->image.width() != w) {
      throw DimensionError("batch mixes grid shapes");
    }
  }
}

// Encodes the batch and fills alpha (and pool gradients when requested).
BatchCache build_cache(const ToyEncoder& enc, std::span<const SyntheticScene* const> scenes,
                       const LossConfig& loss_cfg, bool want_grad) {
  check_batch(enc, scenes);
  BatchCache cache;
  cache.encoder = enc;
  cache.loss_cfg = loss_cfg;
  cache.n = scenes.size();
  cache.pixels = scenes.front()->image.pixels();
  const bool normalize = enc.normalize_output();
  const std::size_t n = cache.n;
  const std::size_t hw = cache.pixels;

  cache.images.reserve(n);
  for (const SyntheticScene* s : scenes) {
    cache.images.push_back(branch_forward(enc.weights().visual, s->image.columns(), normalize));
  }
  Mat2 audio_in(n, enc.weights().audio.in_dim());
  for (std::size_t j = 0; j < n; ++j) {
    std::copy(scenes[j]->audio.values().begin(), scenes[j]->audio.values().end(),
              audio_in.row(j).begin());
  }
  cache.audio = branch_forward(enc.weights().audio, std::move(audio_in), normalize);

  std::vector<double> audio_norms(n);
  for (std::size_t j = 0; j < n; ++j) audio_norms[j] = row_norm(cache.audio.embed.row(j));

  cache.alpha.assign(n * n * hw, 0.0);
  if (want_grad) cache.pool_grad.assign(n * n * hw, 0.0);

  // Audio embeddings transposed (dim x n) so the pixel-by-audio products
  // accumulate along contiguous rows.
  const std::size_t dim = cache.audio.embed.cols();
  Mat2 audio_t(dim, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t d = 0; d < dim; ++d) audio_t(d, j) = cache.audio.embed(j, d);
  }

  Mat2 s(n, n);
  std::vector<double> dots(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Mat2& z = cache.images[i].embed;
    for (std::size_t k = 0; k < hw; ++k) {
      const auto zk = z.row(k);
      std::fill(dots.begin(), dots.end(), 0.0);
      for (std::size_t d = 0; d < dim; ++d) {
        const double zd = zk[d];
        const auto bd = audio_t.row(d);
        for (std::size_t j = 0; j < n; ++j) dots[j] += zd * bd[j];
      }
      const double pixel_norm = row_norm(zk);
      for (std::size_t j = 0; j < n; ++j) {
        cache.alpha[(i * n + j) * hw + k] =
            dots[j] / std::max(pixel_norm * audio_norms[j], kCosineFloor);
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t base = (i * n + j) * hw;
      const std::span<const double> alpha(cache.alpha.data() + base, hw);
      s(i, j) = want_grad
                    ? kernels::pool_with_grad(alpha, loss_cfg.pool,
                                              std::span<double>(cache.pool_grad.data() + base, hw))
                    : kernels::pool(alpha, loss_cfg.pool);
    }
  }
  cache.similarity = SimilarityMatrix(std::move(s));
  return cache;
}

std::vector<const SyntheticScene*> pointers(std::span<const SyntheticScene> scenes) {
  std::vector<const SyntheticScene*> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(&s);
  return out;
}

ForwardResult forward_pointers(const ToyEncoder& enc, std::span<const SyntheticScene* const> scenes,
                               const LossConfig& loss_cfg) {
  loss_cfg.validate();
  ForwardResult out;
  out.cache = build_cache(enc, scenes, loss_cfg, true);
  out.loss = margin_nce_loss(out.cache.similarity, loss_cfg);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, const Mat2*>> EncoderWeights::tensors() const {
  std::vector<std::pair<std::string, const Mat2*>> out;
  if (visual.hidden) out.emplace_back("visual.hidden", &*visual.hidden);
  out.emplace_back("visual.proj", &visual.proj);
  if (audio.hidden) out.emplace_back("audio.hidden", &*audio.hidden);
  out.emplace_back("audio.proj", &audio.proj);
  return out;
}

std::vector<std::pair<std::string, Mat2*>> EncoderWeights::tensors() {
  std::vector<std::pair<std::string, Mat2*>> out;
  for (auto& [name, ptr] : std::as_const(*this).tensors()) {
    out.emplace_back(name, const_cast<Mat2*>(ptr));
  }
  return out;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, m] : tensors()) total += m->size();
  return total;
}

std::vector<double> EncoderWeights::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& [name, m] : tensors()) flat.insert(flat.end(), m->values().begin(), m->values().end());
  return flat;
}

void EncoderWeights::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw DimensionError("EncoderWeights::assign: expected " + std::to_string(parameter_count()) +
                         " values, got " + std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& [name, m] : tensors()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), m->size(), m->values().begin());
    offset += m->size();
  }
}

EncoderWeights EncoderWeights::zeros_like() const {
  EncoderWeights z = *this;
  for (auto& [name, m] : z.tensors()) std::fill(m->values().begin(), m->values().end(), 0.0);
  return z;
}

ToyEncoder::ToyEncoder(EncoderWeights weights, bool normalize_output)
    : weights_(std::move(weights)), normalize_output_(normalize_output) {
  if (weights_.visual.out_dim() != weights_.audio.out_dim()) {
    throw DimensionError("ToyEncoder: branch output dims differ (" +
                         std::to_string(weights_.visual.out_dim()) + " vs " +
                         std::to_string(weights_.audio.out_dim()) + ")");
  }
  for (const Branch* br : {&weights_.visual, &weights_.audio}) {
    if (br->hidden && br->hidden->rows() != br->proj.cols()) {
      throw DimensionError("ToyEncoder: hidden layer width does not match projection input");
    }
  }
  if (!all_finite(weights_.flatten())) throw NumericalError("ToyEncoder: non-finite weights");
}

ToyEncoder ToyEncoder::random(const EncoderSpec& spec, RngStream& rng) {
  if (spec.visual_in == 0 || spec.audio_in == 0 || spec.out_dim == 0) {
    throw DimensionError("ToyEncoder::random: dimensions must be positive");
  }
  auto uniform_layer = [&rng](std::size_t rows, std::size_t cols) {
    Mat2 m(rows, cols);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : m.values()) v = rng.uniform(-bound, bound);
    return m;
  };
  auto make_branch = [&](std::size_t in) {
    Branch b;
    if (spec.hidden_dim > 0) {
      b.hidden = uniform_layer(spec.hidden_dim, in);
      b.proj = uniform_layer(spec.out_dim, spec.hidden_dim);
    } else {
      b.proj = uniform_layer(spec.out_dim, in);
    }
    return b;
  };
  EncoderWeights w;
  w.visual = make_branch(spec.visual_in);
  w.audio = make_branch(spec.audio_in);
  return ToyEncoder(std::move(w), spec.normalize_output);
}

ToyEncoder ToyEncoder::identity(std::size_t dim, bool normalize_output) {
  EncoderWeights w;
  w.visual.proj = Mat2::identity(dim);
  w.audio.proj = Mat2::identity(dim);
  return ToyEncoder(std::move(w), normalize_output);
}

Mat2 ToyEncoder::encode_image(const Grid3& image) const {
  if (image.channels() != weights_.visual.in_dim()) throw DimensionError("encode_image: channels");
  return branch_forward(weights_.visual, image.columns(), normalize_output_).embed;
}

Mat2 ToyEncoder::encode_audio(std::span<const Vec1> audios) const {
  Mat2 in(audios.size(), weights_.audio.in_dim());
  for (std::size_t j = 0; j < audios.size(); ++j) {
    if (audios[j].size() != in.cols()) throw DimensionError("encode_audio: length");
    std::copy(audios[j].values().begin(), audios[j].values().end(), in.row(j).begin());
  }
  return branch_forward(weights_.audio, std::move(in), normalize_output_).embed;
}

// ---------------------------------------------------------------------------

ForwardResult forward_batch(const ToyEncoder& enc, std::span<const SyntheticScene> scenes,
                            const LossConfig& loss_cfg) {
  const auto ptrs = pointers(scenes);
  return forward_pointers(enc, ptrs, loss_cfg);
}

EncoderGrads backward_batch(const BatchCache& cache) {
  const EncoderWeights& weights = cache.encoder.weights();
  EncoderGrads grads = weights.zeros_like();
  const std::size_t n = cache.n;
  const std::size_t hw = cache.pixels;
  if (n < 2) return grads;

  const Mat2 ds = margin_nce_grad(cache.similarity, cache.loss_cfg);
  const std::size_t dim = cache.encoder.out_dim();
  const Mat2& b = cache.audio.embed;
  std::vector<double> audio_norms(n);
  for (std::size_t j = 0; j < n; ++j) audio_norms[j] = row_norm(b.row(j));

  Mat2 d_audio(n, dim);
  std::vector<double> pixel_norms(hw);
  for (std::size_t i = 0; i < n; ++i) {
    const Mat2& z = cache.images[i].embed;
    Mat2 d_image(hw, dim);
    for (std::size_t k = 0; k < hw; ++k) pixel_norms[k] = row_norm(z.row(k));
    for (std::size_t j = 0; j < n; ++j) {
      const double g_s = ds(i, j);
      const auto bj = b.row(j);
      auto dbj = d_audio.row(j);
      const std::size_t base = (i * n + j) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const double g = g_s * cache.pool_grad[base + k];
        if (g == 0.0) continue;
        const auto zk = z.row(k);
        auto dzk = d_image.row(k);
        const double denom = pixel_norms[k] * audio_norms[j];
        if (denom < kCosineFloor) {
          const double scale = g / kCosineFloor;
          for (std::size_t d = 0; d < dim; ++d) {
            dzk[d] += scale * bj[d];
            dbj[d] += scale * zk[d];
          }
          continue;
        }
        // d cos / dz = b / (|z||b|) - cos z / |z|^2, symmetric in (z, b).
        const double a = cache.alpha[base + k];
        const double cross = g / denom;
        const double self_z = g * a / (pixel_norms[k] * pixel_norms[k]);
        const double self_b = g * a / (audio_norms[j] * audio_norms[j]);
        for (std::size_t d = 0; d < dim; ++d) {
          dzk[d] += cross * bj[d] - self_z * zk[d];
          dbj[d] += cross * zk[d] - self_b * bj[d];
        }
      }
    }
    branch_backward(weights.visual, cache.images[i], std::move(d_image),
                    cache.encoder.normalize_output(), grads.visual);
  }
  branch_backward(weights.audio, cache.audio, std::move(d_audio), cache.encoder.normalize_output(),
                  grads.audio);
  return grads;
}

BatchScores score_batch(const ToyEncoder& enc, std::span<const SyntheticScene> scenes,
                        const PoolConfig& pool) {
  pool.validate();
  const auto ptrs = pointers(scenes);
  LossConfig cfg;
  cfg.pool = pool;
  BatchCache cache = build_cache(enc, ptrs, cfg, false);
  BatchScores out{cache.similarity, {}};
  const std::size_t n = cache.n;
  const std::size_t h = scenes.front().image.height();
  const std::size_t w = scenes.front().image.width();
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = cache.alpha.begin() + static_cast<std::ptrdiff_t>((i * n + i) * cache.pixels);
    out.diagonal_maps.emplace_back(
        h, w, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(cache.pixels)));
  }
  return out;
}

// ---------------------------------------------------------------------------

void optimizer_step(const OptimizerConfig& cfg, OptimizerState& state, std::span<double> params,
                    std::span<const double> grads) {
  if (params.size() != grads.size()) throw DimensionError("optimizer_step: size mismatch");
  const double lr = cfg.learning_rate;
  const double wd = cfg.weight_decay;
  ++state.step;
  if (cfg.kind == OptimizerKind::kSgd) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k] -= lr * (grads[k] + wd * params[k]);
    return;
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  const auto t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    double& m = state.first_moment[k];
    double& v = state.second_moment[k];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grads[k];
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grads[k] * grads[k];
    const double m_hat = m / bias1;
    const double v_hat = v / bias2;
    params[k] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + wd * params[k]);
  }
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  loss.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be positive", "train.batch_size");
  if (epochs < 0) throw ConfigError("epochs must be non-negative", "train.epochs");
  if (!(optimizer.learning_rate >= 0.0) || !std::isfinite(optimizer.learning_rate)) {
    throw ConfigError("learning_rate must be non-negative", "train.learning_rate");
  }
  if (!(optimizer.weight_decay >= 0.0) || !std::isfinite(optimizer.weight_decay)) {
    throw ConfigError("weight_decay must be non-negative", "train.weight_decay");
  }
  if (embed_dim < 1) throw ConfigError("embed_dim must be positive", "train.embed_dim");
}

ToyEncoder initial_encoder(const TrainConfig& cfg, const std::vector<SyntheticScene>& data) {
  if (data.empty()) throw ConfigError("training set is empty", "synth.samples_per_class");
  EncoderSpec spec;
  spec.visual_in = data.front().image.channels();
  spec.audio_in = data.front().audio.size();
  spec.hidden_dim = cfg.hidden_dim;
  spec.out_dim = cfg.embed_dim;
  spec.normalize_output = cfg.normalize_output;
  RngStream rng(cfg.seed, kInitStream);
  return ToyEncoder::random(spec, rng);
}

void continue_training(TrainState& state, const std::vector<SyntheticScene>& data,
                       const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training set is empty", "synth.samples_per_class");
  const std::size_t total = data.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle(cfg.seed, derive_stream_id(kShuffleStream, static_cast<std::uint64_t>(epoch)));
    for (std::size_t k = total; k > 1; --k) {
      std::swap(order[k - 1], order[shuffle.uniform_index(k)]);
    }

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0, b = 0; start < total; start += batch, ++b) {
      const std::size_t end = std::min(start + batch, total);
      if (end - start < 2) continue;  // a lone sample has no negatives
      std::vector<const SyntheticScene*> scenes;
      scenes.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) scenes.push_back(&data[order[k]]);

      const ForwardResult fwd = forward_pointers(state.encoder, scenes, cfg.loss);
      const std::vector<double> grads = std::isfinite(fwd.loss)
                                            ? backward_batch(fwd.cache).flatten()
                                            : std::vector<double>{};
      if (!std::isfinite(fwd.loss) || !all_finite(grads)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      std::vector<double> params = state.encoder.weights().flatten();
      optimizer_step(cfg.optimizer, state.optimizer, params, grads);
      if (!all_finite(params)) {
        throw NumericalError("non-finite parameters after epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(b));
      }
      state.encoder.weights().assign(params);
      loss_sum += fwd.loss;
      ++batches;
    }
    state.loss_history.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    state.epochs_done = epoch + 1;
  }
}

TrainResult train(ToyEncoder enc, const std::vector<SyntheticScene>& data, const TrainConfig& cfg) {
  TrainState state;
  state.encoder = std::move(enc);
  continue_training(state, data, cfg);
  return {std::move(state.encoder), std::move(state.loss_history)};
}

// ---------------------------------------------------------------------------

void EvalConfig::validate() const {
  if (!(auc_step > 0.0 && auc_step <= 1.0)) throw ConfigError("auc_step must lie in (0, 1]", "eval.auc_step");
  if (upsample < 1) throw ConfigError("upsample must be positive", "eval.upsample");
  if (batch_size < 0) throw ConfigError("batch_size must be non-negative", "eval.batch_size");
  if (threshold.kind == ThresholdRule::Kind::kAbsolute && !std::isfinite(threshold.value)) {
    throw ConfigError("absolute threshold must be finite", "eval.threshold");
  }
}

EvalResult evaluate(const ToyEncoder& enc, const std::vector<SyntheticScene>& test,
                    const PoolConfig& pool, const EvalConfig& cfg) {
  cfg.validate();
  if (test.empty()) throw ConfigError("test set is empty", "synth.test_samples_per_class");

  std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  if (batch == 0) {
    std::set<int> classes;
    for (const auto& s : test) classes.insert(s.class_id);
    batch = classes.size();
  }
  batch = std::max<std::size_t>(batch, 2);

  EvalResult out;
  out.retrieval_batch = batch;
  std::size_t correct = 0;
  std::size_t counted = 0;
  const std::span<const SyntheticScene> all(test);
  for (std::size_t start = 0; start < test.size(); start += batch) {
    const std::size_t len = std::min(batch, test.size() - start);
    const auto chunk = all.subspan(start, len);
    const BatchScores scores = score_batch(enc, chunk, pool);
    const Mat2& s = scores.similarity.scores();
    if (len >= 2) {
      for (std::size_t i = 0; i < len; ++i) {
        bool best = true;
        for (std::size_t j = 0; j < len && best; ++j) best = j == i || s(i, i) > s(i, j);
        correct += best ? 1 : 0;
        ++counted;
      }
    }
    for (std::size_t i = 0; i < len; ++i) {
      const SyntheticScene& scene = chunk[i];
      const std::size_t target_h = scene.image.height() * static_cast<std::size_t>(cfg.upsample);
      const std::size_t target_w = scene.image.width() * static_cast<std::size_t>(cfg.upsample);
      const std::vector<Box> boxes{scene.gt_region};
      const ConsensusMap gt = consensus_from_boxes(boxes, target_h, target_w);
      const PredictionMap pred{scores.diagonal_maps[i], target_h, target_w};
      out.ids.push_back(scene.id);
      out.cious.push_back(ciou(pred, gt, cfg.threshold));
      out.maps.push_back(scores.diagonal_maps[i]);
    }
  }
  if (counted == 0) throw ConfigError("retrieval needs at least two test samples", "eval.batch_size");
  out.retrieval_accuracy = static_cast<double>(correct) / static_cast<double>(counted);
  out.ciou_at_half = ciou_at_half(out.cious);
  out.curve = eval_curve(out.cious, cfg.auc_step);
  return out;
}

// ---------------------------------------------------------------------------

const MarginAggregate* ExperimentReport::find(double margin) const {
  for (const auto& a : aggregates) {
    if (a.margin == margin) return &a;
  }
  return nullptr;
}

std::vector<double> default_sweep_margins() { return {0.2, 0.0, -0.1, -0.2, -0.3, -0.4}; }

namespace {

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

RunRecord record_from(double margin, std::uint64_t seed, const EvalResult& eval,
                      const std::vector<double>& history) {
  RunRecord r;
  r.margin = margin;
  r.seed = seed;
  r.retrieval_accuracy = eval.retrieval_accuracy;
  r.ciou_at_half = eval.ciou_at_half;
  r.auc = 100.0 * eval.curve.auc;
  r.final_loss = history.empty() ? 0.0 : history.back();
  return r;
}

RunRecord failed_record(double margin, std::uint64_t seed, const std::string& what) {
  RunRecord r;
  r.margin = margin;
  r.seed = seed;
  r.status = "failed: " + what;
  for (char& c : r.status) {
    if (c == ',' || c == '\n' || c == '"') c = ';';
  }
  return r;
}

ExperimentConfig seeded(const ExperimentConfig& base, double margin, std::uint64_t seed) {
  ExperimentConfig cfg = base;
  cfg.synth.seed = seed;
  cfg.train.seed = seed;
  cfg.train.loss.margin = margin;
  return cfg;
}

std::vector<int> resolved_heard(const ExperimentConfig& cfg) {
  return cfg.heard_classes.empty() ? class_range(0, cfg.synth.num_classes) : cfg.heard_classes;
}

// Runs `job(index)` for index in [0, count) on up to `threads` workers.
template <typename Job>
void run_parallel(std::size_t count, unsigned threads, Job&& job) {
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (workers == 1) {
    for (std::size_t k = 0; k < count; ++k) job(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < count; k = next++) job(k);
    });
  }
}

void check_grid(const std::vector<double>& margins, const std::vector<std::uint64_t>& seeds) {
  if (margins.empty()) throw ConfigError("margin list is empty", "sweep.margins");
  if (seeds.empty()) throw ConfigError("seed list is empty", "sweep.seeds");
}

}  // namespace

Split experiment_split(const ExperimentConfig& cfg) {
  RngStream rng(cfg.synth.seed, kSplitStream);
  if (cfg.unheard_classes.empty()) return make_closed_split(cfg.synth, resolved_heard(cfg), rng);
  return make_split(cfg.synth, resolved_heard(cfg), cfg.unheard_classes, rng);
}

std::vector<MarginAggregate> aggregate_runs(const std::vector<RunRecord>& runs,
                                            const std::vector<double>& margins) {
  std::vector<MarginAggregate> out;
  for (double m : margins) {
    MarginAggregate agg;
    agg.margin = m;
    std::vector<double> acc, ciou, auc, loss;
    for (const auto& r : runs) {
      if (r.margin != m || !r.ok()) continue;
      acc.push_back(r.retrieval_accuracy);
      ciou.push_back(r.ciou_at_half);
      auc.push_back(r.auc);
      loss.push_back(r.final_loss);
    }
    agg.runs = acc.size();
    agg.retrieval_accuracy = summarize(acc);
    agg.ciou_at_half = summarize(ciou);
    agg.auc = summarize(auc);
    agg.final_loss = summarize(loss);
    out.push_back(agg);
  }
  return out;
}

ExperimentReport margin_sweep(const std::vector<double>& margins,
                              const std::vector<std::uint64_t>& seeds,
                              const ExperimentConfig& base, unsigned threads,
                              const RunCache* cache) {
  check_grid(margins, seeds);
  const std::string label = "sweep";
  ExperimentReport report;
  report.label = label;
  report.classes = resolved_heard(base);
  report.runs.resize(margins.size() * seeds.size());

  run_parallel(report.runs.size(), threads, [&](std::size_t index) {
    const double margin = margins[index / seeds.size()];
    const std::uint64_t seed = seeds[index % seeds.size()];
    if (cache && cache->lookup) {
      if (auto hit = cache->lookup(label, margin, seed)) {
        report.runs[index] = *hit;
        return;
      }
    }
    RunRecord record;
    try {
      ExperimentConfig cfg = seeded(base, margin, seed);
      cfg.unheard_classes.clear();
      const Split split = experiment_split(cfg);
      const TrainResult trained = train(initial_encoder(cfg.train, split.train), split.train, cfg.train);
      const EvalResult eval = evaluate(trained.encoder, split.heard_test, cfg.train.loss.pool, cfg.eval);
      record = record_from(margin, seed, eval, trained.loss_history);
    } catch (const std::exception& e) {
      record = failed_record(margin, seed, e.what());
    }
    report.runs[index] = record;
    if (cache && cache->store) cache->store(label, record);
  });
  report.aggregates = aggregate_runs(report.runs, margins);
  return report;
}

OpenSetReport open_set_eval(const std::vector<double>& margins,
                            const std::vector<std::uint64_t>& seeds,
                            const ExperimentConfig& base, unsigned threads,
                            const RunCache* cache) {
  check_grid(margins, seeds);
  const std::vector<int> heard = base.heard_classes;
  const std::vector<int> unheard = base.unheard_classes;
  if (heard.empty()) throw ConfigError("heard class set is empty", "split.heard_classes");
  if (unheard.empty()) throw ConfigError("unheard class set is empty", "split.unheard_classes");
  {
    // Validate the partition once up front so a bad split is fatal, not per run.
    SynthConfig probe = base.synth;
    probe.samples_per_class = 1;
    probe.test_samples_per_class = 1;
    RngStream rng(0, kSplitStream);
    make_split(probe, heard, unheard, rng);
  }

  OpenSetReport out;
  out.heard.label = "heard";
  out.heard.classes = heard;
  out.unheard.label = "unheard";
  out.unheard.classes = unheard;
  const std::size_t count = margins.size() * seeds.size();
  out.heard.runs.resize(count);
  out.unheard.runs.resize(count);

  run_parallel(count, threads, [&](std::size_t index) {
    const double margin = margins[index / seeds.size()];
    const std::uint64_t seed = seeds[index % seeds.size()];
    if (cache && cache->lookup) {
      auto heard_hit = cache->lookup("heard", margin, seed);
      auto unheard_hit = cache->lookup("unheard", margin, seed);
      if (heard_hit && unheard_hit) {
        out.heard.runs[index] = *heard_hit;
        out.unheard.runs[index] = *unheard_hit;
        return;
      }
    }
    RunRecord heard_record;
    RunRecord unheard_record;
    try {
      const ExperimentConfig cfg = seeded(base, margin, seed);
      const Split split = experiment_split(cfg);
      const TrainResult trained = train(initial_encoder(cfg.train, split.train), split.train, cfg.train);
      const auto& pool = cfg.train.loss.pool;
      heard_record = record_from(margin, seed, evaluate(trained.encoder, split.heard_test, pool, cfg.eval),
                                 trained.loss_history);
      unheard_record = record_from(margin, seed,
                                   evaluate(trained.encoder, split.unheard_test, pool, cfg.eval),
                                   trained.loss_history);
    } catch (const std::exception& e) {
      heard_record = failed_record(margin, seed, e.what());
      unheard_record = heard_record;
    }
    out.heard.runs[index] = heard_record;
    out.unheard.runs[index] = unheard_record;
    if (cache && cache->store) {
      cache->store("heard", heard_record);
      cache->store("unheard", unheard_record);
    }
  });
  out.heard.aggregates = aggregate_runs(out.heard.runs, margins);
  out.unheard.aggregates = aggregate_runs(out.unheard.runs, margins);
  return out;
}

}  // namespace mnce
