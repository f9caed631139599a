#include "mnce/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <unordered_map>

#include "mnce/errors.hpp"

namespace mnce {

namespace {

constexpr std::uint64_t kPrototypeStream = 0x70726f746fULL;
constexpr std::uint64_t kTrainTag = 1;
constexpr std::uint64_t kHeardTestTag = 2;
constexpr std::uint64_t kUnheardTestTag = 3;
constexpr double kMaxPrototypeCosine = 0.3;
constexpr int kMaxPrototypeAttempts = 100000;

std::vector<double> random_unit(std::size_t dim, RngStream& rng) {
  std::vector<double> v(dim);
  double norm_sq = 0.0;
  do {
    norm_sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm_sq += x * x;
    }
  } while (norm_sq < 1e-24);
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (double& x : v) x *= inv;
  return v;
}

std::vector<double> with_noise(std::span<const double> base, double std_dev, RngStream& rng) {
  std::vector<double> out(base.begin(), base.end());
  if (std_dev > 0.0) {
    for (double& x : out) x += std_dev * rng.normal();
  }
  return out;
}

std::string scene_id(const char* part, std::size_t index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s-%06zu", part, index);
  return buf;
}

void check_classes(const SynthConfig& cfg, const std::vector<int>& classes, const char* field) {
  if (classes.empty()) throw ConfigError(std::string(field) + " must not be empty", field);
  std::set<int> seen;
  for (int c : classes) {
    if (c < 0 || c >= cfg.num_classes) {
      throw ConfigError(std::string(field) + " names unknown class " + std::to_string(c), field);
    }
    if (!seen.insert(c).second) {
      throw ConfigError(std::string(field) + " lists class " + std::to_string(c) + " twice", field);
    }
  }
}

// Interleaved: per_class rounds, each visiting every class once.
std::vector<SyntheticScene> make_scenes(const SynthConfig& cfg, const std::vector<Vec1>& prototypes,
                                        const std::vector<int>& classes, int per_class,
                                        bool corrupt, const char* part, std::uint64_t tag,
                                        const RngStream& parent) {
  SynthConfig scene_cfg = cfg;
  if (!corrupt) scene_cfg.faulty_positive_rate = 0.0;
  std::vector<SyntheticScene> out;
  out.reserve(classes.size() * static_cast<std::size_t>(per_class));
  const std::uint64_t part_stream = derive_stream_id(parent.stream_id(), tag);
  for (int round = 0; round < per_class; ++round) {
    for (int c : classes) {
      const std::size_t index = out.size();
      RngStream rng(parent.seed(), derive_stream_id(part_stream, index));
      SyntheticScene scene = generate_scene(scene_cfg, prototypes, c, rng);
      scene.id = scene_id(part, index);
      out.push_back(std::move(scene));
    }
  }
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2", "synth.num_classes");
  if (latent_dim < 1) throw ConfigError("latent_dim must be positive", "synth.latent_dim");
  if (grid_h < 1) throw ConfigError("grid_h must be positive", "synth.grid_h");
  if (grid_w < 1) throw ConfigError("grid_w must be positive", "synth.grid_w");
  if (!(source_region_frac > 0.0 && source_region_frac <= 1.0)) {
    throw ConfigError("source_region_frac must lie in (0, 1]", "synth.source_region_frac");
  }
  if (!(faulty_positive_rate >= 0.0 && faulty_positive_rate <= 1.0)) {
    throw ConfigError("faulty_positive_rate must lie in [0, 1]", "synth.faulty_positive_rate");
  }
  if (!(feature_noise_std >= 0.0) || !std::isfinite(feature_noise_std)) {
    throw ConfigError("feature_noise_std must be non-negative", "synth.feature_noise_std");
  }
  if (samples_per_class < 1) {
    throw ConfigError("samples_per_class must be positive", "synth.samples_per_class");
  }
  if (test_samples_per_class < 1) {
    throw ConfigError("test_samples_per_class must be positive", "synth.test_samples_per_class");
  }
}

std::vector<Vec1> make_class_prototypes(const SynthConfig& cfg, RngStream& rng) {
  cfg.validate();
  const auto dim = static_cast<std::size_t>(cfg.latent_dim);
  std::vector<std::vector<double>> accepted;
  int attempts = 0;
  while (accepted.size() < static_cast<std::size_t>(cfg.num_classes)) {
    if (++attempts > kMaxPrototypeAttempts) {
      throw ConfigError("cannot place " + std::to_string(cfg.num_classes) +
                            " prototypes with |cos| <= 0.3 in dimension " +
                            std::to_string(cfg.latent_dim),
                        "synth.latent_dim");
    }
    std::vector<double> candidate = random_unit(dim, rng);
    const bool fits = std::all_of(accepted.begin(), accepted.end(), [&](const auto& other) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += candidate[k] * other[k];
      return std::abs(dot) <= kMaxPrototypeCosine;
    });
    if (fits) accepted.push_back(std::move(candidate));
  }
  std::vector<Vec1> out;
  out.reserve(accepted.size());
  for (auto& v : accepted) out.emplace_back(std::move(v));
  return out;
}

std::vector<Vec1> prototypes_for(const SynthConfig& cfg) {
  RngStream rng(cfg.seed, kPrototypeStream);
  return make_class_prototypes(cfg, rng);
}

SyntheticScene generate_scene(const SynthConfig& cfg, const std::vector<Vec1>& prototypes,
                              int class_id, RngStream& rng) {
  if (class_id < 0 || class_id >= cfg.num_classes ||
      static_cast<std::size_t>(class_id) >= prototypes.size()) {
    throw ConfigError("class id " + std::to_string(class_id) + " out of range", "class_id");
  }
  const auto c = static_cast<std::size_t>(cfg.latent_dim);
  const auto h = static_cast<std::size_t>(cfg.grid_h);
  const auto w = static_cast<std::size_t>(cfg.grid_w);

  // Rectangle with the grid's aspect ratio covering about frac of the area.
  const double side = std::sqrt(cfg.source_region_frac);
  const auto rect_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * h)), 1, h);
  const auto rect_w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * w)), 1, w);
  const std::size_t top = rng.uniform_index(h - rect_h + 1);
  const std::size_t left = rng.uniform_index(w - rect_w + 1);

  Grid3 image = Grid3::zeros(c, h, w);
  const auto& proto = prototypes[static_cast<std::size_t>(class_id)];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool inside = y >= top && y < top + rect_h && x >= left && x < left + rect_w;
      if (inside) {
        image.set_column(y, x, with_noise(proto.values(), cfg.feature_noise_std, rng));
      } else {
        image.set_column(y, x, with_noise(random_unit(c, rng), cfg.feature_noise_std, rng));
      }
    }
  }

  SyntheticScene scene;
  scene.class_id = class_id;
  scene.audio_class_id = class_id;
  if (cfg.faulty_positive_rate > 0.0 && rng.uniform() < cfg.faulty_positive_rate) {
    const auto other = rng.uniform_index(static_cast<std::uint64_t>(cfg.num_classes - 1));
    scene.audio_class_id = static_cast<int>(other) + (static_cast<int>(other) >= class_id ? 1 : 0);
    scene.is_faulty_positive = true;
  }
  scene.audio = Vec1(with_noise(prototypes[static_cast<std::size_t>(scene.audio_class_id)].values(),
                                cfg.feature_noise_std, rng));
  scene.image = std::move(image);
  scene.gt_region = Box{static_cast<double>(left) / static_cast<double>(w),
                        static_cast<double>(top) / static_cast<double>(h),
                        static_cast<double>(left + rect_w) / static_cast<double>(w),
                        static_cast<double>(top + rect_h) / static_cast<double>(h)};
  return scene;
}

SyntheticScene generate_scene(const SynthConfig& cfg, int class_id, RngStream& rng) {
  return generate_scene(cfg, prototypes_for(cfg), class_id, rng);
}

Split make_closed_split(const SynthConfig& cfg, const std::vector<int>& classes, RngStream& rng) {
  cfg.validate();
  check_classes(cfg, classes, "split.heard_classes");
  const auto prototypes = prototypes_for(cfg);
  Split split;
  split.heard_classes = classes;
  split.train = make_scenes(cfg, prototypes, classes, cfg.samples_per_class, true, "train",
                            kTrainTag, rng);
  split.heard_test = make_scenes(cfg, prototypes, classes, cfg.test_samples_per_class, false,
                                 "heard", kHeardTestTag, rng);
  return split;
}

Split make_split(const SynthConfig& cfg, const std::vector<int>& heard,
                 const std::vector<int>& unheard, RngStream& rng) {
  cfg.validate();
  check_classes(cfg, heard, "split.heard_classes");
  check_classes(cfg, unheard, "split.unheard_classes");
  for (int c : unheard) {
    if (std::find(heard.begin(), heard.end(), c) != heard.end()) {
      throw ConfigError("class " + std::to_string(c) + " is both heard and unheard",
                        "split.unheard_classes");
    }
  }
  Split split = make_closed_split(cfg, heard, rng);
  split.unheard_classes = unheard;
  split.unheard_test = make_scenes(cfg, prototypes_for(cfg), unheard, cfg.test_samples_per_class,
                                   false, "unheard", kUnheardTestTag, rng);
  return split;
}

std::size_t count_same_class_pairs(const std::vector<int>& class_ids) {
  std::unordered_map<int, std::size_t> counts;
  for (int c : class_ids) ++counts[c];
  std::size_t pairs = 0;
  for (const auto& [cls, k] : counts) pairs += k * (k - 1);
  return pairs;
}

std::vector<int> class_range(int begin, int end) {
  std::vector<int> out;
  for (int c = begin; c < end; ++c) out.push_back(c);
  return out;
}

}  // namespace mnce
