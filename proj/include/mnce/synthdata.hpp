#pragma once

// Synthetic audio-visual scenes with a planted sound source and controllable
// noisy correspondences.
//
// Every class owns a unit prototype vector. A scene's image is a c x h x w
// grid whose columns inside the planted rectangle are the class prototype
// plus Gaussian noise; the remaining columns are fresh random unit vectors
// plus noise. The paired audio is the prototype plus noise. Two kinds of
// corrupted correspondence can be dialled in:
//  - faulty positives: with probability `faulty_positive_rate` the audio is
//    taken from a different, uniformly chosen class;
//  - faulty negatives: arise naturally when a batch holds several scenes of
//    the same class, so their frequency is set by num_classes and batch size.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mnce/metrics.hpp"
#include "mnce/numerics.hpp"

namespace mnce {

struct SynthConfig {
  int num_classes = 10;
  int latent_dim = 16;
  int grid_h = 6;
  int grid_w = 6;
  double source_region_frac = 0.5;
  double faulty_positive_rate = 0.2;
  double feature_noise_std = 0.15;
  int samples_per_class = 64;
  int test_samples_per_class = 20;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct SyntheticScene {
  std::string id;
  Grid3 image;
  Vec1 audio;
  Box gt_region;
  int class_id = 0;
  int audio_class_id = 0;  ///< class the audio was drawn from
  bool is_faulty_positive = false;

  bool operator==(const SyntheticScene&) const = default;
};

/// Unit prototypes with pairwise |cos| <= 0.3, by rejection sampling.
/// Throws ConfigError after 1e5 rejected draws.
std::vector<Vec1> make_class_prototypes(const SynthConfig& cfg, RngStream& rng);

/// Prototypes for cfg.seed on the fixed prototype stream. Every split of
/// the same seed shares them.
std::vector<Vec1> prototypes_for(const SynthConfig& cfg);

SyntheticScene generate_scene(const SynthConfig& cfg, const std::vector<Vec1>& prototypes,
                              int class_id, RngStream& rng);

/// Convenience overload that derives the prototypes from cfg.seed.
SyntheticScene generate_scene(const SynthConfig& cfg, int class_id, RngStream& rng);

struct Split {
  std::vector<int> heard_classes;
  std::vector<int> unheard_classes;
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> heard_test;
  std::vector<SyntheticScene> unheard_test;
};

/// Train and heard-test scenes come from `heard` only, unheard-test from
/// `unheard` only. Faulty positives are injected into train only. Test sets
/// are interleaved class by class, so every run of consecutive
/// |classes| scenes holds each class once.
/// Throws ConfigError if the sets overlap, are empty or name unknown classes.
Split make_split(const SynthConfig& cfg, const std::vector<int>& heard,
                 const std::vector<int>& unheard, RngStream& rng);

/// Same as make_split without an unheard set; unheard_test stays empty.
Split make_closed_split(const SynthConfig& cfg, const std::vector<int>& classes, RngStream& rng);

/// Number of ordered pairs (i, j), i != j, with equal class ids.
std::size_t count_same_class_pairs(const std::vector<int>& class_ids);

/// 0, 1, ..., n-1.
std::vector<int> class_range(int begin, int end);

}  // namespace mnce
