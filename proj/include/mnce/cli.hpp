#pragma once

// Command-line front end: config documents, subcommands and their outputs.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "mnce/trainer.hpp"

namespace mnce::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitNumerical = 3,
  kExitIo = 4,
};

struct SweepOptions {
  std::vector<double> margins = default_sweep_margins();
  int num_seeds = 10;
  std::uint64_t first_seed = 1;
  unsigned threads = 1;

  std::vector<std::uint64_t> seeds() const;
};

/// The unified configuration document.
struct RunConfig {
  ExperimentConfig experiment;
  SweepOptions sweep;
  std::string output_dir = "out";
};

/// Defaults for every field; the loss margin is -0.2.
RunConfig default_config();

/// Parses a JSON document over the defaults. The "synth" and "train"
/// sections are required; unknown keys are rejected. Throws ConfigError
/// naming the field.
RunConfig parse_config(std::string_view json_text);

/// Pretty-printed JSON with every field resolved.
std::string dump_config(const RunConfig& cfg);

/// FNV-1a of the canonical config document, excluding output_dir and
/// sweep.threads (neither changes any result).
std::string config_hash(const RunConfig& cfg);

/// Runs the command line. Returns one of ExitCode.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mnce::cli
