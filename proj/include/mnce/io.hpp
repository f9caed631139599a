#pragma once

// File formats: binary datasets and checkpoints, CSV emission, atomic writes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mnce/synthdata.hpp"
#include "mnce/trainer.hpp"

namespace mnce::io {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);

/// 16 lowercase hex digits.
std::string hex64(std::uint64_t v);

/// Shortest decimal form that reads back to the same double.
std::string format_double(double v);

/// Writes `path` by filling a sibling temp file and renaming it over the target.
/// Creates missing parent directories. Throws IoError.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

/// Whole-file read. Throws IoError.
std::string read_file(const std::filesystem::path& path);

/// Minimal CSV builder: header comments, then comma-separated rows.
class CsvWriter {
 public:
  explicit CsvWriter(std::string config_hash);

  void comment(std::string_view text);
  void row(const std::vector<std::string>& cells);
  const std::string& str() const noexcept { return out_; }

 private:
  std::string out_;
};

// ---------------------------------------------------------------------------
// Dataset file: magic "MNCEDATA", version, then the three scene lists of a Split
// plus its class sets.

std::string encode_dataset(const Split& split);
Split decode_dataset(std::string_view bytes);

// ---------------------------------------------------------------------------
// Checkpoint file: magic "MNCECKPT", version, the resolved config document,
// training progress, encoder weights and optimizer moments.

struct Checkpoint {
  std::string config_json;
  TrainState state;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

}  // namespace mnce::io
