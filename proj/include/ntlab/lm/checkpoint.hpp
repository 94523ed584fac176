#pragma once

#include <filesystem>
#include <string>

#include "ntlab/lm/params.hpp"

namespace ntlab::lm {

/// A checkpoint is two files sharing a stem: STEM.bin holds an 8-byte magic,
/// a u64 scalar count and every tensor as little-endian float64 in
/// Params::for_each order; STEM.json holds the config, tensor shapes and the
/// caller-supplied training manifest.
struct CheckpointPaths {
  std::filesystem::path blob, meta;
};

/// Accepts the stem or either of the two file names.
CheckpointPaths checkpoint_paths(const std::filesystem::path& path);

void save_checkpoint(const Params<double>& params, const std::filesystem::path& path,
                     const std::string& training_manifest_json = "{}");

Params<double> load_checkpoint(const std::filesystem::path& path);

/// Training manifest stored with a checkpoint, as JSON text.
std::string checkpoint_manifest(const std::filesystem::path& path);

}  // namespace ntlab::lm
