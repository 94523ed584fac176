#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace ntlab::lm {

enum class Objective { kNextWord, kMasked };

std::string_view to_string(Objective o);
Objective parse_objective(std::string_view s);

/// Decoder-style transformer shape. The embedding width is always
/// heads * head_dim.
struct ModelConfig {
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t head_dim = 64;
  std::size_t qk_dim = 0;  // per-head query/key width; 0 means head_dim
  std::size_t context = 1024;
  std::size_t vocab = 1024;       // D ordinary tokens, the output classes
  std::size_t special_tokens = 2;  // mask and pad rows of the input embedding
  std::size_t mlp_ratio = 4;
  Objective objective = Objective::kNextWord;
  /// Drop the diagonal from the attention sum (each position ignores itself).
  bool exclude_self = false;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;

  std::size_t embed_dim() const { return heads * head_dim; }
  std::size_t query_dim() const { return qk_dim == 0 ? head_dim : qk_dim; }
  std::size_t input_vocab() const { return vocab + special_tokens; }
  bool causal() const { return objective == Objective::kNextWord; }

  /// 2 layers, 4 heads of width 16, context 256.
  static ModelConfig desk(std::size_t vocab, Objective objective = Objective::kNextWord);
  /// 12 layers, 12 heads of width 64, context 1024.
  static ModelConfig paper(std::size_t vocab, Objective objective = Objective::kNextWord);
  static ModelConfig preset(std::string_view name, std::size_t vocab, Objective objective);

  std::string to_json() const;
  static ModelConfig from_json(std::string_view json);
  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form count of trainable scalars for a configuration.
std::size_t parameter_count(const ModelConfig& config);

}  // namespace ntlab::lm
