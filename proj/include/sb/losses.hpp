#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sb/model.hpp"

namespace sb::losses {

enum class LossKind { neg_lm, encoder_cos, vision_att, audio_att, rand_att, hidden_cos, combined };

inline constexpr LossKind kAllKinds[] = {LossKind::neg_lm,   LossKind::encoder_cos, LossKind::vision_att,
                                         LossKind::audio_att, LossKind::rand_att,    LossKind::hidden_cos,
                                         LossKind::combined};

std::string to_string(LossKind kind);
/// Throws ValidationError for unknown names.
LossKind parse_loss_kind(const std::string& name);

/// 1-based layer indices, kept sorted and unique.
struct LayerSubset {
  std::vector<std::size_t> layers;

  static LayerSubset all();
  static LayerSubset band(std::size_t first, std::size_t last);
  /// Sorts, dedups and checks every index lies in 1..kLayers.
  static LayerSubset of(std::vector<std::size_t> layers);
  bool is_all() const { return layers.size() == model::kLayers; }
  std::string label() const;  // "1-2", "all", "1,3,5"
  bool operator==(const LayerSubset&) const = default;
};

struct LossSelector {
  LossKind kind = LossKind::combined;
  LayerSubset layer_subset = LayerSubset::all();
  std::uint64_t rand_seed = 0;
};

/// What a loss reads from the clean (unperturbed) forward pass.
struct Requirements {
  bool clean_embeddings = false;
  bool clean_activations = false;
  bool any_clean() const { return clean_embeddings || clean_activations; }
};
Requirements requirements(LossKind kind);

/// Target logits for the attention-randomization loss.
///
/// By default entries are drawn from a counter-based stream keyed by
/// (seed, step, layer, head). `override_target` replaces the sampled target with a
/// fixed matrix, which is treated as a constant.
struct RandTarget {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::function<Mat(std::size_t layer, std::size_t head, const Mat& logits)> override_target;

  /// Uniform(0,1) matrix of shape n x n for the given (1-based) layer and head.
  Mat uniform(std::size_t layer, std::size_t head, Eigen::Index n) const;
};

// ---- taped components ---------------------------------------------------------

/// Sum of log-probabilities of the gold answer tokens.
ad::Var neg_lm(ad::Tape& t, const model::TapedActivations& adv, const std::vector<int>& answer);
/// Mean row cosine of clean vs adversarial audio embeddings.
ad::Var encoder_cos(ad::Tape& t, ad::Var clean_embeddings, ad::Var adv_embeddings);
/// Sum of unmasked attention logits whose key column lies in `columns`.
ad::Var column_attention_sum(ad::Tape& t, const model::TapedActivations& adv, const LayerSubset& subset,
                             model::Range columns);
ad::Var vision_att(ad::Tape& t, const model::TapedActivations& adv, const LayerSubset& subset);
ad::Var audio_att(ad::Tape& t, const model::TapedActivations& adv, const LayerSubset& subset);
/// Row-wise KL(softmax(A) || softmax(A~)) summed over rows, with
/// A~ = (max - min) * U + min over the unmasked entries of the causal matrix A.
ad::Var randomized_kl(ad::Tape& t, ad::Var logits, const Mat& uniform);
/// Row-wise KL(softmax(A) || softmax(target)) with a constant target.
ad::Var fixed_target_kl(ad::Tape& t, ad::Var logits, const Mat& target);
ad::Var rand_att(ad::Tape& t, const model::TapedActivations& adv, const LayerSubset& subset,
                 const RandTarget& target);
/// Mean over subset layers of the mean per-position hidden-state cosine.
ad::Var hidden_cos(ad::Tape& t, const model::TapedActivations& clean, const model::TapedActivations& adv,
                   const LayerSubset& subset);
/// Plain sum of the six components over all layers.
ad::Var combined(ad::Tape& t, const model::TapedActivations& clean, const model::TapedActivations& adv,
                 const std::vector<int>& answer, const RandTarget& target);

// ---- selector-level entry points ----------------------------------------------------

/// Records the selected loss. `clean` is required when requirements(kind).any_clean().
ad::Var build(ad::Tape& t, const LossSelector& sel, const model::TapedActivations* clean,
              const model::TapedActivations& adv, const std::vector<int>& answer, std::uint64_t step);

/// Loss closure for model::grad_wrt_perturbation.
model::LossBuilder make_builder(const LossSelector& sel, const model::ModelActivations* clean,
                                const std::vector<int>& answer, std::uint64_t step);

/// Value of the selected loss on precomputed activations.
double evaluate(const LossSelector& sel, const model::ModelActivations* clean, const model::ModelActivations& adv,
                const std::vector<int>& answer, std::uint64_t step);

}  // namespace sb::losses
