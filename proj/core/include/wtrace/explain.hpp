#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wtrace/dataset.hpp"
#include "wtrace/ledger.hpp"
#include "wtrace/nn.hpp"
#include "wtrace/tensor.hpp"

namespace wtrace {

/// One training step's share of a layer's pre-activation for an input x.
///   gamma     = <d, delta f(x)>        (d is the pre-activation W f(x) unless a
///                                       direction is supplied)
///   magnitude = ||delta f(x)||
///   cosine    = gamma / (||d|| magnitude), 0 when either norm is 0
struct Contribution {
  std::uint64_t step = 0;
  double gamma = 0.0;
  double cosine = 0.0;
  double magnitude = 0.0;
  Provenance provenance;
};

struct ExplainOptions {
  /// Skip records with step < min_step (the initialization record is step 0).
  std::uint64_t min_step = 0;
  /// Replaces the pre-activation as the projection direction. Must have as
  /// many elements as the layer's pre-activation.
  std::optional<Tensor> direction;
  std::size_t replay_chunk = 64;
};

using ContributionSink = std::function<void(std::size_t input_index, const Contribution&)>;

/// Replays the layer's records once and reports each record's contribution for
/// every input (inputs in per-example feature shape). Factored records are
/// applied as u (v^T f) without forming the dense delta.
/// Throws ArchMismatchError on a foreign ledger and IndexError for an
/// untracked layer.
void for_each_contribution(const Model& model, const Ledger& ledger, std::span<const Tensor> inputs,
                           std::uint16_t layer_id, const ExplainOptions& options, const ContributionSink& sink);

std::vector<Contribution> contributions(const Model& model, const Ledger& ledger, const Tensor& x,
                                        std::uint16_t layer_id, const ExplainOptions& options = {});

using ScoredExample = std::pair<ExampleId, double>;

struct InfluenceReport {
  std::uint16_t layer_id = 0;
  std::string input_digest;
  bool include_init = true;
  std::uint64_t min_step = 0;
  std::size_t k = 0;
  /// Summed gamma per training example that appears in any provenance, by id.
  std::vector<ScoredExample> gamma;
  /// Highest k entries of `gamma`, descending, ties by ascending id.
  std::vector<ScoredExample> top_k;
  /// Sum of every contribution's gamma; the init record counts only when
  /// include_init is set.
  double gamma_total = 0.0;
  double init_gamma = 0.0;
  /// <d, W f(x)>: ||W f(x)||^2 without a direction.
  double target = 0.0;
  std::uint64_t records = 0;
  std::vector<std::string> warnings;

  friend bool operator==(const InfluenceReport&, const InfluenceReport&) = default;
};

struct InfluenceOptions {
  std::size_t k = 10;
  bool include_init = true;
  ExplainOptions explain;
};

InfluenceReport compute_influence(const Model& model, const Ledger& ledger, const Tensor& x, std::uint16_t layer_id,
                                  const InfluenceOptions& options = {});
/// One replay serving several inputs.
std::vector<InfluenceReport> compute_influence(const Model& model, const Ledger& ledger, std::span<const Tensor> inputs,
                                               std::uint16_t layer_id, const InfluenceOptions& options = {});

/// Orders by descending score, ties by ascending id, and keeps the first k.
std::vector<ScoredExample> top_k(std::vector<ScoredExample> scores, std::size_t k);

struct KdeSample {
  double value = 0.0;
  double weight = 0.0;
  friend bool operator==(const KdeSample&, const KdeSample&) = default;
};

/// `points` evenly spaced values from lo to hi inclusive.
std::vector<double> make_grid(double lo = -1.0, double hi = 1.0, std::size_t points = 201);

/// Weighted Gaussian kernel density on `grid`:
///   density(g) = sum_i w_i K((g - v_i) / bw) / (bw sum_i w_i)
/// Throws EmptyEstimateError when the weights sum to zero, ConfigError when
/// bandwidth <= 0.
std::vector<double> kde(std::span<const KdeSample> samples, double bandwidth, std::span<const double> grid);

/// Reserved group for records without a single class (init, mixed batches).
inline constexpr ClassId kUnattributedClass = -1;

struct ClassRidge {
  ClassId class_id = 0;
  double probability = 0.0;
  std::vector<KdeSample> samples;  ///< (cosine, magnitude) per record
  std::vector<double> density;     ///< empty when no sample has positive weight
  double mass_center = 0.0;        ///< magnitude-weighted mean cosine, 0 when empty
  friend bool operator==(const ClassRidge&, const ClassRidge&) = default;
};

struct RidgeData {
  std::uint16_t layer_id = 0;
  std::string input_digest;
  ClassId predicted_class = 0;
  double bandwidth = 0.1;
  std::vector<double> grid;
  std::vector<double> probabilities;  ///< softmax over the model's logits
  std::vector<ClassId> shown_classes; ///< top min(10, C) by probability
  std::vector<ClassRidge> classes;    ///< one per class id, 0..C-1
  ClassRidge unattributed;            ///< init and mixed-class records
  std::vector<std::string> warnings;

  const ClassRidge& ridge(ClassId c) const { return classes.at(static_cast<std::size_t>(c)); }
  friend bool operator==(const RidgeData&, const RidgeData&) = default;
};

struct RidgeOptions {
  double bandwidth = 0.1;
  std::size_t grid_points = 201;
  std::size_t max_shown = 10;
  ExplainOptions explain;
};

RidgeData ridge_data(const Model& model, const Ledger& ledger, const Tensor& x, std::uint16_t layer_id,
                     const RidgeOptions& options = {});
std::vector<RidgeData> ridge_data(const Model& model, const Ledger& ledger, std::span<const Tensor> inputs,
                                  std::uint16_t layer_id, const RidgeOptions& options = {});

/// Hex SHA-256 of an input's shape and float bytes.
std::string input_digest(const Tensor& x);

/// "0 (linear 784 256), 1 (linear 256 10)"
std::string describe_tracked_layers(const Model& model);

/// Canonical JSON (sorted keys, shortest round-trip floats). The schema is
/// documented in docs/json-schema.md.
std::string to_json(const InfluenceReport& report);
std::string to_json(const RidgeData& ridge);
InfluenceReport influence_from_json(const std::string& text);
RidgeData ridge_from_json(const std::string& text);

}  // namespace wtrace
