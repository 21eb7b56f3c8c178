#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "wtrace/dataset.hpp"
#include "wtrace/ledger.hpp"
#include "wtrace/nn.hpp"
#include "wtrace/tensor.hpp"

namespace wtrace {

enum class OptimizerKind : std::uint8_t { kSgd, kNesterov };

std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(std::string_view text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double momentum = 0.0;  // kNesterov only
  double lr0 = 0.01;
  double decay_factor = 1.0;
  std::uint32_t decay_every_epochs = 1;
  std::uint32_t epochs = 1;

  /// Throws ConfigError unless lr0 > 0, 0 < decay_factor <= 1, 0 <= momentum < 1.
  void validate() const;
};

/// Step decay: lr0 * decay_factor^floor(epoch / decay_every_epochs).
double lr_at(const OptimizerConfig& config, std::uint32_t epoch);

/// w += -lr * grad. Returns the realized difference (w_after - w_before).
/// Throws NumericError tagged with `step` on a non-finite gradient.
Tensor sgd_step(Tensor& weight, const Tensor& grad, double lr, std::uint64_t step = 0);

/// v <- momentum * v + grad; w += -lr * (grad + momentum * v).
Tensor nesterov_step(Tensor& weight, Tensor& velocity, const Tensor& grad, double lr, double momentum,
                     std::uint64_t step = 0);

/// sgd_step over every tracked layer of `model`; one delta per layer.
std::vector<Tensor> sgd_step(Model& model, const std::vector<Tensor>& grads, double lr, std::uint64_t step = 0);

struct EpochStats {
  std::uint32_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;      // mean over the epoch's batch rows
  double accuracy = 0.0;  // training-mode predictions
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double test_accuracy = -1.0;  // -1 when no test set was given
  std::uint64_t steps = 0;
  std::uint64_t records = 0;
  std::uint64_t ledger_bytes = 0;

  /// Canonical JSON. Wall-clock fields are omitted when `with_timings` is false,
  /// which leaves a document that is identical across repeated runs.
  std::string to_json(bool with_timings = true) const;
};

struct TrainOptions {
  BnVariant bn_variant = BnVariant::kWeighted;
  const Dataset* test_set = nullptr;
  /// Store plain-SGD linear-layer deltas as low-rank factors when smaller.
  bool factored = true;
  std::function<void(const EpochStats&)> on_epoch;
};

/// Runs `plan` on `model`. With a ledger, writes the initial weights as step 0
/// and one record per tracked layer for every plan step (steps 1..T). A null
/// ledger gives an untracked control run.
TrainReport train(Model& model, const Dataset& ds, const BatchPlan& plan, const OptimizerConfig& config,
                  Ledger* ledger, const TrainOptions& options = {});

/// Fraction of examples whose argmax prediction matches the label.
double evaluate_accuracy(const Model& model, const Dataset& ds, std::size_t chunk = 256);

/// Manifest describing `model` trained on `ds`.
LedgerManifest make_manifest(const Model& model, const Dataset& ds);

}  // namespace wtrace
