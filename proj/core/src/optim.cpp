#include "wtrace/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "json.hpp"
#include "wtrace/error.hpp"

namespace wtrace {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "nesterov"; }

OptimizerKind parse_optimizer_kind(std::string_view text) {
  if (text == "sgd") return OptimizerKind::kSgd;
  if (text == "nesterov") return OptimizerKind::kNesterov;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (expected sgd or nesterov)");
}

void OptimizerConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be positive, got " + std::to_string(lr0));
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
    throw ConfigError("decay_factor must lie in (0, 1], got " + std::to_string(decay_factor));
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1), got " + std::to_string(momentum));
  if (decay_every_epochs == 0) throw ConfigError("decay_every_epochs must be at least 1");
}

double lr_at(const OptimizerConfig& config, std::uint32_t epoch) {
  return config.lr0 * std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_every_epochs));
}

namespace {

void check_finite(const Tensor& grad, std::uint64_t step) {
  if (!grad.all_finite()) throw NumericError(step, "non-finite gradient at step " + std::to_string(step));
}

// Applies w += update(i) and returns the realized per-element difference.
template <class F>
Tensor apply_update(Tensor& weight, F&& update) {
  Tensor delta(weight.shape());
  auto w = weight.data();
  auto d = delta.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const float before = w[i];
    w[i] = before + update(i);
    d[i] = w[i] - before;
  }
  return delta;
}

}  // namespace

Tensor sgd_step(Tensor& weight, const Tensor& grad, double lr, std::uint64_t step) {
  if (weight.shape() != grad.shape()) {
    throw DimensionError("sgd_step: weight " + shape_str(weight.shape()) + " vs grad " + shape_str(grad.shape()));
  }
  check_finite(grad, step);
  const auto g = grad.data();
  return apply_update(weight, [&](std::size_t i) { return static_cast<float>(-lr * g[i]); });
}

Tensor nesterov_step(Tensor& weight, Tensor& velocity, const Tensor& grad, double lr, double momentum,
                     std::uint64_t step) {
  if (weight.shape() != grad.shape() || velocity.shape() != grad.shape()) {
    throw DimensionError("nesterov_step: weight " + shape_str(weight.shape()) + ", velocity " +
                         shape_str(velocity.shape()) + ", grad " + shape_str(grad.shape()));
  }
  check_finite(grad, step);
  const auto g = grad.data();
  auto v = velocity.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(momentum * v[i] + g[i]);
  return apply_update(weight, [&](std::size_t i) { return static_cast<float>(-lr * (g[i] + momentum * v[i])); });
}

std::vector<Tensor> sgd_step(Model& model, const std::vector<Tensor>& grads, double lr, std::uint64_t step) {
  if (grads.size() != model.tracked_count()) {
    throw DimensionError("expected " + std::to_string(model.tracked_count()) + " gradients, got " +
                         std::to_string(grads.size()));
  }
  std::vector<Tensor> deltas;
  for (std::size_t l = 0; l < grads.size(); ++l) deltas.push_back(sgd_step(model.mutable_weight(l), grads[l], lr, step));
  return deltas;
}

std::string TrainReport::to_json(bool with_timings) const {
  nlohmann::json j;
  j["steps"] = steps;
  j["records"] = records;
  j["ledger_bytes"] = ledger_bytes;
  if (test_accuracy >= 0.0) j["test_accuracy"] = test_accuracy;
  auto& arr = j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json row{{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"accuracy", e.accuracy}};
    if (with_timings) row["seconds"] = e.seconds;
    arr.push_back(std::move(row));
  }
  return j.dump(2);
}

double evaluate_accuracy(const Model& model, const Dataset& ds, std::size_t chunk) {
  if (ds.empty()) return 0.0;
  std::size_t correct = 0;
  std::vector<ExampleId> ids;
  for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
    const auto end = std::min(ds.size(), begin + chunk);
    ids.clear();
    for (auto i = begin; i < end; ++i) ids.push_back(static_cast<ExampleId>(i));
    const auto logits = predict(model, ds.gather(ids));
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const auto row = logits.row(r);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      if (best == ds.label(ids[r])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

LedgerManifest make_manifest(const Model& model, const Dataset& ds) {
  LedgerManifest m;
  m.arch_hash = model.arch_hash();
  m.layer_shapes = model.weight_shapes();
  m.dataset_digest = ds.digest();
  return m;
}

TrainReport train(Model& model, const Dataset& ds, const BatchPlan& plan, const OptimizerConfig& config,
                  Ledger* ledger, const TrainOptions& options) {
  config.validate();
  if (plan.epochs != config.epochs) {
    throw ConfigError("plan covers " + std::to_string(plan.epochs) + " epochs but the optimizer is configured for " +
                      std::to_string(config.epochs));
  }
  if (ds.class_count() != model.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(ds.class_count()) + " classes, model outputs " +
                      std::to_string(model.num_classes()));
  }
  if (ledger) {
    if (ledger->record_count() != 0) throw ConfigError("training needs an empty ledger");
    ledger->check_arch(model.arch_hash());
    if (ledger->manifest().layer_shapes != model.weight_shapes()) {
      throw ArchMismatchError("ledger layer shapes do not match the model");
    }
  }

  const std::size_t tracked = model.tracked_count();
  std::vector<bool> is_linear(tracked);
  for (std::size_t l = 0; l < tracked; ++l) is_linear[l] = model.tracked_spec(l).kind == LayerKind::kLinear;

  TrainReport report;
  if (ledger) {
    for (std::size_t l = 0; l < tracked; ++l) {
      ledger->append(StepRecord::make_dense(0, static_cast<std::uint16_t>(l), model.weight(l),
                                            Provenance::initialization(), 0.0f, 0));
    }
  }

  std::vector<Tensor> velocity;
  if (config.kind == OptimizerKind::kNesterov) {
    for (std::size_t l = 0; l < tracked; ++l) velocity.emplace_back(model.weight(l).shape(), 0.0f);
  }

  ForwardOptions fopts;
  fopts.mode = Mode::kTrain;
  fopts.variant = options.bn_variant;

  using Clock = std::chrono::steady_clock;
  std::size_t s = 0;
  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = Clock::now();
    const double lr = lr_at(config, epoch);
    double loss_sum = 0.0;
    std::size_t rows = 0, correct = 0;
    for (; s < plan.steps.size() && plan.steps[s].epoch == epoch; ++s) {
      const auto& ps = plan.steps[s];
      const std::uint64_t step = s + 1;
      const Tensor batch = ds.gather(ps.batch);
      Tensor ghost;
      if (!ps.ghost.empty()) ghost = ds.gather(ps.ghost);
      std::vector<ClassId> labels;
      labels.reserve(ps.batch.size());
      for (auto id : ps.batch) labels.push_back(ds.label(id));

      const auto fr = forward(model, batch, ps.ghost.empty() ? nullptr : &ghost, fopts);
      const auto loss = softmax_cross_entropy(fr.logits, labels);
      if (!std::isfinite(loss.loss)) throw NumericError(step, "non-finite loss at step " + std::to_string(step));
      loss_sum += loss.loss * static_cast<double>(labels.size());
      rows += labels.size();
      for (std::size_t r = 0; r < labels.size(); ++r) {
        const auto row = fr.logits.row(r);
        if (std::max_element(row.begin(), row.end()) - row.begin() == labels[r]) ++correct;
      }
      const auto grads = backward(model, fr, loss.grad);

      Provenance prov{ProvenanceKind::kExamples, ps.batch, ps.batch_class, ps.ghost};
      for (std::size_t l = 0; l < tracked; ++l) {
        Tensor& w = model.mutable_weight(l);
        Tensor realized = config.kind == OptimizerKind::kSgd
                              ? sgd_step(w, grads[l].dense, lr, step)
                              : nesterov_step(w, velocity[l], grads[l].dense, lr, config.momentum, step);
        if (!ledger) continue;
        const auto layer = static_cast<std::uint16_t>(l);
        const std::size_t out = w.dim(0), in = w.dim(1), r = grads[l].grad_output.dim(0);
        const bool factor = options.factored && config.kind == OptimizerKind::kSgd && is_linear[l] &&
                            (out + in) * r < out * in;
        if (factor) {
          Tensor u = transpose(grads[l].grad_output);
          for (auto& x : u.data()) x = static_cast<float>(-lr * x);
          ledger->append(StepRecord::make_factored(step, layer, std::move(u), transpose(grads[l].input), prov,
                                                   static_cast<float>(lr), epoch));
        } else {
          ledger->append(StepRecord::make_dense(step, layer, std::move(realized), prov, static_cast<float>(lr), epoch));
        }
      }
    }
    EpochStats es;
    es.epoch = epoch;
    es.lr = lr;
    es.loss = rows ? loss_sum / static_cast<double>(rows) : 0.0;
    es.accuracy = rows ? static_cast<double>(correct) / static_cast<double>(rows) : 0.0;
    es.seconds = std::chrono::duration<double>(Clock::now() - started).count();
    report.epochs.push_back(es);
    if (options.on_epoch) options.on_epoch(es);
  }
  if (s != plan.steps.size()) throw ConfigError("plan steps are not grouped by ascending epoch");

  report.steps = plan.steps.size();
  if (ledger) {
    report.records = ledger->record_count();
    report.ledger_bytes = ledger->sizes().total();
  }
  if (options.test_set) report.test_accuracy = evaluate_accuracy(model, *options.test_set);
  return report;
}

}  // namespace wtrace
