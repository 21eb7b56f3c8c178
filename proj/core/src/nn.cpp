#include "wtrace/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include "json.hpp"

#include "bytes.hpp"
#include "wtrace/digest.hpp"
#include "wtrace/error.hpp"
#include "wtrace/rng.hpp"

namespace wtrace {

std::string_view to_string(BnVariant v) {
  switch (v) {
    case BnVariant::kWeighted: return "weighted";
    case BnVariant::kLiteral: return "literal";
    case BnVariant::kBatchOnly: return "batch_only";
  }
  return "weighted";
}

BnVariant parse_bn_variant(std::string_view text) {
  if (text == "weighted") return BnVariant::kWeighted;
  if (text == "literal") return BnVariant::kLiteral;
  if (text == "batch_only") return BnVariant::kBatchOnly;
  throw ConfigError("unknown batch-norm variant '" + std::string(text) + "' (weighted|literal|batch_only)");
}

// ---------------------------------------------------------------------------
// LayerSpec

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::kLinear;
  s.in = in;
  s.out = out;
  s.validate();
  return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw,
                            std::size_t stride, std::size_t pad) {
  LayerSpec s;
  s.kind = LayerKind::kConv2d;
  s.in = in_ch;
  s.out = out_ch;
  s.kh = kh;
  s.kw = kw;
  s.stride = stride;
  s.pad = pad;
  s.validate();
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::ghost_batchnorm(std::size_t features, double eps, double running_momentum) {
  LayerSpec s;
  s.kind = LayerKind::kGhostBatchNorm;
  s.features = features;
  s.eps = eps;
  s.running_momentum = running_momentum;
  s.validate();
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::kFlatten;
  return s;
}

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::kLinear:
      if (in == 0 || out == 0) throw ConfigError("linear layer needs positive in/out sizes");
      break;
    case LayerKind::kConv2d:
      if (in == 0 || out == 0 || kh == 0 || kw == 0 || stride == 0) {
        throw ConfigError("conv2d layer needs positive channels, kernel and stride");
      }
      break;
    case LayerKind::kGhostBatchNorm:
      if (features == 0) throw ConfigError("ghost_bn needs a positive feature count");
      if (!(eps > 0.0)) throw ConfigError("ghost_bn eps must be > 0");
      if (!(running_momentum > 0.0 && running_momentum <= 1.0)) {
        throw ConfigError("ghost_bn running_momentum must lie in (0, 1]");
      }
      break;
    case LayerKind::kRelu:
    case LayerKind::kFlatten: break;
  }
}

LayerSpec LayerSpec::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string name;
  in >> name;
  std::vector<std::string> args;
  for (std::string a; in >> a;) args.push_back(a);
  auto nat = [&](std::size_t i) -> std::size_t {
    if (i >= args.size()) throw ConfigError("layer '" + std::string(text) + "': missing argument " + std::to_string(i + 1));
    char* end = nullptr;
    const auto v = std::strtoull(args[i].c_str(), &end, 10);
    if (*end != '\0') throw ConfigError("layer '" + std::string(text) + "': '" + args[i] + "' is not a natural number");
    return static_cast<std::size_t>(v);
  };
  auto real = [&](std::size_t i, double fallback) -> double {
    if (i >= args.size()) return fallback;
    char* end = nullptr;
    const double v = std::strtod(args[i].c_str(), &end);
    if (*end != '\0') throw ConfigError("layer '" + std::string(text) + "': '" + args[i] + "' is not a number");
    return v;
  };
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (args.size() < lo || args.size() > hi) {
      throw ConfigError("layer '" + std::string(text) + "': expected " + std::to_string(lo) + ".." +
                        std::to_string(hi) + " arguments");
    }
  };
  if (name == "linear") {
    arity(2, 2);
    return linear(nat(0), nat(1));
  }
  if (name == "conv2d") {
    arity(4, 6);
    return conv2d(nat(0), nat(1), nat(2), nat(3), args.size() > 4 ? nat(4) : 1, args.size() > 5 ? nat(5) : 0);
  }
  if (name == "relu") {
    arity(0, 0);
    return relu();
  }
  if (name == "ghost_bn") {
    arity(1, 3);
    return ghost_batchnorm(nat(0), real(1, 1e-5), real(2, 0.1));
  }
  if (name == "flatten") {
    arity(0, 0);
    return flatten();
  }
  throw ConfigError("unknown layer kind '" + name + "' (linear|conv2d|relu|ghost_bn|flatten)");
}

std::string LayerSpec::describe() const {
  switch (kind) {
    case LayerKind::kLinear: return fmt::format("linear {} {}", in, out);
    case LayerKind::kConv2d: return fmt::format("conv2d {} {} {} {} {} {}", in, out, kh, kw, stride, pad);
    case LayerKind::kRelu: return "relu";
    case LayerKind::kGhostBatchNorm: return fmt::format("ghost_bn {} {} {}", features, eps, running_momentum);
    case LayerKind::kFlatten: return "flatten";
  }
  return "";
}

// ---------------------------------------------------------------------------
// Model

Model::Model(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed)
    : layers_(std::move(layers)), input_shape_(std::move(input_shape)), seed_(seed) {
  infer_shapes();
  Rng rng(seed);
  for (std::size_t t = 0; t < tracked_layers_.size(); ++t) {
    auto& w = weights_[t];
    const double bound = std::sqrt(6.0 / static_cast<double>(w.dim(1)));
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  }
}

void Model::infer_shapes() {
  if (layers_.empty()) throw ConfigError("model needs at least one layer");
  if (input_shape_.empty() || shape_numel(input_shape_) == 0) throw ConfigError("model input shape must be non-empty");
  activation_shapes_.clear();
  tracked_layers_.clear();
  weights_.clear();
  bn_.assign(layers_.size(), std::nullopt);
  Shape cur = input_shape_;
  activation_shapes_.push_back(cur);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    l.validate();
    const auto where = "layer " + std::to_string(i) + " (" + l.describe() + ")";
    switch (l.kind) {
      case LayerKind::kLinear:
        if (shape_numel(cur) != l.in) {
          throw DimensionError(where + " expects " + std::to_string(l.in) + " inputs, receives " + shape_str(cur));
        }
        tracked_layers_.push_back(i);
        weights_.emplace_back(Shape{l.out, l.in});
        cur = {l.out};
        break;
      case LayerKind::kConv2d: {
        if (cur.size() != 3 || cur[0] != l.in) {
          throw DimensionError(where + " expects " + std::to_string(l.in) + " x H x W, receives " + shape_str(cur));
        }
        ConvGeometry g{cur[0], cur[1], cur[2], l.kh, l.kw, l.stride, l.pad};
        g.validate();
        tracked_layers_.push_back(i);
        weights_.emplace_back(Shape{l.out, g.patch_size()});
        cur = {l.out, g.out_height(), g.out_width()};
        break;
      }
      case LayerKind::kGhostBatchNorm: {
        const bool per_feature = shape_numel(cur) == l.features && cur.size() == 1;
        const bool per_channel = cur.size() == 3 && cur[0] == l.features;
        if (!per_feature && !per_channel) {
          throw DimensionError(where + " has " + std::to_string(l.features) + " features, receives " + shape_str(cur));
        }
        bn_[i] = BnState{Tensor({l.features}, 0.0f), Tensor({l.features}, 1.0f)};
        break;
      }
      case LayerKind::kFlatten: cur = {shape_numel(cur)}; break;
      case LayerKind::kRelu: break;
    }
    activation_shapes_.push_back(cur);
  }
  if (cur.size() != 1) throw DimensionError("network output must be a vector of logits, got " + shape_str(cur));
  num_classes_ = cur[0];
}

std::string Model::layers_describe() const {
  std::string out;
  for (const auto& l : layers_) out += l.describe() + "\n";
  return out;
}

bool Model::bn_equal(const Model& other) const {
  if (bn_.size() != other.bn_.size()) return false;
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    if (bn_[i].has_value() != other.bn_[i].has_value()) return false;
    if (bn_[i] && (bn_[i]->running_mean != other.bn_[i]->running_mean ||
                   bn_[i]->running_var != other.bn_[i]->running_var)) {
      return false;
    }
  }
  return true;
}

std::string Model::arch_hash() const { return sha256_hex(layers_describe()); }

std::size_t Model::layer_index(std::size_t tracked_id) const {
  if (tracked_id >= tracked_layers_.size()) {
    throw IndexError("tracked layer " + std::to_string(tracked_id) + " does not exist (model has " +
                     std::to_string(tracked_layers_.size()) + ")");
  }
  return tracked_layers_[tracked_id];
}

const Tensor& Model::weight(std::size_t tracked_id) const {
  layer_index(tracked_id);
  return weights_[tracked_id];
}

Tensor& Model::mutable_weight(std::size_t tracked_id) {
  layer_index(tracked_id);
  ++version_;
  return weights_[tracked_id];
}

void Model::set_weight(std::size_t tracked_id, Tensor w) {
  auto& dst = mutable_weight(tracked_id);
  if (w.shape() != dst.shape()) {
    throw DimensionError("weight for tracked layer " + std::to_string(tracked_id) + " must be " +
                         shape_str(dst.shape()) + ", got " + shape_str(w.shape()));
  }
  dst = std::move(w);
}

std::vector<Shape> Model::weight_shapes() const {
  std::vector<Shape> out;
  for (const auto& w : weights_) out.push_back(w.shape());
  return out;
}

ConvGeometry Model::conv_geometry(std::size_t tracked_id) const {
  const auto i = layer_index(tracked_id);
  const auto& l = layers_[i];
  if (l.kind != LayerKind::kConv2d) throw ConfigError("tracked layer " + std::to_string(tracked_id) + " is not conv2d");
  const auto& s = activation_shapes_[i];
  return ConvGeometry{s[0], s[1], s[2], l.kh, l.kw, l.stride, l.pad};
}

bool Model::has_batchnorm() const noexcept {
  return std::any_of(bn_.begin(), bn_.end(), [](const auto& b) { return b.has_value(); });
}

BnState& Model::bn_state(std::size_t layer_index) {
  if (layer_index >= bn_.size() || !bn_[layer_index]) {
    throw IndexError("layer " + std::to_string(layer_index) + " is not a batch-norm layer");
  }
  return *bn_[layer_index];
}

const BnState& Model::bn_state(std::size_t layer_index) const {
  return const_cast<Model*>(this)->bn_state(layer_index);
}

// ---------------------------------------------------------------------------
// Ghost batch norm

MeanVar ghost_batchnorm_combine(const Tensor& mu_ghost, const Tensor& var_ghost, const Tensor& mu_batch,
                                const Tensor& var_batch, std::size_t ghost_count, BnVariant variant) {
  if (ghost_count < 1) throw ConfigError("ghost_batchnorm_combine needs at least one ghost example");
  const auto f = mu_ghost.size();
  if (var_ghost.size() != f || mu_batch.size() != f || var_batch.size() != f) {
    throw DimensionError("ghost_batchnorm_combine: statistic lengths differ");
  }
  const double g = static_cast<double>(ghost_count);
  const double c = g / (1.0 + g);
  MeanVar out{Tensor({f}), Tensor({f})};
  for (std::size_t j = 0; j < f; ++j) {
    const double mg = mu_ghost[j], mb = mu_batch[j], vg = var_ghost[j], vb = var_batch[j];
    const double d = mg - mb;
    double mu = 0.0, var = 0.0;
    switch (variant) {
      case BnVariant::kLiteral:
        mu = mg + (mg - mb) / (1.0 + g);
        var = c * vg + vb + c * d * d / (1.0 + g);
        break;
      case BnVariant::kWeighted:
      case BnVariant::kBatchOnly:
        mu = mg + (mb - mg) / (1.0 + g);
        var = c * vg + vb / (1.0 + g) + c * d * d / (1.0 + g);
        break;
    }
    out.mean[j] = static_cast<float>(mu);
    out.var[j] = static_cast<float>(var);
  }
  return out;
}

namespace {

// Normalize `x` in place with per-feature statistics; returns denominators.
std::vector<double> normalize_rows(Tensor& x, const Tensor& mean, const Tensor& var, double eps) {
  const std::size_t f = mean.size();
  std::vector<double> denom(f);
  for (std::size_t j = 0; j < f; ++j) denom[j] = std::sqrt(std::max(0.0, static_cast<double>(var[j]))) + eps;
  if (x.empty()) return denom;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < f; ++j) r[j] = static_cast<float>((r[j] - static_cast<double>(mean[j])) / denom[j]);
  }
  return denom;
}

void update_running(BnState& state, const Tensor& mean, const Tensor& var, double momentum) {
  for (std::size_t j = 0; j < mean.size(); ++j) {
    state.running_mean[j] =
        static_cast<float>((1.0 - momentum) * state.running_mean[j] + momentum * static_cast<double>(mean[j]));
    state.running_var[j] =
        static_cast<float>((1.0 - momentum) * state.running_var[j] + momentum * static_cast<double>(var[j]));
  }
}

MeanVar train_statistics(const Tensor& x_batch, const Tensor& x_ghost, std::size_t ghost_examples, BnVariant variant) {
  const auto batch_stats = mean_var(x_batch);
  if (variant == BnVariant::kBatchOnly) return batch_stats;
  if (ghost_examples < 2) {
    throw ConfigError("ghost batch norm in training needs a ghost sample of at least 2 examples, got " +
                      std::to_string(ghost_examples));
  }
  const auto ghost_stats = mean_var(x_ghost);
  return ghost_batchnorm_combine(ghost_stats.mean, ghost_stats.var, batch_stats.mean, batch_stats.var,
                                 ghost_examples, variant);
}

}  // namespace

GhostBnOutput ghost_batchnorm_forward(const Tensor& x_batch, const Tensor& x_ghost, BnState& state, double eps,
                                      double running_momentum, BnVariant variant) {
  if (x_batch.rank() != 2 || x_batch.dim(0) == 0) throw EmptyBatchError("ghost batch norm needs N >= 1 batch rows");
  const std::size_t g = x_ghost.rank() == 2 ? x_ghost.dim(0) : 0;
  if (g > 0 && x_ghost.dim(1) != x_batch.dim(1)) {
    throw DimensionError("ghost rows " + shape_str(x_ghost.shape()) + " do not match batch " + shape_str(x_batch.shape()));
  }
  auto stats = train_statistics(x_batch, x_ghost, g, variant);
  GhostBnOutput out{x_batch, x_ghost, stats.mean, stats.var};
  normalize_rows(out.batch, stats.mean, stats.var, eps);
  normalize_rows(out.ghost, stats.mean, stats.var, eps);
  update_running(state, stats.mean, stats.var, running_momentum);
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct BackwardCache {
  std::uint64_t model_version = 0;
  const Model* model = nullptr;
  std::size_t batch_rows = 0;
  struct Layer {
    Tensor input;               // linear: [N x in]
    std::vector<Tensor> cols;   // conv: per batch row
    std::vector<std::uint8_t> mask;  // relu
    std::vector<double> denom;  // batch norm
  };
  std::vector<Layer> layers;
};

namespace {

// Batch-norm layout: F features, S positions per feature for each row.
struct BnLayout {
  std::size_t features, positions;
};

BnLayout bn_layout(const Shape& s, std::size_t features) {
  if (s.size() == 3) return {features, s[1] * s[2]};
  return {features, 1};
}

Tensor gather_bn(const Tensor& act, std::size_t row_begin, std::size_t row_end, BnLayout lay) {
  Tensor out({(row_end - row_begin) * lay.positions, lay.features});
  std::size_t k = 0;
  for (std::size_t r = row_begin; r < row_end; ++r) {
    const auto row = act.row(r);
    for (std::size_t p = 0; p < lay.positions; ++p, ++k)
      for (std::size_t f = 0; f < lay.features; ++f) out.at(k, f) = row[f * lay.positions + p];
  }
  return out;
}

void scatter_bn(Tensor& act, std::size_t row_begin, const Tensor& src, BnLayout lay) {
  if (src.empty()) return;
  const std::size_t rows = src.dim(0) / lay.positions;
  std::size_t k = 0;
  for (std::size_t r = row_begin; r < row_begin + rows; ++r) {
    auto row = act.row(r);
    for (std::size_t p = 0; p < lay.positions; ++p, ++k)
      for (std::size_t f = 0; f < lay.features; ++f) row[f * lay.positions + p] = src.at(k, f);
  }
}

Shape with_rows(std::size_t rows, const Shape& per_example) {
  Shape s{rows};
  s.insert(s.end(), per_example.begin(), per_example.end());
  return s;
}

Tensor row_tensor(const Tensor& act, std::size_t r, const Shape& per_example) {
  const auto row = act.row(r);
  return Tensor(per_example, std::vector<float>(row.begin(), row.end()));
}

ForwardResult run_forward(const Model& model, Model* mutable_model, const Tensor& batch, const Tensor* ghost,
                          const ForwardOptions& opt) {
  const auto& in_shape = model.input_shape();
  auto check_input = [&](const Tensor& t, const char* what) {
    if (t.rank() != in_shape.size() + 1 || !std::equal(in_shape.begin(), in_shape.end(), t.shape().begin() + 1)) {
      throw DimensionError(std::string(what) + " must be [rows x " + shape_str(in_shape).substr(1) + ", got " +
                           shape_str(t.shape()));
    }
  };
  check_input(batch, "batch");
  const std::size_t n = batch.dim(0);
  if (n == 0) throw EmptyBatchError("forward needs at least one batch row");
  std::size_t g = 0;
  if (ghost != nullptr && !ghost->empty()) {
    check_input(*ghost, "ghost");
    g = ghost->dim(0);
  }
  const bool train = opt.mode == Mode::kTrain;
  if (!train && g > 0) throw ConfigError("ghost rows are only accepted in training mode");
  if (train && model.has_batchnorm() && opt.variant != BnVariant::kBatchOnly && g < 2) {
    throw ConfigError("training a batch-norm model needs a ghost sample of at least 2 examples");
  }

  const std::size_t rows = n + g;
  Tensor act(with_rows(rows, in_shape));
  std::copy(batch.data().begin(), batch.data().end(), act.data().begin());
  if (g > 0) std::copy(ghost->data().begin(), ghost->data().end(), act.data().begin() + static_cast<std::ptrdiff_t>(batch.size()));

  ForwardResult result;
  std::shared_ptr<BackwardCache> cache;
  if (train) {
    cache = std::make_shared<BackwardCache>();
    cache->model_version = model.version();
    cache->model = &model;
    cache->batch_rows = n;
    cache->layers.resize(model.layers().size());
  }
  if (opt.capture) result.traces.resize(n);

  std::size_t tracked = 0;
  for (std::size_t li = 0; li < model.layers().size(); ++li) {
    const auto& spec = model.layers()[li];
    const auto& cur_shape = model.activation_shape(li);
    const auto& next_shape = model.activation_shape(li + 1);
    switch (spec.kind) {
      case LayerKind::kLinear: {
        const auto& w = model.weight(tracked);
        Tensor x = act.reshaped({rows, spec.in});
        Tensor y = matmul_bt(x, w);
        if (opt.capture) {
          for (std::size_t r = 0; r < n; ++r)
            result.traces[r].layers.push_back({row_tensor(act, r, cur_shape), row_tensor(y, r, next_shape)});
        }
        if (cache) {
          Tensor xb({n, spec.in});
          std::copy(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(n * spec.in), xb.data().begin());
          cache->layers[li].input = std::move(xb);
        }
        act = y.reshaped(with_rows(rows, next_shape));
        ++tracked;
        break;
      }
      case LayerKind::kConv2d: {
        const auto& w = model.weight(tracked);
        const auto geo = model.conv_geometry(tracked);
        Tensor y(with_rows(rows, next_shape));
        for (std::size_t r = 0; r < rows; ++r) {
          Tensor cols = im2col(act.row(r), geo);
          Tensor out = matmul(w, cols);
          std::copy(out.data().begin(), out.data().end(), y.row(r).begin());
          if (cache && r < n) cache->layers[li].cols.push_back(std::move(cols));
        }
        if (opt.capture) {
          for (std::size_t r = 0; r < n; ++r)
            result.traces[r].layers.push_back({row_tensor(act, r, cur_shape), row_tensor(y, r, next_shape)});
        }
        act = std::move(y);
        ++tracked;
        break;
      }
      case LayerKind::kRelu: {
        if (cache) cache->layers[li].mask.resize(n * act.row_size());
        for (std::size_t i = 0; i < act.size(); ++i) {
          const bool on = act[i] > 0.0f;
          if (!on) act[i] = 0.0f;
          if (cache && i < n * act.row_size()) cache->layers[li].mask[i] = on ? 1 : 0;
        }
        break;
      }
      case LayerKind::kGhostBatchNorm: {
        const auto lay = bn_layout(cur_shape, spec.features);
        Tensor mean, var;
        if (train) {
          Tensor xb = gather_bn(act, 0, n, lay);
          Tensor xg = g > 0 ? gather_bn(act, n, rows, lay) : Tensor();
          auto stats = train_statistics(xb, xg, g, opt.variant);
          mean = std::move(stats.mean);
          var = std::move(stats.var);
          if (mutable_model != nullptr) {
            update_running(mutable_model->bn_state(li), mean, var, spec.running_momentum);
          }
        } else {
          mean = model.bn_state(li).running_mean;
          var = model.bn_state(li).running_var;
        }
        Tensor all = gather_bn(act, 0, rows, lay);
        auto denom = normalize_rows(all, mean, var, spec.eps);
        scatter_bn(act, 0, all, lay);
        if (cache) cache->layers[li].denom = std::move(denom);
        break;
      }
      case LayerKind::kFlatten: act = act.reshaped(with_rows(rows, next_shape)); break;
    }
  }

  const std::size_t classes = model.num_classes();
  result.logits = Tensor({n, classes});
  std::copy(act.data().begin(), act.data().begin() + static_cast<std::ptrdiff_t>(n * classes), result.logits.data().begin());
  if (opt.capture) {
    for (std::size_t r = 0; r < n; ++r) result.traces[r].logits = row_tensor(result.logits, r, {classes});
  }
  result.cache = std::move(cache);
  return result;
}

}  // namespace

ForwardResult forward(Model& model, const Tensor& batch, const Tensor* ghost, const ForwardOptions& options) {
  return run_forward(model, options.mode == Mode::kTrain ? &model : nullptr, batch, ghost, options);
}

Tensor predict(const Model& model, const Tensor& batch) {
  return run_forward(model, nullptr, batch, nullptr, ForwardOptions{Mode::kEval, BnVariant::kWeighted, false}).logits;
}

ForwardTrace trace_example(const Model& model, const Tensor& x) {
  if (x.shape() != model.input_shape()) {
    throw DimensionError("input must have shape " + shape_str(model.input_shape()) + ", got " + shape_str(x.shape()));
  }
  auto r = run_forward(model, nullptr, x.reshaped(with_rows(1, x.shape())), nullptr,
                       ForwardOptions{Mode::kEval, BnVariant::kWeighted, true});
  return std::move(r.traces.front());
}

Tensor lower_input(const Model& model, std::size_t tracked_id, const Tensor& input_activation) {
  const auto& spec = model.tracked_spec(tracked_id);
  if (spec.kind == LayerKind::kLinear) {
    if (input_activation.size() != spec.in) {
      throw DimensionError("linear input needs " + std::to_string(spec.in) + " values, got " +
                           shape_str(input_activation.shape()));
    }
    return input_activation.reshaped({spec.in, 1});
  }
  return im2col(input_activation.data(), model.conv_geometry(tracked_id));
}

Tensor apply_linear(const Model& model, std::size_t tracked_id, const Tensor& weight, const Tensor& input_activation) {
  const auto li = model.layer_index(tracked_id);
  Tensor out = matmul(weight, lower_input(model, tracked_id, input_activation));
  return out.reshaped(model.activation_shape(li + 1));
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects N x C, got " + shape_str(logits.shape()));
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto z = logits.row(i);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (float v : z) sum += std::exp(static_cast<double>(v) - m);
    auto out = p.row(i);
    for (std::size_t c = 0; c < z.size(); ++c) out[c] = static_cast<float>(std::exp(static_cast<double>(z[c]) - m) / sum);
  }
  return p;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const ClassId> labels) {
  if (logits.rank() != 2) throw DimensionError("logits must be N x C, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " logit rows");
  }
  if (n == 0) throw EmptyBatchError("cross-entropy over an empty batch");
  LossResult out{0.0, Tensor({n, c})};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw IndexError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    const auto z = logits.row(i);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (float v : z) sum += std::exp(static_cast<double>(v) - m);
    const double log_sum = std::log(sum);
    const auto y = static_cast<std::size_t>(labels[i]);
    out.loss += -(static_cast<double>(z[y]) - m - log_sum);
    auto g = out.grad.row(i);
    for (std::size_t k = 0; k < c; ++k) {
      const double p = std::exp(static_cast<double>(z[k]) - m - log_sum);
      g[k] = static_cast<float>((p - (k == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

std::vector<LayerGradient> backward(const Model& model, const ForwardResult& fr, const Tensor& grad_logits) {
  if (!fr.cache) throw InvariantError("backward needs a training-mode forward result");
  const auto& cache = *fr.cache;
  if (cache.model != &model || cache.model_version != model.version()) {
    throw InvariantError("stale trace: model weights changed since the forward pass");
  }
  const std::size_t n = cache.batch_rows;
  if (grad_logits.shape() != Shape{n, model.num_classes()}) {
    throw DimensionError("grad_logits must be " + shape_str({n, model.num_classes()}) + ", got " +
                         shape_str(grad_logits.shape()));
  }
  std::vector<LayerGradient> grads(model.tracked_count());
  Tensor g = grad_logits;  // [n x per-example shape of the current layer output]
  std::size_t tracked = model.tracked_count();
  for (std::size_t li = model.layers().size(); li-- > 0;) {
    const auto& spec = model.layers()[li];
    const auto& in_shape = model.activation_shape(li);
    const auto& lc = cache.layers[li];
    const bool need_input_grad = li > 0;
    switch (spec.kind) {
      case LayerKind::kLinear: {
        --tracked;
        Tensor go = g.reshaped({n, spec.out});
        auto& out = grads[tracked];
        out.dense = matmul_at(go, lc.input);
        out.input = lc.input;
        out.grad_output = std::move(go);
        if (need_input_grad) g = matmul(out.grad_output, model.weight(tracked)).reshaped(with_rows(n, in_shape));
        break;
      }
      case LayerKind::kConv2d: {
        --tracked;
        const auto geo = model.conv_geometry(tracked);
        const auto& w = model.weight(tracked);
        const std::size_t positions = geo.out_height() * geo.out_width();
        auto& out = grads[tracked];
        out.grad_output = Tensor({n * positions, spec.out});
        out.input = Tensor({n * positions, geo.patch_size()});
        Tensor g_in(with_rows(n, in_shape));
        for (std::size_t r = 0; r < n; ++r) {
          Tensor gr(Shape{spec.out, positions}, std::vector<float>(g.row(r).begin(), g.row(r).end()));
          const auto& cols = lc.cols[r];
          for (std::size_t p = 0; p < positions; ++p) {
            for (std::size_t o = 0; o < spec.out; ++o) out.grad_output.at(r * positions + p, o) = gr.at(o, p);
            for (std::size_t k = 0; k < geo.patch_size(); ++k) out.input.at(r * positions + p, k) = cols.at(k, p);
          }
          if (need_input_grad) {
            Tensor img = col2im(matmul_at(w, gr), geo);
            std::copy(img.data().begin(), img.data().end(), g_in.row(r).begin());
          }
        }
        out.dense = matmul_at(out.grad_output, out.input);
        if (need_input_grad) g = std::move(g_in);
        break;
      }
      case LayerKind::kRelu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!lc.mask[i]) g[i] = 0.0f;
        break;
      case LayerKind::kGhostBatchNorm: {
        const auto lay = bn_layout(in_shape, spec.features);
        for (std::size_t r = 0; r < n; ++r) {
          auto row = g.row(r);
          for (std::size_t f = 0; f < lay.features; ++f)
            for (std::size_t p = 0; p < lay.positions; ++p) {
              auto& v = row[f * lay.positions + p];
              v = static_cast<float>(v / lc.denom[f]);
            }
        }
        break;
      }
      case LayerKind::kFlatten: g = g.reshaped(with_rows(n, in_shape)); break;
    }
    if (li == 0) break;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

struct Blob {
  std::string name;
  const Tensor* tensor;
};

std::vector<Blob> blobs_of(const Model& m) {
  std::vector<Blob> out;
  std::size_t tracked = 0;
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    if (m.layers()[i].tracked()) {
      out.push_back({fmt::format("layer{}.weight", i), &m.weight(tracked++)});
    } else if (m.layers()[i].kind == LayerKind::kGhostBatchNorm) {
      out.push_back({fmt::format("layer{}.running_mean", i), &m.bn_state(i).running_mean});
      out.push_back({fmt::format("layer{}.running_var", i), &m.bn_state(i).running_var});
    }
  }
  return out;
}

constexpr char kCheckpointFormat[] = "wtrace-checkpoint";

}  // namespace

std::vector<std::byte> checkpoint_bytes(const Model& model) {
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = 1;
  manifest["arch_hash"] = model.arch_hash();
  manifest["seed"] = model.seed();
  manifest["input_shape"] = model.input_shape();
  auto& layers = manifest["layers"] = nlohmann::json::array();
  for (const auto& l : model.layers()) layers.push_back(l.describe());
  auto& blobs = manifest["blobs"] = nlohmann::json::array();
  const auto list = blobs_of(model);
  for (const auto& b : list) blobs.push_back({{"name", b.name}, {"shape", b.tensor->shape()}});
  const std::string text = manifest.dump();

  detail::ByteWriter w;
  w.put<std::uint64_t>(text.size());
  w.put_string(text);
  for (const auto& b : list) w.put_f32s(b.tensor->data());
  return std::move(w.buffer());
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::as_bytes(std::span(raw.data(), raw.size())));
  const auto len = r.get<std::uint64_t>();
  const auto text_bytes = r.get_bytes(static_cast<std::size_t>(len));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(text_bytes.data()), text_bytes.size()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": checkpoint manifest is not valid JSON: " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) throw FormatError(path.string() + ": not a checkpoint");
  if (manifest.value("version", 0) != 1) throw VersionError(path.string() + ": unsupported checkpoint version");
  std::vector<LayerSpec> layers;
  for (const auto& l : manifest.at("layers")) layers.push_back(LayerSpec::parse(l.get<std::string>()));
  Model model(std::move(layers), manifest.at("input_shape").get<Shape>(), manifest.at("seed").get<std::uint64_t>());
  if (model.arch_hash() != manifest.at("arch_hash").get<std::string>()) {
    throw IntegrityError(path.string() + ": arch_hash does not match the layer list");
  }
  auto list = blobs_of(model);
  const auto& declared = manifest.at("blobs");
  if (declared.size() != list.size()) throw FormatError(path.string() + ": blob list does not match the layers");
  for (std::size_t k = 0; k < list.size(); ++k) {
    if (declared[k].at("name").get<std::string>() != list[k].name ||
        declared[k].at("shape").get<Shape>() != list[k].tensor->shape()) {
      throw FormatError(path.string() + ": blob " + std::to_string(k) + " does not match the layer list");
    }
    auto& t = const_cast<Tensor&>(*list[k].tensor);
    r.get_f32s(t.data());
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": " + std::to_string(r.remaining()) + " trailing bytes");
  ++model.version_;
  return model;
}

}  // namespace wtrace
