#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wtrace/dataset.hpp"
#include "wtrace/tensor.hpp"

namespace wtrace {

enum class LayerKind : std::uint8_t { kLinear, kConv2d, kRelu, kGhostBatchNorm, kFlatten };

/// How ghost-batch statistics are merged with the same-class batch.
///   kWeighted  - the batch counts as one example of total weight (default)
///   kLiteral   - the combine formulas exactly as in the published pseudocode
///   kBatchOnly - ordinary batch norm on the batch rows alone; ghost ignored
enum class BnVariant : std::uint8_t { kWeighted, kLiteral, kBatchOnly };

enum class Mode : std::uint8_t { kTrain, kEval };

std::string_view to_string(BnVariant v);
BnVariant parse_bn_variant(std::string_view text);

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  // kLinear: in/out features. kConv2d: in/out channels.
  std::size_t in = 0, out = 0;
  std::size_t kh = 0, kw = 0, stride = 1, pad = 0;
  // kGhostBatchNorm
  std::size_t features = 0;
  double eps = 1e-5;
  double running_momentum = 0.1;

  static LayerSpec linear(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw,
                          std::size_t stride = 1, std::size_t pad = 0);
  static LayerSpec relu();
  static LayerSpec ghost_batchnorm(std::size_t features, double eps = 1e-5, double running_momentum = 0.1);
  static LayerSpec flatten();

  /// "linear 784 256", "conv2d 1 8 3 3 1 1", "relu", "ghost_bn 256 [eps] [momentum]", "flatten".
  static LayerSpec parse(std::string_view text);
  /// Canonical text form; parse(describe()) round-trips.
  std::string describe() const;

  /// Layers that own a weight matrix whose updates are tracked.
  bool tracked() const noexcept { return kind == LayerKind::kLinear || kind == LayerKind::kConv2d; }
  void validate() const;
};

struct BnState {
  Tensor running_mean;
  Tensor running_var;
};

/// Sequential bias-free network. Tracked layers (linear / conv2d) own one
/// 2-D weight each: linear out x in, conv out_ch x (in_ch*kh*kw).
class Model {
 public:
  Model() = default;
  /// Kaiming-uniform weights drawn from `seed`.
  Model(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed);

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::string arch_hash() const;

  std::size_t tracked_count() const noexcept { return tracked_layers_.size(); }
  /// Position in layers() of tracked layer `tracked_id`.
  std::size_t layer_index(std::size_t tracked_id) const;
  const LayerSpec& tracked_spec(std::size_t tracked_id) const { return layers_[layer_index(tracked_id)]; }
  const Tensor& weight(std::size_t tracked_id) const;
  /// Mutable access invalidates forward caches taken earlier.
  Tensor& mutable_weight(std::size_t tracked_id);
  void set_weight(std::size_t tracked_id, Tensor w);
  std::vector<Shape> weight_shapes() const;

  /// Per-example activation shape entering layer `index` (index == layers().size() gives the output).
  const Shape& activation_shape(std::size_t index) const { return activation_shapes_.at(index); }
  /// Convolution geometry for a conv2d tracked layer.
  ConvGeometry conv_geometry(std::size_t tracked_id) const;

  bool has_batchnorm() const noexcept;
  BnState& bn_state(std::size_t layer_index);
  const BnState& bn_state(std::size_t layer_index) const;

  std::uint64_t version() const noexcept { return version_; }

  friend bool operator==(const Model& a, const Model& b) {
    return a.layers_describe() == b.layers_describe() && a.input_shape_ == b.input_shape_ &&
           a.weights_ == b.weights_ && a.bn_equal(b);
  }

 private:
  std::string layers_describe() const;
  bool bn_equal(const Model& other) const;
  void infer_shapes();

  std::vector<LayerSpec> layers_;
  Shape input_shape_;
  std::uint64_t seed_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<std::size_t> tracked_layers_;
  std::vector<Tensor> weights_;
  std::vector<std::optional<BnState>> bn_;
  std::vector<Shape> activation_shapes_;
  std::uint64_t version_ = 0;

  friend Model load_checkpoint(const std::filesystem::path& path);
};

/// Tracked-layer activations of one example.
struct LayerTrace {
  Tensor input_activation;  ///< f_{l-1}(x), per-example shape
  Tensor pre_activation;    ///< W_l f_{l-1}(x): [out] or [out_ch x H' x W']
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;  ///< one per tracked layer
  Tensor logits;
};

struct BackwardCache;

struct ForwardOptions {
  Mode mode = Mode::kEval;
  BnVariant variant = BnVariant::kWeighted;
  bool capture = false;
};

struct ForwardResult {
  Tensor logits;                     ///< [N x classes], batch rows only
  std::vector<ForwardTrace> traces;  ///< per batch row when capture is set
  std::shared_ptr<const BackwardCache> cache;  ///< present in kTrain mode
};

/// Runs batch rows [N x input...] and optional ghost rows [G x input...]
/// through the network. Ghost rows only feed batch-norm statistics and are
/// dropped from the result. kTrain mode updates batch-norm running state.
ForwardResult forward(Model& model, const Tensor& batch, const Tensor* ghost, const ForwardOptions& options);

/// kEval forward without mutation.
Tensor predict(const Model& model, const Tensor& batch);
/// kEval forward of one example with its tracked-layer trace.
ForwardTrace trace_example(const Model& model, const Tensor& x);

/// W applied to one input activation: W x for linear, W im2col(x) for conv.
/// Returns the pre-activation in the same layout as LayerTrace.
Tensor apply_linear(const Model& model, std::size_t tracked_id, const Tensor& weight, const Tensor& input_activation);

/// The input activation lowered to the matrix the layer's weight multiplies:
/// [in x 1] for linear, [in_ch*kh*kw x H'*W'] for conv.
Tensor lower_input(const Model& model, std::size_t tracked_id, const Tensor& input_activation);

/// Merges ghost statistics (mu_g, var_g over G rows) with batch statistics.
MeanVar ghost_batchnorm_combine(const Tensor& mu_ghost, const Tensor& var_ghost, const Tensor& mu_batch,
                                const Tensor& var_batch, std::size_t ghost_count, BnVariant variant);

struct GhostBnOutput {
  Tensor batch;   ///< normalized batch rows
  Tensor ghost;   ///< normalized ghost rows
  Tensor mean;    ///< statistics used
  Tensor var;
};

/// Normalizes [N x F] batch and [G x F] ghost rows with the combined
/// statistics as (x - mu) / (sqrt(var) + eps) and updates `state`.
GhostBnOutput ghost_batchnorm_forward(const Tensor& x_batch, const Tensor& x_ghost, BnState& state, double eps,
                                      double running_momentum, BnVariant variant);

struct LossResult {
  double loss = 0.0;  ///< mean cross-entropy over the batch
  Tensor grad;        ///< d loss / d logits, (softmax - onehot) / N
};

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const ClassId> labels);
/// Row-wise softmax probabilities.
Tensor softmax(const Tensor& logits);

struct LayerGradient {
  Tensor dense;        ///< gradient in weight shape
  Tensor grad_output;  ///< [r x out] rows of d loss / d pre-activation
  Tensor input;        ///< [r x in] lowered inputs; dense == grad_output^T input
};

/// Reverse-mode weight gradients from a kTrain forward. Batch-norm statistics
/// are treated as constants. Throws InvariantError when weights changed
/// since the forward call.
std::vector<LayerGradient> backward(const Model& model, const ForwardResult& forward_result, const Tensor& grad_logits);

/// Canonical JSON manifest followed by little-endian float32 blobs (tracked
/// weights and batch-norm running statistics in layer order).
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::vector<std::byte> checkpoint_bytes(const Model& model);

}  // namespace wtrace
