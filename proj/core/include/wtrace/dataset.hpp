#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wtrace/tensor.hpp"

namespace wtrace {

using ExampleId = std::uint32_t;
using ClassId = std::int32_t;

/// Class id of a step whose batch mixes labels.
inline constexpr ClassId kMixedClass = -1;
/// Class id carried by the initial-weights pseudo-record.
inline constexpr ClassId kInitClass = -2;

/// Labeled examples stored as one [N x feature_shape...] tensor. Immutable
/// once built.
class Dataset {
 public:
  Dataset() = default;
  /// `features` has shape [N, feature_shape...]; throws IndexError when a label
  /// is outside [0, class_count).
  Dataset(Tensor features, std::vector<ClassId> labels, std::size_t class_count);

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t class_count() const noexcept { return class_count_; }
  const Shape& feature_shape() const noexcept { return feature_shape_; }
  std::size_t feature_size() const noexcept { return shape_numel(feature_shape_); }

  ClassId label(std::size_t i) const { return labels_.at(i); }
  const std::vector<ClassId>& labels() const noexcept { return labels_; }
  std::span<const float> features(std::size_t i) const;
  /// Example i as a standalone tensor of feature_shape().
  Tensor example(std::size_t i) const;
  const Tensor& all_features() const noexcept { return features_; }

  /// Stacks the given examples into [ids.size() x feature_shape...].
  Tensor gather(std::span<const ExampleId> ids) const;

  const std::vector<double>& class_priors() const noexcept { return priors_; }
  std::vector<std::vector<ExampleId>> indices_by_class() const;

  /// SHA-256 over shape, features and labels.
  std::string digest() const;

 private:
  Tensor features_;
  Shape feature_shape_;
  std::vector<ClassId> labels_;
  std::size_t class_count_ = 0;
  std::vector<double> priors_;
};

/// Reads an IDX3 image file (magic 0x00000803) and IDX1 label file
/// (0x00000801). Pixels are scaled to [0, 1]; examples have shape 1 x H x W.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t class_count = 0);

/// Writes features (values in [0,1], shape [N x 1 x H x W] or [N x H x W])
/// as IDX3/IDX1 files, rounding to bytes.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

/// One row per example: real features then an integer label in the last
/// column. `class_count` of 0 infers max(label) + 1.
Dataset load_csv(const std::filesystem::path& path, bool skip_header = false, std::size_t class_count = 0);

/// Unit-variance Gaussian clusters; class c is centred at separation * e_c.
/// Requires dim >= class_count.
Dataset synth_blobs(std::size_t n_per_class, std::size_t class_count, std::size_t dim, double separation,
                    std::uint64_t seed);

/// 28x28 grayscale renderings of the digits 0-9 drawn as jittered strokes,
/// with random affine distortion, stroke width and pixel noise. Stands in for
/// MNIST when the real files are unavailable.
Dataset synth_digits(std::size_t n_per_class, std::uint64_t seed);

enum class SamplingMode : std::uint8_t { kSingleInstance = 0, kSingleClass = 1 };

struct PlanStep {
  std::vector<ExampleId> batch;
  ClassId batch_class = kMixedClass;
  std::vector<ExampleId> ghost;
  std::uint32_t epoch = 0;
};

struct BatchPlan {
  SamplingMode mode = SamplingMode::kSingleInstance;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  std::vector<PlanStep> steps;
  std::vector<std::string> warnings;

  /// Little-endian byte image of the plan (warnings excluded).
  std::vector<std::byte> serialize() const;
};

BatchPlan plan_single_instance(const Dataset& ds, std::uint32_t epochs, std::uint64_t seed);

/// Same-class batches plus a class-stratified ghost sample per step.
/// `ghost_per_class == 0` disables ghost sampling.
BatchPlan plan_single_class(const Dataset& ds, std::size_t batch_size, std::size_t ghost_per_class,
                            std::uint32_t epochs, std::uint64_t seed);

/// Ghost members drawn per class: round(ghost_per_class * prior * C), at least
/// one for every class present.
std::vector<std::size_t> ghost_counts(const Dataset& ds, std::size_t ghost_per_class);

}  // namespace wtrace
