#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "wtrace/dataset.hpp"
#include "wtrace/nn.hpp"
#include "wtrace/optim.hpp"

namespace wtrace::app {

/// A parsed value from the flat TOML-style config: string, number, bool or a
/// list of strings.
struct ConfigValue {
  std::variant<std::string, double, bool, std::vector<std::string>> value;
  int line = 0;
};

/// `[section]` headers, `key = value` lines, `#` comments. Values are quoted
/// strings, numbers, true/false, or `[...]` string arrays that may span
/// lines. Keys are stored as "section.key".
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text);
  static ConfigFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_number(const std::string& key) const;
  double get_number(const std::string& key, double fallback) const;
  std::uint64_t get_count(const std::string& key) const;
  std::uint64_t get_count(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;

  /// Keys that no getter asked for; lets the caller reject typos.
  std::vector<std::string> unused_keys() const;

 private:
  const ConfigValue& require(const std::string& key) const;
  std::map<std::string, ConfigValue> values_;
  mutable std::map<std::string, bool> used_;
};

struct DatasetConfig {
  std::string kind = "blobs";  // blobs | digits | idx | csv
  // synthetic
  std::size_t n_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t classes = 2;
  std::size_t dim = 2;
  double separation = 4.0;
  // files
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::filesystem::path train_path, test_path;
  bool skip_header = false;
};

enum class Sampling : std::uint8_t { kSingleInstance, kSingleClass };

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output;
  DatasetConfig dataset;
  std::vector<LayerSpec> layers;
  BnVariant bn_variant = BnVariant::kWeighted;
  OptimizerConfig optimizer;
  Sampling sampling = Sampling::kSingleClass;
  std::size_t batch_size = 32;
  std::size_t ghost_per_class = 4;
  Durability durability = Durability::kFlush;

  /// Reads and cross-checks a config file. Relative dataset paths resolve
  /// against the config's directory. Errors name the line or field.
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
  void validate() const;
};

struct Datasets {
  Dataset train;
  std::optional<Dataset> test;
};

/// Builds or reads the configured datasets; synthetic data derives its seed
/// from the run seed.
Datasets load_datasets(const RunConfig& config);

Model build_model(const RunConfig& config, const Dataset& train);
BatchPlan build_plan(const RunConfig& config, const Dataset& train);

/// Seeds for the independent random streams of a run.
std::uint64_t model_seed(const RunConfig& c);
std::uint64_t plan_seed(const RunConfig& c);

}  // namespace wtrace::app
