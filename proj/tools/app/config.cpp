#include "config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "wtrace/error.hpp"

namespace wtrace::app {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Removes a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

[[noreturn]] void fail(int line, const std::string& msg) { throw ConfigError(fmt::format("line {}: {}", line, msg)); }

std::string parse_quoted(std::string_view s, int line) {
  if (s.size() < 2 || s.front() != '"' || s.back() != '"') fail(line, "expected a quoted string, got '" + std::string(s) + "'");
  std::string out;
  for (std::size_t i = 1; i + 1 < s.size(); ++i) {
    if (s[i] == '\\' && i + 2 < s.size()) {
      const char n = s[++i];
      out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
    } else if (s[i] == '"') {
      fail(line, "unescaped quote inside string");
    } else {
      out += s[i];
    }
  }
  return out;
}

std::vector<std::string> parse_list(const std::string& body, int line) {
  std::vector<std::string> items;
  std::size_t i = 0;
  while (i < body.size()) {
    while (i < body.size() && (std::isspace(static_cast<unsigned char>(body[i])) || body[i] == ',')) ++i;
    if (i >= body.size()) break;
    if (body[i] != '"') fail(line, "array items must be quoted strings");
    std::size_t j = i + 1;
    while (j < body.size() && !(body[j] == '"' && body[j - 1] != '\\')) ++j;
    if (j >= body.size()) fail(line, "unterminated string in array");
    items.push_back(parse_quoted(std::string_view(body).substr(i, j - i + 1), line));
    i = j + 1;
  }
  return items;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text) {
  ConfigFile cf;
  std::istringstream in(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(line_no, "malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) fail(line_no, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(line_no, "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) fail(line_no, "missing key");
    const std::string full = section.empty() ? key : section + "." + key;
    if (cf.values_.count(full)) fail(line_no, "duplicate key '" + full + "'");
    ConfigValue cv;
    cv.line = line_no;
    if (value.empty()) fail(line_no, "missing value for '" + full + "'");
    if (value.front() == '[') {
      const int start = line_no;
      while (value.back() != ']') {
        if (!std::getline(in, raw)) fail(start, "unterminated array for '" + full + "'");
        ++line_no;
        value += " " + trim(strip_comment(raw));
      }
      cv.value = parse_list(value.substr(1, value.size() - 2), start);
    } else if (value.front() == '"') {
      cv.value = parse_quoted(value, line_no);
    } else if (value == "true" || value == "false") {
      cv.value = value == "true";
    } else {
      double d = 0.0;
      const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), d);
      if (ec != std::errc() || ptr != value.data() + value.size()) {
        fail(line_no, "cannot parse value '" + value + "' for '" + full + "' (strings need quotes)");
      }
      cv.value = d;
    }
    cf.values_[full] = std::move(cv);
  }
  return cf;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const ConfigValue& ConfigFile::require(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing required field '" + key + "'");
  used_[key] = true;
  return it->second;
}

std::string ConfigFile::get_string(const std::string& key) const {
  const auto& v = require(key);
  if (const auto* s = std::get_if<std::string>(&v.value)) return *s;
  throw ConfigError(fmt::format("line {}: field '{}' must be a string", v.line, key));
}

std::string ConfigFile::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double ConfigFile::get_number(const std::string& key) const {
  const auto& v = require(key);
  if (const auto* d = std::get_if<double>(&v.value)) return *d;
  throw ConfigError(fmt::format("line {}: field '{}' must be a number", v.line, key));
}

double ConfigFile::get_number(const std::string& key, double fallback) const {
  return has(key) ? get_number(key) : fallback;
}

std::uint64_t ConfigFile::get_count(const std::string& key) const {
  const double d = get_number(key);
  if (d < 0 || d != static_cast<double>(static_cast<std::uint64_t>(d))) {
    throw ConfigError(fmt::format("line {}: field '{}' must be a non-negative integer", values_.at(key).line, key));
  }
  return static_cast<std::uint64_t>(d);
}

std::uint64_t ConfigFile::get_count(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? get_count(key) : fallback;
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = require(key);
  if (const auto* b = std::get_if<bool>(&v.value)) return *b;
  throw ConfigError(fmt::format("line {}: field '{}' must be true or false", v.line, key));
}

std::vector<std::string> ConfigFile::get_list(const std::string& key) const {
  const auto& v = require(key);
  if (const auto* l = std::get_if<std::vector<std::string>>(&v.value)) return *l;
  throw ConfigError(fmt::format("line {}: field '{}' must be an array of strings", v.line, key));
}

std::vector<std::string> ConfigFile::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(fmt::format("{} (line {})", k, v.line));
  return out;
}

// ---------------------------------------------------------------------------

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

RunConfig RunConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  const auto cf = ConfigFile::parse(text);
  RunConfig c;
  c.seed = cf.get_count("run.seed", 0);
  c.output = cf.get_string("run.output");
  const auto durability = cf.get_string("run.durability", "flush");
  if (durability == "fsync") {
    c.durability = Durability::kFsync;
  } else if (durability != "flush") {
    throw ConfigError("field 'run.durability' must be \"flush\" or \"fsync\"");
  }

  auto& d = c.dataset;
  d.kind = cf.get_string("dataset.kind");
  const auto path_field = [&](const std::string& key) -> std::filesystem::path {
    std::filesystem::path p = cf.get_string(key);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  if (d.kind == "blobs") {
    d.n_per_class = cf.get_count("dataset.n_per_class");
    d.test_per_class = cf.get_count("dataset.test_per_class", 0);
    d.classes = cf.get_count("dataset.classes", 2);
    d.dim = cf.get_count("dataset.dim", d.classes);
    d.separation = cf.get_number("dataset.separation", 4.0);
  } else if (d.kind == "digits") {
    d.n_per_class = cf.get_count("dataset.n_per_class");
    d.test_per_class = cf.get_count("dataset.test_per_class", 0);
    d.classes = 10;
  } else if (d.kind == "idx") {
    d.train_images = path_field("dataset.train_images");
    d.train_labels = path_field("dataset.train_labels");
    if (cf.has("dataset.test_images") || cf.has("dataset.test_labels")) {
      d.test_images = path_field("dataset.test_images");
      d.test_labels = path_field("dataset.test_labels");
    }
    d.classes = cf.get_count("dataset.classes", 0);
  } else if (d.kind == "csv") {
    d.train_path = path_field("dataset.train_path");
    if (cf.has("dataset.test_path")) d.test_path = path_field("dataset.test_path");
    d.skip_header = cf.get_bool("dataset.skip_header", false);
    d.classes = cf.get_count("dataset.classes", 0);
  } else {
    throw ConfigError("field 'dataset.kind' must be one of blobs, digits, idx, csv; got '" + d.kind + "'");
  }

  for (const auto& line : cf.get_list("model.layers")) {
    try {
      c.layers.push_back(LayerSpec::parse(line));
    } catch (const Error& e) {
      throw ConfigError("field 'model.layers': " + std::string(e.what()));
    }
  }
  c.bn_variant = parse_bn_variant(cf.get_string("model.bn_variant", "weighted"));

  auto& o = c.optimizer;
  o.kind = parse_optimizer_kind(cf.get_string("optimizer.kind", "sgd"));
  o.lr0 = cf.get_number("optimizer.lr0", 0.01);
  o.momentum = cf.get_number("optimizer.momentum", o.kind == OptimizerKind::kNesterov ? 0.9 : 0.0);
  o.decay_factor = cf.get_number("optimizer.decay_factor", 1.0);
  o.decay_every_epochs = static_cast<std::uint32_t>(cf.get_count("optimizer.decay_every_epochs", 10));
  o.epochs = static_cast<std::uint32_t>(cf.get_count("optimizer.epochs"));

  const auto mode = cf.get_string("sampling.mode", "single_class");
  if (mode == "single_class") {
    c.sampling = Sampling::kSingleClass;
  } else if (mode == "single_instance") {
    c.sampling = Sampling::kSingleInstance;
  } else {
    throw ConfigError("field 'sampling.mode' must be single_class or single_instance; got '" + mode + "'");
  }
  c.batch_size = cf.get_count("sampling.batch_size", c.sampling == Sampling::kSingleInstance ? 1 : 32);
  c.ghost_per_class = cf.get_count("sampling.ghost_per_class", c.sampling == Sampling::kSingleInstance ? 0 : 4);

  if (const auto extra = cf.unused_keys(); !extra.empty()) {
    std::string msg = "unknown config fields:";
    for (const auto& k : extra) msg += " " + k;
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (output.empty()) throw ConfigError("field 'run.output' must not be empty");
  if (layers.empty()) throw ConfigError("field 'model.layers' must list at least one layer");
  try {
    optimizer.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("[optimizer] ") + e.what());
  }
  if (optimizer.epochs == 0) throw ConfigError("field 'optimizer.epochs' must be at least 1");
  bool has_bn = false;
  for (const auto& l : layers) has_bn |= l.kind == LayerKind::kGhostBatchNorm;
  if (sampling == Sampling::kSingleInstance && batch_size != 1) {
    throw ConfigError("field 'sampling.batch_size' must be 1 in single_instance mode");
  }
  if (sampling == Sampling::kSingleClass && batch_size == 0) throw ConfigError("field 'sampling.batch_size' must be >= 1");
  if (has_bn) {
    if (sampling != Sampling::kSingleClass) {
      throw ConfigError("batch-norm layers need sampling.mode = \"single_class\"");
    }
    if (ghost_per_class == 0 && bn_variant != BnVariant::kBatchOnly) {
      throw ConfigError(
          "batch-norm with sampling.ghost_per_class = 0 needs the explicit override model.bn_variant = \"batch_only\"");
    }
  }
}

std::uint64_t model_seed(const RunConfig& c) { return c.seed * 0x9E3779B97F4A7C15ull + 1; }
std::uint64_t plan_seed(const RunConfig& c) { return c.seed * 0x9E3779B97F4A7C15ull + 2; }
static std::uint64_t data_seed(const RunConfig& c, int which) { return c.seed * 0x9E3779B97F4A7C15ull + 3 + which; }

Datasets load_datasets(const RunConfig& c) {
  const auto& d = c.dataset;
  const auto need = [](const std::filesystem::path& p, const char* field) {
    if (!p.empty() && !std::filesystem::exists(p)) {
      throw ConfigError(std::string("field '") + field + "': file not found: " + p.string());
    }
  };
  need(d.train_images, "dataset.train_images");
  need(d.train_labels, "dataset.train_labels");
  need(d.test_images, "dataset.test_images");
  need(d.test_labels, "dataset.test_labels");
  need(d.train_path, "dataset.train_path");
  need(d.test_path, "dataset.test_path");
  Datasets out;
  if (d.kind == "blobs") {
    out.train = synth_blobs(d.n_per_class, d.classes, d.dim, d.separation, data_seed(c, 0));
    if (d.test_per_class) out.test = synth_blobs(d.test_per_class, d.classes, d.dim, d.separation, data_seed(c, 1));
  } else if (d.kind == "digits") {
    out.train = synth_digits(d.n_per_class, data_seed(c, 0));
    if (d.test_per_class) out.test = synth_digits(d.test_per_class, data_seed(c, 1));
  } else if (d.kind == "idx") {
    out.train = load_idx(d.train_images, d.train_labels, d.classes);
    if (!d.test_images.empty()) out.test = load_idx(d.test_images, d.test_labels, out.train.class_count());
  } else {
    out.train = load_csv(d.train_path, d.skip_header, d.classes);
    if (!d.test_path.empty()) out.test = load_csv(d.test_path, d.skip_header, out.train.class_count());
  }
  if (out.test && out.test->feature_shape() != out.train.feature_shape()) {
    throw ConfigError("test features " + shape_str(out.test->feature_shape()) + " differ from train features " +
                      shape_str(out.train.feature_shape()));
  }
  return out;
}

Model build_model(const RunConfig& c, const Dataset& train) {
  Model m(c.layers, train.feature_shape(), model_seed(c));
  if (m.num_classes() != train.class_count()) {
    throw ConfigError(fmt::format("model.layers ends with {} outputs but the dataset has {} classes", m.num_classes(),
                                  train.class_count()));
  }
  return m;
}

BatchPlan build_plan(const RunConfig& c, const Dataset& train) {
  if (c.sampling == Sampling::kSingleInstance) return plan_single_instance(train, c.optimizer.epochs, plan_seed(c));
  return plan_single_class(train, c.batch_size, c.ghost_per_class, c.optimizer.epochs, plan_seed(c));
}

}  // namespace wtrace::app
