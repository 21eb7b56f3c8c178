#include "wtrace/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "bytes.hpp"
#include "wtrace/digest.hpp"
#include "wtrace/error.hpp"
#include "wtrace/rng.hpp"

namespace wtrace {

Dataset::Dataset(Tensor features, std::vector<ClassId> labels, std::size_t class_count)
    : features_(std::move(features)), labels_(std::move(labels)), class_count_(class_count) {
  if (features_.rank() < 2) {
    throw DimensionError("dataset features need shape [N x ...], got " + shape_str(features_.shape()));
  }
  if (features_.dim(0) != labels_.size()) {
    throw DimensionError("dataset has " + std::to_string(features_.dim(0)) + " feature rows but " +
                         std::to_string(labels_.size()) + " labels");
  }
  if (class_count_ == 0) throw ConfigError("dataset class_count must be positive");
  feature_shape_.assign(features_.shape().begin() + 1, features_.shape().end());
  std::vector<std::size_t> counts(class_count_, 0);
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    const auto y = labels_[i];
    if (y < 0 || static_cast<std::size_t>(y) >= class_count_) {
      throw IndexError("label " + std::to_string(y) + " of example " + std::to_string(i) +
                       " outside [0, " + std::to_string(class_count_) + ")");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  priors_.resize(class_count_, 0.0);
  if (!labels_.empty()) {
    for (std::size_t c = 0; c < class_count_; ++c)
      priors_[c] = static_cast<double>(counts[c]) / static_cast<double>(labels_.size());
  }
}

std::span<const float> Dataset::features(std::size_t i) const {
  if (i >= size()) throw IndexError("example " + std::to_string(i) + " out of range (" + std::to_string(size()) + ")");
  return features_.row(i);
}

Tensor Dataset::example(std::size_t i) const {
  const auto f = features(i);
  return Tensor(feature_shape_, std::vector<float>(f.begin(), f.end()));
}

Tensor Dataset::gather(std::span<const ExampleId> ids) const {
  Shape shape{ids.size()};
  shape.insert(shape.end(), feature_shape_.begin(), feature_shape_.end());
  Tensor out(shape);
  const auto n = feature_size();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto src = features(ids[k]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return out;
}

std::vector<std::vector<ExampleId>> Dataset::indices_by_class() const {
  std::vector<std::vector<ExampleId>> out(class_count_);
  for (std::size_t i = 0; i < labels_.size(); ++i)
    out[static_cast<std::size_t>(labels_[i])].push_back(static_cast<ExampleId>(i));
  return out;
}

std::string Dataset::digest() const {
  detail::ByteWriter w;
  w.put<std::uint64_t>(features_.rank());
  for (auto d : features_.shape()) w.put<std::uint64_t>(d);
  w.put<std::uint64_t>(class_count_);
  w.put_f32s(features_.data());
  for (auto y : labels_) w.put<std::int32_t>(y);
  return sha256_hex(w.buffer());
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) {
    throw FormatError(path.string() + ": truncated header at offset " + std::to_string(off));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t class_count) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const auto img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803) {
    std::ostringstream msg;
    msg << images_path.string() << ": bad magic 0x" << std::hex << img_magic << " at offset 0, expected 0x803";
    throw FormatError(msg.str());
  }
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t need = 16 + n * rows * cols;
  if (img.size() < need) {
    throw FormatError(images_path.string() + ": truncated pixel data at offset " + std::to_string(img.size()) +
                      ", expected " + std::to_string(need) + " bytes");
  }

  const auto lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801) {
    std::ostringstream msg;
    msg << labels_path.string() << ": bad magic 0x" << std::hex << lab_magic << " at offset 0, expected 0x801";
    throw FormatError(msg.str());
  }
  const std::size_t nl = read_be32(lab, 4, labels_path);
  if (nl != n) {
    throw FormatError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) +
                      " labels (label header at offset 4)");
  }
  if (lab.size() < 8 + nl) {
    throw FormatError(labels_path.string() + ": truncated label data at offset " + std::to_string(lab.size()) +
                      ", expected " + std::to_string(8 + nl) + " bytes");
  }

  Tensor features({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) features[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<ClassId> labels(n);
  ClassId max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<ClassId>(lab[8 + i]);
    max_label = std::max(max_label, labels[i]);
  }
  if (class_count == 0) class_count = static_cast<std::size_t>(max_label) + 1;
  return Dataset(std::move(features), std::move(labels), class_count);
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  const auto& fs = ds.feature_shape();
  std::size_t rows = 0, cols = 0;
  if (fs.size() == 3 && fs[0] == 1) {
    rows = fs[1];
    cols = fs[2];
  } else if (fs.size() == 2) {
    rows = fs[0];
    cols = fs[1];
  } else {
    throw DimensionError("write_idx needs grayscale images, got feature shape " + shape_str(fs));
  }
  std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
  std::ofstream lab(labels_path, std::ios::binary | std::ios::trunc);
  if (!img || !lab) throw IoError("cannot create IDX files at " + images_path.string());
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(ds.size()));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  std::vector<char> pixels(ds.size() * rows * cols);
  const auto all = ds.all_features().data();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float v = std::clamp(all[i], 0.0f, 1.0f);
    pixels[i] = static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  }
  img.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (auto y : ds.labels()) lab.put(static_cast<char>(y));
  if (!img || !lab) throw IoError("failed writing IDX files at " + images_path.string());
}

Dataset load_csv(const std::filesystem::path& path, bool skip_header, std::size_t class_count) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<float> values;
  std::vector<ClassId> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (skip_header && line_no == 1) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": need at least one feature and a label");
    }
    if (width == 0) width = cells.size() - 1;
    if (cells.size() - 1 != width) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                        " features, found " + std::to_string(cells.size() - 1));
    }
    for (std::size_t j = 0; j < cells.size(); ++j) {
      char* end = nullptr;
      const double v = std::strtod(cells[j].c_str(), &end);
      if (end == cells[j].c_str()) {
        throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": column " + std::to_string(j + 1) +
                          " is not a number: '" + cells[j] + "'");
      }
      if (j + 1 < cells.size()) {
        values.push_back(static_cast<float>(v));
      } else {
        if (v != std::floor(v) || v < 0) {
          throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": label must be a non-negative integer");
        }
        labels.push_back(static_cast<ClassId>(v));
      }
    }
  }
  if (labels.empty()) throw FormatError(path.string() + ": no examples");
  if (class_count == 0) class_count = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  const std::size_t n = labels.size();
  return Dataset(Tensor({n, width}, std::move(values)), std::move(labels), class_count);
}

Dataset synth_blobs(std::size_t n_per_class, std::size_t class_count, std::size_t dim, double separation,
                    std::uint64_t seed) {
  if (n_per_class == 0 || class_count == 0 || dim == 0) {
    throw ConfigError("synth_blobs: n_per_class, class_count and dim must be positive");
  }
  if (dim < class_count) {
    throw ConfigError("synth_blobs: dim (" + std::to_string(dim) + ") must be at least class_count (" +
                      std::to_string(class_count) + ")");
  }
  Rng rng(seed);
  const std::size_t n = n_per_class * class_count;
  Tensor features({n, dim});
  std::vector<ClassId> labels(n);
  std::size_t i = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    for (std::size_t k = 0; k < n_per_class; ++k, ++i) {
      labels[i] = static_cast<ClassId>(c);
      auto row = features.row(i);
      for (std::size_t d = 0; d < dim; ++d) row[d] = static_cast<float>(rng.normal() + (d == c ? separation : 0.0));
    }
  }
  return Dataset(std::move(features), std::move(labels), class_count);
}

namespace {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1, int segments) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double a = (deg0 + (deg1 - deg0) * i / segments) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

// Glyph skeletons in a unit box, y pointing down.
std::vector<Stroke> glyph(int digit) {
  switch (digit) {
    case 0: return {arc(0.5, 0.5, 0.3, 0.42, 0, 360, 24)};
    case 1: return {{{0.35, 0.25}, {0.55, 0.08}, {0.55, 0.92}}};
    case 2: {
      auto s = arc(0.5, 0.32, 0.28, 0.24, 200, 380, 12);
      s.push_back({0.2, 0.92});
      s.push_back({0.82, 0.92});
      return {s};
    }
    case 3: return {arc(0.48, 0.28, 0.26, 0.2, 200, 450, 14), arc(0.48, 0.7, 0.3, 0.22, 270, 520, 14)};
    case 4: return {{{0.62, 0.92}, {0.62, 0.08}, {0.18, 0.62}, {0.85, 0.62}}};
    case 5: return {{{0.78, 0.1}, {0.32, 0.1}, {0.28, 0.45}}, arc(0.5, 0.65, 0.3, 0.26, 220, 500, 16)};
    case 6: return {{{0.7, 0.1}, {0.4, 0.35}, {0.25, 0.65}}, arc(0.5, 0.68, 0.25, 0.24, 180, 540, 20)};
    case 7: return {{{0.18, 0.1}, {0.82, 0.1}, {0.42, 0.92}}};
    case 8: return {arc(0.5, 0.28, 0.22, 0.2, 0, 360, 18), arc(0.5, 0.7, 0.28, 0.22, 0, 360, 20)};
    default: return {arc(0.5, 0.32, 0.25, 0.22, 0, 360, 18), {{0.75, 0.32}, {0.7, 0.92}}};
  }
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

void render_digit(int digit, Rng& rng, std::span<float> out) {
  constexpr int kSide = 28;
  const double angle = 0.15 * rng.normal();
  const double scale = rng.uniform(0.8, 1.1);
  const double shear = 0.1 * rng.normal();
  const double tx = 1.5 * rng.normal(), ty = 1.5 * rng.normal();
  const double half_width = rng.uniform(0.9, 1.8);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<Stroke> strokes = glyph(digit);
  for (auto& s : strokes) {
    for (auto& p : s) {
      // Jitter, then map the unit box onto the central 20x20 field.
      const double ux = p.x + 0.03 * rng.normal() - 0.5;
      const double uy = p.y + 0.03 * rng.normal() - 0.5;
      const double sx = scale * (ux + shear * uy), sy = scale * uy;
      p = {14.0 + tx + 20.0 * (ca * sx - sa * sy), 14.0 + ty + 20.0 * (sa * sx + ca * sy)};
    }
  }
  for (int r = 0; r < kSide; ++r) {
    for (int c = 0; c < kSide; ++c) {
      const Point p{c + 0.5, r + 0.5};
      double d = 1e9;
      for (const auto& s : strokes)
        for (std::size_t k = 0; k + 1 < s.size(); ++k) d = std::min(d, segment_distance(p, s[k], s[k + 1]));
      double v = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
      v = std::clamp(v + 0.05 * rng.normal(), 0.0, 1.0);
      out[static_cast<std::size_t>(r * kSide + c)] = static_cast<float>(v);
    }
  }
}

}  // namespace

Dataset synth_digits(std::size_t n_per_class, std::uint64_t seed) {
  if (n_per_class == 0) throw ConfigError("synth_digits: n_per_class must be positive");
  Rng rng(seed);
  const std::size_t n = 10 * n_per_class;
  Tensor features({n, 1, 28, 28});
  std::vector<ClassId> labels(n);
  // Interleave classes so any prefix is balanced.
  for (std::size_t i = 0; i < n; ++i) {
    const int digit = static_cast<int>(i % 10);
    labels[i] = digit;
    render_digit(digit, rng, features.row(i));
  }
  return Dataset(std::move(features), std::move(labels), 10);
}

std::vector<std::byte> BatchPlan::serialize() const {
  detail::ByteWriter w;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(mode));
  w.put<std::uint64_t>(seed);
  w.put<std::uint32_t>(epochs);
  w.put<std::uint64_t>(steps.size());
  for (const auto& s : steps) {
    w.put<std::uint32_t>(s.epoch);
    w.put<std::int32_t>(s.batch_class);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.batch.size()));
    for (auto id : s.batch) w.put<std::uint32_t>(id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.ghost.size()));
    for (auto id : s.ghost) w.put<std::uint32_t>(id);
  }
  return std::move(w.buffer());
}

BatchPlan plan_single_instance(const Dataset& ds, std::uint32_t epochs, std::uint64_t seed) {
  if (ds.empty()) throw ConfigError("cannot plan over an empty dataset");
  BatchPlan plan{SamplingMode::kSingleInstance, seed, epochs, {}, {}};
  Rng rng(seed);
  std::vector<ExampleId> order(ds.size());
  plan.steps.reserve(ds.size() * epochs);
  for (std::uint32_t e = 0; e < epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<ExampleId>(i);
    rng.shuffle(std::span(order));
    for (auto id : order) plan.steps.push_back({{id}, ds.label(id), {}, e});
  }
  return plan;
}

std::vector<std::size_t> ghost_counts(const Dataset& ds, std::size_t ghost_per_class) {
  std::vector<std::size_t> counts(ds.class_count(), 0);
  if (ghost_per_class == 0) return counts;
  const auto& priors = ds.class_priors();
  const double c = static_cast<double>(ds.class_count());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (priors[k] <= 0.0) continue;
    const auto m = std::llround(static_cast<double>(ghost_per_class) * priors[k] * c);
    counts[k] = static_cast<std::size_t>(std::max<long long>(1, m));
  }
  return counts;
}

BatchPlan plan_single_class(const Dataset& ds, std::size_t batch_size, std::size_t ghost_per_class,
                            std::uint32_t epochs, std::uint64_t seed) {
  if (ds.empty()) throw ConfigError("cannot plan over an empty dataset");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  auto by_class = ds.indices_by_class();
  std::size_t smallest = ds.size();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) {
      throw ConfigError("class " + std::to_string(c) + " has no examples; single-class batching needs every class");
    }
    smallest = std::min(smallest, by_class[c].size());
  }
  BatchPlan plan{SamplingMode::kSingleClass, seed, epochs, {}, {}};
  if (batch_size > smallest) {
    plan.warnings.push_back("batch_size " + std::to_string(batch_size) + " exceeds smallest class size " +
                            std::to_string(smallest) + "; short batches emitted");
  }
  const auto ghosts = ghost_counts(ds, ghost_per_class);
  Rng rng(seed);
  for (std::uint32_t e = 0; e < epochs; ++e) {
    std::vector<PlanStep> epoch_steps;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      auto members = by_class[c];
      rng.shuffle(std::span(members));
      for (std::size_t start = 0; start < members.size(); start += batch_size) {
        const auto end = std::min(members.size(), start + batch_size);
        PlanStep step;
        step.batch.assign(members.begin() + static_cast<std::ptrdiff_t>(start),
                          members.begin() + static_cast<std::ptrdiff_t>(end));
        step.batch_class = static_cast<ClassId>(c);
        step.epoch = e;
        epoch_steps.push_back(std::move(step));
      }
    }
    rng.shuffle(std::span(epoch_steps));
    for (auto& step : epoch_steps) {
      for (std::size_t c = 0; c < by_class.size(); ++c) {
        for (std::size_t k = 0; k < ghosts[c]; ++k) {
          step.ghost.push_back(by_class[c][static_cast<std::size_t>(rng.uniform_index(by_class[c].size()))]);
        }
      }
      plan.steps.push_back(std::move(step));
    }
  }
  return plan;
}

}  // namespace wtrace
