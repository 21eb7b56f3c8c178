#include "wtrace/explain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include <fmt/format.h>

#include "json.hpp"
#include "wtrace/digest.hpp"
#include "wtrace/error.hpp"

namespace wtrace {

namespace {

struct Target {
  Tensor lowered;       // [in x P]
  std::vector<double> direction;  // [out * P], row-major
  double direction_norm = 0.0;
  double target = 0.0;  // <direction, pre-activation>
  std::size_t positions = 0;
  std::size_t column = 0;  // first column in the stacked input matrix
};

std::vector<Target> prepare(const Model& model, std::span<const Tensor> inputs, std::uint16_t layer_id,
                            const ExplainOptions& options) {
  if (layer_id >= model.tracked_count()) {
    throw IndexError(fmt::format("layer {} is not tracked; tracked layers: {}", layer_id, describe_tracked_layers(model)));
  }
  std::vector<Target> out;
  std::size_t column = 0;
  for (const auto& x : inputs) {
    const auto trace = trace_example(model, x);
    const auto& lt = trace.layers[layer_id];
    Target t;
    t.lowered = lower_input(model, layer_id, lt.input_activation);
    t.positions = t.lowered.dim(1);
    t.column = column;
    column += t.positions;
    const auto z = lt.pre_activation.data();
    const auto src = options.direction ? options.direction->data() : z;
    if (src.size() != z.size()) {
      throw DimensionError(fmt::format("direction has {} elements, pre-activation has {}", src.size(), z.size()));
    }
    t.direction.assign(src.begin(), src.end());
    double nn = 0.0, dz = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      nn += t.direction[i] * t.direction[i];
      dz += t.direction[i] * static_cast<double>(z[i]);
    }
    t.direction_norm = std::sqrt(nn);
    t.target = dz;
    out.push_back(std::move(t));
  }
  return out;
}

Tensor stack_columns(const std::vector<Target>& targets) {
  if (targets.size() == 1) return targets[0].lowered;
  const std::size_t rows = targets.front().lowered.dim(0);
  std::size_t cols = 0;
  for (const auto& t : targets) cols += t.positions;
  Tensor out({rows, cols});
  for (const auto& t : targets)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t p = 0; p < t.positions; ++p) out.at(r, t.column + p) = t.lowered.at(r, p);
  return out;
}

}  // namespace

std::string input_digest(const Tensor& x) {
  std::string bytes = shape_str(x.shape());
  const auto d = std::as_bytes(x.data());
  bytes.append(reinterpret_cast<const char*>(d.data()), d.size());
  return sha256_hex(bytes);
}

std::string describe_tracked_layers(const Model& model) {
  std::string s;
  for (std::size_t l = 0; l < model.tracked_count(); ++l) {
    if (l) s += ", ";
    s += fmt::format("{} ({})", l, model.tracked_spec(l).describe());
  }
  return s;
}

void for_each_contribution(const Model& model, const Ledger& ledger, std::span<const Tensor> inputs,
                           std::uint16_t layer_id, const ExplainOptions& options, const ContributionSink& sink) {
  ledger.check_arch(model.arch_hash());
  const auto targets = prepare(model, inputs, layer_id, options);
  if (targets.empty()) return;
  const Tensor stacked = stack_columns(targets);

  auto stream = ledger.replay(layer_id, options.replay_chunk);
  while (auto rec = stream.next()) {
    if (rec->step < options.min_step) continue;
    const Tensor applied = apply_delta(*rec, stacked);  // [out x sum P]
    const std::size_t out_rows = applied.dim(0);
    for (std::size_t m = 0; m < targets.size(); ++m) {
      const auto& t = targets[m];
      double gamma = 0.0, sq = 0.0;
      for (std::size_t o = 0; o < out_rows; ++o) {
        const float* a = applied.data().data() + o * applied.dim(1) + t.column;
        const double* d = t.direction.data() + o * t.positions;
        for (std::size_t p = 0; p < t.positions; ++p) {
          gamma += d[p] * a[p];
          sq += static_cast<double>(a[p]) * a[p];
        }
      }
      Contribution c;
      c.step = rec->step;
      c.provenance = rec->provenance;
      if (sq > 0.0) {
        c.magnitude = std::sqrt(sq);
        c.gamma = gamma;
        if (t.direction_norm > 0.0) c.cosine = std::clamp(gamma / (c.magnitude * t.direction_norm), -1.0, 1.0);
      }
      sink(m, c);
    }
  }
}

std::vector<Contribution> contributions(const Model& model, const Ledger& ledger, const Tensor& x,
                                        std::uint16_t layer_id, const ExplainOptions& options) {
  std::vector<Contribution> out;
  for_each_contribution(model, ledger, std::span(&x, 1), layer_id, options,
                        [&](std::size_t, const Contribution& c) { out.push_back(c); });
  return out;
}

std::vector<ScoredExample> top_k(std::vector<ScoredExample> scores, std::size_t k) {
  const auto better = [](const ScoredExample& a, const ScoredExample& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  k = std::min(k, scores.size());
  std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k), scores.end(), better);
  scores.resize(k);
  return scores;
}

std::vector<InfluenceReport> compute_influence(const Model& model, const Ledger& ledger, std::span<const Tensor> inputs,
                                               std::uint16_t layer_id, const InfluenceOptions& options) {
  if (options.k == 0) throw ConfigError("k must be at least 1");
  std::vector<InfluenceReport> reports(inputs.size());
  std::vector<std::map<ExampleId, double>> sums(inputs.size());
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    auto& r = reports[m];
    r.layer_id = layer_id;
    r.input_digest = input_digest(inputs[m]);
    r.include_init = options.include_init;
    r.min_step = options.explain.min_step;
    r.k = options.k;
  }
  for_each_contribution(model, ledger, inputs, layer_id, options.explain, [&](std::size_t m, const Contribution& c) {
    auto& r = reports[m];
    ++r.records;
    if (c.provenance.kind == ProvenanceKind::kInitialization) {
      r.init_gamma += c.gamma;
      if (options.include_init) r.gamma_total += c.gamma;
      return;
    }
    r.gamma_total += c.gamma;
    for (auto id : c.provenance.example_ids) sums[m][id] += c.gamma;
  });
  const auto targets = prepare(model, inputs, layer_id, options.explain);
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    auto& r = reports[m];
    r.target = targets[m].target;
    r.gamma.assign(sums[m].begin(), sums[m].end());
    r.top_k = top_k(r.gamma, options.k);
    if (r.records == 0) {
      r.warnings.push_back(ledger.record_count() == 0
                               ? "ledger has no records"
                               : fmt::format("no records at or after step {}", options.explain.min_step));
    } else if (r.gamma.empty()) {
      r.warnings.push_back("no example-attributed records in range");
    }
  }
  return reports;
}

InfluenceReport compute_influence(const Model& model, const Ledger& ledger, const Tensor& x, std::uint16_t layer_id,
                                  const InfluenceOptions& options) {
  return std::move(compute_influence(model, ledger, std::span(&x, 1), layer_id, options).front());
}

std::vector<double> make_grid(double lo, double hi, std::size_t points) {
  if (points < 2 || !(hi > lo)) throw ConfigError("grid needs at least 2 points and hi > lo");
  std::vector<double> g(points);
  const double step = (hi - lo) / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) g[i] = lo + step * static_cast<double>(i);
  g.back() = hi;
  return g;
}

std::vector<double> kde(std::span<const KdeSample> samples, double bandwidth, std::span<const double> grid) {
  if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive, got " + std::to_string(bandwidth));
  double total = 0.0;
  for (const auto& s : samples) total += s.weight;
  if (!(total > 0.0)) throw EmptyEstimateError("kernel density needs a positive total weight");
  const double norm = 1.0 / (bandwidth * total * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out(grid.size(), 0.0);
  for (const auto& s : samples) {
    if (s.weight == 0.0) continue;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const double u = (grid[i] - s.value) / bandwidth;
      out[i] += s.weight * std::exp(-0.5 * u * u);
    }
  }
  for (auto& v : out) v *= norm;
  return out;
}

namespace {

void finish_ridge(ClassRidge& cr, double bandwidth, const std::vector<double>& grid) {
  double w = 0.0, wc = 0.0;
  for (const auto& s : cr.samples) {
    w += s.weight;
    wc += s.weight * s.value;
  }
  if (w > 0.0) {
    cr.density = kde(cr.samples, bandwidth, grid);
    cr.mass_center = wc / w;
  }
}

}  // namespace

std::vector<RidgeData> ridge_data(const Model& model, const Ledger& ledger, std::span<const Tensor> inputs,
                                  std::uint16_t layer_id, const RidgeOptions& options) {
  if (!(options.bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
  const std::size_t classes = model.num_classes();
  const auto grid = make_grid(-1.0, 1.0, options.grid_points);
  std::vector<RidgeData> out(inputs.size());
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    auto& rd = out[m];
    rd.layer_id = layer_id;
    rd.input_digest = input_digest(inputs[m]);
    rd.bandwidth = options.bandwidth;
    rd.grid = grid;
    Shape batched{1};
    batched.insert(batched.end(), inputs[m].shape().begin(), inputs[m].shape().end());
    const auto probs = softmax(predict(model, inputs[m].reshaped(batched)));
    rd.probabilities.assign(probs.data().begin(), probs.data().end());
    rd.classes.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
      rd.classes[c].class_id = static_cast<ClassId>(c);
      rd.classes[c].probability = rd.probabilities[c];
    }
    rd.unattributed.class_id = kUnattributedClass;
    std::vector<ClassId> order(classes);
    for (std::size_t c = 0; c < classes; ++c) order[c] = static_cast<ClassId>(c);
    std::stable_sort(order.begin(), order.end(),
                     [&](ClassId a, ClassId b) { return rd.probabilities[a] > rd.probabilities[b]; });
    rd.predicted_class = order.front();
    order.resize(std::min(options.max_shown, classes));
    rd.shown_classes = order;
  }
  for_each_contribution(model, ledger, inputs, layer_id, options.explain, [&](std::size_t m, const Contribution& c) {
    auto& rd = out[m];
    const ClassId cls = c.provenance.kind == ProvenanceKind::kInitialization ? kInitClass : c.provenance.class_id;
    const KdeSample s{c.cosine, c.magnitude};
    if (cls >= 0 && static_cast<std::size_t>(cls) < classes) {
      rd.classes[static_cast<std::size_t>(cls)].samples.push_back(s);
    } else {
      rd.unattributed.samples.push_back(s);
    }
  });
  for (auto& rd : out) {
    for (auto& cr : rd.classes) finish_ridge(cr, options.bandwidth, grid);
    finish_ridge(rd.unattributed, options.bandwidth, grid);
    for (auto c : rd.shown_classes) {
      if (rd.ridge(c).density.empty()) rd.warnings.push_back(fmt::format("class {} has no weighted samples", c));
    }
  }
  return out;
}

RidgeData ridge_data(const Model& model, const Ledger& ledger, const Tensor& x, std::uint16_t layer_id,
                     const RidgeOptions& options) {
  return std::move(ridge_data(model, ledger, std::span(&x, 1), layer_id, options).front());
}

// ---------------------------------------------------------------------------
// JSON

namespace {

using nlohmann::json;

json scored_json(const std::vector<ScoredExample>& v) {
  json a = json::array();
  for (const auto& [id, g] : v) a.push_back({{"example", id}, {"gamma", g}});
  return a;
}

std::vector<ScoredExample> scored_from(const json& a) {
  std::vector<ScoredExample> v;
  for (const auto& e : a) v.emplace_back(e.at("example").get<ExampleId>(), e.at("gamma").get<double>());
  return v;
}

json ridge_json(const ClassRidge& cr) {
  json samples = json::array();
  for (const auto& s : cr.samples) samples.push_back({s.value, s.weight});
  return {{"class", cr.class_id},
          {"probability", cr.probability},
          {"samples", samples},
          {"density", cr.density},
          {"mass_center", cr.mass_center}};
}

ClassRidge ridge_from(const json& j) {
  ClassRidge cr;
  cr.class_id = j.at("class").get<ClassId>();
  cr.probability = j.at("probability").get<double>();
  for (const auto& s : j.at("samples")) cr.samples.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
  cr.density = j.at("density").get<std::vector<double>>();
  cr.mass_center = j.at("mass_center").get<double>();
  return cr;
}

template <class F>
auto parse_json(const std::string& text, const char* what, F&& f) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ") + what + " JSON: " + e.what());
  }
}

}  // namespace

std::string to_json(const InfluenceReport& r) {
  json j{{"kind", "influence"},
         {"layer", r.layer_id},
         {"input_digest", r.input_digest},
         {"include_init", r.include_init},
         {"min_step", r.min_step},
         {"k", r.k},
         {"gamma", scored_json(r.gamma)},
         {"top_k", scored_json(r.top_k)},
         {"gamma_total", r.gamma_total},
         {"init_gamma", r.init_gamma},
         {"target", r.target},
         {"records", r.records},
         {"warnings", r.warnings}};
  return j.dump(1);
}

InfluenceReport influence_from_json(const std::string& text) {
  return parse_json(text, "influence", [](const json& j) {
    if (j.value("kind", "") != "influence") throw FormatError("not an influence report");
    InfluenceReport r;
    r.layer_id = j.at("layer").get<std::uint16_t>();
    r.input_digest = j.at("input_digest").get<std::string>();
    r.include_init = j.at("include_init").get<bool>();
    r.min_step = j.at("min_step").get<std::uint64_t>();
    r.k = j.at("k").get<std::size_t>();
    r.gamma = scored_from(j.at("gamma"));
    r.top_k = scored_from(j.at("top_k"));
    r.gamma_total = j.at("gamma_total").get<double>();
    r.init_gamma = j.at("init_gamma").get<double>();
    r.target = j.at("target").get<double>();
    r.records = j.at("records").get<std::uint64_t>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    return r;
  });
}

std::string to_json(const RidgeData& rd) {
  json classes = json::array();
  for (const auto& cr : rd.classes) classes.push_back(ridge_json(cr));
  json j{{"kind", "ridge"},
         {"layer", rd.layer_id},
         {"input_digest", rd.input_digest},
         {"predicted_class", rd.predicted_class},
         {"bandwidth", rd.bandwidth},
         {"grid", rd.grid},
         {"probabilities", rd.probabilities},
         {"shown_classes", rd.shown_classes},
         {"classes", classes},
         {"unattributed", ridge_json(rd.unattributed)},
         {"warnings", rd.warnings}};
  return j.dump(1);
}

RidgeData ridge_from_json(const std::string& text) {
  return parse_json(text, "ridge", [](const json& j) {
    if (j.value("kind", "") != "ridge") throw FormatError("not a ridge document");
    RidgeData rd;
    rd.layer_id = j.at("layer").get<std::uint16_t>();
    rd.input_digest = j.at("input_digest").get<std::string>();
    rd.predicted_class = j.at("predicted_class").get<ClassId>();
    rd.bandwidth = j.at("bandwidth").get<double>();
    rd.grid = j.at("grid").get<std::vector<double>>();
    rd.probabilities = j.at("probabilities").get<std::vector<double>>();
    rd.shown_classes = j.at("shown_classes").get<std::vector<ClassId>>();
    for (const auto& c : j.at("classes")) rd.classes.push_back(ridge_from(c));
    rd.unattributed = ridge_from(j.at("unattributed"));
    rd.warnings = j.at("warnings").get<std::vector<std::string>>();
    return rd;
  });
}

}  // namespace wtrace
