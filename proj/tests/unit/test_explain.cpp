#include <cmath>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"
#include "wtrace/error.hpp"
#include "wtrace/explain.hpp"
#include "wtrace/optim.hpp"

using namespace wtrace;

namespace {

Provenance from(ExampleId id, ClassId c) { return {ProvenanceKind::kExamples, {id}, c, {}}; }

// One 2x2 linear layer: W0 = I, then two single-example steps.
struct HandLedger {
  testing::TempDir tmp;
  Model model{{LayerSpec::linear(2, 2)}, {2}, 1};
  Ledger ledger;

  HandLedger() : ledger(make()) {}

  Ledger make() {
    LedgerManifest m;
    m.arch_hash = model.arch_hash();
    m.layer_shapes = model.weight_shapes();
    auto l = Ledger::create(tmp / "hand.dlgr", m);
    l.append(StepRecord::make_dense(0, 0, Tensor::identity(2), Provenance::initialization(), 0, 0));
    l.append(StepRecord::make_dense(1, 0, Tensor::matrix({{1, 1}, {0, 0}}), from(7, 0), 0.1f, 0));
    l.append(StepRecord::make_dense(2, 0, Tensor::matrix({{0, 0}, {2, -1}}), from(3, 1), 0.1f, 0));
    model.set_weight(0, l.reconstruct(0));
    return l;
  }
};

struct TrainedBlobs {
  testing::TempDir tmp;
  Dataset ds = synth_blobs(40, 2, 2, 4.0, 11);
  Model model{{LayerSpec::linear(2, 8), LayerSpec::relu(), LayerSpec::linear(8, 2)}, {2}, 5};
  Ledger ledger;

  explicit TrainedBlobs(bool factored = true, SamplingMode mode = SamplingMode::kSingleClass)
      : ledger(Ledger::create(tmp / "blobs.dlgr", make_manifest(model, ds))) {
    OptimizerConfig c;
    c.lr0 = 0.05;
    c.epochs = 2;
    TrainOptions opts;
    opts.factored = factored;
    opts.bn_variant = BnVariant::kBatchOnly;
    const auto plan = mode == SamplingMode::kSingleClass ? plan_single_class(ds, 4, 0, 2, 3) : plan_single_instance(ds, 2, 3);
    train(model, ds, plan, c, &ledger, opts);
  }
};

}  // namespace

TEST_CASE("contributions: hand-computed example") {
  HandLedger h;
  // W = [[2, 1], [2, 0]], x = (1, 2): z = (4, 2).
  const auto x = Tensor::vector({1, 2});
  const auto cs = contributions(h.model, h.ledger, x, 0);
  REQUIRE(cs.size() == 3);
  // init: delta f = (1, 2), gamma = 8
  CHECK(cs[0].gamma == doctest::Approx(8.0));
  CHECK(cs[0].provenance.kind == ProvenanceKind::kInitialization);
  // step 1: delta f = (3, 0), gamma = 12, cos = 12 / (3 * sqrt 20)
  CHECK(cs[1].gamma == doctest::Approx(12.0));
  CHECK(cs[1].magnitude == doctest::Approx(3.0));
  CHECK(cs[1].cosine == doctest::Approx(12.0 / (3.0 * std::sqrt(20.0))));
  // step 2: delta f = (0, 0), zero contribution
  CHECK(cs[2].gamma == 0.0);
  CHECK(cs[2].magnitude == 0.0);
  CHECK(cs[2].cosine == 0.0);

  const auto r = compute_influence(h.model, h.ledger, x, 0, {.k = 5, .include_init = true, .explain = {}});
  CHECK(r.target == doctest::Approx(20.0));
  CHECK(r.gamma_total == doctest::Approx(20.0));
  CHECK(r.init_gamma == doctest::Approx(8.0));
  REQUIRE(r.gamma.size() == 2);
  CHECK(r.gamma[0] == ScoredExample{3, 0.0});
  CHECK(r.gamma[1] == ScoredExample{7, 12.0});
  CHECK(r.top_k.front().first == 7);
}

TEST_CASE("contributions: orthogonal and opposing updates") {
  HandLedger h;
  // x = (1, -1): z = (1, 2). init delta f = (1, -1), gamma -1; step 1 delta f
  // = (0, 0); step 2 delta f = (0, 3), gamma 6.
  const auto cs = contributions(h.model, h.ledger, Tensor::vector({1, -1}), 0);
  CHECK(cs[0].gamma == doctest::Approx(-1.0));
  CHECK(cs[0].cosine < 0.0);
  CHECK(cs[1].gamma == 0.0);
  CHECK(cs[2].gamma == doctest::Approx(6.0));
  CHECK(cs[2].cosine == doctest::Approx(6.0 / (3.0 * std::sqrt(5.0))));
  // A supplied direction orthogonal to step 2's change.
  ExplainOptions opt;
  opt.direction = Tensor::vector({1, 0});
  const auto d = contributions(h.model, h.ledger, Tensor::vector({1, -1}), 0, opt);
  CHECK(d[2].gamma == 0.0);
  CHECK(d[2].cosine == 0.0);
  CHECK(d[2].magnitude == doctest::Approx(3.0));
  opt.direction = Tensor::vector({1, 0, 0});
  CHECK_THROWS_AS(contributions(h.model, h.ledger, Tensor::vector({1, -1}), 0, opt), DimensionError);
}

TEST_CASE("contributions: errors name the tracked layers") {
  HandLedger h;
  try {
    contributions(h.model, h.ledger, Tensor::vector({1, 2}), 4);
    FAIL("expected IndexError");
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find("0 (linear 2 2)") != std::string::npos);
  }
  const Model other({LayerSpec::linear(2, 3)}, {2}, 1);
  CHECK_THROWS_AS(contributions(other, h.ledger, Tensor::vector({1, 2}), 0), ArchMismatchError);
}

TEST_CASE("influence: include_init and min_step") {
  HandLedger h;
  const auto x = Tensor::vector({1, 2});
  InfluenceOptions opt;
  opt.include_init = false;
  const auto r = compute_influence(h.model, h.ledger, x, 0, opt);
  CHECK(r.gamma_total == doctest::Approx(12.0));
  CHECK(r.init_gamma == doctest::Approx(8.0));

  opt.explain.min_step = 2;
  const auto late = compute_influence(h.model, h.ledger, x, 0, opt);
  CHECK(late.records == 1);
  CHECK(late.gamma_total == 0.0);

  opt.explain.min_step = 9;
  const auto none = compute_influence(h.model, h.ledger, x, 0, opt);
  CHECK(none.records == 0);
  CHECK(none.top_k.empty());
  REQUIRE(none.warnings.size() == 1);
  CHECK(none.warnings[0] == "no records at or after step 9");

  opt.k = 0;
  CHECK_THROWS_AS(compute_influence(h.model, h.ledger, x, 0, opt), ConfigError);
}

TEST_CASE("top_k: descending with ties broken by ascending id") {
  const std::vector<ScoredExample> s{{3, 1.0}, {1, 1.0}, {2, 2.0}, {0, -1.0}};
  CHECK(top_k(s, 2) == std::vector<ScoredExample>{{2, 2.0}, {1, 1.0}});
  CHECK(top_k(s, 3) == std::vector<ScoredExample>{{2, 2.0}, {1, 1.0}, {3, 1.0}});
  CHECK(top_k(s, 10).size() == 4);
  CHECK(top_k({}, 3).empty());
}

TEST_CASE("influence: contributions sum to the pre-activation") {
  TrainedBlobs t;
  Rng rng(4);
  for (int i = 0; i < 5; ++i) {
    const auto x = Tensor::vector({static_cast<float>(rng.normal() * 3), static_cast<float>(rng.normal() * 3)});
    for (std::uint16_t l = 0; l < 2; ++l) {
      const auto r = compute_influence(t.model, t.ledger, x, l);
      CHECK(std::abs(r.gamma_total - r.target) <= 1e-3 * std::max(1.0, std::abs(r.target)));
      double by_example = 0.0;
      for (const auto& [id, g] : r.gamma) by_example += g;
      // Each batch member receives its step's full gamma; single-class batches
      // of 4 therefore count every step four times.
      CHECK(by_example == doctest::Approx(4.0 * (r.gamma_total - r.init_gamma)).epsilon(1e-6));
    }
  }
}

TEST_CASE("influence: the factoring option leaves small layers unchanged") {
  TrainedBlobs f(true), d(false);
  // Rank-4 factors of an 8x2 delta would be larger than the delta itself.
  std::size_t factored = 0;
  auto stream = f.ledger.replay(1);
  while (auto rec = stream.next()) factored += rec->encoding == Encoding::kFactored;
  const auto x = Tensor::vector({1.5f, -0.5f});
  for (std::uint16_t l = 0; l < 2; ++l) {
    const auto a = contributions(f.model, f.ledger, x, l);
    const auto b = contributions(d.model, d.ledger, x, l);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].gamma == doctest::Approx(b[i].gamma).epsilon(1e-5).scale(1e-6));
    }
  }
  CHECK(factored == 0);
}

TEST_CASE("influence: factored records give the same contributions as their dense form") {
  testing::TempDir tmp;
  const Model model({LayerSpec::linear(64, 48)}, {64}, 2);
  LedgerManifest m;
  m.arch_hash = model.arch_hash();
  m.layer_shapes = model.weight_shapes();
  auto lf = Ledger::create(tmp / "f.dlgr", m);
  auto ld = Ledger::create(tmp / "d.dlgr", m);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto u = oracle::random_tensor({48, 3}, 10 + s, 0.1), v = oracle::random_tensor({64, 3}, 50 + s);
    const Provenance p{ProvenanceKind::kExamples, {1, 2, 3}, 0, {}};
    const auto fr = StepRecord::make_factored(s + 1, 0, u, v, p, 0.1f, 0);
    lf.append(fr);
    ld.append(StepRecord::make_dense(s + 1, 0, decode_delta(fr), p, 0.1f, 0));
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = oracle::random_tensor({64}, 900 + seed);
    const auto a = contributions(model, lf, x, 0), b = contributions(model, ld, x, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(a[i].gamma - b[i].gamma) <= 1e-5 * std::max(1.0, std::abs(b[i].gamma)));
      CHECK(std::abs(a[i].cosine - b[i].cosine) <= 1e-5);
    }
  }
}

TEST_CASE("influence: first-layer scale equivariance") {
  TrainedBlobs t;
  const auto x = Tensor::vector({0.7f, -1.3f});
  const double a = 2.5;
  const auto base = contributions(t.model, t.ledger, x, 0);
  const auto scaled = contributions(t.model, t.ledger, scale(x, a), 0);
  REQUIRE(base.size() == scaled.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(scaled[i].gamma == doctest::Approx(a * a * base[i].gamma).epsilon(1e-4).scale(1e-6));
    CHECK(scaled[i].cosine == doctest::Approx(base[i].cosine).epsilon(1e-4).scale(1e-6));
  }
}

TEST_CASE("contributions: scaling one record scales its gamma and magnitude") {
  HandLedger h;
  testing::TempDir tmp;
  LedgerManifest m;
  m.arch_hash = h.model.arch_hash();
  m.layer_shapes = h.model.weight_shapes();
  auto scaled = Ledger::create(tmp / "scaled.dlgr", m);
  const double c = 3.5;
  auto stream = h.ledger.replay(0);
  while (auto rec = stream.next()) {
    if (rec->step == 1) rec->dense = scale(rec->dense, c);
    scaled.append(*rec);
  }
  for (const auto& x : {Tensor::vector({1, 2}), Tensor::vector({-0.5f, 3})}) {
    const auto a = contributions(h.model, h.ledger, x, 0), b = contributions(h.model, scaled, x, 0);
    CHECK(b[1].gamma == doctest::Approx(c * a[1].gamma).epsilon(1e-6));
    CHECK(b[1].magnitude == doctest::Approx(c * a[1].magnitude).epsilon(1e-6));
    CHECK(std::abs(b[1].cosine - a[1].cosine) <= 1e-6);
    CHECK(b[0].gamma == a[0].gamma);
  }
}

TEST_CASE("contributions: deltas applied to the input sum to the pre-activation") {
  TrainedBlobs t(true, SamplingMode::kSingleInstance);
  const auto x = Tensor::vector({0.3f, -2.0f});
  const auto trace = trace_example(t.model, x);
  for (std::uint16_t l = 0; l < 2; ++l) {
    const auto lowered = lower_input(t.model, l, trace.layers[l].input_activation);
    std::vector<double> sum(trace.layers[l].pre_activation.size(), 0.0);
    auto stream = t.ledger.replay(l);
    while (auto rec = stream.next()) {
      const auto d = apply_delta(*rec, lowered);
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d[i];
    }
    const auto& z = trace.layers[l].pre_activation;
    for (std::size_t i = 0; i < sum.size(); ++i) CHECK(std::abs(sum[i] - z[i]) <= 1e-4 * std::max(1.0, std::abs(static_cast<double>(z[i]))));
  }
}

TEST_CASE("influence: batch and single calls agree") {
  TrainedBlobs t(true, SamplingMode::kSingleInstance);
  const std::vector<Tensor> xs{Tensor::vector({1, 2}), Tensor::vector({-3, 0.5f}), Tensor::vector({0, 0})};
  const auto batch = compute_influence(t.model, t.ledger, xs, 0);
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(batch[i] == compute_influence(t.model, t.ledger, xs[i], 0));
  const auto ridges = ridge_data(t.model, t.ledger, xs, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(ridges[i] == ridge_data(t.model, t.ledger, xs[i], 1));
}

TEST_CASE("kde: single sample, weights and normalization") {
  const auto grid = make_grid(-1, 1, 201);
  CHECK(grid.size() == 201);
  CHECK(grid.front() == -1.0);
  CHECK(grid[100] == doctest::Approx(0.0));
  CHECK(grid.back() == 1.0);
  const std::vector<KdeSample> one{{0.0, 2.0}};
  const auto d = kde(one, 0.1, grid);
  CHECK(d[100] == doctest::Approx(1.0 / (0.1 * std::sqrt(2 * std::numbers::pi))));
  CHECK(d[110] == doctest::Approx(oracle::gaussian_density(0.1, 0.0, 0.1)));

  // Two samples: the heavier one dominates; scaling every weight changes nothing.
  const std::vector<KdeSample> two{{-0.5, 3.0}, {0.5, 1.0}}, two_scaled{{-0.5, 6.0}, {0.5, 2.0}};
  const auto a = kde(two, 0.2, grid), b = kde(two_scaled, 0.2, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]));
  CHECK(a[50] > a[150]);
  CHECK(a[50] == doctest::Approx(0.75 * oracle::gaussian_density(-0.5, -0.5, 0.2) +
                                 0.25 * oracle::gaussian_density(-0.5, 0.5, 0.2)));

  // Mass on a wide grid integrates to one.
  const auto wide = make_grid(-5, 5, 2001);
  const auto w = kde(two, 0.2, wide);
  double integral = 0.0;
  for (std::size_t i = 1; i < wide.size(); ++i) integral += 0.5 * (w[i] + w[i - 1]) * (wide[i] - wide[i - 1]);
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-6));

  const std::vector<KdeSample> zero{{0.3, 0.0}};
  CHECK_THROWS_AS(kde(zero, 0.1, grid), EmptyEstimateError);
  CHECK_THROWS_AS(kde(one, 0.0, grid), ConfigError);
  CHECK_THROWS_AS(make_grid(1, -1, 3), ConfigError);
}

TEST_CASE("kde: symmetry and flattening with bandwidth") {
  const auto grid = make_grid();
  const std::vector<KdeSample> pair{{-0.4, 1.0}, {0.4, 1.0}};
  const auto d = kde(pair, 0.1, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(std::abs(d[i] - d[grid.size() - 1 - i]) <= 1e-6);
  double last = std::numeric_limits<double>::infinity();
  for (double bw : {0.1, 1.0, 10.0}) {
    const auto e = kde(pair, bw, grid);
    const double ratio = *std::max_element(e.begin(), e.end()) / *std::min_element(e.begin(), e.end());
    CHECK(ratio < last);
    last = ratio;
  }
}

TEST_CASE("ridge: grouping by class") {
  HandLedger h;
  const auto rd = ridge_data(h.model, h.ledger, Tensor::vector({1, 2}), 0);
  CHECK(rd.classes.size() == 2);
  CHECK(rd.unattributed.samples.size() == 1);
  CHECK(rd.ridge(0).samples.size() == 1);
  CHECK(rd.ridge(1).samples.size() == 1);
  CHECK(rd.ridge(0).mass_center == doctest::Approx(12.0 / (3.0 * std::sqrt(20.0))));
  // Class 1's only sample has zero magnitude: no density, warned.
  CHECK(rd.ridge(1).density.empty());
  CHECK(rd.ridge(1).mass_center == 0.0);
  CHECK(rd.warnings.size() == 1);
  CHECK(rd.grid.size() == 201);
  CHECK(rd.shown_classes.size() == 2);
  CHECK(rd.probabilities[rd.shown_classes[0]] >= rd.probabilities[rd.shown_classes[1]]);
  CHECK(rd.predicted_class == rd.shown_classes[0]);
}

TEST_CASE("ridge: every record lands in exactly one group") {
  TrainedBlobs t(true, SamplingMode::kSingleInstance);
  const auto rd = ridge_data(t.model, t.ledger, Tensor::vector({2, 0}), 1);
  std::size_t n = rd.unattributed.samples.size();
  for (const auto& c : rd.classes) n += c.samples.size();
  CHECK(n == t.ledger.manifest().layer_record_counts[1]);
  for (const auto& c : rd.classes) {
    for (const auto& s : c.samples) {
      CHECK(s.value >= -1.0);
      CHECK(s.value <= 1.0);
    }
  }
}

TEST_CASE("json: influence and ridge round-trip canonically") {
  TrainedBlobs t;
  const auto x = Tensor::vector({1, -1});
  const auto r = compute_influence(t.model, t.ledger, x, 0, {.k = 3, .include_init = true, .explain = {}});
  const auto text = to_json(r);
  CHECK(influence_from_json(text) == r);
  CHECK(to_json(influence_from_json(text)) == text);
  const auto rd = ridge_data(t.model, t.ledger, x, 1);
  const auto rtext = to_json(rd);
  CHECK(ridge_from_json(rtext) == rd);
  CHECK(to_json(ridge_from_json(rtext)) == rtext);
  CHECK_THROWS_AS(influence_from_json(rtext), FormatError);
  CHECK_THROWS_AS(ridge_from_json("[1, 2"), FormatError);
}

TEST_CASE("input_digest: depends on values and shape") {
  CHECK(input_digest(Tensor::vector({1, 2})) == input_digest(Tensor::vector({1, 2})));
  CHECK(input_digest(Tensor::vector({1, 2})) != input_digest(Tensor::vector({2, 1})));
  CHECK(input_digest(Tensor::vector({1, 2})) != input_digest(Tensor::matrix({{1, 2}})));
  CHECK(input_digest(Tensor::vector({1})).size() == 64);
}
