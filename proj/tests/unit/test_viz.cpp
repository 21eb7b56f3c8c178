#include <regex>

#include "doctest.h"
#include "oracles.hpp"
#include "wtrace/error.hpp"
#include "wtrace/viz.hpp"

using namespace wtrace;

namespace {

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + needle.size())) ++n;
  return n;
}

RidgeData ridge_with(std::vector<std::vector<KdeSample>> per_class, ClassId predicted) {
  RidgeData rd;
  rd.grid = make_grid();
  rd.predicted_class = predicted;
  const auto c = per_class.size();
  rd.probabilities.assign(c, 0.5 / static_cast<double>(c));
  rd.probabilities[static_cast<std::size_t>(predicted)] += 0.5;
  for (std::size_t i = 0; i < c; ++i) {
    ClassRidge cr;
    cr.class_id = static_cast<ClassId>(i);
    cr.probability = rd.probabilities[i];
    cr.samples = per_class[i];
    if (!cr.samples.empty()) cr.density = kde(cr.samples, rd.bandwidth, rd.grid);
    rd.classes.push_back(cr);
    rd.shown_classes.push_back(static_cast<ClassId>(i));
  }
  return rd;
}

Dataset image_set() {
  Tensor features({5, 1, 4, 3});
  for (std::size_t i = 0; i < features.size(); ++i) features[i] = static_cast<float>(i % 7) / 6.0f;
  return Dataset(features, {0, 1, 0, 1, 1}, 2);
}

InfluenceReport report_for(std::vector<ScoredExample> top) {
  InfluenceReport r;
  r.gamma = top;
  r.top_k = top;
  r.k = top.size();
  return r;
}

}  // namespace

TEST_CASE("render_ridge: one class gives one path") {
  const auto svg = render_ridge(ridge_with({{{0.2, 1.0}, {0.4, 2.0}}}, 0));
  CHECK(count(svg, "<path ") == 1);
  CHECK(svg.find("class=\"ridge predicted\"") != std::string::npos);
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("render_ridge: one path per class with samples, predicted highlighted") {
  const auto rd = ridge_with({{{0.2, 1.0}}, {{-0.3, 1.0}}, {}}, 1);
  const auto svg = render_ridge(rd);
  CHECK(count(svg, "<path ") == 2);
  CHECK(count(svg, "ridge predicted") == 1);
  CHECK(svg.find("data-class=\"1\"") != std::string::npos);
  CHECK(svg.find("no samples") != std::string::npos);
  CHECK(svg == render_ridge(rd));
}

TEST_CASE("render_ridge: label placement and style validation") {
  const auto rd = ridge_with({{{0.0, 1.0}}, {{0.5, 1.0}}}, 0);
  RidgePlotStyle right;
  right.labels = LabelPlacement::kRight;
  CHECK(render_ridge(rd, right) != render_ridge(rd));
  RidgePlotStyle bad;
  bad.row_offset = 0;
  CHECK_THROWS_AS(render_ridge(rd, bad), ConfigError);
}

TEST_CASE("render_ridge: empty data gives a placeholder") {
  RidgeData rd;
  const auto svg = render_ridge(rd);
  CHECK(svg.find("no ridge data to display") != std::string::npos);
  CHECK(count(svg, "<path ") == 0);
}

TEST_CASE("render_gallery: input first, then the ranked examples") {
  const auto ds = image_set();
  const auto g = render_gallery(report_for({{3, 2.0}, {0, 1.5}, {4, 1.0}}), ds, ds.example(2), 3);
  CHECK(g.warnings.empty());
  CHECK(count(g.svg, "<image ") == 4);
  CHECK(g.svg.find("class=\"input\"") < g.svg.find("class=\"influential\""));
  const auto first = g.svg.find("#1 id 3 class 1");
  const auto second = g.svg.find("#2 id 0 class 0");
  const auto third = g.svg.find("#3 id 4 class 1");
  REQUIRE(first != std::string::npos);
  CHECK(first < second);
  CHECK(second < third);
  CHECK(g.svg.find("data:image/x-portable-graymap;base64,") != std::string::npos);
}

TEST_CASE("render_gallery: k of zero and clamping") {
  const auto ds = image_set();
  const auto r = report_for({{3, 2.0}, {0, 1.5}});
  const auto zero = render_gallery(r, ds, ds.example(0), 0);
  CHECK(count(zero.svg, "<image ") == 1);
  CHECK(zero.warnings.empty());
  const auto many = render_gallery(r, ds, ds.example(0), 4);
  CHECK(count(many.svg, "<image ") == 3);
  CHECK(many.warnings.size() == 1);
  const auto huge = render_gallery(r, ds, ds.example(0), 50);
  CHECK(huge.warnings.size() == 2);
}

TEST_CASE("render_gallery: non-image features are unsupported") {
  const Dataset flat(oracle::random_tensor({4, 6}, 1), {0, 1, 0, 1}, 2);
  CHECK_THROWS_AS(render_gallery(report_for({{0, 1.0}}), flat, flat.example(0), 1), UnsupportedRenderError);
  const auto ds = image_set();
  CHECK_THROWS_AS(render_gallery(report_for({{9, 1.0}}), ds, ds.example(0), 1), IndexError);
}

TEST_CASE("to_pgm: header and clamped pixels") {
  const auto img = Tensor({1, 2, 2}, {0.0f, 1.0f, 0.5f, 2.0f});
  const auto bytes = to_pgm(img);
  const std::string header = "P5\n2 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 4);
  CHECK(std::string(reinterpret_cast<const char*>(bytes.data()), header.size()) == header);
  CHECK(static_cast<int>(bytes[header.size()]) == 0);
  CHECK(static_cast<int>(bytes[header.size() + 1]) == 255);
  CHECK(static_cast<int>(bytes[header.size() + 2]) == 128);
  CHECK(static_cast<int>(bytes[header.size() + 3]) == 255);
  CHECK_THROWS_AS(to_pgm(Tensor({3, 2, 2})), UnsupportedRenderError);
}
