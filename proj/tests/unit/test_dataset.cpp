#include <fstream>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"
#include "wtrace/dataset.hpp"
#include "wtrace/error.hpp"

using namespace wtrace;

namespace {

const std::filesystem::path kFixtures = WTRACE_FIXTURE_DIR;

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string error_text(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("load_idx: four-image fixture") {
  const auto ds = load_idx(kFixtures / "four-images.idx3-ubyte", kFixtures / "four-labels.idx1-ubyte");
  REQUIRE(ds.size() == 4);
  CHECK(ds.feature_shape() == Shape{1, 28, 28});
  CHECK(ds.labels() == std::vector<ClassId>{3, 1, 4, 1});
  CHECK(ds.class_count() == 5);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto x = ds.features(k);
    CHECK(x[0] == doctest::Approx(10.0 * k / 255.0));
    CHECK(x[5 * 28 + 4 + 5 * k] == 1.0f);
    CHECK(x[5 * 28 + 3 + 5 * k] == 0.0f);
  }
}

TEST_CASE("load_idx: malformed inputs raise format errors") {
  testing::TempDir tmp;
  const auto images = kFixtures / "four-images.idx3-ubyte";
  CHECK(error_text([&] { load_idx(images, kFixtures / "three-labels.idx1-ubyte"); }).find("count") != std::string::npos);

  write_bytes(tmp / "empty", {});
  CHECK_THROWS_AS(load_idx(tmp / "empty", kFixtures / "four-labels.idx1-ubyte"), FormatError);

  auto bytes = read_bytes(images);
  bytes[3] = 0x01;
  write_bytes(tmp / "magic", bytes);
  CHECK(error_text([&] { load_idx(tmp / "magic", kFixtures / "four-labels.idx1-ubyte"); }).find("magic") != std::string::npos);

  bytes = read_bytes(images);
  bytes.resize(bytes.size() - 100);
  write_bytes(tmp / "short", bytes);
  CHECK(error_text([&] { load_idx(tmp / "short", kFixtures / "four-labels.idx1-ubyte"); }).find("offset") !=
        std::string::npos);
}

TEST_CASE("write_idx round-trips byte-valued images") {
  testing::TempDir tmp;
  const auto ds = load_idx(kFixtures / "four-images.idx3-ubyte", kFixtures / "four-labels.idx1-ubyte");
  write_idx(ds, tmp / "img", tmp / "lbl");
  CHECK(read_bytes(tmp / "img") == read_bytes(kFixtures / "four-images.idx3-ubyte"));
  CHECK(read_bytes(tmp / "lbl") == read_bytes(kFixtures / "four-labels.idx1-ubyte"));
}

TEST_CASE("load_csv: features then label, header flag, line-numbered errors") {
  testing::TempDir tmp;
  {
    std::ofstream(tmp / "a.csv") << "x,y,label\n0.5,1,0\n-2,3.25,1\n";
  }
  const auto ds = load_csv(tmp / "a.csv", true);
  CHECK(ds.size() == 2);
  CHECK(ds.feature_shape() == Shape{2});
  CHECK(ds.features(1)[1] == 3.25f);
  CHECK(ds.label(1) == 1);
  CHECK_THROWS_AS(load_csv(tmp / "a.csv", false), FormatError);
  {
    std::ofstream(tmp / "b.csv") << "1,2,0\n1,2\n";
  }
  CHECK(error_text([&] { load_csv(tmp / "b.csv"); }).find("line 2") != std::string::npos);
}

TEST_CASE("dataset invariants: labels in range, priors from counts") {
  CHECK_THROWS_AS(Dataset(Tensor({2, 1}, 0.0f), {0, 2}, 2), IndexError);
  const Dataset ds(Tensor({4, 1}, 0.0f), {0, 1, 1, 1}, 2);
  CHECK(ds.class_priors()[0] == 0.25);
  CHECK(ds.class_priors()[1] == 0.75);
}

TEST_CASE("synth_blobs: determinism, separation, linear separability") {
  const auto a = synth_blobs(100, 2, 2, 6.0, 42), b = synth_blobs(100, 2, 2, 6.0, 42);
  CHECK(a.all_features() == b.all_features());
  CHECK(a.labels() == b.labels());
  CHECK(a.digest() == b.digest());
  CHECK(synth_blobs(100, 2, 2, 6.0, 43).digest() != a.digest());

  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (std::size_t i = 0; i < a.size(); ++i) {
    x.push_back({a.features(i)[0], a.features(i)[1]});
    y.push_back(a.label(i));
  }
  CHECK(oracle::logistic_regression_accuracy(x, y) >= 0.99);

  // separation 0: class means agree up to sampling noise
  const auto z = synth_blobs(2000, 2, 2, 0.0, 1);
  double m[2] = {0, 0};
  for (std::size_t i = 0; i < z.size(); ++i) m[z.label(i)] += z.features(i)[0];
  CHECK(std::fabs(m[0] - m[1]) / 2000.0 < 0.1);
  CHECK_THROWS_AS(synth_blobs(10, 3, 2, 1.0, 1), ConfigError);
}

TEST_CASE("synth_digits: ten balanced classes of 28x28 images in [0,1]") {
  const auto ds = synth_digits(5, 9);
  CHECK(ds.size() == 50);
  CHECK(ds.class_count() == 10);
  CHECK(ds.feature_shape() == Shape{1, 28, 28});
  for (auto v : ds.all_features().data()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(synth_digits(5, 9).digest() == ds.digest());
}

TEST_CASE("plan_single_instance") {
  const Dataset ds(Tensor({3, 1}, 0.0f), {0, 1, 0}, 2);
  const auto plan = plan_single_instance(ds, 2, 5);
  REQUIRE(plan.steps.size() == 6);
  for (std::uint32_t e = 0; e < 2; ++e) {
    std::multiset<ExampleId> seen;
    for (std::size_t s = 3 * e; s < 3 * e + 3; ++s) {
      const auto& st = plan.steps[s];
      CHECK(st.epoch == e);
      REQUIRE(st.batch.size() == 1);
      CHECK(st.batch_class == ds.label(st.batch[0]));
      CHECK(st.ghost.empty());
      seen.insert(st.batch[0]);
    }
    CHECK(seen == std::multiset<ExampleId>{0, 1, 2});
  }
  CHECK(plan_single_instance(ds, 2, 5).serialize() == plan.serialize());
  const Dataset one(Tensor({1, 1}, 0.0f), {0}, 1);
  const auto p1 = plan_single_instance(one, 1, 0);
  REQUIRE(p1.steps.size() == 1);
  CHECK(p1.steps[0].batch == std::vector<ExampleId>{0});
}

TEST_CASE("plan_single_class: pure batches, stratified ghosts, full epochs") {
  const auto ds = synth_blobs(37, 10, 10, 3.0, 2);
  const auto plan = plan_single_class(ds, 8, 4, 3, 11);
  std::vector<std::multiset<ExampleId>> per_epoch(3);
  for (const auto& st : plan.steps) {
    for (auto id : st.batch) CHECK(ds.label(id) == st.batch_class);
    CHECK(st.ghost.size() == 40);
    std::vector<int> per_class(10, 0);
    for (auto g : st.ghost) ++per_class[static_cast<std::size_t>(ds.label(g))];
    CHECK(per_class == std::vector<int>(10, 4));
    per_epoch[st.epoch].insert(st.batch.begin(), st.batch.end());
  }
  for (const auto& seen : per_epoch) {
    CHECK(seen.size() == ds.size());
    CHECK(std::set<ExampleId>(seen.begin(), seen.end()).size() == ds.size());
  }
  CHECK(plan_single_class(ds, 8, 4, 3, 11).serialize() == plan.serialize());
  CHECK(plan_single_class(ds, 8, 4, 3, 12).serialize() != plan.serialize());

  const Dataset small(Tensor({8, 1}, 0.0f), {0, 0, 0, 0, 1, 1, 1, 1}, 2);
  const auto p = plan_single_class(small, 4, 0, 1, 3);
  REQUIRE(p.steps.size() == 2);
  CHECK(p.steps[0].batch_class != p.steps[1].batch_class);
  CHECK(p.steps[0].ghost.empty());

  const auto warned = plan_single_class(small, 6, 1, 1, 3);
  CHECK(warned.warnings.size() == 1);
  CHECK(warned.steps.size() == 2);
}

TEST_CASE("ghost_counts follow class priors with a floor of one") {
  const Dataset ds(Tensor({10, 1}, 0.0f), {0, 0, 0, 0, 0, 0, 0, 0, 1, 1}, 3);
  CHECK(ghost_counts(ds, 4) == std::vector<std::size_t>{10, 2, 0});
  CHECK(ghost_counts(ds, 0) == std::vector<std::size_t>{0, 0, 0});
  std::vector<ClassId> labels(20, 0);
  labels[19] = 1;
  const Dataset rare(Tensor({20, 1}, 0.0f), labels, 2);
  CHECK(ghost_counts(rare, 4) == std::vector<std::size_t>{8, 1});
}
