#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"
#include "wtrace/digest.hpp"
#include "wtrace/error.hpp"
#include "wtrace/ledger.hpp"

using namespace wtrace;

namespace {

LedgerManifest manifest(std::vector<Shape> shapes) {
  LedgerManifest m;
  m.arch_hash = "arch";
  m.layer_shapes = std::move(shapes);
  m.dataset_digest = "data";
  m.metadata["note"] = "test";
  return m;
}

Provenance examples(std::vector<ExampleId> ids, ClassId c = kMixedClass) {
  return {ProvenanceKind::kExamples, std::move(ids), c, {}};
}

StepRecord dense_rec(std::uint64_t step, std::uint16_t layer, Shape shape, std::uint64_t seed) {
  return StepRecord::make_dense(step, layer, oracle::random_tensor(shape, seed), examples({static_cast<ExampleId>(step)}),
                                0.1f, 0);
}

std::vector<char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Writes steps 0..n-1 of one 3x2 layer and returns the records.
std::vector<StepRecord> fill(const std::filesystem::path& p, std::uint64_t n) {
  auto l = Ledger::create(p, manifest({{3, 2}}));
  std::vector<StepRecord> recs;
  for (std::uint64_t s = 0; s < n; ++s) {
    recs.push_back(dense_rec(s, 0, {3, 2}, s + 100));
    l.append(recs.back());
  }
  return recs;
}

}  // namespace

TEST_CASE("records: encode and parse round-trip") {
  const auto d = StepRecord::make_dense(7, 2, oracle::random_tensor({4, 3}, 1),
                                        {ProvenanceKind::kExamples, {5, 9}, 3, {1, 2, 8}}, 0.25f, 4);
  CHECK(parse_record(encode_record(d)) == d);
  CHECK(encode_record(d).size() == d.encoded_size());
  const auto f = StepRecord::make_factored(8, 0, oracle::random_tensor({4, 2}, 2), oracle::random_tensor({3, 2}, 3),
                                           examples({1, 2}), 0.5f, 1);
  CHECK(parse_record(encode_record(f)) == f);
  CHECK(f.delta_shape() == Shape{4, 3});
  CHECK(f.rank() == 2);
  const auto init = StepRecord::make_dense(0, 0, Tensor({1, 1}, 2.0f), Provenance::initialization(), 0.0f, 0);
  CHECK(parse_record(encode_record(init)) == init);

  auto bytes = encode_record(d);
  bytes[20] ^= std::byte{0x40};
  CHECK_THROWS_AS(parse_record(bytes), ChecksumError);
  bytes = encode_record(d);
  bytes.push_back(std::byte{0});
  CHECK_THROWS_AS(parse_record(bytes), FormatError);
  bytes = encode_record(d);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS_AS(parse_record(bytes), FormatError);
}

TEST_CASE("records: factored decode example and rank zero") {
  const auto u = Tensor::matrix({{1}, {2}});
  const auto v = Tensor::matrix({{1}, {0}, {-1}});
  const auto rec = StepRecord::make_factored(1, 0, u, v, examples({0}), 0.1f, 0);
  CHECK(decode_delta(rec) == Tensor::matrix({{1, 0, -1}, {2, 0, -2}}));
  const auto x = Tensor::matrix({{1}, {2}, {3}});
  CHECK(apply_delta(rec, x) == Tensor::matrix({{-2}, {-4}}));

  const auto zero = StepRecord::make_factored(1, 0, Tensor({2, 0}), Tensor({3, 0}), examples({0}), 0.1f, 0);
  CHECK(zero.rank() == 0);
  CHECK(decode_delta(zero) == Tensor({2, 3}, 0.0f));
  CHECK(parse_record(encode_record(zero)) == zero);
  CHECK_THROWS_AS(StepRecord::make_factored(1, 0, Tensor({2, 1}), Tensor({3, 2}), examples({0}), 0.1f, 0),
                  DimensionError);
}

TEST_CASE("records: factored storage is far smaller than dense for a 256x256 layer") {
  const auto u = oracle::random_tensor({256, 16}, 1), v = oracle::random_tensor({256, 16}, 2);
  std::vector<ExampleId> ids(16);
  for (ExampleId i = 0; i < 16; ++i) ids[i] = i;
  const auto f = StepRecord::make_factored(1, 0, u, v, examples(ids), 0.1f, 0);
  const auto d = StepRecord::make_dense(1, 0, decode_delta(f), examples(ids), 0.1f, 0);
  CHECK(static_cast<double>(f.encoded_size()) <= 0.25 * static_cast<double>(d.encoded_size()));
  CHECK(decode_delta(f) == d.dense);
}

TEST_CASE("manifest: JSON round-trip") {
  auto m = manifest({{3, 2}, {2, 3}});
  const auto back = LedgerManifest::from_json(m.to_json());
  CHECK(back.arch_hash == m.arch_hash);
  CHECK(back.layer_shapes == m.layer_shapes);
  CHECK(back.metadata == m.metadata);
  CHECK(back.to_json() == m.to_json());
  CHECK_THROWS_AS(LedgerManifest::from_json("{"), FormatError);
}

TEST_CASE("ledger: append, reopen and replay") {
  testing::TempDir tmp;
  const auto path = tmp / "a.dlgr";
  {
    auto l = Ledger::create(path, manifest({{3, 2}, {2, 3}}));
    for (std::uint64_t s = 0; s < 5; ++s) {
      l.append(dense_rec(s, 0, {3, 2}, s));
      l.append(dense_rec(s, 1, {2, 3}, 50 + s));
    }
    CHECK(l.record_count() == 10);
    CHECK_THROWS_AS(Ledger::create(path, manifest({{3, 2}})), IoError);
  }
  const auto l = Ledger::open(path);
  CHECK(l.record_count() == 10);
  CHECK(l.manifest().step_count == 5);
  CHECK(l.manifest().layer_record_counts == std::vector<std::uint64_t>{5, 5});
  CHECK(l.recovery_notes().empty());
  CHECK(l.gaps().empty());
  CHECK_NOTHROW(l.verify_records());
  auto stream = l.replay(1);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto rec = stream.next();
    REQUIRE(rec);
    CHECK(*rec == dense_rec(s, 1, {2, 3}, 50 + s));
  }
  CHECK_FALSE(stream.next());
  CHECK_THROWS_AS(l.replay(2), IndexError);
  const auto sz = l.sizes();
  CHECK(sz.header_bytes + sz.record_bytes == std::filesystem::file_size(path));
  CHECK(sz.index_bytes == std::filesystem::file_size(Ledger::index_path(path)));
}

TEST_CASE("ledger: a thousand appends survive reopening") {
  testing::TempDir tmp;
  const auto recs = fill(tmp / "big.dlgr", 1000);
  const auto l = Ledger::open(tmp / "big.dlgr");
  CHECK(l.record_count() == 1000);
  auto stream = l.replay(0, 7);
  std::size_t i = 0;
  while (auto rec = stream.next()) CHECK(*rec == recs[i++]);
  CHECK(i == 1000);
}

TEST_CASE("ledger: replay results do not depend on chunk size") {
  testing::TempDir tmp;
  const auto recs = fill(tmp / "c.dlgr", 40);
  const auto l = Ledger::open(tmp / "c.dlgr");
  for (std::size_t chunk : {1u, 3u, 40u, 1000u}) {
    std::vector<StepRecord> got;
    auto stream = l.replay(0, chunk);
    while (auto rec = stream.next()) got.push_back(std::move(*rec));
    CHECK(got == recs);
  }
}

TEST_CASE("ledger: reconstruct sums deltas") {
  testing::TempDir tmp;
  auto l = Ledger::create(tmp / "r.dlgr", manifest({{2, 3}}));
  l.append(StepRecord::make_dense(0, 0, Tensor::matrix({{1, 1, 1}, {1, 1, 1}}), Provenance::initialization(), 0, 0));
  l.append(StepRecord::make_factored(1, 0, Tensor::matrix({{1}, {2}}), Tensor::matrix({{1}, {0}, {-1}}), examples({4}),
                                     0.1f, 0));
  CHECK(l.reconstruct(0) == Tensor::matrix({{2, 1, 0}, {3, 1, -1}}));
}

TEST_CASE("ledger: append validation") {
  testing::TempDir tmp;
  auto l = Ledger::create(tmp / "v.dlgr", manifest({{3, 2}}));
  l.append(dense_rec(3, 0, {3, 2}, 1));
  CHECK_THROWS_AS(l.append(dense_rec(3, 0, {3, 2}, 1)), OrderingError);
  CHECK_THROWS_AS(l.append(dense_rec(2, 0, {3, 2}, 1)), OrderingError);
  CHECK_THROWS_AS(l.append(dense_rec(4, 0, {2, 3}, 1)), IntegrityError);
  CHECK_THROWS_AS(l.append(dense_rec(4, 1, {3, 2}, 1)), IndexError);
  CHECK_THROWS_AS(l.append(StepRecord::make_dense(4, 0, Tensor({3, 2}), examples({}), 0.1f, 0)), InvariantError);
  CHECK_THROWS_AS(l.append(StepRecord::make_factored(4, 0, Tensor({3, 2}), Tensor({2, 2}), examples({1}), 0.1f, 0)),
                  InvariantError);
  CHECK(l.record_count() == 1);
  l.append(dense_rec(4, 0, {3, 2}, 1));
  CHECK(l.record_count() == 2);
}

TEST_CASE("ledger: gaps are reported and block reconstruction") {
  testing::TempDir tmp;
  auto l = Ledger::create(tmp / "g.dlgr", manifest({{3, 2}}));
  for (std::uint64_t s : {0, 1, 4, 5, 9}) l.append(dense_rec(s, 0, {3, 2}, s));
  const auto gaps = l.gaps();
  REQUIRE(gaps.size() == 1);
  CHECK(gaps[0].find("2-3") != std::string::npos);
  CHECK(gaps[0].find("6-8") != std::string::npos);
  CHECK_THROWS_AS(l.reconstruct(0), IntegrityError);
}

TEST_CASE("ledger: wrong magic names the found bytes") {
  testing::TempDir tmp;
  fill(tmp / "m.dlgr", 2);
  auto bytes = read_all(tmp / "m.dlgr");
  bytes[0] = 'X';
  write_all(tmp / "m.dlgr", bytes);
  try {
    Ledger::open(tmp / "m.dlgr");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("58") != std::string::npos);
  }
}

TEST_CASE("ledger: version and manifest checks") {
  testing::TempDir tmp;
  fill(tmp / "v.dlgr", 2);
  auto bytes = read_all(tmp / "v.dlgr");
  auto v2 = bytes;
  v2[4] = 2;
  write_all(tmp / "v.dlgr", v2);
  CHECK_THROWS_AS(Ledger::open(tmp / "v.dlgr"), VersionError);
  auto crc = bytes;
  crc[18] ^= 0x01;
  write_all(tmp / "v.dlgr", crc);
  CHECK_THROWS_AS(Ledger::open(tmp / "v.dlgr"), ChecksumError);
}

TEST_CASE("ledger: truncation is reported as a corrupt index") {
  testing::TempDir tmp;
  fill(tmp / "t.dlgr", 10);
  const auto full = std::filesystem::file_size(tmp / "t.dlgr");
  std::filesystem::resize_file(tmp / "t.dlgr", full / 2);
  try {
    Ledger::open(tmp / "t.dlgr");
    FAIL("expected CorruptIndexError");
  } catch (const CorruptIndexError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
  fill(tmp / "u.dlgr", 10);
  std::filesystem::resize_file(tmp / "u.dlgr", std::filesystem::file_size(tmp / "u.dlgr") - 3);
  CHECK_THROWS_AS(Ledger::open(tmp / "u.dlgr"), CorruptIndexError);
  fill(tmp / "w.dlgr", 3);
  std::filesystem::remove(Ledger::index_path(tmp / "w.dlgr"));
  CHECK_THROWS_AS(Ledger::open(tmp / "w.dlgr"), CorruptIndexError);
}

TEST_CASE("ledger: a torn tail is truncated on open") {
  testing::TempDir tmp;
  const auto recs = fill(tmp / "t.dlgr", 4);
  const auto good = std::filesystem::file_size(tmp / "t.dlgr");
  // A record written without its index entry, cut short.
  auto bytes = read_all(tmp / "t.dlgr");
  const auto extra = encode_record(dense_rec(4, 0, {3, 2}, 9));
  for (std::size_t i = 0; i < extra.size() / 2; ++i) bytes.push_back(static_cast<char>(extra[i]));
  write_all(tmp / "t.dlgr", bytes);
  // Plus half an index entry.
  {
    std::ofstream idx(Ledger::index_path(tmp / "t.dlgr"), std::ios::binary | std::ios::app);
    idx.write("\x00\x00\x04\x00\x00", 5);
  }
  {
    auto l = Ledger::open(tmp / "t.dlgr");
    CHECK(l.record_count() == 4);
    CHECK(l.recovery_notes().size() == 2);
    CHECK(std::filesystem::file_size(tmp / "t.dlgr") == good);
    l.verify_records();
  }
  const auto l = Ledger::open(tmp / "t.dlgr");
  CHECK(l.recovery_notes().empty());
  CHECK(l.reconstruct(0) == [&] {
    Tensor sum({3, 2}, 0.0f);
    std::vector<double> acc(6, 0.0);
    for (const auto& r : recs)
      for (std::size_t i = 0; i < 6; ++i) acc[i] += r.dense[i];
    for (std::size_t i = 0; i < 6; ++i) sum[i] = static_cast<float>(acc[i]);
    return sum;
  }());
}

TEST_CASE("ledger: a flipped payload bit raises ChecksumError with the last good step") {
  testing::TempDir tmp;
  fill(tmp / "c.dlgr", 10);
  std::vector<char> bytes;
  std::uint64_t target_offset = 0;
  {
    const auto l = Ledger::open(tmp / "c.dlgr");
    bytes = read_all(tmp / "c.dlgr");
    // Record 6 starts at header + 6 * record size (all records equal size).
    const auto rec_size = (bytes.size() - l.sizes().header_bytes) / 10;
    target_offset = l.sizes().header_bytes + 6 * rec_size + rec_size / 2;
  }
  bytes[target_offset] ^= 0x10;
  write_all(tmp / "c.dlgr", bytes);
  const auto l = Ledger::open(tmp / "c.dlgr");
  for (std::size_t chunk : {1u, 4u, 64u}) {
    auto stream = l.replay(0, chunk);
    try {
      while (stream.next()) {
      }
      FAIL("expected ChecksumError");
    } catch (const ChecksumError& e) {
      CHECK(e.last_good_step() == 5);
    }
  }
  try {
    l.verify_records();
    FAIL("expected ChecksumError");
  } catch (const ChecksumError& e) {
    CHECK(e.last_good_step() == 5);
  }
}

TEST_CASE("ledger: fsync durability writes the same bytes") {
  testing::TempDir tmp;
  for (auto [name, mode] : {std::pair{"f.dlgr", Durability::kFlush}, std::pair{"s.dlgr", Durability::kFsync}}) {
    auto l = Ledger::create(tmp / name, manifest({{3, 2}}), mode);
    for (std::uint64_t s = 0; s < 3; ++s) l.append(dense_rec(s, 0, {3, 2}, s));
  }
  CHECK(read_all(tmp / "f.dlgr") == read_all(tmp / "s.dlgr"));
}

TEST_CASE("ledger: check_arch") {
  testing::TempDir tmp;
  auto l = Ledger::create(tmp / "a.dlgr", manifest({{3, 2}}));
  CHECK_NOTHROW(l.check_arch("arch"));
  CHECK_THROWS_AS(l.check_arch("other"), ArchMismatchError);
  try {
    l.check_arch("other");
  } catch (const Error& e) {
    CHECK(e.kind() == "integrity");
  }
}
