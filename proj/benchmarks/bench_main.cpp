#include <filesystem>

#include <benchmark/benchmark.h>

#include "wtrace/explain.hpp"
#include "wtrace/ledger.hpp"
#include "wtrace/optim.hpp"
#include "wtrace/rng.hpp"

using namespace wtrace;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

fs::path scratch(const char* name) {
  const auto dir = fs::temp_directory_path() / "wtrace-bench";
  fs::create_directories(dir);
  const auto path = dir / name;
  fs::remove(path);
  fs::remove(Ledger::index_path(path));
  return path;
}

LedgerManifest manifest_for(std::size_t out, std::size_t in) {
  LedgerManifest m;
  m.arch_hash = "bench";
  m.layer_shapes = {{out, in}};
  m.dataset_digest = "bench";
  return m;
}

StepRecord factored_record(std::uint64_t step, std::size_t out, std::size_t in, std::size_t batch) {
  Provenance prov;
  prov.example_ids.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) prov.example_ids[i] = static_cast<ExampleId>(i);
  prov.class_id = 0;
  return StepRecord::make_factored(step, 0, random_tensor({out, batch}, step), random_tensor({in, batch}, step + 1),
                                   prov, 0.01f, 0);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_LedgerAppend(benchmark::State& state) {
  const auto path = scratch("append.dlgr");
  auto ledger = Ledger::create(path, manifest_for(256, 784));
  std::uint64_t step = 0;
  const auto rec = factored_record(0, 256, 784, 32);
  for (auto _ : state) {
    auto r = rec;
    r.step = ++step;
    ledger.append(r);
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(rec.encoded_size()));
}
BENCHMARK(BM_LedgerAppend);

void BM_LedgerReplay(benchmark::State& state) {
  const auto path = scratch("replay.dlgr");
  {
    auto ledger = Ledger::create(path, manifest_for(256, 784));
    for (std::uint64_t s = 1; s <= 200; ++s) ledger.append(factored_record(s, 256, 784, 32));
  }
  const auto ledger = Ledger::open(path);
  std::int64_t bytes = 0;
  for (auto _ : state) {
    auto stream = ledger.replay(0, static_cast<std::size_t>(state.range(0)));
    while (auto rec = stream.next()) bytes += static_cast<std::int64_t>(rec->encoded_size());
  }
  state.SetBytesProcessed(bytes);
}
BENCHMARK(BM_LedgerReplay)->Arg(1)->Arg(64);

// Contribution of one record to one input: factored form (two thin products)
// versus materializing the dense delta first.
void BM_ContributionFactored(benchmark::State& state) {
  const auto rec = factored_record(1, 256, 784, static_cast<std::size_t>(state.range(0)));
  const auto x = random_tensor({784, 1}, 9);
  for (auto _ : state) benchmark::DoNotOptimize(apply_delta(rec, x));
}
BENCHMARK(BM_ContributionFactored)->Arg(8)->Arg(32);

void BM_ContributionDense(benchmark::State& state) {
  const auto rec = factored_record(1, 256, 784, static_cast<std::size_t>(state.range(0)));
  const auto x = random_tensor({784, 1}, 9);
  for (auto _ : state) {
    const auto dense = StepRecord::make_dense(1, 0, decode_delta(rec), rec.provenance, rec.lr, 0);
    benchmark::DoNotOptimize(apply_delta(dense, x));
  }
}
BENCHMARK(BM_ContributionDense)->Arg(8)->Arg(32);

}  // namespace
BENCHMARK_MAIN();
