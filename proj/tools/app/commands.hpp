#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "config.hpp"
#include "wtrace/ledger.hpp"

namespace wtrace::app {

/// Relative paths resolve under $WTRACE_RUNS when it is set.
std::filesystem::path resolve_run_path(const std::filesystem::path& p);

/// A finished training run read back from its directory.
struct Run {
  std::filesystem::path dir;
  RunConfig config;
  Datasets data;
  Model model;
  Ledger ledger;
};

/// Throws when a run file is missing or the ledger does not belong to the
/// checkpoint / dataset.
Run load_run(const std::filesystem::path& dir);

/// "test:N", "train:N", "file:PATH" or a bare path to a PGM (P5) image or a
/// text file of numbers in the dataset's feature layout.
Tensor select_input(const Run& run, const std::string& selector);

struct TrainArgs {
  std::filesystem::path config;
  bool force = false;
};

struct ExplainArgs {
  std::filesystem::path run;
  std::string input;
  std::uint16_t layer = 0;
  std::size_t k = 10;
  bool include_init = true;
  std::uint64_t min_step = 0;
  bool require_gallery = false;  // `gallery` command: fail when images are unsupported
  std::filesystem::path out_dir;  // default <run>/explain
};

struct RidgeArgs {
  std::filesystem::path run;
  std::string input;
  std::uint16_t layer = 0;
  double bandwidth = 0.1;
  std::filesystem::path out_dir;
};

struct VerifyArgs {
  std::filesystem::path run;
  std::size_t probes = 3;
};

struct StatsArgs {
  std::filesystem::path run;
  bool control = false;
  std::size_t probes = 5;
};

// Each returns the process exit status and writes human-readable output to
// `out`. Library errors propagate to the caller.
int cmd_train(const TrainArgs& args, std::ostream& out);
int cmd_explain(const ExplainArgs& args, std::ostream& out);
int cmd_ridge(const RidgeArgs& args, std::ostream& out);
int cmd_verify(const VerifyArgs& args, std::ostream& out);
int cmd_stats(const StatsArgs& args, std::ostream& out);

/// "+453%" style relative change.
std::string format_overhead(double with_ledger, double control);
/// Bytes as "12.3 MB" (powers of 1000) with the exact count for small values.
std::string format_bytes(std::uint64_t bytes);

}  // namespace wtrace::app
