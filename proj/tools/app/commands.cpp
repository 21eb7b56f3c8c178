#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "json.hpp"
#include "wtrace/error.hpp"
#include "wtrace/explain.hpp"
#include "wtrace/rng.hpp"
#include "wtrace/viz.hpp"

namespace wtrace::app {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr const char* kConfigFile = "config.toml";
constexpr const char* kRunFile = "run.json";
constexpr const char* kCheckpoint = "checkpoint.bin";
constexpr const char* kLedger = "ledger.dlgr";
constexpr const char* kReport = "report.json";

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed on " + p.string());
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out.substr(0, 60);
}

std::size_t parse_index(const std::string& text, std::size_t limit, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || text.empty()) throw ConfigError("bad " + what + " index '" + text + "'");
  if (v >= limit) throw IndexError(fmt::format("{} index {} out of range (size {})", what, v, limit));
  return static_cast<std::size_t>(v);
}

Tensor read_input_file(const fs::path& path, const Shape& shape) {
  const auto text = read_text(path);
  const std::size_t n = shape_numel(shape);
  if (text.rfind("P5", 0) == 0) {
    std::istringstream in(text);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    in.get();
    if (!in || maxval == 0 || maxval > 255 || w * h != n) {
      throw FormatError(fmt::format("{}: PGM must be 8-bit with {} pixels", path.string(), n));
    }
    Tensor x(shape);
    for (std::size_t i = 0; i < n; ++i) {
      const int c = in.get();
      if (c == EOF) throw FormatError(path.string() + ": PGM pixel data truncated");
      x[i] = static_cast<float>(c) / static_cast<float>(maxval);
    }
    return x;
  }
  std::string cleaned = text;
  for (auto& c : cleaned)
    if (c == ',') c = ' ';
  std::istringstream in(cleaned);
  std::vector<float> values;
  float v = 0.0f;
  while (in >> v) values.push_back(v);
  if (!in.eof()) throw FormatError(path.string() + ": non-numeric input value");
  if (values.size() != n) {
    throw FormatError(fmt::format("{}: {} values, the model expects {} ({})", path.string(), values.size(), n,
                                  shape_str(shape)));
  }
  return Tensor(shape, std::move(values));
}

fs::path output_dir(const fs::path& requested, const Run& run) {
  auto dir = requested.empty() ? run.dir / "explain" : requested;
  fs::create_directories(dir);
  return dir;
}

void check_layer(const Model& model, std::uint16_t layer) {
  if (layer >= model.tracked_count()) {
    throw IndexError(fmt::format("layer {} is not tracked; tracked layers: {}", layer, describe_tracked_layers(model)));
  }
}

ClassId argmax_class(const Model& model, const Tensor& x) {
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  const auto logits = predict(model, x.reshaped(batched));
  const auto row = logits.row(0);
  return static_cast<ClassId>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

fs::path resolve_run_path(const fs::path& p) {
  if (p.is_relative()) {
    if (const char* root = std::getenv("WTRACE_RUNS"); root && *root) return fs::path(root) / p;
  }
  return p;
}

std::string format_overhead(double with_ledger, double control) {
  if (!(control > 0.0)) return "n/a";
  const double pct = (with_ledger - control) / control * 100.0;
  return fmt::format("{}{:.0f}%", pct >= 0 ? "+" : "-", std::fabs(pct));
}

std::string format_bytes(std::uint64_t bytes) {
  if (bytes < 10'000) return fmt::format("{} B", bytes);
  const double b = static_cast<double>(bytes);
  if (bytes < 10'000'000) return fmt::format("{:.1f} kB ({} B)", b / 1e3, bytes);
  if (bytes < 10'000'000'000ull) return fmt::format("{:.1f} MB ({} B)", b / 1e6, bytes);
  return fmt::format("{:.2f} GB ({} B)", b / 1e9, bytes);
}

// ---------------------------------------------------------------------------

Run load_run(const fs::path& dir_in) {
  const auto dir = resolve_run_path(dir_in);
  if (!fs::is_directory(dir)) throw IoError("run directory " + dir.string() + " does not exist");
  for (const char* f : {kConfigFile, kRunFile, kCheckpoint, kLedger}) {
    if (!fs::exists(dir / f)) throw IoError("run " + dir.string() + " is incomplete: missing " + f);
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text(dir / kRunFile));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run.json: ") + e.what());
  }
  const fs::path config_dir = meta.value("config_dir", std::string());
  auto config = RunConfig::parse(read_text(dir / kConfigFile), config_dir);
  auto data = load_datasets(config);
  auto model = load_checkpoint(dir / kCheckpoint);
  auto ledger = Ledger::open(dir / kLedger);
  ledger.check_arch(model.arch_hash());
  if (ledger.manifest().dataset_digest != data.train.digest()) {
    throw IntegrityError("training data differs from the data the ledger was recorded on");
  }
  return Run{dir, std::move(config), std::move(data), std::move(model), std::move(ledger)};
}

Tensor select_input(const Run& run, const std::string& selector) {
  const auto& train = run.data.train;
  if (selector.rfind("train:", 0) == 0) return train.example(parse_index(selector.substr(6), train.size(), "train"));
  if (selector.rfind("test:", 0) == 0) {
    if (!run.data.test) throw ConfigError("run has no test set; use train:N or a file");
    return run.data.test->example(parse_index(selector.substr(5), run.data.test->size(), "test"));
  }
  const fs::path p = selector.rfind("file:", 0) == 0 ? selector.substr(5) : selector;
  if (!fs::exists(p)) throw ConfigError("input selector '" + selector + "' is not test:N, train:N or an existing file");
  return read_input_file(p, train.feature_shape());
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const TrainArgs& args, std::ostream& out) {
  const auto config = RunConfig::load(args.config);
  const auto dir = resolve_run_path(config.output);
  if (fs::exists(dir / kLedger) || fs::exists(dir / kCheckpoint) || fs::exists(dir / kRunFile)) {
    if (!args.force) {
      throw IoError("run directory " + dir.string() + " already holds a run; pass --force to overwrite");
    }
    for (const char* f : {kLedger, kCheckpoint, kRunFile, kReport, kConfigFile}) fs::remove(dir / f);
    fs::remove(Ledger::index_path(dir / kLedger));
    fs::remove_all(dir / "explain");
  }
  fs::create_directories(dir);

  const auto data = load_datasets(config);
  auto model = build_model(config, data.train);
  const auto plan = build_plan(config, data.train);
  for (const auto& w : plan.warnings) fmt::print(out, "warning: {}\n", w);

  write_text(dir / kConfigFile, read_text(args.config));
  auto ledger = Ledger::create(dir / kLedger, make_manifest(model, data.train), config.durability);

  fmt::print(out, "training {} examples, {} classes, {} steps over {} epochs -> {}\n", data.train.size(),
             data.train.class_count(), plan.steps.size(), config.optimizer.epochs, dir.string());
  fmt::print(out, "{:>5}  {:>10}  {:>9}  {:>9}  {:>9}\n", "epoch", "lr", "loss", "train acc", "seconds");
  TrainOptions opts;
  opts.bn_variant = config.bn_variant;
  opts.test_set = data.test ? &*data.test : nullptr;
  opts.on_epoch = [&](const EpochStats& e) {
    fmt::print(out, "{:>5}  {:>10.4g}  {:>9.4f}  {:>9.4f}  {:>9.3f}\n", e.epoch, e.lr, e.loss, e.accuracy, e.seconds);
    out.flush();
  };
  const auto report = train(model, data.train, plan, config.optimizer, &ledger, opts);
  save_checkpoint(model, dir / kCheckpoint);
  write_text(dir / kReport, report.to_json());
  nlohmann::json meta{{"config_dir", fs::absolute(args.config).parent_path().string()}};
  write_text(dir / kRunFile, meta.dump(2));

  double total_s = 0.0;
  for (const auto& e : report.epochs) total_s += e.seconds;
  const auto sizes = ledger.sizes();
  fmt::print(out, "\n");
  if (report.test_accuracy >= 0) fmt::print(out, "{:<22}{:.4f}\n", "test accuracy", report.test_accuracy);
  fmt::print(out, "{:<22}{:.3f} s\n", "runtime per epoch", total_s / static_cast<double>(report.epochs.size()));
  fmt::print(out, "{:<22}{} ({} steps x {} layers + {} init)\n", "weight updates", report.records, report.steps,
             model.tracked_count(), model.tracked_count());
  fmt::print(out, "{:<22}{}\n", "ledger bytes", format_bytes(sizes.total()));
  return 0;
}

// ---------------------------------------------------------------------------
// explain / gallery

int cmd_explain(const ExplainArgs& args, std::ostream& out) {
  const auto run = load_run(args.run);
  check_layer(run.model, args.layer);
  const auto x = select_input(run, args.input);
  InfluenceOptions opts;
  opts.k = args.k;
  opts.include_init = args.include_init;
  opts.explain.min_step = args.min_step;
  const auto report = compute_influence(run.model, run.ledger, x, args.layer, opts);
  const auto dir = output_dir(args.out_dir, run);
  const auto stem = fmt::format("L{}_{}", args.layer, sanitize(args.input));
  const auto json_path = dir / ("influence_" + stem + ".json");
  write_text(json_path, to_json(report));

  const auto& train = run.data.train;
  fmt::print(out, "input {}  layer {} ({})  predicted class {}\n", args.input, args.layer,
             run.model.tracked_spec(args.layer).describe(), argmax_class(run.model, x));
  fmt::print(out, "{:>4}  {:>8}  {:>5}  {:>14}\n", "rank", "example", "label", "Gamma");
  for (std::size_t i = 0; i < report.top_k.size(); ++i) {
    const auto [id, g] = report.top_k[i];
    fmt::print(out, "{:>4}  {:>8}  {:>5}  {:>14.6g}\n", i + 1, id, train.label(id), g);
  }
  fmt::print(out, "sum of gamma {:.6g} vs ||W f||^2 {:.6g} over {} records\n", report.gamma_total, report.target,
             report.records);
  for (const auto& w : report.warnings) fmt::print(out, "warning: {}\n", w);
  fmt::print(out, "wrote {}\n", json_path.string());

  try {
    const auto gallery = render_gallery(report, train, x, args.k);
    const auto svg_path = dir / ("gallery_" + stem + ".svg");
    write_text(svg_path, gallery.svg);
    for (const auto& w : gallery.warnings) fmt::print(out, "warning: {}\n", w);
    fmt::print(out, "wrote {}\n", svg_path.string());
  } catch (const UnsupportedRenderError& e) {
    if (args.require_gallery) throw;
    fmt::print(out, "no gallery: {}\n", e.what());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ridge

int cmd_ridge(const RidgeArgs& args, std::ostream& out) {
  const auto run = load_run(args.run);
  check_layer(run.model, args.layer);
  const auto x = select_input(run, args.input);
  RidgeOptions opts;
  opts.bandwidth = args.bandwidth;
  const auto rd = ridge_data(run.model, run.ledger, x, args.layer, opts);
  const auto dir = output_dir(args.out_dir, run);
  const auto stem = fmt::format("L{}_{}", args.layer, sanitize(args.input));
  write_text(dir / ("ridge_" + stem + ".json"), to_json(rd));
  write_text(dir / ("ridge_" + stem + ".svg"), render_ridge(rd));

  fmt::print(out, "input {}  layer {}  predicted class {}  bandwidth {}\n", args.input, args.layer,
             rd.predicted_class, rd.bandwidth);
  fmt::print(out, "{:>5}  {:>9}  {:>8}  {:>12}\n", "class", "prob", "records", "mass center");
  for (auto c : rd.shown_classes) {
    const auto& cr = rd.ridge(c);
    fmt::print(out, "{:>5}  {:>9.4f}  {:>8}  {:>12.4f}{}\n", c, cr.probability, cr.samples.size(), cr.mass_center,
               c == rd.predicted_class ? "  <- predicted" : "");
  }
  for (const auto& w : rd.warnings) fmt::print(out, "warning: {}\n", w);
  fmt::print(out, "wrote {}\n", (dir / ("ridge_" + stem + ".svg")).string());
  return 0;
}

// ---------------------------------------------------------------------------
// verify

int cmd_verify(const VerifyArgs& args, std::ostream& out) {
  const auto dir = resolve_run_path(args.run);
  bool ok = true;
  const auto row = [&](const std::string& check, bool pass, const std::string& detail) {
    ok = ok && pass;
    fmt::print(out, "{:<28}  {:<4}  {}\n", check, pass ? "ok" : "FAIL", detail);
  };
  const auto failed = [&] {
    fmt::print(out, "verify: FAILED\n");
    return 1;
  };
  fmt::print(out, "{:<28}  {:<4}  {}\n", "check", "", "detail");

  std::optional<Ledger> ledger;
  try {
    ledger = Ledger::open(dir / kLedger);
    std::string notes;
    for (const auto& n : ledger->recovery_notes()) notes += "; recovered: " + n;
    row("ledger header and index", true, fmt::format("{} records{}", ledger->record_count(), notes));
  } catch (const Error& e) {
    row("ledger header and index", false, fmt::format("[{}] {}", e.kind(), e.what()));
    return failed();
  }
  try {
    ledger->verify_records();
    row("record checksums", true, format_bytes(ledger->sizes().record_bytes));
  } catch (const ChecksumError& e) {
    row("record checksums", false,
        fmt::format("[{}] {} (last good step {})", e.kind(), e.what(), e.last_good_step()));
    return failed();
  } catch (const Error& e) {
    row("record checksums", false, fmt::format("[{}] {}", e.kind(), e.what()));
    return failed();
  }
  const auto missing = ledger->gaps();
  row("step completeness", missing.empty(),
      missing.empty() ? fmt::format("{} steps", ledger->manifest().step_count) : missing.front());

  std::optional<Run> run;
  try {
    run = load_run(args.run);
    row("checkpoint and data", true, "architecture and dataset digest match");
  } catch (const Error& e) {
    row("checkpoint and data", false, fmt::format("[{}] {}", e.kind(), e.what()));
    return failed();
  }
  if (!missing.empty()) return failed();

  const auto& model = run->model;
  for (std::uint16_t l = 0; l < model.tracked_count(); ++l) {
    const auto rebuilt = run->ledger.reconstruct(l);
    const double rel = relative_error(rebuilt, model.weight(l));
    row(fmt::format("reconstruction layer {}", l), rel <= 1e-4, fmt::format("relative error {:.3g}", rel));
  }

  Rng rng(run->config.seed ^ 0x5eedf00dULL);
  std::vector<Tensor> probes;
  for (std::size_t i = 0; i < args.probes; ++i) {
    Tensor x(run->data.train.feature_shape());
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    probes.push_back(std::move(x));
  }
  for (std::uint16_t l = 0; l < model.tracked_count(); ++l) {
    const auto reports = compute_influence(model, run->ledger, probes, l, InfluenceOptions{});
    double worst = 0.0;
    for (const auto& r : reports) {
      const double denom = std::max(std::fabs(r.target), 1e-30);
      worst = std::max(worst, std::fabs(r.gamma_total - r.target) / denom);
    }
    row(fmt::format("gamma completeness layer {}", l), worst <= 1e-3,
        fmt::format("{} random inputs, worst relative error {:.3g}", probes.size(), worst));
  }
  fmt::print(out, "{}\n", ok ? "verify: ok" : "verify: FAILED");
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// stats

int cmd_stats(const StatsArgs& args, std::ostream& out) {
  auto run = load_run(args.run);
  const auto& model = run.model;
  const auto report = nlohmann::json::parse(read_text(run.dir / kReport));
  double epoch_s = 0.0;
  std::size_t epochs = 0;
  for (const auto& e : report.at("epochs")) {
    epoch_s += e.value("seconds", 0.0);
    ++epochs;
  }
  epoch_s /= static_cast<double>(std::max<std::size_t>(1, epochs));

  std::size_t params = 0;
  for (const auto& s : model.weight_shapes()) params += shape_numel(s);
  const auto sizes = run.ledger.sizes();
  const auto on_disk = fs::file_size(run.dir / kLedger) + fs::file_size(Ledger::index_path(run.dir / kLedger));
  const auto steps = report.at("steps").get<std::uint64_t>();

  const auto row = [&](const std::string& k, const std::string& v) { fmt::print(out, "{:<30}{}\n", k, v); };
  row("model size", fmt::format("{} weights ({})", params, format_bytes(params * 4)));
  row("tracked layers", describe_tracked_layers(model));
  row("number of weight updates", fmt::format("{} ({} steps x {} layers + {} init)", run.ledger.record_count(), steps,
                                              model.tracked_count(), model.tracked_count()));
  row("runtime per epoch", fmt::format("{:.3f} s", epoch_s));
  row("disk storage demand", format_bytes(sizes.total()));
  row("  header / records / index",
      fmt::format("{} / {} / {} B", sizes.header_bytes, sizes.record_bytes, sizes.index_bytes));
  row("  on disk", fmt::format("{} B{}", on_disk, on_disk == sizes.total() ? "" : " (differs from accounted size)"));

  // Replay throughput over every layer.
  const auto t0 = Clock::now();
  std::uint64_t replayed = 0;
  for (std::uint16_t l = 0; l < model.tracked_count(); ++l) {
    auto stream = run.ledger.replay(l);
    while (auto rec = stream.next()) replayed += rec->encoded_size();
  }
  const double replay_s = seconds_since(t0);
  row("replay throughput", fmt::format("{:.1f} MB/s ({} in {:.3f} s)", replay_s > 0 ? replayed / replay_s / 1e6 : 0.0,
                                       format_bytes(replayed), replay_s));

  // Explanation time: one probe explained at every tracked layer.
  const auto& probe_set = run.data.test ? *run.data.test : run.data.train;
  const std::size_t probes = std::min(args.probes, probe_set.size());
  if (probes > 0) {
    const auto t1 = Clock::now();
    for (std::size_t i = 0; i < probes; ++i) {
      const auto x = probe_set.example(i);
      for (std::uint16_t l = 0; l < model.tracked_count(); ++l) compute_influence(model, run.ledger, x, l);
    }
    row("explanation time", fmt::format("{:.3f} s mean over {} probes (all layers)", seconds_since(t1) / probes, probes));
  }

  if (args.control) {
    auto control_model = build_model(run.config, run.data.train);
    const auto plan = build_plan(run.config, run.data.train);
    TrainOptions opts;
    opts.bn_variant = run.config.bn_variant;
    const auto control = train(control_model, run.data.train, plan, run.config.optimizer, nullptr, opts);
    double control_s = 0.0;
    for (const auto& e : control.epochs) control_s += e.seconds;
    control_s /= static_cast<double>(control.epochs.size());
    row("runtime per epoch (control)", fmt::format("{:.3f} s", control_s));
    row("relative overhead runtime", format_overhead(epoch_s, control_s));
  }
  return 0;
}

}  // namespace wtrace::app
