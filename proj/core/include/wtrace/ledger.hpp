#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wtrace/dataset.hpp"
#include "wtrace/tensor.hpp"

namespace wtrace {

enum class Encoding : std::uint8_t { kDense = 0, kFactored = 1 };
enum class ProvenanceKind : std::uint8_t { kExamples = 0, kInitialization = 1 };

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::kExamples;
  std::vector<ExampleId> example_ids;
  ClassId class_id = kMixedClass;
  std::vector<ExampleId> ghost_ids;

  static Provenance initialization() { return {ProvenanceKind::kInitialization, {}, kInitClass, {}}; }
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// One training step's weight change for one tracked layer.
struct StepRecord {
  std::uint64_t step = 0;
  std::uint16_t layer_id = 0;
  Encoding encoding = Encoding::kDense;
  Tensor dense;   ///< kDense payload, [out x in]
  Tensor u;       ///< kFactored left factor, [out x r]
  Tensor v;       ///< kFactored right factor, [in x r]; delta = u v^T
  Provenance provenance;
  float lr = 0.0f;
  std::uint32_t epoch = 0;

  static StepRecord make_dense(std::uint64_t step, std::uint16_t layer, Tensor delta, Provenance prov, float lr,
                               std::uint32_t epoch);
  static StepRecord make_factored(std::uint64_t step, std::uint16_t layer, Tensor u, Tensor v, Provenance prov,
                                  float lr, std::uint32_t epoch);

  std::size_t rank() const;
  /// Shape of the dense delta this record encodes.
  Shape delta_shape() const;
  /// Bytes the record occupies on disk, CRC included.
  std::size_t encoded_size() const;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

/// Dense delta: the payload for kDense, u v^T for kFactored.
Tensor decode_delta(const StepRecord& rec);
/// delta * lowered ([in x P] -> [out x P]); kFactored evaluates u (v^T lowered)
/// without forming the dense delta.
Tensor apply_delta(const StepRecord& rec, const Tensor& lowered);

/// Serialized record bytes (with trailing CRC) and the inverse. parse throws
/// ChecksumError on CRC mismatch and FormatError on malformed bytes.
std::vector<std::byte> encode_record(const StepRecord& rec);
StepRecord parse_record(std::span<const std::byte> bytes);

struct LedgerManifest {
  std::uint32_t format_version = 1;
  std::string arch_hash;
  std::vector<Shape> layer_shapes;
  std::string dataset_digest;
  std::map<std::string, std::string> metadata;
  // Derived from the record index when a ledger is opened.
  std::uint64_t step_count = 0;
  std::vector<std::uint64_t> layer_record_counts;

  /// Canonical JSON of the stored (non-derived) fields.
  std::string to_json() const;
  static LedgerManifest from_json(const std::string& text);
};

struct LedgerSizes {
  std::uint64_t header_bytes = 0;
  std::uint64_t record_bytes = 0;
  std::uint64_t index_bytes = 0;
  std::uint64_t total() const { return header_bytes + record_bytes + index_bytes; }
};

enum class Durability : std::uint8_t {
  kFlush,  ///< records handed to the OS before append returns
  kFsync,  ///< additionally fsync'd
};

class ReplayStream;

/// Append-only on-disk log of StepRecords. Layout: "DLGR", u32 version,
/// u64-length-prefixed JSON manifest with CRC32, then CRC'd records. A
/// sidecar `<path>.idx` maps (layer, step) to byte offsets.
class Ledger {
 public:
  static Ledger create(const std::filesystem::path& path, LedgerManifest manifest,
                       Durability durability = Durability::kFlush);
  /// Validates header, manifest checksum and index. A torn record after the
  /// last indexed one is truncated away (see recovery_notes()).
  static Ledger open(const std::filesystem::path& path);

  Ledger(Ledger&&) noexcept;
  Ledger& operator=(Ledger&&) noexcept;
  ~Ledger();

  const LedgerManifest& manifest() const noexcept { return manifest_; }
  const std::filesystem::path& path() const noexcept { return path_; }
  static std::filesystem::path index_path(const std::filesystem::path& path);

  void append(const StepRecord& rec);

  /// Records of one layer in step order, read `chunk_size` at a time.
  ReplayStream replay(std::uint16_t layer_id, std::size_t chunk_size = 64) const;

  /// decode_delta plus a shape check against the manifest.
  Tensor decode_delta(const StepRecord& rec) const;
  /// Sum of every delta of the layer in step order (double accumulation).
  Tensor reconstruct(std::uint16_t layer_id) const;

  /// Throws ArchMismatchError when `arch_hash` differs from the manifest.
  void check_arch(const std::string& arch_hash) const;
  /// Steps missing per layer; empty when the ledger is complete.
  std::vector<std::string> gaps() const;
  /// Reads and CRC-checks every record.
  void verify_records() const;

  LedgerSizes sizes() const;
  std::uint64_t record_count() const noexcept { return entries_.size(); }
  const std::vector<std::string>& recovery_notes() const noexcept { return recovery_notes_; }

  struct IndexEntry {
    std::uint16_t layer_id;
    std::uint64_t step;
    std::uint64_t offset;
    std::uint64_t length;
  };

 private:
  Ledger() = default;
  void refresh_counts();

  std::filesystem::path path_;
  LedgerManifest manifest_;
  Durability durability_ = Durability::kFlush;
  std::uint64_t header_bytes_ = 0;
  std::uint64_t data_end_ = 0;
  std::vector<IndexEntry> entries_;
  std::vector<std::vector<std::size_t>> by_layer_;  // entry positions per layer
  std::vector<std::string> recovery_notes_;
  struct Writer;
  std::unique_ptr<Writer> writer_;
};

class ReplayStream {
 public:
  std::optional<StepRecord> next();

 private:
  friend class Ledger;
  ReplayStream(std::filesystem::path path, std::vector<Ledger::IndexEntry> entries, std::size_t chunk_size);

  std::filesystem::path path_;
  std::vector<Ledger::IndexEntry> entries_;
  std::size_t chunk_size_;
  std::size_t next_entry_ = 0;
  std::vector<StepRecord> chunk_;
  std::size_t chunk_pos_ = 0;
  std::int64_t last_good_step_ = -1;
};

}  // namespace wtrace
