#include "wtrace/ledger.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include "json.hpp"

#include "bytes.hpp"
#include "wtrace/digest.hpp"
#include "wtrace/error.hpp"

namespace wtrace {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'G', 'R'};
constexpr char kIndexMagic[4] = {'D', 'L', 'G', 'I'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kIndexHeader = 8;
constexpr std::size_t kIndexEntry = 2 + 8 + 8;

std::size_t u32_checked(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw DimensionError(std::string(what) + " exceeds the 32-bit on-disk limit");
  return v;
}

StepRecord parse_record_prefix(std::span<const std::byte> bytes, std::size_t* consumed) {
  detail::ByteReader r(bytes);
  StepRecord rec;
  rec.step = r.get<std::uint64_t>();
  rec.layer_id = r.get<std::uint16_t>();
  const auto enc = r.get<std::uint8_t>();
  const auto kind = r.get<std::uint8_t>();
  if (enc > 1) throw FormatError("record at step " + std::to_string(rec.step) + ": unknown encoding " + std::to_string(enc));
  if (kind > 1) throw FormatError("record at step " + std::to_string(rec.step) + ": unknown provenance kind " + std::to_string(kind));
  rec.encoding = static_cast<Encoding>(enc);
  rec.provenance.kind = static_cast<ProvenanceKind>(kind);
  rec.provenance.class_id = r.get<std::int32_t>();
  const auto n_examples = r.get<std::uint32_t>();
  if (n_examples > r.remaining() / 4) throw FormatError("record example count exceeds record size");
  rec.provenance.example_ids.resize(n_examples);
  for (auto& id : rec.provenance.example_ids) id = r.get<std::uint32_t>();
  const auto n_ghost = r.get<std::uint32_t>();
  if (n_ghost > r.remaining() / 4) throw FormatError("record ghost count exceeds record size");
  rec.provenance.ghost_ids.resize(n_ghost);
  for (auto& id : rec.provenance.ghost_ids) id = r.get<std::uint32_t>();
  rec.lr = r.get_f32();
  rec.epoch = r.get<std::uint32_t>();
  const std::size_t rows = r.get<std::uint32_t>();
  const std::size_t cols = r.get<std::uint32_t>();
  if (rec.encoding == Encoding::kDense) {
    if (rows * cols > r.remaining() / 4) throw FormatError("dense payload exceeds record size");
    rec.dense = Tensor({rows, cols});
    r.get_f32s(rec.dense.data());
  } else {
    const std::size_t rank = r.get<std::uint32_t>();
    if ((rows + cols) * rank > r.remaining() / 4) throw FormatError("factored payload exceeds record size");
    rec.u = Tensor({rows, rank});
    rec.v = Tensor({cols, rank});
    r.get_f32s(rec.u.data());
    r.get_f32s(rec.v.data());
  }
  const std::size_t body = r.offset();
  const auto stored = r.get<std::uint32_t>();
  const auto actual = crc32(bytes.first(body));
  if (stored != actual) {
    throw ChecksumError(-1, fmt::format("CRC mismatch in record (step {}, layer {}): stored {:08x}, computed {:08x}",
                                        rec.step, rec.layer_id, stored, actual));
  }
  *consumed = r.offset();
  return rec;
}

// A record whose exact extent is known from the index: the CRC is checked
// before parsing so corrupt length fields report as checksum failures.
StepRecord parse_indexed(std::span<const std::byte> bytes) {
  if (bytes.size() >= 4) {
    detail::ByteReader tail(bytes.last(4));
    const auto stored = tail.get<std::uint32_t>();
    const auto actual = crc32(bytes.first(bytes.size() - 4));
    if (stored != actual) {
      throw ChecksumError(-1, fmt::format("CRC mismatch in record: stored {:08x}, computed {:08x}", stored, actual));
    }
  }
  return parse_record(bytes);
}

void write_all(std::FILE* f, std::span<const std::byte> bytes, const std::filesystem::path& path) {
  if (std::fwrite(bytes.data(), 1, bytes.size(), f) != bytes.size()) throw IoError("write failed on " + path.string());
}

std::vector<std::byte> read_range(std::ifstream& in, std::uint64_t offset, std::uint64_t length,
                                  const std::filesystem::path& path) {
  std::vector<std::byte> buf(length);
  in.clear();
  in.seekg(static_cast<std::streamoff>(offset));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(length));
  if (static_cast<std::uint64_t>(in.gcount()) != length) {
    throw CorruptIndexError(path.string() + ": record at offset " + std::to_string(offset) + " runs past end of file");
  }
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// StepRecord

StepRecord StepRecord::make_dense(std::uint64_t step, std::uint16_t layer, Tensor delta, Provenance prov, float lr,
                                  std::uint32_t epoch) {
  if (delta.rank() != 2) throw DimensionError("dense delta must be 2-D, got " + shape_str(delta.shape()));
  StepRecord r;
  r.step = step;
  r.layer_id = layer;
  r.encoding = Encoding::kDense;
  r.dense = std::move(delta);
  r.provenance = std::move(prov);
  r.lr = lr;
  r.epoch = epoch;
  return r;
}

StepRecord StepRecord::make_factored(std::uint64_t step, std::uint16_t layer, Tensor u, Tensor v, Provenance prov,
                                     float lr, std::uint32_t epoch) {
  if (u.rank() != 2 || v.rank() != 2 || u.dim(1) != v.dim(1)) {
    throw DimensionError("factors must be [out x r] and [in x r], got " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()));
  }
  StepRecord r;
  r.step = step;
  r.layer_id = layer;
  r.encoding = Encoding::kFactored;
  r.u = std::move(u);
  r.v = std::move(v);
  r.provenance = std::move(prov);
  r.lr = lr;
  r.epoch = epoch;
  return r;
}

std::size_t StepRecord::rank() const { return encoding == Encoding::kFactored ? u.dim(1) : 0; }

Shape StepRecord::delta_shape() const {
  if (encoding == Encoding::kDense) return dense.shape();
  return {u.dim(0), v.dim(0)};
}

std::size_t StepRecord::encoded_size() const {
  std::size_t n = 8 + 2 + 1 + 1 + 4 + 4 + 4 * provenance.example_ids.size() + 4 + 4 * provenance.ghost_ids.size() + 4 + 4;
  if (encoding == Encoding::kDense) {
    n += 8 + 4 * dense.size();
  } else {
    n += 12 + 4 * (u.size() + v.size());
  }
  return n + 4;
}

Tensor decode_delta(const StepRecord& rec) {
  if (rec.encoding == Encoding::kDense) return rec.dense;
  return matmul_bt(rec.u, rec.v);
}

Tensor apply_delta(const StepRecord& rec, const Tensor& lowered) {
  if (rec.encoding == Encoding::kDense) return matmul(rec.dense, lowered);
  return matmul(rec.u, matmul_at(rec.v, lowered));
}

std::vector<std::byte> encode_record(const StepRecord& rec) {
  detail::ByteWriter w;
  w.buffer().reserve(rec.encoded_size());
  w.put<std::uint64_t>(rec.step);
  w.put<std::uint16_t>(rec.layer_id);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(rec.encoding));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(rec.provenance.kind));
  w.put<std::int32_t>(rec.provenance.class_id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(u32_checked(rec.provenance.example_ids.size(), "example count")));
  for (auto id : rec.provenance.example_ids) w.put<std::uint32_t>(id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(u32_checked(rec.provenance.ghost_ids.size(), "ghost count")));
  for (auto id : rec.provenance.ghost_ids) w.put<std::uint32_t>(id);
  w.put_f32(rec.lr);
  w.put<std::uint32_t>(rec.epoch);
  const auto shape = rec.delta_shape();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(u32_checked(shape[0], "rows")));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(u32_checked(shape[1], "cols")));
  if (rec.encoding == Encoding::kDense) {
    w.put_f32s(rec.dense.data());
  } else {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(u32_checked(rec.rank(), "rank")));
    w.put_f32s(rec.u.data());
    w.put_f32s(rec.v.data());
  }
  w.put<std::uint32_t>(crc32(w.buffer()));
  return std::move(w.buffer());
}

StepRecord parse_record(std::span<const std::byte> bytes) {
  std::size_t consumed = 0;
  auto rec = parse_record_prefix(bytes, &consumed);
  if (consumed != bytes.size()) {
    throw FormatError("record has " + std::to_string(bytes.size() - consumed) + " trailing bytes");
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Manifest

std::string LedgerManifest::to_json() const {
  nlohmann::json j;
  j["format"] = "DLGR";
  j["format_version"] = format_version;
  j["arch_hash"] = arch_hash;
  j["layer_shapes"] = layer_shapes;
  j["dataset_digest"] = dataset_digest;
  j["metadata"] = metadata;
  return j.dump();
}

LedgerManifest LedgerManifest::from_json(const std::string& text) {
  LedgerManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.format_version = j.at("format_version").get<std::uint32_t>();
    m.arch_hash = j.at("arch_hash").get<std::string>();
    m.layer_shapes = j.at("layer_shapes").get<std::vector<Shape>>();
    m.dataset_digest = j.at("dataset_digest").get<std::string>();
    m.metadata = j.value("metadata", std::map<std::string, std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ledger manifest is malformed: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Ledger

struct Ledger::Writer {
  std::FILE* data = nullptr;
  std::FILE* index = nullptr;
  ~Writer() {
    if (data) std::fclose(data);
    if (index) std::fclose(index);
  }
};

Ledger::Ledger(Ledger&&) noexcept = default;
Ledger& Ledger::operator=(Ledger&&) noexcept = default;
Ledger::~Ledger() = default;

std::filesystem::path Ledger::index_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".idx";
  return p;
}

Ledger Ledger::create(const std::filesystem::path& path, LedgerManifest manifest, Durability durability) {
  if (std::filesystem::exists(path)) throw IoError("ledger " + path.string() + " already exists");
  if (manifest.layer_shapes.empty()) throw ConfigError("ledger manifest needs at least one layer shape");
  if (manifest.layer_shapes.size() > UINT16_MAX) throw ConfigError("too many tracked layers for a ledger");
  manifest.format_version = kVersion;
  Ledger l;
  l.path_ = path;
  l.durability_ = durability;
  l.writer_ = std::make_unique<Writer>();
  l.writer_->data = std::fopen(path.c_str(), "wb");
  l.writer_->index = std::fopen(index_path(path).c_str(), "wb");
  if (!l.writer_->data || !l.writer_->index) throw IoError("cannot create ledger at " + path.string());

  const auto text = manifest.to_json();
  detail::ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kMagic)));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(text.size());
  w.put_string(text);
  w.put<std::uint32_t>(crc32(std::as_bytes(std::span(text.data(), text.size()))));
  write_all(l.writer_->data, w.buffer(), path);

  detail::ByteWriter iw;
  iw.put_bytes(std::as_bytes(std::span(kIndexMagic)));
  iw.put<std::uint32_t>(kVersion);
  write_all(l.writer_->index, iw.buffer(), index_path(path));
  std::fflush(l.writer_->data);
  std::fflush(l.writer_->index);

  l.header_bytes_ = w.buffer().size();
  l.data_end_ = l.header_bytes_;
  l.manifest_ = std::move(manifest);
  l.by_layer_.resize(l.manifest_.layer_shapes.size());
  l.refresh_counts();
  return l;
}

Ledger Ledger::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open ledger " + path.string());
  const auto file_size = std::filesystem::file_size(path);

  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, kMagic)) {
    std::string found;
    for (std::streamsize i = 0; i < in.gcount(); ++i) found += fmt::format("{:02x}", static_cast<unsigned char>(magic[i]));
    throw FormatError(path.string() + ": bad magic, found bytes '" + (found.empty() ? std::string("<empty>") : found) +
                      "', expected 'DLGR' (444c4752)");
  }
  auto header = read_range(in, 4, 12, path);
  detail::ByteReader hr(header);
  const auto version = hr.get<std::uint32_t>();
  if (version != kVersion) {
    throw VersionError(path.string() + ": ledger version " + std::to_string(version) + ", this build reads version " +
                       std::to_string(kVersion));
  }
  const auto mlen = hr.get<std::uint64_t>();
  if (16 + mlen + 4 > file_size) throw FormatError(path.string() + ": manifest runs past end of file");
  auto mbytes = read_range(in, 16, mlen + 4, path);
  detail::ByteReader mr(mbytes);
  const auto text = mr.get_bytes(mlen);
  const auto stored_crc = mr.get<std::uint32_t>();
  if (stored_crc != crc32(text)) throw ChecksumError(-1, path.string() + ": manifest checksum mismatch");

  Ledger l;
  l.path_ = path;
  l.manifest_ = LedgerManifest::from_json(std::string(reinterpret_cast<const char*>(text.data()), text.size()));
  if (l.manifest_.format_version != kVersion) {
    throw VersionError(path.string() + ": manifest format_version " + std::to_string(l.manifest_.format_version));
  }
  l.header_bytes_ = 16 + mlen + 4;
  l.by_layer_.resize(l.manifest_.layer_shapes.size());

  // Index.
  const auto ipath = index_path(path);
  std::ifstream idx(ipath, std::ios::binary);
  if (!idx) throw CorruptIndexError(path.string() + ": index file " + ipath.string() + " is missing");
  std::vector<char> raw((std::istreambuf_iterator<char>(idx)), std::istreambuf_iterator<char>());
  idx.close();
  if (raw.size() < kIndexHeader || !std::equal(raw.begin(), raw.begin() + 4, kIndexMagic)) {
    throw CorruptIndexError(ipath.string() + ": bad index header");
  }
  const std::size_t whole = (raw.size() - kIndexHeader) / kIndexEntry;
  if ((raw.size() - kIndexHeader) % kIndexEntry != 0) {
    const auto keep = kIndexHeader + whole * kIndexEntry;
    std::filesystem::resize_file(ipath, keep);
    l.recovery_notes_.push_back("dropped a partial index entry (" + std::to_string(raw.size() - keep) + " bytes)");
  }
  detail::ByteReader ir(std::as_bytes(std::span(raw.data(), kIndexHeader + whole * kIndexEntry)));
  ir.get_bytes(kIndexHeader);
  std::uint64_t expected_offset = l.header_bytes_;
  for (std::size_t k = 0; k < whole; ++k) {
    IndexEntry e{};
    e.layer_id = ir.get<std::uint16_t>();
    e.step = ir.get<std::uint64_t>();
    e.offset = ir.get<std::uint64_t>();
    if (e.layer_id >= l.manifest_.layer_shapes.size()) {
      throw CorruptIndexError(ipath.string() + ": entry " + std::to_string(k) + " names unknown layer " +
                              std::to_string(e.layer_id));
    }
    if (e.offset != expected_offset && k == 0) {
      throw CorruptIndexError(ipath.string() + ": first record offset " + std::to_string(e.offset) + " != header end " +
                              std::to_string(expected_offset));
    }
    if (k > 0) {
      auto& prev = l.entries_.back();
      if (e.offset <= prev.offset) throw CorruptIndexError(ipath.string() + ": offsets not increasing at entry " + std::to_string(k));
      prev.length = e.offset - prev.offset;
    }
    if (e.offset >= file_size) {
      throw CorruptIndexError(path.string() + ": truncated file; entry " + std::to_string(k) + " points to offset " +
                              std::to_string(e.offset) + " beyond size " + std::to_string(file_size));
    }
    auto& layer_entries = l.by_layer_[e.layer_id];
    if (!layer_entries.empty() && l.entries_[layer_entries.back()].step >= e.step) {
      throw CorruptIndexError(ipath.string() + ": steps out of order for layer " + std::to_string(e.layer_id));
    }
    layer_entries.push_back(l.entries_.size());
    l.entries_.push_back(e);
    expected_offset = e.offset;
  }

  // Spot-check each indexed record header, and fully parse the last one to
  // find where the durable data ends.
  for (std::size_t k = 0; k < l.entries_.size(); ++k) {
    auto& e = l.entries_[k];
    const bool last = k + 1 == l.entries_.size();
    const std::uint64_t span_len = last ? file_size - e.offset : e.length;
    if (!last) {
      auto head = read_range(in, e.offset, std::min<std::uint64_t>(10, span_len), path);
      detail::ByteReader hr2(head);
      if (head.size() < 10 || hr2.get<std::uint64_t>() != e.step || hr2.get<std::uint16_t>() != e.layer_id) {
        throw CorruptIndexError(path.string() + ": record at offset " + std::to_string(e.offset) +
                                " does not match its index entry");
      }
      continue;
    }
    auto bytes = read_range(in, e.offset, span_len, path);
    std::size_t consumed = 0;
    try {
      auto rec = parse_record_prefix(bytes, &consumed);
      if (rec.step != e.step || rec.layer_id != e.layer_id) {
        throw CorruptIndexError(path.string() + ": last record does not match its index entry");
      }
    } catch (const FormatError& err) {
      throw CorruptIndexError(path.string() + ": truncated file, last indexed record is incomplete (" + err.what() + ")");
    } catch (const ChecksumError& err) {
      const std::int64_t prev = k > 0 ? static_cast<std::int64_t>(l.entries_[k - 1].step) : -1;
      throw ChecksumError(prev, path.string() + ": " + err.what());
    }
    e.length = consumed;
  }
  l.data_end_ = l.entries_.empty() ? l.header_bytes_ : l.entries_.back().offset + l.entries_.back().length;
  in.close();
  if (file_size > l.data_end_) {
    std::filesystem::resize_file(path, l.data_end_);
    l.recovery_notes_.push_back("truncated " + std::to_string(file_size - l.data_end_) +
                                " bytes of torn record data after the last indexed record");
  }
  l.refresh_counts();
  return l;
}

void Ledger::refresh_counts() {
  manifest_.layer_record_counts.assign(manifest_.layer_shapes.size(), 0);
  std::uint64_t max_step = 0;
  for (const auto& e : entries_) {
    ++manifest_.layer_record_counts[e.layer_id];
    max_step = std::max(max_step, e.step);
  }
  manifest_.step_count = entries_.empty() ? 0 : max_step + 1;
}

void Ledger::append(const StepRecord& rec) {
  if (!writer_) throw IoError("ledger " + path_.string() + " is open read-only");
  if (rec.layer_id >= manifest_.layer_shapes.size()) {
    throw IndexError("record names layer " + std::to_string(rec.layer_id) + ", ledger has " +
                     std::to_string(manifest_.layer_shapes.size()));
  }
  auto& layer_entries = by_layer_[rec.layer_id];
  if (!layer_entries.empty() && entries_[layer_entries.back()].step >= rec.step) {
    throw OrderingError("step " + std::to_string(rec.step) + " appended after step " +
                        std::to_string(entries_[layer_entries.back()].step) + " on layer " +
                        std::to_string(rec.layer_id));
  }
  if (rec.delta_shape() != manifest_.layer_shapes[rec.layer_id]) {
    throw IntegrityError("record delta " + shape_str(rec.delta_shape()) + " does not match layer shape " +
                         shape_str(manifest_.layer_shapes[rec.layer_id]));
  }
  if (rec.provenance.kind == ProvenanceKind::kExamples && rec.provenance.example_ids.empty()) {
    throw InvariantError("example provenance needs at least one example id");
  }
  if (rec.encoding == Encoding::kFactored && rec.rank() > std::max<std::size_t>(1, rec.provenance.example_ids.size())) {
    throw InvariantError("factored rank " + std::to_string(rec.rank()) + " exceeds batch size " +
                         std::to_string(rec.provenance.example_ids.size()));
  }

  const auto bytes = encode_record(rec);
  write_all(writer_->data, bytes, path_);
  if (std::fflush(writer_->data) != 0) throw IoError("flush failed on " + path_.string());
  if (durability_ == Durability::kFsync) ::fsync(fileno(writer_->data));

  detail::ByteWriter iw;
  iw.put<std::uint16_t>(rec.layer_id);
  iw.put<std::uint64_t>(rec.step);
  iw.put<std::uint64_t>(data_end_);
  write_all(writer_->index, iw.buffer(), index_path(path_));
  if (std::fflush(writer_->index) != 0) throw IoError("flush failed on " + index_path(path_).string());
  if (durability_ == Durability::kFsync) ::fsync(fileno(writer_->index));

  layer_entries.push_back(entries_.size());
  entries_.push_back({rec.layer_id, rec.step, data_end_, bytes.size()});
  data_end_ += bytes.size();
  ++manifest_.layer_record_counts[rec.layer_id];
  manifest_.step_count = std::max(manifest_.step_count, rec.step + 1);
}

ReplayStream Ledger::replay(std::uint16_t layer_id, std::size_t chunk_size) const {
  if (layer_id >= by_layer_.size()) {
    throw IndexError("layer " + std::to_string(layer_id) + " does not exist in ledger (" +
                     std::to_string(by_layer_.size()) + " layers)");
  }
  std::vector<IndexEntry> list;
  list.reserve(by_layer_[layer_id].size());
  for (auto k : by_layer_[layer_id]) list.push_back(entries_[k]);
  return ReplayStream(path_, std::move(list), std::max<std::size_t>(1, chunk_size));
}

Tensor Ledger::decode_delta(const StepRecord& rec) const {
  if (rec.layer_id >= manifest_.layer_shapes.size() || rec.delta_shape() != manifest_.layer_shapes[rec.layer_id]) {
    throw IntegrityError("record (step " + std::to_string(rec.step) + ") delta " + shape_str(rec.delta_shape()) +
                         " does not match the manifest");
  }
  return wtrace::decode_delta(rec);
}

std::vector<std::string> Ledger::gaps() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < by_layer_.size(); ++l) {
    std::vector<std::string> missing;
    std::uint64_t expect = 0;
    auto note = [&](std::uint64_t a, std::uint64_t b) {
      missing.push_back(a + 1 == b ? std::to_string(a) : fmt::format("{}-{}", a, b - 1));
    };
    for (auto k : by_layer_[l]) {
      if (entries_[k].step > expect) note(expect, entries_[k].step);
      expect = entries_[k].step + 1;
    }
    if (expect < manifest_.step_count) note(expect, manifest_.step_count);
    if (!missing.empty()) {
      std::string joined;
      for (std::size_t i = 0; i < missing.size() && i < 8; ++i) joined += (i ? ", " : "") + missing[i];
      if (missing.size() > 8) joined += fmt::format(", ... ({} ranges)", missing.size());
      out.push_back(fmt::format("layer {}: missing steps {}", l, joined));
    }
  }
  return out;
}

Tensor Ledger::reconstruct(std::uint16_t layer_id) const {
  const auto missing = gaps();
  if (!missing.empty()) {
    std::string msg = "ledger is incomplete:";
    for (const auto& m : missing) msg += " " + m + ";";
    throw IntegrityError(msg);
  }
  const auto& shape = manifest_.layer_shapes.at(layer_id);
  const std::size_t rows = shape[0], cols = shape[1];
  std::vector<double> acc(rows * cols, 0.0);
  auto stream = replay(layer_id, 64);
  while (auto rec = stream.next()) {
    if (rec->delta_shape() != shape) throw IntegrityError("record shape mismatch at step " + std::to_string(rec->step));
    if (rec->encoding == Encoding::kDense) {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += rec->dense[i];
    } else {
      const std::size_t r = rec->rank();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t k = 0; k < r; ++k) {
          const double ui = rec->u.at(i, k);
          if (ui == 0.0) continue;
          double* dst = acc.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) dst[j] += ui * static_cast<double>(rec->v.at(j, k));
        }
    }
  }
  Tensor out(shape);
  std::transform(acc.begin(), acc.end(), out.data().begin(), [](double v) { return static_cast<float>(v); });
  return out;
}

void Ledger::check_arch(const std::string& arch_hash) const {
  if (arch_hash != manifest_.arch_hash) {
    throw ArchMismatchError("model architecture " + arch_hash.substr(0, 12) + " does not match ledger " +
                            manifest_.arch_hash.substr(0, 12));
  }
}

void Ledger::verify_records() const {
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open ledger " + path_.string());
  std::int64_t last_good = -1;
  for (const auto& e : entries_) {
    auto bytes = read_range(in, e.offset, e.length, path_);
    try {
      parse_indexed(bytes);
    } catch (const ChecksumError& err) {
      throw ChecksumError(last_good, std::string(err.what()) + " at offset " + std::to_string(e.offset));
    }
    last_good = static_cast<std::int64_t>(e.step);
  }
}

LedgerSizes Ledger::sizes() const {
  LedgerSizes s;
  s.header_bytes = header_bytes_;
  s.record_bytes = data_end_ - header_bytes_;
  s.index_bytes = kIndexHeader + kIndexEntry * entries_.size();
  return s;
}

// ---------------------------------------------------------------------------
// ReplayStream

ReplayStream::ReplayStream(std::filesystem::path path, std::vector<Ledger::IndexEntry> entries, std::size_t chunk_size)
    : path_(std::move(path)), entries_(std::move(entries)), chunk_size_(chunk_size) {}

std::optional<StepRecord> ReplayStream::next() {
  if (chunk_pos_ == chunk_.size()) {
    chunk_.clear();
    chunk_pos_ = 0;
    if (next_entry_ >= entries_.size()) return std::nullopt;
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot open ledger " + path_.string());
    const auto end = std::min(entries_.size(), next_entry_ + chunk_size_);
    for (; next_entry_ < end; ++next_entry_) {
      const auto& e = entries_[next_entry_];
      auto bytes = read_range(in, e.offset, e.length, path_);
      try {
        chunk_.push_back(parse_indexed(bytes));
      } catch (const ChecksumError& err) {
        // Records decoded earlier in this chunk are good too.
        const auto good = chunk_.empty() ? last_good_step_ : static_cast<std::int64_t>(chunk_.back().step);
        throw ChecksumError(good, std::string(err.what()) + " during replay; last good step " + std::to_string(good));
      }
    }
  }
  last_good_step_ = static_cast<std::int64_t>(chunk_[chunk_pos_].step);
  return std::move(chunk_[chunk_pos_++]);
}

}  // namespace wtrace
