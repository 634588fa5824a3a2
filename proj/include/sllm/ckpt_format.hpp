// ----------------------------------------------------------------------------
//  sllm-desk
//  Copyright (c) sllm-desk contributors 2026
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//
//   You may obtain a copy of the License at
//
//                   http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.
//  ----------------------------------------------------------------------------

#pragma once

// Loading-optimized checkpoint format: tensors packed into partition files,
// read back in large sequential chunks by a multi-threaded pipeline that stages
// data through aligned buffers before placing it in one flat model buffer.

#include "sllm/common.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace sllm::ckpt {

namespace fs = std::filesystem;

inline constexpr char kMagic[8] = {'S', 'L', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint64_t kDefaultChunkSize = 16 * MiB;
inline constexpr std::uint64_t kDefaultAlignment = 4096;
inline constexpr std::uint64_t kDefaultMaxPartitionBytes = 1 * GiB;
inline constexpr std::uint64_t kDirectIoAlignment = 4096;
inline constexpr const char* kNaiveListing = "listing.txt";

enum class DType : std::uint8_t {
  F32 = 0,
  F16 = 1,
  BF16 = 2,
  F64 = 3,
  I8 = 4,
  U8 = 5,
  I32 = 6,
  I64 = 7,
  Bool = 8,
};

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::F64: return 8;
    case DType::I8: return 1;
    case DType::U8: return 1;
    case DType::I32: return 4;
    case DType::I64: return 8;
    case DType::Bool: return 1;
  }
  fail(ErrorKind::Format, "unknown dtype code " + std::to_string(static_cast<int>(d)));
}

inline std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::F32: return "f32";
    case DType::F16: return "f16";
    case DType::BF16: return "bf16";
    case DType::F64: return "f64";
    case DType::I8: return "i8";
    case DType::U8: return "u8";
    case DType::I32: return "i32";
    case DType::I64: return "i64";
    case DType::Bool: return "bool";
  }
  return "?";
}

inline DType dtype_from_code(std::uint8_t code) {
  if (code > static_cast<std::uint8_t>(DType::Bool)) {
    fail(ErrorKind::Format, "unknown dtype code " + std::to_string(code));
  }
  return static_cast<DType>(code);
}

inline DType parse_dtype(std::string_view name) {
  for (std::uint8_t c = 0; c <= static_cast<std::uint8_t>(DType::Bool); ++c) {
    if (dtype_name(static_cast<DType>(c)) == name) return static_cast<DType>(c);
  }
  fail(ErrorKind::Format, "unknown dtype '" + std::string(name) + "'");
}

struct TensorSpec {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;  // empty = scalar
  std::uint64_t byte_length = 0;

  static TensorSpec make(std::string name, DType dtype, std::vector<std::uint64_t> shape) {
    std::uint64_t elems = 1;
    for (auto d : shape) elems *= d;
    TensorSpec t{std::move(name), dtype, std::move(shape), 0};
    t.byte_length = elems * dtype_size(dtype);
    return t;
  }

  bool operator==(const TensorSpec&) const = default;
};

struct TensorIndexEntry {
  TensorSpec spec;
  std::uint32_t partition_id = 0;
  std::uint64_t partition_offset = 0;
  std::uint64_t buffer_offset = 0;

  bool operator==(const TensorIndexEntry&) const = default;
};

struct PartitionInfo {
  std::string file_name;
  std::uint64_t size = 0;  // on-disk size, payload zero-padded to alignment
  std::uint32_t crc32c = 0;

  bool operator==(const PartitionInfo&) const = default;
};

struct CheckpointManifest {
  std::string model_id;
  std::uint32_t format_version = kFormatVersion;
  std::vector<PartitionInfo> partitions;
  std::vector<TensorIndexEntry> index;
  std::uint64_t chunk_size = kDefaultChunkSize;
  std::uint64_t alignment = kDefaultAlignment;
  std::uint64_t total_bytes = 0;

  // Bytes of tensor data in partition `p`, i.e. its size without padding.
  std::uint64_t payload_bytes(std::uint32_t p) const {
    std::uint64_t end = 0;
    for (const auto& e : index) {
      if (e.partition_id == p) end = std::max(end, e.partition_offset + e.spec.byte_length);
    }
    return end;
  }

  std::uint64_t buffer_bytes() const {
    std::uint64_t end = 0;
    for (const auto& e : index) end = std::max(end, e.buffer_offset + e.spec.byte_length);
    return end;
  }

  const TensorIndexEntry* find(std::string_view name) const {
    for (const auto& e : index) {
      if (e.spec.name == name) return &e;
    }
    return nullptr;
  }

  bool operator==(const CheckpointManifest&) const = default;
};

struct ChunkRead {
  std::uint32_t partition_id = 0;
  std::uint64_t file_offset = 0;
  std::uint64_t length = 0;  // payload bytes copied to the model buffer
  std::uint64_t buffer_offset = 0;

  bool operator==(const ChunkRead&) const = default;
};

struct LoadPlan {
  std::vector<ChunkRead> chunks;
  std::uint32_t staging_buffer_count = 4;
  std::uint32_t worker_count = 4;
  std::uint64_t chunk_size = kDefaultChunkSize;
  std::uint64_t alignment = kDefaultAlignment;
  std::uint64_t buffer_bytes = 0;
  std::vector<std::string> partition_files;
};

inline std::uint64_t round_up(std::uint64_t v, std::uint64_t a) {
  return a <= 1 ? v : (v + a - 1) / a * a;
}

inline bool is_power_of_two(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::string partition_file_name(const std::string& model_id, std::size_t k) {
  return model_id + ".part" + std::to_string(k);
}

inline std::string manifest_file_name(const std::string& model_id) { return model_id + ".sllm"; }

// Packs tensors into partitions in input order. A tensor never spans two
// partitions; a new partition starts when the next tensor would push the
// current payload past `max_partition_bytes`.
inline CheckpointManifest build_manifest(std::string model_id, const std::vector<TensorSpec>& tensors,
                                         std::uint64_t chunk_size = kDefaultChunkSize,
                                         std::uint64_t alignment = kDefaultAlignment,
                                         std::uint64_t max_partition_bytes = kDefaultMaxPartitionBytes) {
  if (model_id.empty() || model_id.find('/') != std::string::npos) {
    fail(ErrorKind::InvalidArgument, "invalid model id '" + model_id + "'");
  }
  if (chunk_size == 0) fail(ErrorKind::InvalidArgument, "chunk_size must be > 0");
  if (!is_power_of_two(alignment)) fail(ErrorKind::InvalidArgument, "alignment must be a power of two");
  if (chunk_size % alignment != 0) fail(ErrorKind::InvalidArgument, "chunk_size must be a multiple of alignment");
  if (chunk_size > 0xFFFFFFFFULL || alignment > 0xFFFFFFFFULL) {
    fail(ErrorKind::InvalidArgument, "chunk_size and alignment must fit in 32 bits");
  }

  CheckpointManifest m;
  m.model_id = std::move(model_id);
  m.chunk_size = chunk_size;
  m.alignment = alignment;

  std::unordered_set<std::string> names;
  std::uint64_t buffer_cursor = 0;
  std::uint64_t part_fill = 0;
  bool open_partition = false;
  std::vector<std::uint64_t> payloads;

  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) {
      fail(ErrorKind::InvalidArgument, "duplicate tensor name '" + t.name + "'");
    }
    if (t.name.empty() || t.name.size() > 0xFFFF) {
      fail(ErrorKind::InvalidArgument, "tensor name length out of range");
    }
    if (t.shape.size() > 0xFF) fail(ErrorKind::InvalidArgument, "tensor rank exceeds 255: " + t.name);
    if (TensorSpec::make(t.name, t.dtype, t.shape).byte_length != t.byte_length) {
      fail(ErrorKind::InvalidArgument, "byte_length does not match shape for '" + t.name + "'");
    }
    if (t.byte_length > max_partition_bytes) {
      fail(ErrorKind::InvalidArgument, "tensor '" + t.name + "' (" + std::to_string(t.byte_length) +
                                           " B) exceeds max_partition_bytes");
    }
    if (!open_partition || part_fill + t.byte_length > max_partition_bytes) {
      if (open_partition) payloads.push_back(part_fill);
      open_partition = true;
      part_fill = 0;
    }
    TensorIndexEntry e;
    e.spec = t;
    e.partition_id = static_cast<std::uint32_t>(payloads.size());
    e.partition_offset = part_fill;
    e.buffer_offset = buffer_cursor;
    m.index.push_back(std::move(e));
    part_fill += t.byte_length;
    buffer_cursor += t.byte_length;
  }
  if (open_partition) payloads.push_back(part_fill);

  for (std::size_t k = 0; k < payloads.size(); ++k) {
    PartitionInfo p;
    p.file_name = partition_file_name(m.model_id, k);
    p.size = round_up(payloads[k], alignment);
    m.partitions.push_back(std::move(p));
    m.total_bytes += m.partitions.back().size;
  }
  return m;
}

// Structural checks shared by the reader and the planner. Within a partition
// tensors must be laid out identically in file and buffer (constant shift).
inline void validate_manifest(const CheckpointManifest& m) {
  if (!is_power_of_two(m.alignment)) fail(ErrorKind::Format, "manifest alignment is not a power of two");
  if (m.chunk_size == 0 || m.chunk_size % m.alignment != 0) {
    fail(ErrorKind::Format, "manifest chunk_size is not a positive multiple of alignment");
  }
  std::uint64_t sum = 0;
  for (const auto& p : m.partitions) sum += p.size;
  if (sum != m.total_bytes) fail(ErrorKind::Format, "total_bytes does not equal sum of partition sizes");

  std::unordered_set<std::string> names;
  std::vector<std::optional<std::int64_t>> shift(m.partitions.size());
  std::vector<std::uint64_t> covered(m.partitions.size(), 0);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& e : m.index) {
    if (!names.insert(e.spec.name).second) fail(ErrorKind::Format, "duplicate tensor name '" + e.spec.name + "'");
    if (e.partition_id >= m.partitions.size()) fail(ErrorKind::Format, "tensor '" + e.spec.name + "' references missing partition");
    if (TensorSpec::make(e.spec.name, e.spec.dtype, e.spec.shape).byte_length != e.spec.byte_length) {
      fail(ErrorKind::Format, "tensor '" + e.spec.name + "' byte length does not match shape");
    }
    if (e.partition_offset + e.spec.byte_length > m.partitions[e.partition_id].size) {
      fail(ErrorKind::Format, "tensor '" + e.spec.name + "' overruns its partition");
    }
    auto s = static_cast<std::int64_t>(e.buffer_offset) - static_cast<std::int64_t>(e.partition_offset);
    auto& ps = shift[e.partition_id];
    if (ps && *ps != s) fail(ErrorKind::Format, "partition " + std::to_string(e.partition_id) + " is not contiguous in the buffer");
    ps = s;
    covered[e.partition_id] += e.spec.byte_length;
    ranges.emplace_back(e.buffer_offset, e.buffer_offset + e.spec.byte_length);
  }
  for (std::uint32_t p = 0; p < m.partitions.size(); ++p) {
    if (covered[p] != m.payload_bytes(p)) fail(ErrorKind::Format, "partition " + std::to_string(p) + " payload has gaps or overlaps");
    if (round_up(m.payload_bytes(p), m.alignment) != m.partitions[p].size) {
      fail(ErrorKind::Format, "partition " + std::to_string(p) + " size is not its payload padded to alignment");
    }
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) fail(ErrorKind::Format, "tensor buffer ranges overlap");
  }
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void raw(std::string_view s) { buf_.append(s); }
  void str16(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  const std::string& data() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16() {
    auto n = u16();
    return std::string(raw(n));
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) {
    if (data_.size() - pos_ < n) fail(ErrorKind::Format, "manifest truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

class FileDescriptor {
 public:
  FileDescriptor() = default;
  explicit FileDescriptor(int fd) : fd_(fd) {}
  FileDescriptor(const FileDescriptor&) = delete;
  FileDescriptor& operator=(const FileDescriptor&) = delete;
  FileDescriptor(FileDescriptor&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  FileDescriptor& operator=(FileDescriptor&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~FileDescriptor() { reset(); }

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

struct AlignedFree {
  void operator()(std::byte* p) const { std::free(p); }
};
using AlignedBuffer = std::unique_ptr<std::byte, AlignedFree>;

inline AlignedBuffer aligned_buffer(std::size_t bytes, std::size_t alignment) {
  auto size = round_up(std::max<std::size_t>(bytes, 1), alignment);
  void* p = std::aligned_alloc(alignment, size);
  if (p == nullptr) fail(ErrorKind::Io, "aligned allocation of " + std::to_string(size) + " bytes failed");
  return AlignedBuffer(static_cast<std::byte*>(p));
}

inline std::string errno_text(int err) { return std::strerror(err); }

inline void write_all(int fd, const std::byte* data, std::size_t n, const fs::path& path) {
  while (n > 0) {
    auto w = ::write(fd, data, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::Io, "write failed for " + path.string() + ": " + errno_text(errno));
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

// Reads exactly n bytes at offset or returns the errno that stopped it
// (ENODATA signals end of file).
inline int pread_all(int fd, std::byte* dst, std::size_t n, std::uint64_t offset) {
  while (n > 0) {
    auto r = ::pread(fd, dst, n, static_cast<off_t>(offset));
    if (r < 0) {
      if (errno == EINTR) continue;
      return errno;
    }
    if (r == 0) return ENODATA;
    dst += r;
    n -= static_cast<std::size_t>(r);
    offset += static_cast<std::uint64_t>(r);
  }
  return 0;
}

}  // namespace detail

inline std::string serialize_manifest(const CheckpointManifest& m) {
  detail::ByteWriter w;
  w.raw(std::string_view(kMagic, sizeof(kMagic)));
  w.u32(m.format_version);
  w.u32(static_cast<std::uint32_t>(m.chunk_size));
  w.u32(static_cast<std::uint32_t>(m.alignment));
  w.u32(static_cast<std::uint32_t>(m.partitions.size()));
  w.u64(m.total_bytes);
  for (const auto& p : m.partitions) {
    w.str16(p.file_name);
    w.u64(p.size);
    w.u32(p.crc32c);
  }
  w.u32(static_cast<std::uint32_t>(m.index.size()));
  for (const auto& e : m.index) {
    w.str16(e.spec.name);
    w.u8(static_cast<std::uint8_t>(e.spec.dtype));
    w.u8(static_cast<std::uint8_t>(e.spec.shape.size()));
    for (auto d : e.spec.shape) w.u64(d);
    w.u32(e.partition_id);
    w.u64(e.partition_offset);
    w.u64(e.buffer_offset);
  }
  return w.data();
}

inline CheckpointManifest parse_manifest(std::string_view bytes, std::string model_id) {
  detail::ByteReader r(bytes);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::Format, "bad magic");
  }
  r.raw(sizeof(kMagic));
  CheckpointManifest m;
  m.model_id = std::move(model_id);
  m.format_version = r.u32();
  if (m.format_version != kFormatVersion) {
    fail(ErrorKind::Format, "version mismatch: file has " + std::to_string(m.format_version) + ", expected " +
                                std::to_string(kFormatVersion));
  }
  m.chunk_size = r.u32();
  m.alignment = r.u32();
  auto partition_count = r.u32();
  m.total_bytes = r.u64();
  for (std::uint32_t i = 0; i < partition_count; ++i) {
    PartitionInfo p;
    p.file_name = r.str16();
    p.size = r.u64();
    p.crc32c = r.u32();
    m.partitions.push_back(std::move(p));
  }
  auto tensor_count = r.u32();
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    TensorIndexEntry e;
    e.spec.name = r.str16();
    e.spec.dtype = dtype_from_code(r.u8());
    auto rank = r.u8();
    for (int d = 0; d < rank; ++d) e.spec.shape.push_back(r.u64());
    e.spec.byte_length = TensorSpec::make(e.spec.name, e.spec.dtype, e.spec.shape).byte_length;
    e.partition_id = r.u32();
    e.partition_offset = r.u64();
    e.buffer_offset = r.u64();
    m.index.push_back(std::move(e));
  }
  if (!r.done()) fail(ErrorKind::Format, "trailing bytes after manifest");
  validate_manifest(m);
  return m;
}

// Fills `out` with the tensor's bytes; returns how many bytes it produced.
using PayloadSource = std::function<std::size_t(const TensorIndexEntry&, std::span<std::byte> out)>;

struct WriteResult {
  CheckpointManifest manifest;  // with partition checksums filled in
  std::vector<fs::path> files;  // manifest first, then partitions in order
};

inline WriteResult write_checkpoint(CheckpointManifest manifest, const PayloadSource& source,
                                    const fs::path& directory, bool overwrite = false) {
  validate_manifest(manifest);
  std::error_code ec;
  fs::create_directories(directory, ec);
  if (ec) fail(ErrorKind::Io, "cannot create directory " + directory.string() + ": " + ec.message());

  const auto manifest_path = directory / manifest_file_name(manifest.model_id);
  if (!overwrite && fs::exists(manifest_path)) {
    fail(ErrorKind::Io, "checkpoint exists: " + manifest_path.string());
  }

  WriteResult result;
  std::vector<std::byte> scratch;
  for (std::uint32_t p = 0; p < manifest.partitions.size(); ++p) {
    auto& part = manifest.partitions[p];
    const auto path = directory / part.file_name;
    detail::FileDescriptor fd(::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644));
    if (!fd) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing: " + detail::errno_text(errno));

    Crc32c crc;
    std::uint64_t written = 0;
    for (const auto& e : manifest.index) {
      if (e.partition_id != p) continue;
      scratch.resize(e.spec.byte_length);
      auto got = source(e, std::span<std::byte>(scratch));
      if (got != e.spec.byte_length) {
        fail(ErrorKind::Io, "short payload for tensor '" + e.spec.name + "': got " + std::to_string(got) +
                                " of " + std::to_string(e.spec.byte_length) + " bytes");
      }
      detail::write_all(fd.get(), scratch.data(), scratch.size(), path);
      crc.process_bytes(scratch.data(), scratch.size());
      written += e.spec.byte_length;
    }
    if (written < part.size) {
      std::vector<std::byte> pad(part.size - written, std::byte{0});
      detail::write_all(fd.get(), pad.data(), pad.size(), path);
      crc.process_bytes(pad.data(), pad.size());
    }
    part.crc32c = crc.checksum();
    result.files.push_back(path);
  }

  const auto bytes = serialize_manifest(manifest);
  {
    std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + manifest_path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "write failed for " + manifest_path.string());
  }
  result.files.insert(result.files.begin(), manifest_path);
  result.manifest = std::move(manifest);
  return result;
}

inline fs::path find_manifest(const fs::path& directory, const std::string& model_id = {}) {
  if (!model_id.empty()) return directory / manifest_file_name(model_id);
  if (!fs::is_directory(directory)) fail(ErrorKind::NotFound, "not a directory: " + directory.string());
  std::vector<fs::path> found;
  for (const auto& ent : fs::directory_iterator(directory)) {
    if (ent.is_regular_file() && ent.path().extension() == ".sllm") found.push_back(ent.path());
  }
  if (found.empty()) fail(ErrorKind::NotFound, "no manifest (*.sllm) in " + directory.string());
  if (found.size() > 1) fail(ErrorKind::InvalidArgument, "multiple manifests in " + directory.string() + "; pass a model id");
  return found.front();
}

inline std::uint32_t file_crc32c(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::NotFound, "missing partition file " + path.string());
  Crc32c crc;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    crc.process_bytes(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return crc.checksum();
}

// Parses the manifest and verifies every partition's size and checksum.
inline CheckpointManifest read_manifest(const fs::path& directory, const std::string& model_id = {}) {
  const auto path = find_manifest(directory, model_id);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::NotFound, "missing manifest " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto m = parse_manifest(bytes, path.stem().string());

  for (const auto& p : m.partitions) {
    const auto ppath = directory / p.file_name;
    std::error_code ec;
    auto size = fs::file_size(ppath, ec);
    if (ec) fail(ErrorKind::NotFound, "missing partition file " + ppath.string());
    if (size != p.size) {
      fail(ErrorKind::Corruption, "size mismatch for " + ppath.string() + ": " + std::to_string(size) +
                                      " on disk, " + std::to_string(p.size) + " in manifest");
    }
    if (file_crc32c(ppath) != p.crc32c) fail(ErrorKind::Corruption, "checksum mismatch for " + ppath.string());
  }
  return m;
}

// Splits every partition's payload into chunk_size reads (last one shorter),
// ascending within the partition, each mapped to its flat-buffer destination.
inline LoadPlan plan_load(const CheckpointManifest& m, std::uint32_t worker_count = 4,
                          std::uint32_t staging_buffer_count = 4) {
  validate_manifest(m);
  LoadPlan plan;
  plan.worker_count = std::max<std::uint32_t>(1, worker_count);
  plan.staging_buffer_count = std::max<std::uint32_t>(2, staging_buffer_count);
  plan.chunk_size = m.chunk_size;
  plan.alignment = m.alignment;
  plan.buffer_bytes = m.buffer_bytes();

  std::vector<std::optional<std::uint64_t>> base(m.partitions.size());
  for (const auto& e : m.index) {
    auto b = e.buffer_offset - e.partition_offset;
    if (!base[e.partition_id]) base[e.partition_id] = b;
  }
  for (std::uint32_t p = 0; p < m.partitions.size(); ++p) {
    plan.partition_files.push_back(m.partitions[p].file_name);
    const auto payload = m.payload_bytes(p);
    for (std::uint64_t off = 0; off < payload; off += m.chunk_size) {
      ChunkRead c;
      c.partition_id = p;
      c.file_offset = off;
      c.length = std::min(m.chunk_size, payload - off);
      c.buffer_offset = *base[p] + off;
      plan.chunks.push_back(c);
    }
  }
  return plan;
}

// Flat, uninitialised model buffer exclusively owned by the caller.
class ModelBuffer {
 public:
  ModelBuffer() = default;
  explicit ModelBuffer(std::size_t size)
      : data_(size ? std::make_unique_for_overwrite<std::byte[]>(size) : nullptr), size_(size) {}

  std::size_t size() const { return size_; }
  std::byte* data() { return data_.get(); }
  const std::byte* data() const { return data_.get(); }
  std::span<std::byte> span() { return {data_.get(), size_}; }
  std::span<const std::byte> span() const { return {data_.get(), size_}; }
  std::span<const std::byte> slice(std::uint64_t offset, std::uint64_t length) const {
    if (offset + length > size_) fail(ErrorKind::InvalidArgument, "slice out of range");
    return {data_.get() + offset, length};
  }

 private:
  std::unique_ptr<std::byte[]> data_;
  std::size_t size_ = 0;
};

struct LoadOptions {
  bool bypass_os_cache = true;
  std::uint32_t worker_count = 4;
  std::uint32_t staging_buffer_count = 4;
};

struct LoadReport {
  std::uint64_t bytes = 0;
  double wall_time = 0.0;
  double throughput = 0.0;  // bytes per second
  std::uint32_t worker_count = 0;
  std::uint32_t staging_buffer_count = 0;
  bool direct_io_requested = false;
  bool direct_io_used = false;
  bool direct_io_fallback = false;  // requested but unavailable; buffered reads used
};

struct LoadResult {
  ModelBuffer buffer;
  LoadReport report;
};

namespace detail {

// Bounded pool of aligned staging buffers standing in for pinned host memory.
// Readers fill a free slot and hand it to the transfer stage, which copies it
// into the model buffer and recycles the slot.
class StagingPipeline {
 public:
  StagingPipeline(std::size_t count, std::size_t bytes) {
    for (std::size_t i = 0; i < count; ++i) {
      buffers_.push_back(aligned_buffer(bytes, kDirectIoAlignment));
      free_.push_back(i);
    }
  }

  std::optional<std::size_t> acquire() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return !free_.empty() || stopped_; });
    if (stopped_) return std::nullopt;
    auto slot = free_.front();
    free_.pop_front();
    return slot;
  }

  void release(std::size_t slot) {
    {
      std::lock_guard lk(mu_);
      free_.push_back(slot);
    }
    cv_.notify_all();
  }

  void publish(std::size_t chunk, std::size_t slot) {
    {
      std::lock_guard lk(mu_);
      filled_.emplace_back(chunk, slot);
    }
    cv_.notify_all();
  }

  std::optional<std::pair<std::size_t, std::size_t>> take() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return !filled_.empty() || stopped_; });
    if (stopped_) return std::nullopt;
    auto v = filled_.front();
    filled_.pop_front();
    return v;
  }

  void stop() {
    {
      std::lock_guard lk(mu_);
      stopped_ = true;
    }
    cv_.notify_all();
  }

  std::byte* buffer(std::size_t slot) { return buffers_[slot].get(); }

 private:
  std::vector<AlignedBuffer> buffers_;
  std::deque<std::size_t> free_;
  std::deque<std::pair<std::size_t, std::size_t>> filled_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stopped_ = false;
};

}  // namespace detail

// Executes a plan against the partition files in `directory`. Chunks are
// claimed in plan order, so reads within a partition are issued with
// ascending offsets; completion order across workers is unconstrained. On any
// read failure the partially filled buffer is discarded and Error(Io) thrown.
inline LoadResult execute_load(const LoadPlan& plan, const fs::path& directory, const LoadOptions& options = {}) {
  if (options.worker_count < 1) fail(ErrorKind::InvalidArgument, "worker_count must be >= 1");
  if (options.staging_buffer_count < 2) fail(ErrorKind::InvalidArgument, "staging_buffer_count must be >= 2");

  LoadResult result;
  auto& report = result.report;
  report.worker_count = options.worker_count;
  report.staging_buffer_count = options.staging_buffer_count;
  report.direct_io_requested = options.bypass_os_cache;

  const auto t0 = std::chrono::steady_clock::now();
  ModelBuffer buffer(plan.buffer_bytes);
  if (plan.chunks.empty()) {
    result.buffer = std::move(buffer);
    return result;
  }

  // O_DIRECT needs file offsets, lengths and memory aligned to the device
  // block; plans with finer alignment go straight to buffered reads.
  bool want_direct = options.bypass_os_cache && plan.alignment % kDirectIoAlignment == 0;
  std::atomic<bool> fallback{options.bypass_os_cache && !want_direct};

  std::vector<detail::FileDescriptor> fds;
  std::vector<detail::FileDescriptor> buffered_fds;
  for (const auto& name : plan.partition_files) {
    const auto path = directory / name;
    int fd = -1;
    if (want_direct) {
      fd = ::open(path.c_str(), O_RDONLY | O_DIRECT);
      if (fd < 0 && errno == EINVAL) fallback = true;
    }
    if (fd < 0) fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) fail(ErrorKind::Io, "cannot open " + path.string() + ": " + detail::errno_text(errno));
    fds.emplace_back(fd);
    int bfd = ::open(path.c_str(), O_RDONLY);
    if (bfd < 0) fail(ErrorKind::Io, "cannot open " + path.string() + ": " + detail::errno_text(errno));
    buffered_fds.emplace_back(bfd);
  }

  const std::size_t slot_bytes = round_up(plan.chunk_size, kDirectIoAlignment);
  detail::StagingPipeline pipeline(options.staging_buffer_count, slot_bytes);
  std::atomic<std::size_t> next{0};
  std::atomic<std::uint64_t> bytes_read{0};
  std::atomic<bool> direct_used{false};
  std::mutex err_mu;
  std::string error;

  auto set_error = [&](std::string msg) {
    {
      std::lock_guard lk(err_mu);
      if (error.empty()) error = std::move(msg);
    }
    pipeline.stop();
  };

  auto reader = [&] {
    for (;;) {
      auto slot = pipeline.acquire();
      if (!slot) return;
      auto idx = next.fetch_add(1);
      if (idx >= plan.chunks.size()) {
        pipeline.release(*slot);
        return;
      }
      const auto& c = plan.chunks[idx];
      const auto read_len = round_up(c.length, plan.alignment);
      std::byte* dst = pipeline.buffer(*slot);
      int err = 0;
      if (want_direct && !fallback.load(std::memory_order_relaxed)) {
        err = detail::pread_all(fds[c.partition_id].get(), dst, read_len, c.file_offset);
        if (err == EINVAL) {
          fallback = true;
        } else if (err == 0) {
          direct_used = true;
        }
      }
      if (!want_direct || fallback.load(std::memory_order_relaxed)) {
        err = detail::pread_all(buffered_fds[c.partition_id].get(), dst, read_len, c.file_offset);
      }
      if (err != 0) {
        set_error("read failed for " + (directory / plan.partition_files[c.partition_id]).string() + " at offset " +
                  std::to_string(c.file_offset) + ": " + (err == ENODATA ? "unexpected end of file" : detail::errno_text(err)));
        return;
      }
      bytes_read += read_len;
      pipeline.publish(idx, *slot);
    }
  };

  std::size_t copied = 0;
  auto transfer = [&] {
    while (copied < plan.chunks.size()) {
      auto item = pipeline.take();
      if (!item) return;
      const auto& c = plan.chunks[item->first];
      std::memcpy(buffer.data() + c.buffer_offset, pipeline.buffer(item->second), c.length);
      pipeline.release(item->second);
      ++copied;
    }
  };

  std::vector<std::thread> threads;
  threads.emplace_back(transfer);
  for (std::uint32_t w = 0; w < options.worker_count; ++w) threads.emplace_back(reader);
  for (auto& t : threads) t.join();

  if (!error.empty()) fail(ErrorKind::Io, error);
  if (copied != plan.chunks.size()) fail(ErrorKind::Io, "load pipeline stopped early");

  const auto t1 = std::chrono::steady_clock::now();
  report.bytes = bytes_read.load();
  report.wall_time = std::chrono::duration<double>(t1 - t0).count();
  report.throughput = report.wall_time > 0 ? static_cast<double>(report.bytes) / report.wall_time : 0.0;
  report.direct_io_used = direct_used.load() && !fallback.load();
  report.direct_io_fallback = fallback.load();
  result.buffer = std::move(buffer);
  return result;
}

// Convenience: read + verify the manifest, plan, and load.
inline LoadResult load_checkpoint(const fs::path& directory, const LoadOptions& options = {},
                                  const std::string& model_id = {}) {
  auto manifest = read_manifest(directory, model_id);
  auto plan = plan_load(manifest, options.worker_count, options.staging_buffer_count);
  return execute_load(plan, directory, options);
}

// ---------------------------------------------------------------------------
// Naive layout: listing.txt ("<name> <dtype> <dims...>" per line) plus one raw
// file per tensor, named after the tensor.

inline void check_naive_name(const std::string& name) {
  if (name.empty() || name == kNaiveListing || name == "." || name == ".." ||
      name.find_first_of("/ \t\r\n") != std::string::npos) {
    fail(ErrorKind::InvalidArgument, "tensor name '" + name + "' cannot be used as a naive file name");
  }
}

inline std::vector<TensorSpec> read_naive_listing(const fs::path& naive_dir) {
  const auto listing = naive_dir / kNaiveListing;
  std::ifstream in(listing);
  if (!in) fail(ErrorKind::NotFound, "missing " + listing.string());
  std::vector<TensorSpec> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto tok = split_ws(t);
    if (tok.size() < 2) fail(ErrorKind::Format, listing.string() + ":" + std::to_string(lineno) + ": expected '<name> <dtype> <dims...>'");
    std::vector<std::uint64_t> dims;
    for (std::size_t i = 2; i < tok.size(); ++i) dims.push_back(parse_u64(tok[i], "dimension"));
    check_naive_name(tok[0]);
    out.push_back(TensorSpec::make(tok[0], parse_dtype(tok[1]), std::move(dims)));
  }
  return out;
}

inline void write_naive(const fs::path& naive_dir, const std::vector<TensorSpec>& tensors,
                        const std::function<void(const TensorSpec&, std::span<std::byte>)>& fill) {
  fs::create_directories(naive_dir);
  std::ofstream listing(naive_dir / kNaiveListing, std::ios::trunc);
  if (!listing) fail(ErrorKind::Io, "cannot write listing in " + naive_dir.string());
  std::vector<std::byte> buf;
  for (const auto& t : tensors) {
    check_naive_name(t.name);
    listing << t.name << ' ' << dtype_name(t.dtype);
    for (auto d : t.shape) listing << ' ' << d;
    listing << '\n';
    buf.resize(t.byte_length);
    fill(t, std::span<std::byte>(buf));
    std::ofstream f(naive_dir / t.name, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) fail(ErrorKind::Io, "write failed for " + (naive_dir / t.name).string());
  }
}

// Per-tensor baseline: open each file, read it into a temporary host copy,
// then copy that into the flat buffer, one tensor at a time. Buffer layout is
// the listing order, packed contiguously (same as build_manifest).
inline LoadResult naive_load(const fs::path& naive_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  auto tensors = read_naive_listing(naive_dir);
  std::uint64_t total = 0;
  for (const auto& t : tensors) total += t.byte_length;
  LoadResult result;
  ModelBuffer buffer(total);
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    std::ifstream f(naive_dir / t.name, std::ios::binary);
    if (!f) fail(ErrorKind::NotFound, "missing tensor file " + (naive_dir / t.name).string());
    std::vector<char> tmp(t.byte_length);
    f.read(tmp.data(), static_cast<std::streamsize>(tmp.size()));
    if (static_cast<std::uint64_t>(f.gcount()) != t.byte_length) {
      fail(ErrorKind::Io, "short read for tensor file " + (naive_dir / t.name).string());
    }
    std::memcpy(buffer.data() + offset, tmp.data(), tmp.size());
    offset += t.byte_length;
  }
  const auto t1 = std::chrono::steady_clock::now();
  result.report.bytes = total;
  result.report.worker_count = 1;
  result.report.wall_time = std::chrono::duration<double>(t1 - t0).count();
  result.report.throughput = result.report.wall_time > 0 ? static_cast<double>(total) / result.report.wall_time : 0.0;
  result.buffer = std::move(buffer);
  return result;
}

// Converts a naive directory into a loading-optimized checkpoint in out_dir.
// Every listed tensor file must exist with exactly its declared byte length.
inline CheckpointManifest convert_from_naive(const fs::path& naive_dir, const fs::path& out_dir, std::string model_id,
                                             std::uint64_t chunk_size = kDefaultChunkSize,
                                             std::uint64_t alignment = kDefaultAlignment,
                                             std::uint64_t max_partition_bytes = kDefaultMaxPartitionBytes,
                                             bool overwrite = false) {
  auto tensors = read_naive_listing(naive_dir);
  for (const auto& t : tensors) {
    const auto path = naive_dir / t.name;
    std::error_code ec;
    auto size = fs::file_size(path, ec);
    if (ec) fail(ErrorKind::NotFound, "listing/file mismatch: listed tensor file missing: " + path.string());
    if (size != t.byte_length) {
      fail(ErrorKind::Format, "listing/file mismatch: " + path.string() + " has " + std::to_string(size) +
                                  " bytes, listing implies " + std::to_string(t.byte_length));
    }
  }
  auto manifest = build_manifest(std::move(model_id), tensors, chunk_size, alignment, max_partition_bytes);
  PayloadSource source = [&](const TensorIndexEntry& e, std::span<std::byte> out) -> std::size_t {
    std::ifstream f(naive_dir / e.spec.name, std::ios::binary);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    return static_cast<std::size_t>(f.gcount());
  };
  return write_checkpoint(std::move(manifest), source, out_dir, overwrite).manifest;
}

// Flushes and drops a file's pages from the OS cache so the next read comes
// from the device. Best effort: returns false when the platform refuses.
inline bool drop_file_cache(const fs::path& path) {
  detail::FileDescriptor fd(::open(path.c_str(), O_RDONLY));
  if (!fd) return false;
  ::fdatasync(fd.get());
  return ::posix_fadvise(fd.get(), 0, 0, POSIX_FADV_DONTNEED) == 0;
}

inline void drop_directory_cache(const fs::path& dir) {
  for (const auto& ent : fs::directory_iterator(dir)) {
    if (ent.is_regular_file()) drop_file_cache(ent.path());
  }
}

}  // namespace sllm::ckpt
