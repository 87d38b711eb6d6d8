#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "featscan/tensor.hpp"

namespace featscan {

enum class Compression { kNone, kDeflate };

const char* compression_name(Compression c) noexcept;
Compression parse_compression(const std::string& name);

inline constexpr int kStoreFormatVersion = 1;

struct StoreManifest {
  int format_version = kStoreFormatVersion;
  std::string dataset_name;
  std::string model_name;
  std::string layer_name;
  Dims dims;
  std::uint64_t image_count = 0;
  std::uint32_t images_per_chunk = 64;
  Compression compression = Compression::kDeflate;
  std::optional<std::map<std::string, std::string>> label_map;

  friend bool operator==(const StoreManifest&, const StoreManifest&) = default;
};

std::string manifest_to_json(const StoreManifest& manifest);
// Throws kParse on malformed JSON and kInvalidArgument on bad field values.
StoreManifest manifest_from_json(const std::string& text);

struct ChunkIndexEntry {
  std::uint32_t ordinal = 0;
  std::uint64_t byte_offset = 0;
  std::uint64_t byte_length = 0;
  std::uint32_t checksum = 0;  // CRC-32 of the stored (compressed) bytes
  std::vector<std::string> image_ids;

  friend bool operator==(const ChunkIndexEntry&, const ChunkIndexEntry&) = default;
};

// index.bin codec. Records are little-endian: u32 ordinal, u64 offset,
// u64 length, u32 crc, u16 id count, then per id a u16 byte length and the
// UTF-8 bytes.
std::vector<std::uint8_t> encode_index(std::span<const ChunkIndexEntry> entries);
// Throws kCorruption on truncated or malformed input.
std::vector<ChunkIndexEntry> decode_index(std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

namespace store_files {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kIndex = "index.bin";
inline constexpr const char* kData = "data.bin";
inline constexpr const char* kLock = "writer.lock";
}  // namespace store_files

class BatchStream;

// Chunked, checksummed archive of feature maps sharing one shape.
//
// A store is a directory holding manifest.json, index.bin and data.bin.
// data.bin only ever grows; index.bin and manifest.json are replaced through
// write-to-temp and rename after new chunk bytes are synced, so a reader sees
// either the old or the new chunk set. Writers hold an exclusive lock on the
// directory; readers take no lock.
class FeatureStore {
 public:
  enum class Mode { kReadOnly, kReadWrite };

  // Throws kAlreadyExists if `dir` already holds a manifest, kIo if the
  // directory cannot be written.
  static FeatureStore create(const std::filesystem::path& dir,
                             StoreManifest manifest);
  // Throws kNotFound for a missing store, kCorruption for an unreadable
  // manifest or index.
  static FeatureStore open(const std::filesystem::path& dir,
                           Mode mode = Mode::kReadOnly);

  FeatureStore(FeatureStore&&) noexcept;
  FeatureStore& operator=(FeatureStore&&) noexcept;
  ~FeatureStore();

  const std::filesystem::path& path() const noexcept;
  const StoreManifest& manifest() const noexcept;
  std::span<const ChunkIndexEntry> index() const noexcept;
  // All ids in index (insertion) order.
  std::vector<std::string> image_ids() const;
  bool contains(const std::string& image_id) const;
  // Raw float payload size of all stored maps.
  std::uint64_t payload_bytes() const noexcept;

  // Appends maps as new chunks. Validates everything first: a dims mismatch
  // or duplicate id throws kInvalidArgument and nothing is written.
  std::size_t append(std::span<const FeatureMap> maps);
  // Merges labels into the manifest's label map.
  void set_labels(const std::map<std::string, std::string>& labels);

  // Throws kNotFound for unknown ids and kCorruption on a checksum failure.
  FeatureMap get(const std::string& image_id) const;
  std::vector<FeatureMap> read_chunk(std::size_t chunk) const;
  std::vector<FeatureMap> load_all() const;
  // Streams all maps in chunk order while the next chunk decodes in the
  // background. The store must outlive the stream.
  BatchStream batches(std::size_t batch_size) const;

 private:
  struct State;
  explicit FeatureStore(std::unique_ptr<State> state);
  std::unique_ptr<State> state_;
};

class BatchStream {
 public:
  BatchStream(BatchStream&&) noexcept;
  BatchStream& operator=(BatchStream&&) noexcept;
  ~BatchStream();

  // Next batch, or nullopt once every map has been delivered. Rethrows a
  // chunk decoding failure, after which the stream is finished.
  std::optional<std::vector<FeatureMap>> next();

 private:
  friend class FeatureStore;
  struct Shared;
  BatchStream(const FeatureStore& store, std::size_t batch_size);
  std::shared_ptr<Shared> shared_;
};

struct ChunkStatus {
  std::uint32_t ordinal = 0;
  std::uint64_t byte_offset = 0;
  std::uint64_t byte_length = 0;
  std::size_t image_count = 0;
  bool ok = true;
  std::string detail;  // empty when ok
};

struct VerifyReport {
  bool ok = true;
  std::vector<ChunkStatus> chunks;
  // Store-level problems (missing files, index inconsistencies, count
  // mismatches).
  std::vector<std::string> problems;

  std::size_t failed_chunks() const;
  std::string to_json() const;
};

// Checks every chunk checksum and the consistency of index, manifest and
// data file. Damage is reported, never thrown.
VerifyReport verify_store(const std::filesystem::path& dir);

}  // namespace featscan
