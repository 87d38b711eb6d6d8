#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "featscan/tensor.hpp"

namespace featscan {

class FeatureStore;

// FMAP1 shard layout: the magic "FMAP1\n", a little-endian u32 header length,
// a UTF-8 JSON header {"dims":[H,W,D],"dtype":"f32le","image_ids":[...]},
// then the row-major float32 tensors back to back in id order.
inline constexpr std::string_view kShardMagic = "FMAP1\n";

struct Shard {
  Dims dims;
  std::vector<FeatureMap> maps;
};

std::vector<std::uint8_t> encode_shard(std::span<const FeatureMap> maps);
void write_shard(const std::filesystem::path& path, std::span<const FeatureMap> maps);

// Throws kParse with the failing byte offset for malformed input.
Shard parse_shard(std::span<const std::uint8_t> bytes, const std::string& source);
Shard read_shard(const std::filesystem::path& path);

// Ingests shards one at a time. Each shard is parsed and checked against the
// store dims before any of it is written, so a bad shard contributes nothing;
// shards ingested before it stay committed.
std::size_t ingest_interchange(FeatureStore& store,
                               std::span<const std::filesystem::path> shards);

}  // namespace featscan
