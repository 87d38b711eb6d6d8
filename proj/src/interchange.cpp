#include "featscan/interchange.hpp"

#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>

#include <json.hpp>

#include "byte_io.hpp"
#include "featscan/store.hpp"

namespace featscan {

using json = nlohmann::json;

std::vector<std::uint8_t> encode_shard(std::span<const FeatureMap> maps) {
  if (maps.empty()) fail(ErrorCode::kInvalidArgument, "a shard needs at least one map");
  const Dims dims = maps.front().dims();
  json header{{"dims", {dims.rows, dims.cols, dims.channels}}, {"dtype", "f32le"}};
  header["image_ids"] = json::array();
  for (const auto& m : maps) {
    if (m.dims() != dims)
      fail(ErrorCode::kInvalidArgument, "all maps in a shard must share dims");
    header["image_ids"].push_back(m.image_id());
  }
  const std::string text = header.dump();
  ByteWriter w;
  w.bytes(kShardMagic);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& m : maps)
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(m.data().data()),
                      m.data().size_bytes()));
  return w.take();
}

void write_shard(const std::filesystem::path& path, std::span<const FeatureMap> maps) {
  const auto bytes = encode_shard(maps);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "short write to " + path.string());
}

Shard parse_shard(std::span<const std::uint8_t> bytes, const std::string& source) {
  auto parse_error = [&](std::size_t offset, const std::string& what) {
    fail(ErrorCode::kParse,
         source + ": " + what + " at byte " + std::to_string(offset));
  };

  ByteReader r(bytes);
  std::uint32_t header_len = 0;
  try {
    const auto magic = r.take(kShardMagic.size());
    if (std::memcmp(magic.data(), kShardMagic.data(), kShardMagic.size()) != 0)
      parse_error(0, "bad magic bytes");
    header_len = r.u32();
  } catch (const ByteReader::Underflow&) {
    parse_error(r.offset(), "truncated preamble");
  }

  const std::size_t header_at = r.offset();
  if (r.remaining() < header_len) parse_error(header_at, "truncated JSON header");
  const auto header_bytes = r.take(header_len);

  Shard shard;
  std::vector<std::string> ids;
  try {
    const json header = json::parse(header_bytes.begin(), header_bytes.end());
    const auto& dims = header.at("dims");
    if (!dims.is_array() || dims.size() != 3) parse_error(header_at, "dims must have 3 entries");
    shard.dims = {dims[0].get<std::size_t>(), dims[1].get<std::size_t>(),
                  dims[2].get<std::size_t>()};
    if (header.at("dtype").get<std::string>() != "f32le")
      parse_error(header_at, "unsupported dtype (expected f32le)");
    ids = header.at("image_ids").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    parse_error(header_at, std::string("invalid JSON header (") + e.what() + ")");
  }
  if (shard.dims.size() == 0) parse_error(header_at, "dims must be positive");
  {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids)
      if (!seen.insert(id).second) parse_error(header_at, "duplicate image id '" + id + "'");
  }

  const std::size_t tensor_bytes = shard.dims.size() * sizeof(float);
  const std::size_t payload_at = r.offset();
  if (r.remaining() != ids.size() * tensor_bytes)
    parse_error(payload_at + std::min(r.remaining(), ids.size() * tensor_bytes),
                "payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
                    std::to_string(ids.size() * tensor_bytes));

  shard.maps.reserve(ids.size());
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const std::size_t at = r.offset();
    const auto raw = r.take(tensor_bytes);
    std::vector<float> data(shard.dims.size());
    std::memcpy(data.data(), raw.data(), tensor_bytes);
    try {
      shard.maps.emplace_back(ids[n], shard.dims, std::move(data));
    } catch (const Error& e) {
      parse_error(at, e.what());
    }
  }
  return shard;
}

Shard read_shard(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kNotFound, "cannot open shard " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  return parse_shard(bytes, path.string());
}

std::size_t ingest_interchange(FeatureStore& store,
                               std::span<const std::filesystem::path> shards) {
  std::size_t total = 0;
  for (const auto& path : shards) {
    Shard shard = read_shard(path);
    if (shard.dims != store.manifest().dims)
      fail(ErrorCode::kInvalidArgument,
           path.string() + ": shard dims " + to_string(shard.dims) +
               " do not match store dims " + to_string(store.manifest().dims));
    total += store.append(shard.maps);
  }
  return total;
}

}  // namespace featscan
