#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "featscan/interchange.hpp"
#include "featscan/store.hpp"
#include "test_support.hpp"

using namespace featscan;

namespace {

// Builds a shard by hand so the parser is checked against the layout rather
// than against its own encoder.
std::vector<std::uint8_t> hand_shard(const nlohmann::json& header, const std::vector<float>& floats) {
  const std::string h = header.dump();
  std::vector<std::uint8_t> out{'F', 'M', 'A', 'P', '1', '\n'};
  const std::uint32_t n = static_cast<std::uint32_t>(h.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(n >> (8 * b)));
  out.insert(out.end(), h.begin(), h.end());
  const auto* p = reinterpret_cast<const std::uint8_t*>(floats.data());
  out.insert(out.end(), p, p + floats.size() * 4);
  return out;
}

std::size_t error_offset(const std::string& what) {
  const auto pos = what.rfind("at byte ");
  if (pos == std::string::npos) return std::string::npos;
  return std::stoul(what.substr(pos + 8));
}

StoreManifest manifest_for(Dims dims) {
  StoreManifest m;
  m.dataset_name = "d";
  m.model_name = "m";
  m.layer_name = "l";
  m.dims = dims;
  return m;
}

}  // namespace

TEST(ShardTest, ParsesHandBuiltShard) {
  const nlohmann::json header{{"dims", {1, 2, 1}}, {"dtype", "f32le"}, {"image_ids", nlohmann::json::array({"a", "b"})}};
  const auto bytes = hand_shard(header, {1, 2, 3, 4});
  const auto shard = parse_shard(bytes, "mem");
  EXPECT_EQ(shard.dims, (Dims{1, 2, 1}));
  ASSERT_EQ(shard.maps.size(), 2u);
  EXPECT_EQ(shard.maps[1].image_id(), "b");
  EXPECT_EQ(shard.maps[1].at(0, 1, 0), 4.0f);
}

TEST(ShardTest, EncoderMatchesLayout) {
  std::mt19937 rng(1);
  const auto maps = fstest::random_maps(rng, 3, {2, 2, 3});
  const auto bytes = encode_shard(maps);
  ASSERT_GE(bytes.size(), 10u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 6), "FMAP1\n");
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 6, 4);
  const auto header = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + hlen);
  EXPECT_EQ(header["dtype"], "f32le");
  EXPECT_EQ(header["dims"], nlohmann::json({2, 2, 3}));
  EXPECT_EQ(bytes.size(), 10 + hlen + 3 * 12 * 4);
  const auto back = parse_shard(bytes, "mem");
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.maps[i], maps[i]);
}

TEST(ShardTest, ErrorsCarryByteOffset) {
  const nlohmann::json header{{"dims", {1, 1, 2}}, {"dtype", "f32le"}, {"image_ids", nlohmann::json::array({"a"})}};
  const auto good = hand_shard(header, {1, 2});

  auto bad_magic = good;
  bad_magic[3] = 'X';
  auto truncated = good;
  truncated.pop_back();
  auto trailing = good;
  trailing.push_back(0);
  const auto wrong_dtype =
      hand_shard({{"dims", {1, 1, 2}}, {"dtype", "f16"}, {"image_ids", nlohmann::json::array({"a"})}}, {1, 2});
  const auto dup_ids =
      hand_shard({{"dims", {1, 1, 1}}, {"dtype", "f32le"}, {"image_ids", nlohmann::json::array({"a", "a"})}}, {1, 2});
  const auto short_header = std::vector<std::uint8_t>(good.begin(), good.begin() + 8);

  const std::vector<const std::vector<std::uint8_t>*> cases{&bad_magic, &truncated, &trailing,
                                                           &wrong_dtype, &dup_ids, &short_header};
  for (const auto* bytes : cases) {
    try {
      parse_shard(*bytes, "mem");
      ADD_FAILURE() << "parsed a malformed shard";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kParse);
      EXPECT_NE(error_offset(e.what()), std::string::npos) << e.what();
    }
  }
  try {
    parse_shard(bad_magic, "mem");
  } catch (const Error& e) {
    EXPECT_EQ(error_offset(e.what()), 0u) << e.what();
  }
}

TEST(IngestTest, ValidTruncatedAndMismatched) {
  fstest::TempDir dir;
  std::mt19937 rng(2);
  auto store = FeatureStore::create(dir / "s", manifest_for({2, 2, 2}));

  const auto two = fstest::random_maps(rng, 2, {2, 2, 2}, "ok");
  write_shard(dir / "two.fmap", two);
  const std::vector<std::filesystem::path> ok_paths{dir / "two.fmap"};
  EXPECT_EQ(ingest_interchange(store, ok_paths), 2u);

  auto bytes = encode_shard(fstest::random_maps(rng, 3, {2, 2, 2}, "cut"));
  bytes.resize(bytes.size() - 5);
  fstest::write_text(dir / "cut.fmap", std::string(bytes.begin(), bytes.end()));
  const std::vector<std::filesystem::path> cut_paths{dir / "cut.fmap"};
  try {
    ingest_interchange(store, cut_paths);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
  }
  EXPECT_EQ(store.manifest().image_count, 2u);

  write_shard(dir / "tall.fmap", fstest::random_maps(rng, 2, {3, 2, 2}, "tall"));
  const std::vector<std::filesystem::path> tall_paths{dir / "tall.fmap"};
  try {
    ingest_interchange(store, tall_paths);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
  EXPECT_EQ(store.manifest().image_count, 2u);
  EXPECT_EQ(store.get("ok00001"), two[1]);
}
