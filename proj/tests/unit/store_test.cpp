#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <set>

#include <zlib.h>

#include "featscan/store.hpp"
#include "test_support.hpp"

using namespace featscan;

namespace {

StoreManifest manifest_for(Dims dims, std::uint32_t per_chunk = 64,
                           Compression c = Compression::kDeflate) {
  StoreManifest m;
  m.dataset_name = "toy";
  m.model_name = "net";
  m.layer_name = "layer4";
  m.dims = dims;
  m.images_per_chunk = per_chunk;
  m.compression = c;
  return m;
}

void expect_error(ErrorCode code, auto&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

bool bit_identical(const FeatureMap& a, const FeatureMap& b) {
  return a.image_id() == b.image_id() && a.dims() == b.dims() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

}  // namespace

TEST(ManifestTest, RoundTripsFieldForField) {
  auto m = manifest_for({7, 7, 512});
  m.image_count = 12;
  m.label_map = std::map<std::string, std::string>{{"a", "cat"}, {"b", "dog"}};
  EXPECT_EQ(manifest_from_json(manifest_to_json(m)), m);
  m.label_map.reset();
  m.compression = Compression::kNone;
  EXPECT_EQ(manifest_from_json(manifest_to_json(m)), m);
}

TEST(ManifestTest, RejectsBadValues) {
  expect_error(ErrorCode::kParse, [] { manifest_from_json("{not json"); });
  auto j = nlohmann::json::parse(manifest_to_json(manifest_for({7, 7, 4})));
  j["format_version"] = 2;
  expect_error(ErrorCode::kInvalidArgument, [&] { manifest_from_json(j.dump()); });
  j["format_version"] = 1;
  j["images_per_chunk"] = 0;
  expect_error(ErrorCode::kInvalidArgument, [&] { manifest_from_json(j.dump()); });
}

TEST(IndexCodecTest, RoundTripAndTruncation) {
  std::vector<ChunkIndexEntry> entries{{0, 0, 100, 0xdeadbeef, {"a", "bb", "ccc"}},
                                       {1, 100, 7, 1, {"\xc3\xa9t\xc3\xa9"}}};
  const auto bytes = encode_index(entries);
  // 4+8+8+4+2 fixed bytes, then 2+len per id.
  EXPECT_EQ(bytes.size(), (26 + 2 + 1 + 2 + 2 + 2 + 3) + (26 + 2 + 5));
  EXPECT_EQ(bytes[0], 0);
  EXPECT_EQ(bytes[12], 100);
  EXPECT_EQ(bytes[20], 0xef);
  EXPECT_EQ(decode_index(bytes), entries);
  for (std::size_t cut : {1ul, 5ul, bytes.size() - 1})
    expect_error(ErrorCode::kCorruption, [&] {
      decode_index(std::span<const std::uint8_t>(bytes.data(), bytes.size() - cut));
    });
}

TEST(Crc32Test, MatchesZlib) {
  const std::string s = "123456789";
  const std::span<const std::uint8_t> b(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  EXPECT_EQ(crc32_of(b), 0xCBF43926u);
}

TEST(StoreTest, CreateEmptyAndConflict) {
  fstest::TempDir dir;
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({7, 7, 512}));
    EXPECT_EQ(s.manifest().image_count, 0u);
    EXPECT_TRUE(s.index().empty());
  }
  expect_error(ErrorCode::kAlreadyExists,
               [&] { FeatureStore::create(dir / "s", manifest_for({7, 7, 512})); });
  const auto reopened = FeatureStore::open(dir / "s");
  EXPECT_EQ(reopened.manifest(), manifest_for({7, 7, 512}));
  EXPECT_TRUE(verify_store(dir / "s").ok);
}

TEST(StoreTest, OpenMissing) {
  fstest::TempDir dir;
  expect_error(ErrorCode::kNotFound, [&] { FeatureStore::open(dir / "nothing"); });
}

TEST(StoreTest, ChunkingCeilingDivision) {
  fstest::TempDir dir;
  std::mt19937 rng(1);
  auto s = FeatureStore::create(dir / "s", manifest_for({2, 3, 4}));
  const auto maps = fstest::random_maps(rng, 130, {2, 3, 4});
  EXPECT_EQ(s.append(maps), 130u);
  ASSERT_EQ(s.index().size(), 3u);
  EXPECT_EQ(s.index()[0].image_ids.size(), 64u);
  EXPECT_EQ(s.index()[1].image_ids.size(), 64u);
  EXPECT_EQ(s.index()[2].image_ids.size(), 2u);
  EXPECT_EQ(s.manifest().image_count, 130u);
}

TEST(StoreTest, RoundTripBothCodecs) {
  for (auto c : {Compression::kDeflate, Compression::kNone}) {
    fstest::TempDir dir;
    std::mt19937 rng(2);
    const auto maps = fstest::random_maps(rng, 150, {3, 4, 5});
    {
      auto s = FeatureStore::create(dir / "s", manifest_for({3, 4, 5}, 16, c));
      s.append(std::span(maps).first(70));
      s.append(std::span(maps).subspan(70));
    }
    const auto s = FeatureStore::open(dir / "s");
    EXPECT_EQ(s.manifest().image_count, 150u);
    for (const auto& m : maps) EXPECT_TRUE(bit_identical(s.get(m.image_id()), m));
    const auto all = s.load_all();
    ASSERT_EQ(all.size(), maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) EXPECT_TRUE(bit_identical(all[i], maps[i]));
    EXPECT_TRUE(verify_store(dir / "s").ok);
  }
}

TEST(StoreTest, DataLayoutIsLittleEndianRowMajor) {
  fstest::TempDir dir;
  const FeatureMap f("only", {1, 2, 2}, {1.0f, -2.0f, 0.5f, 3.25f});
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({1, 2, 2}, 64, Compression::kNone));
    s.append(std::span(&f, 1));
  }
  const std::string data = fstest::read_text(dir / "s" / "data.bin");
  ASSERT_EQ(data.size(), 16u);
  const unsigned char one[4] = {0x00, 0x00, 0x80, 0x3f};
  EXPECT_EQ(std::memcmp(data.data(), one, 4), 0);
  float v;
  std::memcpy(&v, data.data() + 12, 4);
  EXPECT_EQ(v, 3.25f);
}

TEST(StoreTest, DeflateChunkIsRawDeflate) {
  fstest::TempDir dir;
  std::mt19937 rng(3);
  const auto maps = fstest::random_maps(rng, 3, {2, 2, 2});
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({2, 2, 2}));
    s.append(maps);
  }
  std::string data = fstest::read_text(dir / "s" / "data.bin");
  std::vector<unsigned char> out(3 * 8 * 4 + 16);
  z_stream zs{};
  ASSERT_EQ(inflateInit2(&zs, -15), Z_OK);
  zs.next_in = reinterpret_cast<Bytef*>(data.data());
  zs.avail_in = static_cast<uInt>(data.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  EXPECT_EQ(inflate(&zs, Z_FINISH), Z_STREAM_END);
  EXPECT_EQ(zs.total_out, 3u * 8 * 4);
  inflateEnd(&zs);
  EXPECT_EQ(std::memcmp(out.data(), maps[0].data().data(), 32), 0);
}

TEST(StoreTest, RejectedAppendWritesNothing) {
  fstest::TempDir dir;
  std::mt19937 rng(4);
  auto s = FeatureStore::create(dir / "s", manifest_for({2, 2, 3}));
  s.append(fstest::random_maps(rng, 5, {2, 2, 3}));
  const auto size_before = std::filesystem::file_size(dir / "s" / "data.bin");

  auto bad = fstest::random_maps(rng, 3, {2, 2, 3}, "new");
  bad.push_back(fstest::random_map(rng, "wrong", {2, 2, 4}));
  expect_error(ErrorCode::kInvalidArgument, [&] { s.append(bad); });

  auto dup = fstest::random_maps(rng, 2, {2, 2, 3}, "new");
  dup.push_back(fstest::random_map(rng, "img00001", {2, 2, 3}));
  expect_error(ErrorCode::kInvalidArgument, [&] { s.append(dup); });

  auto self_dup = fstest::random_maps(rng, 2, {2, 2, 3}, "x");
  self_dup.push_back(self_dup[0]);
  expect_error(ErrorCode::kInvalidArgument, [&] { s.append(self_dup); });

  EXPECT_EQ(s.manifest().image_count, 5u);
  EXPECT_EQ(std::filesystem::file_size(dir / "s" / "data.bin"), size_before);
  EXPECT_EQ(FeatureStore::open(dir / "s").manifest().image_count, 5u);
}

TEST(StoreTest, UnknownIdAndCorruptChunk) {
  fstest::TempDir dir;
  std::mt19937 rng(5);
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({3, 3, 3}, 10));
    s.append(fstest::random_maps(rng, 30, {3, 3, 3}));
  }
  auto s = FeatureStore::open(dir / "s");
  expect_error(ErrorCode::kNotFound, [&] { s.get("nope"); });
  fstest::flip_byte(dir / "s" / "data.bin", s.index()[1].byte_offset + 5);
  try {
    s.get("img00015");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCorruption);
    EXPECT_NE(std::string(e.what()).find("chunk 1"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(s.get("img00003"));
  EXPECT_NO_THROW(s.get("img00025"));
}

TEST(StoreTest, WriterIsExclusive) {
  fstest::TempDir dir;
  auto w = FeatureStore::create(dir / "s", manifest_for({1, 1, 1}));
  expect_error(ErrorCode::kIo,
               [&] { FeatureStore::open(dir / "s", FeatureStore::Mode::kReadWrite); });
  EXPECT_NO_THROW(FeatureStore::open(dir / "s"));
}

TEST(BatchStreamTest, BatchesInInsertionOrder) {
  fstest::TempDir dir;
  std::mt19937 rng(6);
  const auto maps = fstest::random_maps(rng, 130, {2, 2, 2});
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({2, 2, 2}));
    s.append(maps);
  }
  const auto s = FeatureStore::open(dir / "s");
  auto stream = s.batches(64);
  std::vector<std::size_t> sizes;
  std::vector<FeatureMap> seen;
  while (auto b = stream.next()) {
    sizes.push_back(b->size());
    seen.insert(seen.end(), b->begin(), b->end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{64, 64, 2}));
  ASSERT_EQ(seen.size(), maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) EXPECT_TRUE(bit_identical(seen[i], maps[i]));
}

TEST(BatchStreamTest, OddBatchSizeAcrossChunks) {
  fstest::TempDir dir;
  std::mt19937 rng(7);
  const auto maps = fstest::random_maps(rng, 50, {1, 2, 3});
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({1, 2, 3}, 8));
    s.append(maps);
  }
  const auto s = FeatureStore::open(dir / "s");
  auto stream = s.batches(7);
  std::set<std::string> ids;
  std::size_t total = 0;
  while (auto b = stream.next()) {
    EXPECT_LE(b->size(), 7u);
    total += b->size();
    for (const auto& m : *b) ids.insert(m.image_id());
  }
  EXPECT_EQ(total, 50u);
  EXPECT_EQ(ids.size(), 50u);
}

TEST(BatchStreamTest, EmptyStoreAndEarlyDrop) {
  fstest::TempDir dir;
  std::mt19937 rng(8);
  auto s = FeatureStore::create(dir / "s", manifest_for({2, 2, 2}, 4));
  {
    auto stream = s.batches(3);
    EXPECT_FALSE(stream.next().has_value());
  }
  s.append(fstest::random_maps(rng, 40, {2, 2, 2}));
  auto stream = s.batches(3);
  EXPECT_TRUE(stream.next().has_value());
  // Destroying a partly consumed stream must not hang.
}

TEST(BatchStreamTest, CorruptionHaltsStream) {
  fstest::TempDir dir;
  std::mt19937 rng(9);
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({2, 2, 2}, 4));
    s.append(fstest::random_maps(rng, 12, {2, 2, 2}));
  }
  auto s = FeatureStore::open(dir / "s");
  fstest::flip_byte(dir / "s" / "data.bin", s.index()[1].byte_offset);
  auto stream = s.batches(4);
  EXPECT_TRUE(stream.next().has_value());
  expect_error(ErrorCode::kCorruption, [&] { stream.next(); });
  EXPECT_FALSE(stream.next().has_value());
}

TEST(VerifyTest, FlippedByteFailsOneChunk) {
  fstest::TempDir dir;
  std::mt19937 rng(10);
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({3, 3, 2}, 5));
    s.append(fstest::random_maps(rng, 23, {3, 3, 2}));
  }
  const auto clean = verify_store(dir / "s");
  EXPECT_TRUE(clean.ok);
  EXPECT_EQ(clean.chunks.size(), 5u);
  fstest::flip_byte(dir / "s" / "data.bin", clean.chunks[2].byte_offset + 3);
  const auto r = verify_store(dir / "s");
  EXPECT_FALSE(r.ok);
  EXPECT_EQ(r.failed_chunks(), 1u);
  EXPECT_FALSE(r.chunks[2].ok);
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j["ok"], false);
}

TEST(VerifyTest, TruncatedDataNamesOffset) {
  fstest::TempDir dir;
  std::mt19937 rng(11);
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({3, 3, 2}, 5));
    s.append(fstest::random_maps(rng, 12, {3, 3, 2}));
  }
  const auto clean = verify_store(dir / "s");
  const auto last = clean.chunks.back();
  std::filesystem::resize_file(dir / "s" / "data.bin", last.byte_offset + last.byte_length / 2);
  const auto r = verify_store(dir / "s");
  EXPECT_FALSE(r.ok);
  EXPECT_EQ(r.failed_chunks(), 1u);
  EXPECT_NE(r.chunks.back().detail.find(std::to_string(last.byte_offset)), std::string::npos)
      << r.chunks.back().detail;
}

TEST(VerifyTest, MissingIndexAndManifest) {
  fstest::TempDir dir;
  std::mt19937 rng(12);
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({1, 1, 2}));
    s.append(fstest::random_maps(rng, 3, {1, 1, 2}));
  }
  std::filesystem::remove(dir / "s" / "index.bin");
  EXPECT_FALSE(verify_store(dir / "s").ok);
  expect_error(ErrorCode::kCorruption, [&] { FeatureStore::open(dir / "s"); });
  EXPECT_FALSE(verify_store(dir / "missing").ok);
}

TEST(VerifyTest, CountMismatch) {
  fstest::TempDir dir;
  std::mt19937 rng(13);
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({1, 1, 2}));
    s.append(fstest::random_maps(rng, 3, {1, 1, 2}));
  }
  auto j = nlohmann::json::parse(fstest::read_text(dir / "s" / "manifest.json"));
  j["image_count"] = 4;
  fstest::write_text(dir / "s" / "manifest.json", j.dump());
  const auto r = verify_store(dir / "s");
  EXPECT_FALSE(r.ok);
  EXPECT_FALSE(r.problems.empty());
}

TEST(LabelsTest, MergeAndPersist) {
  fstest::TempDir dir;
  {
    auto s = FeatureStore::create(dir / "s", manifest_for({1, 1, 1}));
    s.set_labels({{"a", "cat"}});
    s.set_labels({{"b", "dog"}, {"a", "lynx"}});
  }
  const auto s = FeatureStore::open(dir / "s");
  ASSERT_TRUE(s.manifest().label_map.has_value());
  EXPECT_EQ(s.manifest().label_map->at("a"), "lynx");
  EXPECT_EQ(s.manifest().label_map->at("b"), "dog");
}
