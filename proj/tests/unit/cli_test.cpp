// Drives the featscan executable end to end and checks exit codes and the
// JSON it prints.

#include <gtest/gtest.h>

#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <random>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "featscan/interchange.hpp"
#include "featscan/store.hpp"
#include "test_support.hpp"

#ifndef FEATSCAN_CLI
#error "FEATSCAN_CLI must point at the featscan executable"
#endif

using json = nlohmann::json;
using fstest::quote;
using fstest::run_command;

namespace {

const std::string kCli = FEATSCAN_CLI;

std::string cli(const std::string& args) { return "'" + kCli + "' " + args; }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937 rng(99);
    maps_ = fstest::random_maps(rng, 130, {7, 7, 8});
    featscan::write_shard(dir_ / "a.fmap", std::span(maps_).first(64));
    featscan::write_shard(dir_ / "b.fmap", std::span(maps_).subspan(64));
    fstest::write_text(dir_ / "full.json",
                       fstest::mask_json(112, 112, std::vector<float>(112 * 112, 1.0f)).dump());
    std::vector<float> part(112 * 112, 0.0f);
    for (std::size_t i = 16; i < 64; ++i)
      for (std::size_t j = 32; j < 96; ++j) part[i * 112 + j] = 1.0f;
    fstest::write_text(dir_ / "part.json", fstest::mask_json(112, 112, part).dump());
    fstest::write_text(dir_ / "empty.json",
                       fstest::mask_json(112, 112, std::vector<float>(112 * 112, 0.0f)).dump());
  }

  int ingest_fixture() {
    return run_command(cli("ingest --store " + quote(dir_ / "store") + " --shards " +
                           quote(dir_ / "*.fmap") +
                           " --create --dataset toy --model net --layer l4"))
        .exit_code;
  }

  std::string store() const { return quote(dir_ / "store"); }

  fstest::TempDir dir_{"featscan-cli"};
  std::vector<featscan::FeatureMap> maps_;
};

int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

}  // namespace

TEST_F(CliTest, IngestReportsCountsAsJson) {
  const auto r = run_command(cli("ingest --store " + store() + " --shards " +
                                 quote(dir_ / "a.fmap") + " " + quote(dir_ / "b.fmap") +
                                 " --create --dataset toy --model net --layer l4 --chunk 32"));
  ASSERT_EQ(r.exit_code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["ingested"], 130);
  EXPECT_EQ(j["image_count"], 130);
  EXPECT_EQ(j["images_per_chunk"], 32);
  EXPECT_EQ(j["chunks"], 5);  // 64 -> 32+32, 66 -> 32+32+2
}

TEST_F(CliTest, IngestGlobAndRerunDuplicate) {
  ASSERT_EQ(ingest_fixture(), 0);
  const auto r = run_command(cli("ingest --store " + store() + " --shards " + quote(dir_ / "a.fmap")));
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_EQ(featscan::FeatureStore::open(dir_ / "store").manifest().image_count, 130u);
}

TEST_F(CliTest, IngestBadMagicLeavesNoStore) {
  std::string bytes = fstest::read_text(dir_ / "a.fmap");
  bytes[0] = 'X';
  fstest::write_text(dir_ / "bad.fmap", bytes);
  const auto r = run_command(cli("ingest --store " + quote(dir_ / "fresh") + " --shards " +
                                 quote(dir_ / "bad.fmap") + " --create --dataset d --model m --layer l"));
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_FALSE(std::filesystem::exists(dir_ / "fresh" / "manifest.json"));
}

TEST_F(CliTest, IngestFlagValidation) {
  EXPECT_EQ(run_command(cli("ingest --store " + quote(dir_ / "x") + " --shards " +
                            quote(dir_ / "a.fmap") + " --create"))
                .exit_code,
            1);
  EXPECT_EQ(run_command(cli("ingest --store " + quote(dir_ / "x") + " --shards " +
                            quote(dir_ / "a.fmap") +
                            " --create --dataset d --model m --layer l --compression lz4"))
                .exit_code,
            1);
  EXPECT_EQ(run_command(cli("ingest --store " + quote(dir_ / "x") + " --shards " +
                            quote(dir_ / "none*.fmap") + " --create --dataset d --model m --layer l"))
                .exit_code,
            1);
  EXPECT_FALSE(std::filesystem::exists(dir_ / "x"));
  EXPECT_EQ(run_command(cli("--help")).exit_code, 0);
  EXPECT_EQ(run_command(cli("frobnicate")).exit_code, 1);
}

TEST_F(CliTest, SearchSelfQueryAndOracleAgree) {
  ASSERT_EQ(ingest_fixture(), 0);
  auto r = run_command(cli("search --store " + store() + " --query-id img00077 --mask " +
                           quote(dir_ / "full.json") + " --k 5 --out " + quote(dir_ / "r.json")));
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NO_THROW(json::parse(r.out));
  const auto self = json::parse(fstest::read_text(dir_ / "r.json"));
  EXPECT_EQ(self["hits"][0]["image_id"], "img00077");
  EXPECT_NEAR(self["hits"][0]["score"].get<double>(), 1.0, 1e-6);

  for (const char* mask : {"full.json", "part.json"}) {
    ASSERT_EQ(run_command(cli("search --store " + store() + " --query-id img00003 --mask " +
                              quote(dir_ / mask) + " --k 10 --out " + quote(dir_ / "c.json")))
                  .exit_code,
              0);
    ASSERT_EQ(run_command(cli("search --store " + store() + " --query-id img00003 --mask " +
                              quote(dir_ / mask) + " --k 10 --oracle --out " + quote(dir_ / "o.json")))
                  .exit_code,
              0);
    const auto c = json::parse(fstest::read_text(dir_ / "c.json"))["hits"];
    const auto o = json::parse(fstest::read_text(dir_ / "o.json"))["hits"];
    ASSERT_EQ(c.size(), 10u);
    ASSERT_EQ(o.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
      EXPECT_EQ(c[i]["image_id"], o[i]["image_id"]);
      EXPECT_EQ(c[i]["alpha"], o[i]["alpha"]);
      EXPECT_EQ(c[i]["beta"], o[i]["beta"]);
      EXPECT_NEAR(c[i]["score"].get<double>(), o[i]["score"].get<double>(), 1e-5);
    }
  }
}

TEST_F(CliTest, SearchUserErrors) {
  ASSERT_EQ(ingest_fixture(), 0);
  const std::string base = "search --store " + store() + " --out " + quote(dir_ / "r.json");
  EXPECT_EQ(run_command(cli(base + " --query-id img00001 --mask " + quote(dir_ / "full.json") + " --k 0")).exit_code, 1);
  EXPECT_EQ(run_command(cli(base + " --query-id ghost --mask " + quote(dir_ / "full.json"))).exit_code, 1);
  EXPECT_EQ(run_command(cli(base + " --query-id img00001 --mask " + quote(dir_ / "empty.json"))).exit_code, 1);
  EXPECT_EQ(run_command(cli(base + " --query-id img00001 --mask " + quote(dir_ / "nope.json"))).exit_code, 1);
  EXPECT_EQ(run_command(cli("search --store " + quote(dir_ / "nostore") + " --out " +
                            quote(dir_ / "r.json") + " --query-id a --mask " + quote(dir_ / "full.json")))
                .exit_code,
            1);
}

TEST_F(CliTest, VerifyExitCodes) {
  ASSERT_EQ(ingest_fixture(), 0);
  auto r = run_command(cli("verify --store " + store()));
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(json::parse(r.out)["ok"], true);

  const auto s = featscan::FeatureStore::open(dir_ / "store");
  fstest::flip_byte(dir_ / "store" / "data.bin", s.index()[1].byte_offset + 17);
  r = run_command(cli("verify --store " + store()));
  EXPECT_EQ(r.exit_code, 2);
  const auto j = json::parse(r.out);
  int failed = 0;
  for (const auto& c : j["chunks"]) failed += c["status"] == "failed" ? 1 : 0;
  EXPECT_EQ(failed, 1);

  std::filesystem::remove(dir_ / "store" / "index.bin");
  EXPECT_EQ(run_command(cli("verify --store " + store())).exit_code, 2);
}

TEST_F(CliTest, BenchSchema) {
  ASSERT_EQ(ingest_fixture(), 0);
  const auto r = run_command(cli("bench --store " + store() + " --mask " + quote(dir_ / "part.json") +
                                 " --repeat 3 --recompute-sample 2"));
  ASSERT_EQ(r.exit_code, 0);
  const auto j = json::parse(r.out);
  for (const char* key : {"streamed_ms", "in_ram_ms", "images", "dims"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["images"], 130);
  EXPECT_EQ(j["dims"], json({7, 7, 8}));
  EXPECT_EQ(j["samples"]["streamed_ms"].size(), 3u);
  EXPECT_EQ(j["samples"]["in_ram_ms"].size(), 3u);
  EXPECT_EQ(run_command(cli("bench --store " + store() + " --mask " + quote(dir_ / "part.json") +
                            " --repeat 0"))
                .exit_code,
            1);
}

TEST_F(CliTest, MetricsSubcommands) {
  ASSERT_EQ(ingest_fixture(), 0);
  ASSERT_EQ(run_command(cli("search --store " + store() + " --query-id img00001 --mask " +
                            quote(dir_ / "full.json") + " --k 3 --out " + quote(dir_ / "r.json")))
                .exit_code,
            0);
  const auto r = json::parse(fstest::read_text(dir_ / "r.json"));
  fstest::write_text(dir_ / "r.jsonl",
                     json{{"query_id", "img00001"}, {"hits", r["hits"]}}.dump() + "\n");
  json labels;
  for (const auto& h : r["hits"]) labels[h["image_id"].get<std::string>()] = "same";
  fstest::write_text(dir_ / "labels.json", labels.dump());

  auto out = run_command(cli("metrics classes --results " + quote(dir_ / "r.jsonl") +
                             " --labels " + quote(dir_ / "labels.json")));
  ASSERT_EQ(out.exit_code, 0);
  EXPECT_EQ(json::parse(out.out)["mean"], 1.0);
  out = run_command(cli("metrics --csv overlap --a " + quote(dir_ / "r.jsonl") + " --b " +
                        quote(dir_ / "r.jsonl")));
  ASSERT_EQ(out.exit_code, 0);
  EXPECT_EQ(out.out, "metric,queries,mean,std_error\nimages_in_common,1,3,0\n");
}

TEST_F(CliTest, ServeLifecycle) {
  ASSERT_EQ(ingest_fixture(), 0);
  fstest::write_text(dir_ / "bad.json", R"({"stores": [{"name": "x", "store_path": "missing"}]})");
  EXPECT_EQ(run_command(cli("serve --config " + quote(dir_ / "bad.json"))).exit_code, 1);
  EXPECT_EQ(run_command(cli("serve --config " + quote(dir_ / "absent.json"))).exit_code, 1);

  std::filesystem::copy(dir_ / "store", dir_ / "broken", std::filesystem::copy_options::recursive);
  fstest::write_text(dir_ / "broken" / "index.bin", "garbage");
  fstest::write_text(dir_ / "broken.json", R"({"stores": [{"name": "x", "store_path": "broken"}]})");
  EXPECT_EQ(run_command(cli("serve --config " + quote(dir_ / "broken.json"))).exit_code, 2);

  const int port = free_port();
  fstest::write_text(dir_ / "ok.json",
                     R"({"host": "127.0.0.1", "stores": [{"name": "toy", "store_path": "store"}]})");
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    const std::string cfg = (dir_ / "ok.json").string();
    const std::string p = std::to_string(port);
    execl(kCli.c_str(), kCli.c_str(), "serve", "--config", cfg.c_str(), "--port", p.c_str(),
          static_cast<char*>(nullptr));
    _exit(127);
  }
  httplib::Client client("127.0.0.1", port);
  httplib::Result res;
  for (int attempt = 0; attempt < 200 && !res; ++attempt) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
    res = client.Get("/api/datasets");
  }
  ASSERT_TRUE(res);
  EXPECT_EQ(json::parse(res->body)[0]["name"], "toy");
  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
}
