// featscan command-line front end. Talks to the library only through the C
// API in featscan.h.
//
// Exit codes: 0 success, 1 user error, 2 data corruption, 3 internal error.
// Machine-readable output goes to stdout as JSON; diagnostics go to stderr.

#include <glob.h>
#include <signal.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "featscan/featscan.h"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitCorrupt = 2;
constexpr int kExitInternal = 3;

int exit_code_for(fscan_status s) {
  switch (s) {
    case FSCAN_OK: return kExitOk;
    case FSCAN_CORRUPTION: return kExitCorrupt;
    case FSCAN_INTERNAL: return kExitInternal;
    default: return kExitUser;
  }
}

// Carries a status out of a subcommand so main() can pick the exit code.
struct Failure {
  fscan_status status;
  std::string message;
};

void check(fscan_status s) {
  if (s != FSCAN_OK) throw Failure{s, fscan_last_error()};
}

[[noreturn]] void user_error(const std::string& message) {
  throw Failure{FSCAN_INVALID_ARGUMENT, message};
}

struct CString {
  char* p = nullptr;
  ~CString() { fscan_free_string(p); }
  std::string str() const { return p ? p : ""; }
};

struct StoreCloser {
  void operator()(fscan_store* s) const { fscan_store_close(s); }
};
using StorePtr = std::unique_ptr<fscan_store, StoreCloser>;

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure{FSCAN_NOT_FOUND, "cannot open " + path};
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<std::string> out;
  for (const auto& pattern : patterns) {
    glob_t g{};
    const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
    if (rc == 0) {
      std::vector<std::string> matched(g.gl_pathv, g.gl_pathv + g.gl_pathc);
      std::sort(matched.begin(), matched.end());
      out.insert(out.end(), matched.begin(), matched.end());
    }
    globfree(&g);
    if (rc == GLOB_NOMATCH) user_error("no shard matches '" + pattern + "'");
    if (rc != 0) user_error("cannot expand '" + pattern + "'");
  }
  return out;
}

// ---- ingest ----------------------------------------------------------------

struct IngestArgs {
  std::string store;
  std::vector<std::string> shards;
  bool create = false;
  std::string dataset, model, layer;
  unsigned chunk = 64;
  std::string compression = "deflate";
  std::string labels;
};

void remove_store_files(const fs::path& dir, bool dir_was_created) {
  std::error_code ec;
  for (const char* f : {"manifest.json", "index.bin", "data.bin", "writer.lock",
                        "manifest.json.tmp", "index.bin.tmp"})
    fs::remove(dir / f, ec);
  if (dir_was_created) fs::remove(dir, ec);
}

int run_ingest(const IngestArgs& a) {
  const auto shards = expand_globs(a.shards);

  // Inspect every shard before touching the store.
  json dims;
  std::set<std::string> ids;
  for (const auto& path : shards) {
    CString header;
    check(fscan_shard_inspect(path.c_str(), &header.p));
    const json h = json::parse(header.str());
    if (dims.is_null()) dims = h["dims"];
    if (h["dims"] != dims)
      user_error(path + ": dims " + h["dims"].dump() + " differ from " + dims.dump());
    for (const auto& id : h["image_ids"])
      if (!ids.insert(id.get<std::string>()).second)
        user_error(path + ": duplicate image id '" + id.get<std::string>() + "'");
  }

  StorePtr store;
  bool created = false;
  bool dir_created = false;
  if (a.create) {
    if (dims.is_null()) user_error("--create needs at least one shard to take dims from");
    const json manifest{{"format_version", 1},
                        {"dataset_name", a.dataset},
                        {"model_name", a.model},
                        {"layer_name", a.layer},
                        {"dims", dims},
                        {"image_count", 0},
                        {"images_per_chunk", a.chunk},
                        {"compression", a.compression}};
    dir_created = !fs::exists(a.store);
    fscan_store* raw = nullptr;
    check(fscan_store_create(a.store.c_str(), manifest.dump().c_str(), &raw));
    store.reset(raw);
    created = true;
  } else {
    fscan_store* raw = nullptr;
    check(fscan_store_open(a.store.c_str(), 1, &raw));
    store.reset(raw);
  }

  uint64_t ingested = 0;
  try {
    std::vector<const char*> paths;
    for (const auto& s : shards) paths.push_back(s.c_str());
    check(fscan_store_ingest(store.get(), paths.data(), paths.size(), &ingested));
    if (!a.labels.empty()) check(fscan_store_set_labels(store.get(), a.labels.c_str()));
  } catch (const Failure&) {
    if (created) {
      store.reset();
      remove_store_files(a.store, dir_created);
    }
    throw;
  }

  CString manifest_text;
  check(fscan_store_manifest(store.get(), &manifest_text.p));
  uint64_t chunks = 0;
  check(fscan_store_chunk_count(store.get(), &chunks));
  json manifest = json::parse(manifest_text.str());
  json out{{"ingested", ingested},
           {"store", a.store},
           {"image_count", manifest["image_count"]},
           {"chunks", chunks},
           {"dims", manifest["dims"]},
           {"images_per_chunk", manifest["images_per_chunk"]},
           {"compression", manifest["compression"]},
           {"dataset_name", manifest["dataset_name"]},
           {"model_name", manifest["model_name"]},
           {"layer_name", manifest["layer_name"]}};
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

// ---- search ----------------------------------------------------------------

struct SearchArgs {
  std::string store, query_id, mask, out;
  unsigned k = 6;
  bool oracle = false;
  bool all_regions = false;
  uint64_t ram_budget_mb = 4096;
};

int run_search(const SearchArgs& a) {
  if (a.oracle && a.all_regions) user_error("--oracle and --all-regions are exclusive");
  const std::string mask = read_text(a.mask);
  fscan_engine* engine = nullptr;
  check(fscan_engine_open(a.store.c_str(), a.ram_budget_mb, &engine));
  std::unique_ptr<fscan_engine, void (*)(fscan_engine*)> guard(engine, fscan_engine_close);

  int flags = 0;
  if (a.oracle) flags |= FSCAN_SEARCH_ORACLE;
  if (a.all_regions) flags |= FSCAN_SEARCH_ALL_REGIONS;
  CString response;
  check(fscan_engine_search(engine, a.query_id.c_str(), mask.c_str(), a.k, flags, &response.p));

  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw Failure{FSCAN_IO_ERROR, "cannot write " + a.out};
  out << response.str() << "\n";
  if (!out) throw Failure{FSCAN_IO_ERROR, "short write to " + a.out};

  const json r = json::parse(response.str());
  json summary{{"out", a.out}, {"hits", r["hits"].size()}, {"path", r["path"]},
               {"timing_ms", r["timing_ms"]}};
  if (!r["hits"].empty()) {
    summary["top_image_id"] = r["hits"][0]["image_id"];
    summary["top_score"] = r["hits"][0]["score"];
  }
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

// ---- serve -----------------------------------------------------------------

int run_serve(const std::string& config, int port) {
  // Route SIGINT/SIGTERM to a watcher thread instead of async handlers.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  fscan_server* server = nullptr;
  check(fscan_server_create(config.c_str(), port, &server));
  std::unique_ptr<fscan_server, void (*)(fscan_server*)> guard(server, fscan_server_free);
  int bound = 0;
  check(fscan_server_bind(server, &bound));
  std::cerr << "featscan: serving on port " << bound << "\n";

  std::atomic<bool> done{false};
  std::thread watcher([&] {
    const timespec tick{0, 200'000'000};
    while (!done.load()) {
      if (sigtimedwait(&signals, nullptr, &tick) > 0) {
        std::cerr << "featscan: shutting down\n";
        fscan_server_stop(server);
        return;
      }
    }
  });
  const fscan_status s = fscan_server_run(server);
  done = true;
  watcher.join();
  check(s);
  return kExitOk;
}

// ---- bench -----------------------------------------------------------------

struct BenchArgs {
  std::string store, mask, query_id;
  unsigned repeat = 3;
  uint64_t ram_budget_mb = 4096;
  unsigned k = 6;
  unsigned recompute_sample = 8;
};

int run_bench(const BenchArgs& a) {
  const std::string mask = read_text(a.mask);
  json options{{"repeat", a.repeat},
               {"ram_budget_mb", a.ram_budget_mb},
               {"k", a.k},
               {"recompute_sample", a.recompute_sample}};
  if (!a.query_id.empty()) options["query_id"] = a.query_id;
  CString report;
  check(fscan_bench(a.store.c_str(), mask.c_str(), options.dump().c_str(), &report.p));
  std::cout << report.str() << "\n";
  for (const auto& w : json::parse(report.str())["warnings"])
    std::cerr << "featscan: warning: " << w.get<std::string>() << "\n";
  return kExitOk;
}

// ---- verify ----------------------------------------------------------------

int run_verify(const std::string& store) {
  CString report;
  int ok = 0;
  check(fscan_verify_store(store.c_str(), &report.p, &ok));
  std::cout << report.str() << "\n";
  if (!ok) std::cerr << "featscan: store " << store << " failed verification\n";
  return ok ? kExitOk : kExitCorrupt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-based feature search over precomputed CNN feature maps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fscan_version()));

  IngestArgs ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Build or extend a feature store from FMAP1 shards");
  ingest_cmd->add_option("--store", ingest.store, "Store directory")->required();
  ingest_cmd->add_option("--shards", ingest.shards, "Shard files or glob patterns")->required();
  ingest_cmd->add_flag("--create", ingest.create, "Create a new store");
  auto* dataset_opt = ingest_cmd->add_option("--dataset", ingest.dataset, "Dataset name");
  auto* model_opt = ingest_cmd->add_option("--model", ingest.model, "Model name");
  auto* layer_opt = ingest_cmd->add_option("--layer", ingest.layer, "Layer name");
  ingest_cmd->add_option("--chunk", ingest.chunk, "Images per chunk")
      ->check(CLI::Range(1u, 65535u));
  ingest_cmd->add_option("--compression", ingest.compression, "deflate or none")
      ->check(CLI::IsMember({"deflate", "none"}));
  ingest_cmd->add_option("--labels", ingest.labels, "JSON object {image_id: label}")
      ->check(CLI::ExistingFile);

  SearchArgs search;
  auto* search_cmd = app.add_subcommand("search", "Rank stored images against a highlighted query region");
  search_cmd->add_option("--store", search.store, "Store directory")->required();
  search_cmd->add_option("--query-id", search.query_id, "Query image id")->required();
  search_cmd->add_option("--mask", search.mask, "Mask JSON {rows, cols, data}")
      ->required()
      ->check(CLI::ExistingFile);
  search_cmd->add_option("--k", search.k, "Number of hits")->check(CLI::Range(1u, 100000u));
  search_cmd->add_flag("--oracle", search.oracle, "Use the brute-force sliding-window path");
  search_cmd->add_flag("--all-regions", search.all_regions,
                       "Rank every region instead of the best one per image");
  search_cmd->add_option("--ram-budget", search.ram_budget_mb, "MB of decoded maps to keep in RAM");
  search_cmd->add_option("--out", search.out, "Output JSON file")->required();

  std::string serve_config;
  int serve_port = -1;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP search service");
  serve_cmd->add_option("--config", serve_config, "Service config JSON")
      ->envname("FEATSCAN_CONFIG")
      ->required();
  serve_cmd->add_option("--port", serve_port, "Listening port")
      ->envname("FEATSCAN_PORT")
      ->check(CLI::Range(0, 65535));

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time streamed versus in-RAM search");
  bench_cmd->add_option("--store", bench.store, "Store directory")->required();
  bench_cmd->add_option("--mask", bench.mask, "Mask JSON {rows, cols, data}")
      ->required()
      ->check(CLI::ExistingFile);
  bench_cmd->add_option("--repeat", bench.repeat, "Timed runs per mode")->check(CLI::Range(1u, 1000u));
  bench_cmd->add_option("--ram-budget", bench.ram_budget_mb, "MB allowed for the in-RAM copy");
  bench_cmd->add_option("--k", bench.k, "Number of hits")->check(CLI::Range(1u, 100000u));
  bench_cmd->add_option("--query-id", bench.query_id, "Query image id (default: first image)");
  bench_cmd->add_option("--recompute-sample", bench.recompute_sample,
                        "Images pushed through the synthetic extraction stage");

  std::string verify_store;
  auto* verify_cmd = app.add_subcommand("verify", "Check chunk checksums and index consistency");
  verify_cmd->add_option("--store", verify_store, "Store directory")->required();

  auto* metrics_cmd = app.add_subcommand("metrics", "Result-set analyses");
  metrics_cmd->require_subcommand(1);
  bool csv = false;
  metrics_cmd->add_flag("--csv", csv, "Emit CSV instead of JSON");
  std::string results, labels, results_b, boxes;
  bool all_neighbors = false;
  auto* classes_cmd = metrics_cmd->add_subcommand("classes", "Unique ground-truth classes per result set");
  classes_cmd->add_option("--results", results, "Result sets (JSON lines)")->required()->check(CLI::ExistingFile);
  classes_cmd->add_option("--labels", labels, "JSON object {image_id: label}")->required()->check(CLI::ExistingFile);
  auto* overlap_cmd = metrics_cmd->add_subcommand("overlap", "Images in common between two result files");
  overlap_cmd->add_option("--a", results, "Result sets (JSON lines)")->required()->check(CLI::ExistingFile);
  overlap_cmd->add_option("--b", results_b, "Result sets (JSON lines)")->required()->check(CLI::ExistingFile);
  auto* iou_cmd = metrics_cmd->add_subcommand("iou", "Neighbor-box IoU against ground truth, by area bin");
  iou_cmd->add_option("--results", results, "Result sets (JSON lines)")->required()->check(CLI::ExistingFile);
  iou_cmd->add_option("--boxes", boxes, "Ground-truth boxes (JSON lines)")->required()->check(CLI::ExistingFile);
  iou_cmd->add_flag("--all-neighbors", all_neighbors, "Score every hit, not just the first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUser;
  }

  try {
    if (*ingest_cmd) {
      if (ingest.create && (dataset_opt->count() == 0 || model_opt->count() == 0 ||
                            layer_opt->count() == 0))
        user_error("--create requires --dataset, --model and --layer");
      return run_ingest(ingest);
    }
    if (*search_cmd) return run_search(search);
    if (*serve_cmd) return run_serve(serve_config, serve_port);
    if (*bench_cmd) return run_bench(bench);
    if (*verify_cmd) return run_verify(verify_store);
    if (*metrics_cmd) {
      CString report;
      if (*classes_cmd)
        check(fscan_metrics_classes(results.c_str(), labels.c_str(), csv, &report.p));
      else if (*overlap_cmd)
        check(fscan_metrics_overlap(results.c_str(), results_b.c_str(), csv, &report.p));
      else
        check(fscan_metrics_iou(results.c_str(), boxes.c_str(), all_neighbors, csv, &report.p));
      std::cout << report.str() << (csv ? "" : "\n");
      return kExitOk;
    }
  } catch (const Failure& f) {
    std::cerr << "featscan: " << fscan_status_name(f.status) << ": " << f.message << "\n";
    return exit_code_for(f.status);
  } catch (const std::exception& e) {
    std::cerr << "featscan: internal: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUser;
}
