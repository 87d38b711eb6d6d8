#include "featscan/featscan.h"

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include <json.hpp>

#include "featscan/bench.hpp"
#include "featscan/engine.hpp"
#include "featscan/interchange.hpp"
#include "featscan/json_codec.hpp"
#include "featscan/metrics.hpp"
#include "featscan/search.hpp"
#include "featscan/service.hpp"
#include "featscan/store.hpp"

using json = nlohmann::json;
using namespace featscan;

struct fscan_store {
  FeatureStore store;
};

struct fscan_query {
  Dims dims;
  QueryFilter filter;
};

struct fscan_engine {
  MountedStore mounted;
};

struct fscan_server {
  SearchService service;
};

namespace {

thread_local std::string g_last_error;

fscan_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return FSCAN_INVALID_ARGUMENT;
    case ErrorCode::kNotFound: return FSCAN_NOT_FOUND;
    case ErrorCode::kAlreadyExists: return FSCAN_ALREADY_EXISTS;
    case ErrorCode::kIo: return FSCAN_IO_ERROR;
    case ErrorCode::kCorruption: return FSCAN_CORRUPTION;
    case ErrorCode::kParse: return FSCAN_PARSE_ERROR;
    case ErrorCode::kEmptyQuery: return FSCAN_EMPTY_QUERY;
    case ErrorCode::kDegenerateQuery: return FSCAN_DEGENERATE_QUERY;
    case ErrorCode::kInternal: return FSCAN_INTERNAL;
  }
  return FSCAN_INTERNAL;
}

// Runs `fn`, translating exceptions into a status and the thread's message.
template <class Fn>
fscan_status guarded(Fn&& fn) noexcept {
  try {
    fn();
    return FSCAN_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return FSCAN_PARSE_ERROR;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return FSCAN_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FSCAN_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return FSCAN_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) fail(ErrorCode::kInvalidArgument, what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

metrics::ReportFormat format_of(int csv) {
  return csv ? metrics::ReportFormat::kCsv : metrics::ReportFormat::kJson;
}

}  // namespace

extern "C" {

const char* fscan_version(void) { return "1.0.0"; }

const char* fscan_status_name(fscan_status status) {
  switch (status) {
    case FSCAN_OK: return "ok";
    case FSCAN_INVALID_ARGUMENT: return "invalid_argument";
    case FSCAN_NOT_FOUND: return "not_found";
    case FSCAN_ALREADY_EXISTS: return "already_exists";
    case FSCAN_IO_ERROR: return "io_error";
    case FSCAN_CORRUPTION: return "corruption";
    case FSCAN_PARSE_ERROR: return "parse_error";
    case FSCAN_EMPTY_QUERY: return "empty_mask";
    case FSCAN_DEGENERATE_QUERY: return "degenerate_query";
    case FSCAN_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* fscan_last_error(void) { return g_last_error.c_str(); }

void fscan_free_string(char* s) { std::free(s); }

fscan_status fscan_store_create(const char* dir, const char* manifest_json, fscan_store** out) {
  return guarded([&] {
    require(dir && manifest_json && out, "null argument");
    StoreManifest m = manifest_from_json(manifest_json);
    *out = new fscan_store{FeatureStore::create(dir, std::move(m))};
  });
}

fscan_status fscan_store_open(const char* dir, int writable, fscan_store** out) {
  return guarded([&] {
    require(dir && out, "null argument");
    *out = new fscan_store{FeatureStore::open(
        dir, writable ? FeatureStore::Mode::kReadWrite : FeatureStore::Mode::kReadOnly)};
  });
}

void fscan_store_close(fscan_store* store) { delete store; }

fscan_status fscan_store_manifest(const fscan_store* store, char** manifest_json) {
  return guarded([&] {
    require(store && manifest_json, "null argument");
    *manifest_json = dup_string(manifest_to_json(store->store.manifest()));
  });
}

fscan_status fscan_store_image_count(const fscan_store* store, uint64_t* count) {
  return guarded([&] {
    require(store && count, "null argument");
    *count = store->store.image_ids().size();
  });
}

fscan_status fscan_store_chunk_count(const fscan_store* store, uint64_t* count) {
  return guarded([&] {
    require(store && count, "null argument");
    *count = store->store.index().size();
  });
}

fscan_status fscan_store_append(fscan_store* store, const char* image_id, size_t rows,
                                size_t cols, size_t channels, const float* data) {
  return guarded([&] {
    require(store && image_id && data, "null argument");
    const Dims dims{rows, cols, channels};
    FeatureMap map(image_id, dims, std::vector<float>(data, data + dims.size()));
    store->store.append(std::span(&map, 1));
  });
}

fscan_status fscan_store_get(const fscan_store* store, const char* image_id, float* buffer,
                             size_t capacity) {
  return guarded([&] {
    require(store && image_id && buffer, "null argument");
    const FeatureMap map = store->store.get(image_id);
    require(capacity >= map.data().size(), "buffer too small for the feature map");
    std::memcpy(buffer, map.data().data(), map.data().size_bytes());
  });
}

fscan_status fscan_store_ingest(fscan_store* store, const char* const* shard_paths,
                                size_t shard_count, uint64_t* ingested) {
  return guarded([&] {
    require(store && (shard_paths || shard_count == 0), "null argument");
    std::vector<std::filesystem::path> paths(shard_paths, shard_paths + shard_count);
    const std::size_t n = ingest_interchange(store->store, paths);
    if (ingested) *ingested = n;
  });
}

fscan_status fscan_store_set_labels(fscan_store* store, const char* labels_path) {
  return guarded([&] {
    require(store && labels_path, "null argument");
    store->store.set_labels(metrics::read_labels(labels_path));
  });
}

fscan_status fscan_verify_store(const char* dir, char** report_json, int* all_ok) {
  return guarded([&] {
    require(dir && report_json, "null argument");
    const VerifyReport report = verify_store(dir);
    *report_json = dup_string(report.to_json());
    if (all_ok) *all_ok = report.ok ? 1 : 0;
  });
}

fscan_status fscan_shard_inspect(const char* path, char** header_json) {
  return guarded([&] {
    require(path && header_json, "null argument");
    const Shard shard = read_shard(path);
    json ids = json::array();
    for (const auto& m : shard.maps) ids.push_back(m.image_id());
    *header_json = dup_string(
        json{{"dims", {shard.dims.rows, shard.dims.cols, shard.dims.channels}},
             {"image_ids", std::move(ids)}}
            .dump());
  });
}

fscan_status fscan_query_prepare(size_t rows, size_t cols, size_t channels,
                                 const float* features, const float* grid_mask,
                                 fscan_query** out) {
  return guarded([&] {
    require(features && grid_mask && out, "null argument");
    const Dims dims{rows, cols, channels};
    const FeatureMap fmap("query", dims, std::vector<float>(features, features + dims.size()));
    const DownsampledMask mask(rows, cols, std::vector<float>(grid_mask, grid_mask + rows * cols));
    *out = new fscan_query{dims, prepare_query(fmap, mask)};
  });
}

void fscan_query_free(fscan_query* query) { delete query; }

fscan_status fscan_query_search(const fscan_query* query, const float* maps,
                                const char* const* image_ids, size_t count, size_t k,
                                char** hits_json) {
  return guarded([&] {
    require(query && hits_json && ((maps && image_ids) || count == 0), "null argument");
    const std::size_t stride = query->dims.size();
    std::vector<FeatureMap> dataset;
    dataset.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      require(image_ids[i] != nullptr, "null image id");
      const float* p = maps + i * stride;
      dataset.emplace_back(image_ids[i], query->dims, std::vector<float>(p, p + stride));
    }
    *hits_json = dup_string(hits_to_json(topk_search(query->filter, dataset, k)).dump());
  });
}

fscan_status fscan_engine_open(const char* store_dir, uint64_t ram_budget_mb,
                               fscan_engine** out) {
  return guarded([&] {
    require(store_dir && out, "null argument");
    *out = new fscan_engine{MountedStore({"store", store_dir, {}, ram_budget_mb})};
  });
}

void fscan_engine_close(fscan_engine* engine) { delete engine; }

fscan_status fscan_engine_search(const fscan_engine* engine, const char* query_id,
                                 const char* mask_json, size_t k, int flags,
                                 char** response_json) {
  return guarded([&] {
    require(engine && query_id && mask_json && response_json, "null argument");
    require(k >= 1, "k must be at least 1");
    const bool oracle = (flags & FSCAN_SEARCH_ORACLE) != 0;
    const bool all_regions = (flags & FSCAN_SEARCH_ALL_REGIONS) != 0;
    require(!(oracle && all_regions), "the oracle path ranks best regions only");

    const MountedStore& store = engine->mounted;
    const ImageMask mask = image_mask_from_json(json::parse(mask_json));
    const FeatureMap query = store.features(query_id);
    const auto start = std::chrono::steady_clock::now();
    const DownsampledMask grid_mask = store.downsample(mask);
    std::vector<SearchHit> hits;
    if (oracle) {
      hits = store.search_oracle(query, grid_mask, k);
    } else {
      SearchOptions opts;
      opts.best_region_per_image = !all_regions;
      hits = store.search(prepare_query(query, grid_mask), k, opts);
    }
    const auto elapsed = std::chrono::steady_clock::now() - start;

    json out_hits = hits_to_json(hits);
    if (const auto& labels = store.manifest().label_map)
      for (auto& h : out_hits)
        if (auto it = labels->find(h["image_id"].get<std::string>()); it != labels->end())
          h["label"] = it->second;
    const json response{
        {"query_id", query_id},
        {"k", k},
        {"path", oracle ? "oracle" : "conv"},
        {"hits", std::move(out_hits)},
        {"timing_ms", std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count()}};
    *response_json = dup_string(response.dump(2));
  });
}

fscan_status fscan_bench(const char* store_dir, const char* mask_json, const char* options_json,
                         char** report_json) {
  return guarded([&] {
    require(store_dir && mask_json && report_json, "null argument");
    BenchOptions opts;
    if (options_json) {
      const json j = json::parse(options_json);
      opts.repeat = j.value("repeat", opts.repeat);
      opts.ram_budget_mb = j.value("ram_budget_mb", opts.ram_budget_mb);
      opts.k = j.value("k", opts.k);
      opts.recompute_sample = j.value("recompute_sample", opts.recompute_sample);
      if (j.contains("query_id") && j["query_id"].is_string())
        opts.query_id = j["query_id"].get<std::string>();
    }
    const ImageMask mask = image_mask_from_json(json::parse(mask_json));
    *report_json = dup_string(run_bench(store_dir, mask, opts));
  });
}

fscan_status fscan_metrics_classes(const char* results_path, const char* labels_path, int csv,
                                   char** report) {
  return guarded([&] {
    require(results_path && labels_path && report, "null argument");
    const auto sets = metrics::read_result_sets(results_path);
    const auto labels = metrics::read_labels(labels_path);
    *report = dup_string(metrics::class_diversity_report(sets, labels, format_of(csv)));
  });
}

fscan_status fscan_metrics_overlap(const char* results_a, const char* results_b, int csv,
                                   char** report) {
  return guarded([&] {
    require(results_a && results_b && report, "null argument");
    const auto a = metrics::read_result_sets(results_a);
    const auto b = metrics::read_result_sets(results_b);
    *report = dup_string(metrics::overlap_report(a, b, format_of(csv)));
  });
}

fscan_status fscan_metrics_iou(const char* results_path, const char* boxes_path,
                               int all_neighbors, int csv, char** report) {
  return guarded([&] {
    require(results_path && boxes_path && report, "null argument");
    const auto sets = metrics::read_result_sets(results_path);
    const auto truth = metrics::read_ground_truth(boxes_path);
    *report = dup_string(metrics::iou_report(
        sets, truth, all_neighbors ? metrics::NeighborMode::kTopK : metrics::NeighborMode::kTop1,
        format_of(csv)));
  });
}

fscan_status fscan_server_create(const char* config_path, int port, fscan_server** out) {
  return guarded([&] {
    require(config_path && out, "null argument");
    ServiceConfig cfg = load_service_config(config_path);
    if (port >= 0) cfg.port = port;
    *out = new fscan_server{SearchService(std::move(cfg))};
  });
}

fscan_status fscan_server_bind(fscan_server* server, int* bound_port) {
  return guarded([&] {
    require(server != nullptr, "null argument");
    const int port = server->service.bind();
    if (bound_port) *bound_port = port;
  });
}

fscan_status fscan_server_run(fscan_server* server) {
  return guarded([&] {
    require(server != nullptr, "null argument");
    server->service.run();
  });
}

void fscan_server_stop(fscan_server* server) {
  if (server) server->service.stop();
}

void fscan_server_free(fscan_server* server) { delete server; }

}  // extern "C"
