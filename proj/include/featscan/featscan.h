/*
 * featscan C API.
 *
 * Every function returns an fscan_status. On failure a human-readable message
 * for the calling thread is available from fscan_last_error() until the next
 * failing call on that thread. Strings handed out through `char**` parameters
 * are owned by the caller and released with fscan_free_string().
 */
#ifndef FEATSCAN_H
#define FEATSCAN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FSCAN_API __declspec(dllexport)
#else
#define FSCAN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fscan_status {
  FSCAN_OK = 0,
  FSCAN_INVALID_ARGUMENT = 1,
  FSCAN_NOT_FOUND = 2,
  FSCAN_ALREADY_EXISTS = 3,
  FSCAN_IO_ERROR = 4,
  FSCAN_CORRUPTION = 5,
  FSCAN_PARSE_ERROR = 6,
  FSCAN_EMPTY_QUERY = 7,
  FSCAN_DEGENERATE_QUERY = 8,
  FSCAN_INTERNAL = 9
} fscan_status;

FSCAN_API const char* fscan_version(void);
FSCAN_API const char* fscan_status_name(fscan_status status);
FSCAN_API const char* fscan_last_error(void);
FSCAN_API void fscan_free_string(char* s);

/* ---- feature store ------------------------------------------------------ */

typedef struct fscan_store fscan_store;

/* manifest_json holds the StoreManifest fields; image_count is ignored. */
FSCAN_API fscan_status fscan_store_create(const char* dir, const char* manifest_json,
                                          fscan_store** out);
FSCAN_API fscan_status fscan_store_open(const char* dir, int writable, fscan_store** out);
FSCAN_API void fscan_store_close(fscan_store* store);

FSCAN_API fscan_status fscan_store_manifest(const fscan_store* store, char** manifest_json);
FSCAN_API fscan_status fscan_store_image_count(const fscan_store* store, uint64_t* count);
FSCAN_API fscan_status fscan_store_chunk_count(const fscan_store* store, uint64_t* count);

/* Appends one row-major rows x cols x channels float32 map. */
FSCAN_API fscan_status fscan_store_append(fscan_store* store, const char* image_id,
                                          size_t rows, size_t cols, size_t channels,
                                          const float* data);
/* Copies a stored map into `buffer`, which must hold rows*cols*channels
 * floats (`capacity` is its length in floats). */
FSCAN_API fscan_status fscan_store_get(const fscan_store* store, const char* image_id,
                                       float* buffer, size_t capacity);

/* Ingests FMAP1 shards in order; a failing shard writes nothing. */
FSCAN_API fscan_status fscan_store_ingest(fscan_store* store, const char* const* shard_paths,
                                          size_t shard_count, uint64_t* ingested);
/* Merges a JSON object {image_id: label} file into the manifest. */
FSCAN_API fscan_status fscan_store_set_labels(fscan_store* store, const char* labels_path);

/* Damage is reported through `report_json` and `all_ok`, not the status. */
FSCAN_API fscan_status fscan_verify_store(const char* dir, char** report_json, int* all_ok);

/* Fully parses an FMAP1 shard and returns {"dims": [...], "image_ids": [...]}. */
FSCAN_API fscan_status fscan_shard_inspect(const char* path, char** header_json);

/* ---- in-memory search --------------------------------------------------- */

typedef struct fscan_query fscan_query;

/* features: rows x cols x channels; grid_mask: rows x cols values in [0, 1]. */
FSCAN_API fscan_status fscan_query_prepare(size_t rows, size_t cols, size_t channels,
                                           const float* features, const float* grid_mask,
                                           fscan_query** out);
FSCAN_API void fscan_query_free(fscan_query* query);

/* Searches `count` maps laid out back to back in `maps` (each with the
 * query's dims). Writes a JSON array of hits. */
FSCAN_API fscan_status fscan_query_search(const fscan_query* query, const float* maps,
                                          const char* const* image_ids, size_t count,
                                          size_t k, char** hits_json);

/* ---- search over a store ------------------------------------------------ */

typedef struct fscan_engine fscan_engine;

enum {
  FSCAN_SEARCH_ORACLE = 1,      /* brute-force sliding window path */
  FSCAN_SEARCH_ALL_REGIONS = 2  /* rank regions individually */
};

FSCAN_API fscan_status fscan_engine_open(const char* store_dir, uint64_t ram_budget_mb,
                                         fscan_engine** out);
FSCAN_API void fscan_engine_close(fscan_engine* engine);

/* mask_json: {"rows": H, "cols": W, "data": [...]} at image resolution.
 * Writes {"query_id", "k", "path", "hits", "timing_ms"}. */
FSCAN_API fscan_status fscan_engine_search(const fscan_engine* engine, const char* query_id,
                                           const char* mask_json, size_t k, int flags,
                                           char** response_json);

/* options_json: {"repeat", "ram_budget_mb", "k", "query_id", "recompute_sample"},
 * every key optional. */
FSCAN_API fscan_status fscan_bench(const char* store_dir, const char* mask_json,
                                   const char* options_json, char** report_json);

/* ---- metrics ------------------------------------------------------------ */

FSCAN_API fscan_status fscan_metrics_classes(const char* results_path, const char* labels_path,
                                             int csv, char** report);
FSCAN_API fscan_status fscan_metrics_overlap(const char* results_a, const char* results_b,
                                             int csv, char** report);
/* all_neighbors = 0 scores only the first hit of each query. */
FSCAN_API fscan_status fscan_metrics_iou(const char* results_path, const char* boxes_path,
                                         int all_neighbors, int csv, char** report);

/* ---- HTTP service ------------------------------------------------------- */

typedef struct fscan_server fscan_server;

/* port < 0 keeps the port from the config file. Mounts every store. */
FSCAN_API fscan_status fscan_server_create(const char* config_path, int port,
                                           fscan_server** out);
FSCAN_API fscan_status fscan_server_bind(fscan_server* server, int* bound_port);
/* Blocks until fscan_server_stop() is called from another thread. */
FSCAN_API fscan_status fscan_server_run(fscan_server* server);
FSCAN_API void fscan_server_stop(fscan_server* server);
FSCAN_API void fscan_server_free(fscan_server* server);

#ifdef __cplusplus
}
#endif

#endif /* FEATSCAN_H */
