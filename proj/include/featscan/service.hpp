#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "featscan/engine.hpp"

namespace featscan {

struct ServiceConfig {
  std::vector<MountConfig> stores;
  std::string host = "0.0.0.0";
  int port = 8080;
  std::string cors_origin = "*";
  // Scoring threads per search request; 0 = hardware concurrency.
  std::size_t search_workers = 0;
};

// Parses the service configuration file:
//   {"stores": [{"name", "store_path", "image_dir", "ram_budget_mb"}],
//    "host"?, "port"?, "cors_origin"?, "search_workers"?}
// Relative store and image paths resolve against the file's directory.
ServiceConfig load_service_config(const std::filesystem::path& path);
ServiceConfig parse_service_config(const std::string& text,
                                   const std::filesystem::path& base_dir);

struct HttpResult {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// JSON-over-HTTP front end for region search over mounted stores.
//
//   GET  /api/datasets
//   GET  /api/datasets/{name}/images?offset=&limit=
//   GET  /api/datasets/{name}/thumbnail/{image_id}
//   POST /api/search
//
// Stores are opened read-only at construction; a corrupt store throws
// kCorruption before any socket is bound.
class SearchService {
 public:
  explicit SearchService(ServiceConfig config);
  ~SearchService();
  SearchService(const SearchService&) = delete;
  SearchService& operator=(const SearchService&) = delete;

  // Endpoint logic without the transport; also what the HTTP handlers call.
  HttpResult list_datasets() const;
  HttpResult list_images(const std::string& dataset, std::size_t offset,
                         std::size_t limit) const;
  HttpResult search(const std::string& request_body) const;
  HttpResult thumbnail(const std::string& dataset, const std::string& image_id) const;

  // Binds the configured host/port (port 0 picks a free one) and returns the
  // bound port. Throws kIo on failure.
  int bind();
  // Serves until stop(); call bind() first.
  void run();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace featscan
