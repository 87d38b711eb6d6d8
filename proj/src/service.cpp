#include "featscan/service.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "featscan/json_codec.hpp"

namespace featscan {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kDefaultK = 6;
constexpr std::size_t kMaxK = 50;
constexpr std::size_t kDefaultPage = 50;
constexpr std::size_t kMaxPage = 200;
constexpr int kThumbnailLongSide = 256;
constexpr std::size_t kThumbnailCacheEntries = 1024;

HttpResult json_result(int status, const json& body) {
  return {status, "application/json", body.dump()};
}

HttpResult error_result(int status, const std::string& code, const std::string& message) {
  return json_result(status, json{{"error", {{"code", code}, {"message", message}}}});
}

HttpResult error_result(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kEmptyQuery: return error_result(422, "empty_mask", e.what());
    case ErrorCode::kDegenerateQuery: return error_result(422, "degenerate_query", e.what());
    case ErrorCode::kNotFound: return error_result(404, "not_found", e.what());
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kParse: return error_result(400, "bad_request", e.what());
    default: return error_result(500, error_code_name(e.code()), e.what());
  }
}

std::string url_encode(const std::string& s) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 15]);
    }
  }
  return out;
}

std::string thumbnail_url(const std::string& dataset, const std::string& id) {
  return "/api/datasets/" + url_encode(dataset) + "/thumbnail/" + url_encode(id);
}

std::optional<std::string> label_of(const MountedStore& store, const std::string& id) {
  const auto& labels = store.manifest().label_map;
  if (!labels) return std::nullopt;
  const auto it = labels->find(id);
  if (it == labels->end()) return std::nullopt;
  return it->second;
}

}  // namespace

ServiceConfig parse_service_config(const std::string& text, const fs::path& base_dir) {
  ServiceConfig cfg;
  try {
    const json j = json::parse(text);
    cfg.host = j.value("host", cfg.host);
    cfg.port = j.value("port", cfg.port);
    cfg.cors_origin = j.value("cors_origin", cfg.cors_origin);
    cfg.search_workers = j.value("search_workers", cfg.search_workers);
    for (const auto& s : j.at("stores")) {
      MountConfig m;
      m.name = s.at("name").get<std::string>();
      m.store_path = s.at("store_path").get<std::string>();
      m.image_dir = s.value("image_dir", std::string{});
      m.ram_budget_mb = s.value("ram_budget_mb", m.ram_budget_mb);
      if (m.store_path.is_relative()) m.store_path = base_dir / m.store_path;
      if (!m.image_dir.empty() && m.image_dir.is_relative()) m.image_dir = base_dir / m.image_dir;
      cfg.stores.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("service config: ") + e.what());
  }
  std::set<std::string> names;
  for (const auto& m : cfg.stores) {
    if (m.name.empty() || m.name.find('/') != std::string::npos)
      fail(ErrorCode::kInvalidArgument, "store names must be non-empty and contain no '/'");
    if (!names.insert(m.name).second)
      fail(ErrorCode::kInvalidArgument, "store name '" + m.name + "' is mounted twice");
  }
  if (cfg.port < 0 || cfg.port > 65535)
    fail(ErrorCode::kInvalidArgument, "port must be in [0, 65535]");
  return cfg;
}

ServiceConfig load_service_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kNotFound, "cannot open config " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_service_config(text, path.parent_path());
}

struct SearchService::Impl {
  ServiceConfig config;
  std::vector<std::unique_ptr<MountedStore>> stores;
  httplib::Server server;
  int bound_port = -1;
  // stop() may race with run(); each side sets its own flag before reading
  // the other's, so one of them always sees the shutdown.
  std::atomic<bool> stop_requested{false};
  std::atomic<bool> run_entered{false};
  std::atomic<bool> run_done{false};

  mutable std::mutex thumb_mu;
  mutable std::map<std::string, std::pair<std::string, std::string>> thumbs;

  const MountedStore* find(const std::string& name) const {
    for (const auto& s : stores)
      if (s->config().name == name) return s.get();
    return nullptr;
  }
};

SearchService::SearchService(ServiceConfig config) : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  for (const auto& m : impl_->config.stores)
    impl_->stores.push_back(std::make_unique<MountedStore>(m));

  auto& svr = impl_->server;
  const std::string origin = impl_->config.cors_origin;
  svr.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
  });
  svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  auto send = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  svr.Get("/api/datasets", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, list_datasets());
  });
  svr.Get(R"(/api/datasets/([^/]+)/images)",
          [this, send](const httplib::Request& req, httplib::Response& res) {
            std::size_t offset = 0;
            std::size_t limit = kDefaultPage;
            try {
              if (req.has_param("offset")) offset = std::stoul(req.get_param_value("offset"));
              if (req.has_param("limit")) limit = std::stoul(req.get_param_value("limit"));
            } catch (const std::exception&) {
              send(res, error_result(400, "bad_request", "offset and limit must be integers"));
              return;
            }
            send(res, list_images(req.matches[1], offset, limit));
          });
  svr.Get(R"(/api/datasets/([^/]+)/thumbnail/(.+))",
          [this, send](const httplib::Request& req, httplib::Response& res) {
            const HttpResult r = thumbnail(req.matches[1], req.matches[2]);
            if (r.status == 200) res.set_header("Cache-Control", "public, max-age=86400");
            send(res, r);
          });
  svr.Post("/api/search", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, search(req.body));
  });
}

SearchService::~SearchService() { stop(); }

HttpResult SearchService::list_datasets() const {
  json out = json::array();
  for (const auto& s : impl_->stores) {
    const auto& m = s->manifest();
    out.push_back({{"name", s->config().name},
                   {"model_name", m.model_name},
                   {"layer_name", m.layer_name},
                   {"dims", {m.dims.rows, m.dims.cols, m.dims.channels}},
                   {"image_count", s->image_count()}});
  }
  return json_result(200, out);
}

HttpResult SearchService::list_images(const std::string& dataset, std::size_t offset,
                                      std::size_t limit) const {
  const MountedStore* store = impl_->find(dataset);
  if (!store) return error_result(404, "not_found", "unknown dataset '" + dataset + "'");
  limit = std::min(limit, kMaxPage);
  const auto& ids = store->image_ids();
  json images = json::array();
  for (std::size_t i = offset; i < ids.size() && i < offset + limit; ++i) {
    json entry{{"image_id", ids[i]}, {"thumbnail_url", thumbnail_url(dataset, ids[i])}};
    if (auto label = label_of(*store, ids[i])) entry["label"] = *label;
    images.push_back(std::move(entry));
  }
  return json_result(200, json{{"dataset", dataset},
                               {"offset", offset},
                               {"limit", limit},
                               {"total", ids.size()},
                               {"images", std::move(images)}});
}

HttpResult SearchService::search(const std::string& request_body) const {
  json req;
  try {
    req = json::parse(request_body);
  } catch (const json::parse_error& e) {
    return error_result(400, "bad_request", std::string("body is not JSON: ") + e.what());
  }
  if (!req.is_object() || !req.contains("dataset") || !req["dataset"].is_string() ||
      !req.contains("mask"))
    return error_result(400, "bad_request", "request needs 'dataset' and 'mask'");
  const bool by_id = req.contains("query_image_id");
  const bool inline_features = req.contains("query_features");
  if (by_id == inline_features)
    return error_result(400, "bad_request",
                        "give exactly one of 'query_image_id' and 'query_features'");

  std::size_t k = kDefaultK;
  if (req.contains("k")) {
    if (!req["k"].is_number_integer() || req["k"].get<long long>() < 1 ||
        req["k"].get<long long>() > static_cast<long long>(kMaxK))
      return error_result(400, "bad_request", "k must be an integer in [1, 50]");
    k = req["k"].get<std::size_t>();
  }

  const std::string dataset = req["dataset"].get<std::string>();
  const MountedStore* store = impl_->find(dataset);
  if (!store) return error_result(404, "not_found", "unknown dataset '" + dataset + "'");

  try {
    FeatureMap query;
    if (by_id) {
      if (!req["query_image_id"].is_string())
        return error_result(400, "bad_request", "query_image_id must be a string");
      query = store->features(req["query_image_id"].get<std::string>());
    } else {
      query = feature_map_from_json(req["query_features"], "query");
      if (query.dims() != store->manifest().dims)
        return error_result(400, "bad_request",
                            "inline features have dims " + to_string(query.dims()) +
                                ", dataset has " + to_string(store->manifest().dims));
    }
    const ImageMask mask = image_mask_from_json(req["mask"]);
    const auto start = std::chrono::steady_clock::now();
    const DownsampledMask grid_mask = store->downsample(mask);
    const QueryFilter qf = prepare_query(query, grid_mask);
    SearchOptions opts;
    opts.workers = impl_->config.search_workers;
    const auto hits = store->search(qf, k, opts);
    const auto elapsed = std::chrono::steady_clock::now() - start;

    json out_hits = json::array();
    for (const auto& h : hits) {
      json hj = hit_to_json(h);
      hj["thumbnail_url"] = thumbnail_url(dataset, h.image_id);
      if (auto label = label_of(*store, h.image_id)) hj["label"] = *label;
      out_hits.push_back(std::move(hj));
    }
    return json_result(
        200, json{{"hits", std::move(out_hits)},
                  {"timing_ms",
                   std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count()}});
  } catch (const Error& e) {
    return error_result(e);
  }
}

HttpResult SearchService::thumbnail(const std::string& dataset,
                                    const std::string& image_id) const {
  const MountedStore* store = impl_->find(dataset);
  if (!store) return error_result(404, "not_found", "unknown dataset '" + dataset + "'");
  if (image_id.empty() || image_id.find('/') != std::string::npos || image_id == "." ||
      image_id == ".." || store->config().image_dir.empty())
    return error_result(404, "not_found", "no image for '" + image_id + "'");

  const std::string key = dataset + '\n' + image_id;
  {
    std::lock_guard lock(impl_->thumb_mu);
    if (const auto it = impl_->thumbs.find(key); it != impl_->thumbs.end())
      return {200, it->second.second, it->second.first};
  }

  const fs::path dir = store->config().image_dir;
  fs::path file;
  for (const char* ext : {"", ".jpg", ".jpeg", ".JPEG", ".JPG", ".png", ".PNG", ".bmp"}) {
    const fs::path candidate = dir / (image_id + ext);
    if (fs::is_regular_file(candidate)) {
      file = candidate;
      break;
    }
  }
  if (file.empty()) return error_result(404, "not_found", "no image for '" + image_id + "'");

  cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (img.empty()) return error_result(404, "not_found", "cannot decode image for '" + image_id + "'");
  const int long_side = std::max(img.rows, img.cols);
  if (long_side > kThumbnailLongSide) {
    const double scale = static_cast<double>(kThumbnailLongSide) / long_side;
    cv::Mat small;
    cv::resize(img, small,
               cv::Size(std::max(1, static_cast<int>(img.cols * scale + 0.5)),
                        std::max(1, static_cast<int>(img.rows * scale + 0.5))),
               0, 0, cv::INTER_AREA);
    img = small;
  }
  std::string ext = file.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  const bool png = ext == ".png";
  std::vector<uchar> encoded;
  cv::imencode(png ? ".png" : ".jpg", img, encoded,
               png ? std::vector<int>{} : std::vector<int>{cv::IMWRITE_JPEG_QUALITY, 85});
  HttpResult r{200, png ? "image/png" : "image/jpeg", std::string(encoded.begin(), encoded.end())};

  std::lock_guard lock(impl_->thumb_mu);
  if (impl_->thumbs.size() >= kThumbnailCacheEntries) impl_->thumbs.clear();
  impl_->thumbs.emplace(key, std::make_pair(r.body, r.content_type));
  return r;
}

int SearchService::bind() {
  auto& cfg = impl_->config;
  int port = cfg.port;
  if (port == 0) {
    port = impl_->server.bind_to_any_port(cfg.host);
  } else if (!impl_->server.bind_to_port(cfg.host, port)) {
    port = -1;
  }
  if (port < 0)
    fail(ErrorCode::kIo, "cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
  impl_->bound_port = port;
  return port;
}

void SearchService::run() {
  if (impl_->bound_port < 0) bind();
  impl_->run_entered = true;
  if (!impl_->stop_requested) impl_->server.listen_after_bind();
  impl_->run_done = true;
}

void SearchService::stop() {
  if (!impl_) return;
  impl_->stop_requested = true;
  if (!impl_->run_entered) return;
  while (!impl_->server.is_running() && !impl_->run_done)
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  impl_->server.stop();
}

bool SearchService::running() const { return impl_->server.is_running(); }

}  // namespace featscan
