#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "featscan/search.hpp"
#include "featscan/store.hpp"

namespace featscan {

struct MountConfig {
  std::string name;
  std::filesystem::path store_path;
  std::filesystem::path image_dir;
  std::uint64_t ram_budget_mb = 1024;
};

// A read-only store prepared for searching. Stores whose float payload fits
// the RAM budget are decoded once at mount; larger ones are streamed chunk by
// chunk on every search.
class MountedStore {
 public:
  // Propagates kNotFound / kCorruption from the store.
  explicit MountedStore(MountConfig config);

  const MountConfig& config() const noexcept { return config_; }
  const StoreManifest& manifest() const noexcept { return store_.manifest(); }
  const FeatureStore& store() const noexcept { return store_; }
  bool in_memory() const noexcept { return preloaded_; }
  const std::vector<std::string>& image_ids() const noexcept { return ids_; }
  std::size_t image_count() const noexcept { return ids_.size(); }
  bool contains(const std::string& id) const { return store_.contains(id); }

  FeatureMap features(const std::string& image_id) const;
  // Pools a full-resolution mask down to the store's feature grid.
  DownsampledMask downsample(const ImageMask& mask) const;

  std::vector<SearchHit> search(const QueryFilter& query, std::size_t k,
                                SearchOptions options = {}) const;
  std::vector<SearchHit> search_oracle(const FeatureMap& query,
                                       const DownsampledMask& mask,
                                       std::size_t k) const;

 private:
  MountConfig config_;
  FeatureStore store_;
  std::vector<std::string> ids_;
  bool preloaded_ = false;
  std::vector<FeatureMap> maps_;
  std::unordered_map<std::string, std::size_t> slot_;
};

}  // namespace featscan
