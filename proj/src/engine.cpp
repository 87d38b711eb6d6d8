#include "featscan/engine.hpp"

namespace featscan {

MountedStore::MountedStore(MountConfig config)
    : config_(std::move(config)),
      store_(FeatureStore::open(config_.store_path, FeatureStore::Mode::kReadOnly)),
      ids_(store_.image_ids()) {
  const std::uint64_t budget = config_.ram_budget_mb * 1024ull * 1024ull;
  if (store_.payload_bytes() <= budget) {
    maps_ = store_.load_all();
    preloaded_ = true;
    for (std::size_t i = 0; i < maps_.size(); ++i) slot_.emplace(maps_[i].image_id(), i);
  }
}

FeatureMap MountedStore::features(const std::string& image_id) const {
  if (const auto it = slot_.find(image_id); it != slot_.end()) return maps_[it->second];
  return store_.get(image_id);
}

DownsampledMask MountedStore::downsample(const ImageMask& mask) const {
  return downsample_mask(mask, manifest().dims.rows, manifest().dims.cols);
}

std::vector<SearchHit> MountedStore::search(const QueryFilter& query, std::size_t k,
                                            SearchOptions options) const {
  TopKCollector collector(query, k, options);
  if (in_memory()) {
    collector.add(maps_);
  } else {
    auto stream = store_.batches(manifest().images_per_chunk);
    while (auto batch = stream.next()) collector.add(*batch);
  }
  return collector.hits();
}

std::vector<SearchHit> MountedStore::search_oracle(const FeatureMap& query,
                                                   const DownsampledMask& mask,
                                                   std::size_t k) const {
  if (in_memory()) return oracle_topk_search(query, mask, maps_, k);
  return oracle_topk_search(query, mask, store_.load_all(), k);
}

}  // namespace featscan
