#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "featscan/tensor.hpp"

namespace featscan {

// Cropped, doubly masked query tensor used as a cross-correlation kernel.
class QueryFilter {
 public:
  // Grid of the query layer (H_l, W_l, D_l).
  const Dims& grid() const noexcept { return grid_; }
  // Support of the mask inside the query grid.
  const BoundingBox& bbox() const noexcept { return bbox_; }
  std::size_t rows() const noexcept { return bbox_.height(); }
  std::size_t cols() const noexcept { return bbox_.width(); }
  std::size_t channels() const noexcept { return grid_.channels; }

  // rows() x cols() x channels(), query features times mask squared.
  std::span<const double> filter() const noexcept { return filter_; }
  // rows() x cols() slice of the mask at the support.
  std::span<const float> mask_crop() const noexcept { return mask_crop_; }
  // Norm of the singly masked query vector.
  double query_norm() const noexcept { return query_norm_; }

 private:
  friend QueryFilter prepare_query(const FeatureMap&, const DownsampledMask&);

  Dims grid_;
  BoundingBox bbox_;
  std::vector<double> filter_;
  std::vector<float> mask_crop_;
  double query_norm_ = 0.0;
};

// Similarity of the query with one candidate region. alpha/beta give the
// top-left corner of the region's support box inside the search map.
struct RegionScore {
  std::size_t alpha = 0;
  std::size_t beta = 0;
  double score = 0.0;
  bool valid = false;  // false when the region vector has zero norm

  friend bool operator==(const RegionScore&, const RegionScore&) = default;
};

struct SearchHit {
  std::string image_id;
  double score = 0.0;
  std::size_t alpha = 0;
  std::size_t beta = 0;
  // The query mask translated to the matched offset, zero elsewhere.
  DownsampledMask region_mask;

  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

struct SearchOptions {
  // Scoring threads; 0 picks std::thread::hardware_concurrency().
  std::size_t workers = 0;
  // When false every valid region competes individually for the top k
  // instead of only the best region of each image.
  bool best_region_per_image = true;
};

// Throws kEmptyQuery for a mask without positive cells and kDegenerateQuery
// when the masked query vector is zero.
QueryFilter prepare_query(const FeatureMap& query, const DownsampledMask& mask);

// Sliding-window reference: builds the query and every region vector
// explicitly and scores them with the cosine. Offsets are returned row-major.
std::vector<RegionScore> oracle_region_scores(const FeatureMap& query,
                                              const DownsampledMask& mask,
                                              const FeatureMap& search);

// Same scores via cross-correlation of the search map with the query filter.
std::vector<RegionScore> conv_region_scores(const QueryFilter& query,
                                            const FeatureMap& search);

// Highest valid score, ties to the smaller row-major offset. Returns an
// invalid sentinel when nothing is valid; throws on an empty list.
RegionScore best_region(std::span<const RegionScore> scores);

// Strict weak order of the ranking: score descending, then image id, then
// row-major offset.
bool ranks_before(const SearchHit& a, const SearchHit& b);

// Full-grid mask with `crop` pasted at (alpha, beta).
DownsampledMask translate_mask(std::span<const float> crop,
                               std::size_t crop_rows, std::size_t crop_cols,
                               std::size_t grid_rows, std::size_t grid_cols,
                               std::size_t alpha, std::size_t beta);

// Incremental top-k over a dataset that arrives in pieces. The final ranking
// depends only on the set of images offered, not on their order.
class TopKCollector {
 public:
  TopKCollector(const QueryFilter& query, std::size_t k,
                SearchOptions options = {});

  // Scores one batch, fanning out over the configured workers.
  void add(std::span<const FeatureMap> batch);
  void add(const FeatureMap& fmap) { add(std::span<const FeatureMap>(&fmap, 1)); }

  std::vector<SearchHit> hits() const;
  std::size_t images_seen() const noexcept { return images_seen_; }

 private:
  struct Candidate {
    std::string image_id;
    RegionScore region;
  };
  static bool better(const Candidate& a, const Candidate& b);
  void offer(std::vector<Candidate>& heap, Candidate c) const;
  void score_into(const FeatureMap& fmap, std::vector<Candidate>& heap) const;

  QueryFilter query_;
  std::size_t k_;
  SearchOptions options_;
  std::vector<Candidate> heap_;
  std::size_t images_seen_ = 0;
};

std::vector<SearchHit> topk_search(const QueryFilter& query,
                                   std::span<const FeatureMap> dataset,
                                   std::size_t k, SearchOptions options = {});

// Ranking built entirely from oracle_region_scores; used for audits.
std::vector<SearchHit> oracle_topk_search(const FeatureMap& query,
                                          const DownsampledMask& mask,
                                          std::span<const FeatureMap> dataset,
                                          std::size_t k);

}  // namespace featscan
