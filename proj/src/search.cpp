#include "featscan/search.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>
#include <tuple>

namespace featscan {

namespace {

void require_matching_map(const Dims& grid, const FeatureMap& search) {
  if (search.dims() != grid)
    fail(ErrorCode::kInvalidArgument,
         "feature map '" + search.image_id() + "' has dims " +
             to_string(search.dims()) + ", expected " + to_string(grid));
}

// Scores are snapped to a 1e-9 grid so that regions which tie exactly in
// real arithmetic also tie here, whichever path computed them. The grid is
// far coarser than double rounding noise and far finer than any tolerance.
constexpr double kScoreQuantum = 1e-9;

double snap_score(double s) { return std::round(s / kScoreQuantum) * kScoreQuantum; }

// Squared norm of the singly-masked query, f * m over positive cells.
double masked_norm_sq(const FeatureMap& query, const DownsampledMask& mask) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mask.rows(); ++i)
    for (std::size_t j = 0; j < mask.cols(); ++j)
      if (const double m = mask.at(i, j); m > 0.0)
        for (float v : query.pixel(i, j)) acc += (v * m) * (v * m);
  return acc;
}

}  // namespace

QueryFilter prepare_query(const FeatureMap& query, const DownsampledMask& mask) {
  if (query.dims() != Dims{mask.rows(), mask.cols(), query.channels()})
    fail(ErrorCode::kInvalidArgument, "mask grid does not match query '" + query.image_id() + "'");
  if (mask.positive_count() == 0) fail(ErrorCode::kEmptyQuery, "mask has no positive cell");
  const double norm_sq = masked_norm_sq(query, mask);
  if (!(norm_sq > 0.0))
    fail(ErrorCode::kDegenerateQuery,
         "masked query features of '" + query.image_id() + "' are all zero");

  QueryFilter qf;
  qf.grid_ = query.dims();
  qf.bbox_ = positive_support(mask);
  qf.query_norm_ = std::sqrt(norm_sq);

  const std::size_t depth = query.channels();
  qf.filter_.reserve(qf.bbox_.area() * depth);
  qf.mask_crop_.reserve(qf.bbox_.area());
  for (std::size_t i = qf.bbox_.row0; i < qf.bbox_.row1; ++i)
    for (std::size_t j = qf.bbox_.col0; j < qf.bbox_.col1; ++j) {
      const double m = mask.at(i, j);
      qf.mask_crop_.push_back(mask.at(i, j));
      for (float v : query.pixel(i, j)) qf.filter_.push_back(v * m * m);
    }
  return qf;
}

std::vector<RegionScore> oracle_region_scores(const FeatureMap& query,
                                              const DownsampledMask& mask,
                                              const FeatureMap& search) {
  require_matching_map(query.dims(), search);
  if (query.dims() != Dims{mask.rows(), mask.cols(), query.channels()})
    fail(ErrorCode::kInvalidArgument, "mask grid does not match query '" + query.image_id() + "'");
  if (mask.positive_count() == 0) fail(ErrorCode::kEmptyQuery, "mask has no positive cell");
  // q: row-major concatenation of f * m over positive cells.
  std::vector<double> q;
  for (std::size_t i = 0; i < mask.rows(); ++i)
    for (std::size_t j = 0; j < mask.cols(); ++j)
      if (const double m = mask.at(i, j); m > 0.0)
        for (float v : query.pixel(i, j)) q.push_back(v * m);
  double q_norm_sq = 0.0;
  for (double v : q) q_norm_sq += v * v;
  if (!(q_norm_sq > 0.0))
    fail(ErrorCode::kDegenerateQuery,
         "masked query features of '" + query.image_id() + "' are all zero");
  const double q_norm = std::sqrt(q_norm_sq);

  const BoundingBox box = positive_support(mask);
  const auto rows = static_cast<long>(search.rows());
  const auto cols = static_cast<long>(search.cols());
  // Zero-padded mask lookup.
  auto mask_at = [&](long u, long v) -> double {
    if (u < 0 || v < 0 || u >= rows || v >= cols) return 0.0;
    return mask.at(static_cast<std::size_t>(u), static_cast<std::size_t>(v));
  };

  std::vector<RegionScore> out;
  std::vector<double> r;
  r.reserve(q.size());
  // Shifts keep every positive mask cell inside the map.
  for (long shift_r = -static_cast<long>(box.row0);
       shift_r <= rows - static_cast<long>(box.row1); ++shift_r)
    for (long shift_c = -static_cast<long>(box.col0);
         shift_c <= cols - static_cast<long>(box.col1); ++shift_c) {
      r.clear();
      for (long i = 0; i < rows; ++i)
        for (long j = 0; j < cols; ++j) {
          const double m = mask_at(i - shift_r, j - shift_c);
          if (m > 0.0)
            for (float v : search.pixel(static_cast<std::size_t>(i),
                                        static_cast<std::size_t>(j)))
              r.push_back(v * m);
        }
      double dot = 0.0;
      double r_norm_sq = 0.0;
      for (std::size_t n = 0; n < q.size(); ++n) {
        dot += q[n] * r[n];
        r_norm_sq += r[n] * r[n];
      }
      RegionScore s;
      s.alpha = static_cast<std::size_t>(shift_r + static_cast<long>(box.row0));
      s.beta = static_cast<std::size_t>(shift_c + static_cast<long>(box.col0));
      s.valid = r_norm_sq > 0.0;
      s.score = s.valid ? snap_score(dot / (q_norm * std::sqrt(r_norm_sq))) : 0.0;
      out.push_back(s);
    }
  return out;
}

std::vector<RegionScore> conv_region_scores(const QueryFilter& query,
                                            const FeatureMap& search) {
  require_matching_map(query.grid(), search);
  const std::size_t rows = search.rows();
  const std::size_t cols = search.cols();
  const std::size_t depth = search.channels();
  const std::size_t kr = query.rows();
  const std::size_t kc = query.cols();
  const auto filter = query.filter();
  const auto mask = query.mask_crop();
  const auto data = search.data();

  // Channel-summed squares of the search map: correlating these with the
  // squared mask gives every region's squared norm.
  std::vector<double> energy(rows * cols, 0.0);
  for (std::size_t p = 0; p < rows * cols; ++p) {
    double acc = 0.0;
    const float* px = data.data() + p * depth;
    for (std::size_t k = 0; k < depth; ++k) acc += static_cast<double>(px[k]) * px[k];
    energy[p] = acc;
  }

  struct Tap {
    std::size_t u, v;
    double mask_sq;
  };
  std::vector<Tap> taps;
  for (std::size_t u = 0; u < kr; ++u)
    for (std::size_t v = 0; v < kc; ++v)
      if (const double m = mask[u * kc + v]; m > 0.0) taps.push_back({u, v, m * m});

  std::vector<RegionScore> out;
  out.reserve((rows - kr + 1) * (cols - kc + 1));
  for (std::size_t a = 0; a + kr <= rows; ++a)
    for (std::size_t b = 0; b + kc <= cols; ++b) {
      double dot = 0.0;
      double norm_sq = 0.0;
      for (const Tap& t : taps) {
        const std::size_t pos = (a + t.u) * cols + (b + t.v);
        const float* px = data.data() + pos * depth;
        const double* w = filter.data() + (t.u * kc + t.v) * depth;
        double acc = 0.0;
        for (std::size_t k = 0; k < depth; ++k) acc += w[k] * px[k];
        dot += acc;
        norm_sq += t.mask_sq * energy[pos];
      }
      RegionScore s{a, b, 0.0, norm_sq > 0.0};
      if (s.valid) s.score = snap_score(dot / (query.query_norm() * std::sqrt(norm_sq)));
      out.push_back(s);
    }
  return out;
}

RegionScore best_region(std::span<const RegionScore> scores) {
  if (scores.empty())
    fail(ErrorCode::kInvalidArgument, "best_region needs at least one score");
  RegionScore best;  // invalid sentinel
  for (const RegionScore& s : scores) {
    if (!s.valid) continue;
    if (!best.valid || s.score > best.score ||
        (s.score == best.score &&
         std::tie(s.alpha, s.beta) < std::tie(best.alpha, best.beta)))
      best = s;
  }
  return best;
}

bool ranks_before(const SearchHit& a, const SearchHit& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image_id, a.alpha, a.beta) <
         std::tie(b.image_id, b.alpha, b.beta);
}

DownsampledMask translate_mask(std::span<const float> crop,
                               std::size_t crop_rows, std::size_t crop_cols,
                               std::size_t grid_rows, std::size_t grid_cols,
                               std::size_t alpha, std::size_t beta) {
  if (alpha + crop_rows > grid_rows || beta + crop_cols > grid_cols ||
      crop.size() != crop_rows * crop_cols)
    fail(ErrorCode::kInvalidArgument, "translated mask leaves the grid");
  std::vector<float> out(grid_rows * grid_cols, 0.0f);
  for (std::size_t u = 0; u < crop_rows; ++u)
    for (std::size_t v = 0; v < crop_cols; ++v)
      out[(alpha + u) * grid_cols + beta + v] = crop[u * crop_cols + v];
  return DownsampledMask(grid_rows, grid_cols, std::move(out));
}

TopKCollector::TopKCollector(const QueryFilter& query, std::size_t k,
                             SearchOptions options)
    : query_(query), k_(k), options_(options) {
  if (k_ < 1) fail(ErrorCode::kInvalidArgument, "k must be at least 1");
  if (options_.workers == 0)
    options_.workers = std::max(1u, std::thread::hardware_concurrency());
}

bool TopKCollector::better(const Candidate& a, const Candidate& b) {
  if (a.region.score != b.region.score) return a.region.score > b.region.score;
  return std::tie(a.image_id, a.region.alpha, a.region.beta) <
         std::tie(b.image_id, b.region.alpha, b.region.beta);
}

// `heap` is a heap under `better`, so its front is the weakest kept entry.
void TopKCollector::offer(std::vector<Candidate>& heap, Candidate c) const {
  if (heap.size() < k_) {
    heap.push_back(std::move(c));
    std::push_heap(heap.begin(), heap.end(), better);
  } else if (better(c, heap.front())) {
    std::pop_heap(heap.begin(), heap.end(), better);
    heap.back() = std::move(c);
    std::push_heap(heap.begin(), heap.end(), better);
  }
}

void TopKCollector::score_into(const FeatureMap& fmap,
                               std::vector<Candidate>& heap) const {
  const auto scores = conv_region_scores(query_, fmap);
  if (options_.best_region_per_image) {
    const RegionScore best = best_region(scores);
    if (best.valid) offer(heap, {fmap.image_id(), best});
  } else {
    for (const RegionScore& s : scores)
      if (s.valid) offer(heap, {fmap.image_id(), s});
  }
}

void TopKCollector::add(std::span<const FeatureMap> batch) {
  // Reject the whole batch up front so a bad map never leaves partial state.
  for (const FeatureMap& f : batch) require_matching_map(query_.grid(), f);

  const std::size_t workers = std::min(options_.workers, batch.size());
  if (workers <= 1) {
    for (const FeatureMap& f : batch) score_into(f, heap_);
  } else {
    std::vector<std::vector<Candidate>> partial(workers);
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < batch.size(); i += workers)
              score_into(batch[i], partial[w]);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (auto& p : partial)
      for (auto& c : p) offer(heap_, std::move(c));
  }
  images_seen_ += batch.size();
}

std::vector<SearchHit> TopKCollector::hits() const {
  std::vector<Candidate> sorted = heap_;
  std::sort(sorted.begin(), sorted.end(), better);
  std::vector<SearchHit> out;
  out.reserve(sorted.size());
  for (auto& c : sorted)
    out.push_back({c.image_id, c.region.score, c.region.alpha, c.region.beta,
                   translate_mask(query_.mask_crop(), query_.rows(),
                                  query_.cols(), query_.grid().rows,
                                  query_.grid().cols, c.region.alpha,
                                  c.region.beta)});
  return out;
}

std::vector<SearchHit> topk_search(const QueryFilter& query,
                                   std::span<const FeatureMap> dataset,
                                   std::size_t k, SearchOptions options) {
  TopKCollector collector(query, k, options);
  collector.add(dataset);
  return collector.hits();
}

std::vector<SearchHit> oracle_topk_search(const FeatureMap& query,
                                          const DownsampledMask& mask,
                                          std::span<const FeatureMap> dataset,
                                          std::size_t k) {
  if (k < 1) fail(ErrorCode::kInvalidArgument, "k must be at least 1");
  const BoundingBox box = positive_support(mask);
  std::vector<float> crop;
  for (std::size_t i = box.row0; i < box.row1; ++i)
    for (std::size_t j = box.col0; j < box.col1; ++j) crop.push_back(mask.at(i, j));

  std::vector<SearchHit> all;
  for (const FeatureMap& f : dataset) {
    const auto scores = oracle_region_scores(query, mask, f);
    const RegionScore best = best_region(scores);
    if (!best.valid) continue;
    all.push_back({f.image_id(), best.score, best.alpha, best.beta,
                   translate_mask(crop, box.height(), box.width(), mask.rows(),
                                  mask.cols(), best.alpha, best.beta)});
  }
  std::sort(all.begin(), all.end(), ranks_before);
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace featscan
