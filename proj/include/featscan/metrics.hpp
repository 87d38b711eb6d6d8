#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "featscan/search.hpp"
#include "featscan/tensor.hpp"

namespace featscan::metrics {

// Top-k hits for one query, in ranking order.
struct ResultSet {
  std::string query_id;
  std::vector<SearchHit> hits;
};

struct GroundTruthBox {
  std::string image_id;
  BoundingBox box;  // image pixel coordinates
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;

  double area() const noexcept { return static_cast<double>(box.area()); }
};

using LabelMap = std::map<std::string, std::string>;

// Distinct labels among the hits. Throws kInvalidArgument naming the first
// hit without a label.
std::size_t unique_class_count(const ResultSet& rs, const LabelMap& labels);

// Number of image ids shared by the two result sets.
std::size_t overlap_count(const ResultSet& a, const ResultSet& b);

// Tight box of the hit's positive region-mask cells, scaled to pixel
// coordinates and rounded outward.
BoundingBox neighbor_bbox(const SearchHit& hit, std::size_t image_rows,
                          std::size_t image_cols);

double iou(const BoundingBox& a, const BoundingBox& b);

enum class AreaBin { kSmall, kMedium, kLarge, kXLarge };
const char* area_bin_name(AreaBin bin) noexcept;
// [0,1000) small, [1000,5000) medium, [5000,20000) large, >= 20000 xlarge.
AreaBin bin_by_area(double area);

struct Aggregate {
  double mean = 0.0;
  double std_error = 0.0;  // sample stddev / sqrt(n); 0 for one value
  std::size_t count = 0;
};
Aggregate aggregate(std::span<const double> values);

// ---- record-file reports ------------------------------------------------
// Result sets are JSON lines: {"query_id": str, "hits": [hit, ...]} where a
// hit is {"image_id", "score", "alpha", "beta",
//          "region_mask": {"rows", "cols", "data"}}.
// Ground-truth boxes are JSON lines:
//   {"image_id", "row0", "col0", "row1", "col1", "image_rows", "image_cols"}.

std::vector<ResultSet> read_result_sets(const std::filesystem::path& path);
std::vector<GroundTruthBox> read_ground_truth(const std::filesystem::path& path);
// A JSON object {image_id: label}.
LabelMap read_labels(const std::filesystem::path& path);

enum class ReportFormat { kJson, kCsv };

// Mean and standard error of unique_class_count over all result sets.
std::string class_diversity_report(std::span<const ResultSet> sets,
                                   const LabelMap& labels, ReportFormat format);

// Mean overlap between result sets with the same query id in `a` and `b`.
std::string overlap_report(std::span<const ResultSet> a,
                           std::span<const ResultSet> b, ReportFormat format);

enum class NeighborMode {
  kTop1,  // only the first hit of each query contributes
  kTopK,  // every hit contributes its own IoU
};

// IoU of neighbor boxes against the neighbor image's ground-truth box(es),
// binned by the area of the query's ground-truth box. Queries without a
// ground-truth box are skipped; a neighbor with several boxes uses the best
// matching one, and a neighbor with none scores 0.
std::string iou_report(std::span<const ResultSet> sets,
                       std::span<const GroundTruthBox> truth, NeighborMode mode,
                       ReportFormat format);

}  // namespace featscan::metrics
