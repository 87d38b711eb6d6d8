#include "featscan/metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "featscan/json_codec.hpp"

namespace featscan::metrics {

using json = nlohmann::json;

std::size_t unique_class_count(const ResultSet& rs, const LabelMap& labels) {
  std::set<std::string> classes;
  for (const auto& hit : rs.hits) {
    const auto it = labels.find(hit.image_id);
    if (it == labels.end())
      fail(ErrorCode::kInvalidArgument, "no class label for image '" + hit.image_id + "'");
    classes.insert(it->second);
  }
  return classes.size();
}

std::size_t overlap_count(const ResultSet& a, const ResultSet& b) {
  std::set<std::string> left;
  for (const auto& h : a.hits) left.insert(h.image_id);
  std::set<std::string> common;
  for (const auto& h : b.hits)
    if (left.contains(h.image_id)) common.insert(h.image_id);
  return common.size();
}

BoundingBox neighbor_bbox(const SearchHit& hit, std::size_t image_rows,
                          std::size_t image_cols) {
  const auto& m = hit.region_mask;
  if (m.rows() == 0 || m.positive_count() == 0)
    fail(ErrorCode::kInvalidArgument,
         "hit '" + hit.image_id + "' has no positive region-mask cell");
  const BoundingBox cells = positive_support(m);
  // floor for the leading edge, ceil for the trailing edge
  auto lead = [](std::size_t cell, std::size_t pixels, std::size_t grid) {
    return cell * pixels / grid;
  };
  auto trail = [](std::size_t cell, std::size_t pixels, std::size_t grid) {
    return (cell * pixels + grid - 1) / grid;
  };
  return {lead(cells.row0, image_rows, m.rows()), lead(cells.col0, image_cols, m.cols()),
          trail(cells.row1, image_rows, m.rows()), trail(cells.col1, image_cols, m.cols())};
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const std::size_t r0 = std::max(a.row0, b.row0);
  const std::size_t c0 = std::max(a.col0, b.col0);
  const std::size_t r1 = std::min(a.row1, b.row1);
  const std::size_t c1 = std::min(a.col1, b.col1);
  const double inter =
      (r1 > r0 && c1 > c0) ? static_cast<double>((r1 - r0) * (c1 - c0)) : 0.0;
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

const char* area_bin_name(AreaBin bin) noexcept {
  switch (bin) {
    case AreaBin::kSmall: return "small";
    case AreaBin::kMedium: return "medium";
    case AreaBin::kLarge: return "large";
    case AreaBin::kXLarge: return "xlarge";
  }
  return "xlarge";
}

AreaBin bin_by_area(double area) {
  if (!(area > 0.0)) fail(ErrorCode::kInvalidArgument, "area must be positive");
  if (area < 1000.0) return AreaBin::kSmall;
  if (area < 5000.0) return AreaBin::kMedium;
  if (area < 20000.0) return AreaBin::kLarge;
  return AreaBin::kXLarge;
}

Aggregate aggregate(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::kInvalidArgument, "cannot aggregate an empty list");
  Aggregate out;
  out.count = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    out.std_error = sd / std::sqrt(static_cast<double>(values.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<json> read_json_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kNotFound, "cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      fail(ErrorCode::kParse,
           path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// Shortest text that reads back to the same double.
std::string format_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string scalar_report(const char* metric, std::size_t queries,
                          const std::vector<double>& values, ReportFormat format) {
  const bool have = !values.empty();
  const Aggregate agg = have ? aggregate(values) : Aggregate{};
  if (format == ReportFormat::kCsv) {
    std::string csv = "metric,queries,mean,std_error\n";
    csv += std::string(metric) + "," + std::to_string(queries) + "," +
           (have ? format_number(agg.mean) : "") + "," +
           (have ? format_number(agg.std_error) : "") + "\n";
    return csv;
  }
  json j{{"metric", metric}, {"queries", queries}};
  j["mean"] = have ? json(agg.mean) : json(nullptr);
  j["std_error"] = have ? json(agg.std_error) : json(nullptr);
  return j.dump(2);
}

}  // namespace

std::vector<ResultSet> read_result_sets(const std::filesystem::path& path) {
  std::vector<ResultSet> sets;
  for (const auto& rec : read_json_lines(path)) {
    ResultSet rs;
    try {
      rs.query_id = rec.at("query_id").get<std::string>();
      for (const auto& h : rec.at("hits")) rs.hits.push_back(hit_from_json(h));
    } catch (const json::exception& e) {
      fail(ErrorCode::kParse, path.string() + ": malformed result set: " + e.what());
    }
    sets.push_back(std::move(rs));
  }
  return sets;
}

std::vector<GroundTruthBox> read_ground_truth(const std::filesystem::path& path) {
  std::vector<GroundTruthBox> boxes;
  for (const auto& rec : read_json_lines(path)) {
    GroundTruthBox g;
    try {
      g.image_id = rec.at("image_id").get<std::string>();
      g.box = {rec.at("row0").get<std::size_t>(), rec.at("col0").get<std::size_t>(),
               rec.at("row1").get<std::size_t>(), rec.at("col1").get<std::size_t>()};
      g.image_rows = rec.value("image_rows", std::size_t{0});
      g.image_cols = rec.value("image_cols", std::size_t{0});
    } catch (const json::exception& e) {
      fail(ErrorCode::kParse, path.string() + ": malformed box record: " + e.what());
    }
    if (g.box.row1 <= g.box.row0 || g.box.col1 <= g.box.col0)
      fail(ErrorCode::kInvalidArgument, "empty ground-truth box for '" + g.image_id + "'");
    boxes.push_back(std::move(g));
  }
  return boxes;
}

LabelMap read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kNotFound, "cannot open " + path.string());
  try {
    return json::parse(in).get<LabelMap>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse,
         path.string() + ": labels must be a JSON object of strings: " + e.what());
  }
}

std::string class_diversity_report(std::span<const ResultSet> sets,
                                   const LabelMap& labels, ReportFormat format) {
  std::vector<double> values;
  for (const auto& rs : sets) values.push_back(static_cast<double>(unique_class_count(rs, labels)));
  return scalar_report("unique_classes", sets.size(), values, format);
}

std::string overlap_report(std::span<const ResultSet> a, std::span<const ResultSet> b,
                           ReportFormat format) {
  std::map<std::string, const ResultSet*> by_query;
  for (const auto& rs : b) by_query[rs.query_id] = &rs;
  std::vector<double> values;
  for (const auto& rs : a)
    if (const auto it = by_query.find(rs.query_id); it != by_query.end())
      values.push_back(static_cast<double>(overlap_count(rs, *it->second)));
  return scalar_report("images_in_common", values.size(), values, format);
}

std::string iou_report(std::span<const ResultSet> sets,
                       std::span<const GroundTruthBox> truth, NeighborMode mode,
                       ReportFormat format) {
  std::multimap<std::string, const GroundTruthBox*> boxes;
  for (const auto& g : truth) boxes.emplace(g.image_id, &g);

  std::array<std::vector<double>, 4> per_bin;
  for (const auto& rs : sets) {
    const auto query_box = boxes.find(rs.query_id);
    if (query_box == boxes.end() || rs.hits.empty()) continue;
    const AreaBin bin = bin_by_area(query_box->second->area());
    const std::size_t take = mode == NeighborMode::kTop1 ? 1 : rs.hits.size();
    for (std::size_t n = 0; n < take && n < rs.hits.size(); ++n) {
      const SearchHit& hit = rs.hits[n];
      auto [lo, hi] = boxes.equal_range(hit.image_id);
      double best = 0.0;
      for (auto it = lo; it != hi; ++it) {
        const GroundTruthBox& g = *it->second;
        if (g.image_rows == 0 || g.image_cols == 0)
          fail(ErrorCode::kInvalidArgument,
               "ground-truth record for '" + g.image_id + "' lacks image_rows/image_cols");
        best = std::max(best, iou(neighbor_bbox(hit, g.image_rows, g.image_cols), g.box));
      }
      per_bin[static_cast<std::size_t>(bin)].push_back(best);
    }
  }

  const char* mode_name = mode == NeighborMode::kTop1 ? "top1" : "topk";
  if (format == ReportFormat::kCsv) {
    std::string csv = "bin,count,mean_iou,std_error\n";
    for (std::size_t b = 0; b < per_bin.size(); ++b) {
      csv += std::string(area_bin_name(static_cast<AreaBin>(b))) + "," +
             std::to_string(per_bin[b].size()) + ",";
      if (!per_bin[b].empty()) {
        const Aggregate agg = aggregate(per_bin[b]);
        csv += format_number(agg.mean) + "," + format_number(agg.std_error);
      } else {
        csv += ",";
      }
      csv += "\n";
    }
    return csv;
  }
  json j{{"metric", "neighbor_iou"}, {"mode", mode_name}, {"bins", json::array()}};
  for (std::size_t b = 0; b < per_bin.size(); ++b) {
    json bj{{"bin", area_bin_name(static_cast<AreaBin>(b))}, {"count", per_bin[b].size()}};
    if (!per_bin[b].empty()) {
      const Aggregate agg = aggregate(per_bin[b]);
      bj["mean_iou"] = agg.mean;
      bj["std_error"] = agg.std_error;
    } else {
      bj["mean_iou"] = nullptr;
      bj["std_error"] = nullptr;
    }
    j["bins"].push_back(std::move(bj));
  }
  return j.dump(2);
}

}  // namespace featscan::metrics
