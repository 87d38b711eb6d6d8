#include "featscan/json_codec.hpp"

namespace featscan {

using json = nlohmann::json;

namespace {

template <class MaskT>
MaskT mask_from_json(const json& j) {
  try {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    auto data = j.at("data").get<std::vector<float>>();
    return MaskT(rows, cols, std::move(data));
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("mask must be {rows, cols, data}: ") + e.what());
  }
}

}  // namespace

json mask_to_json(const DownsampledMask& mask) {
  return json{{"rows", mask.rows()},
              {"cols", mask.cols()},
              {"data", std::vector<float>(mask.data().begin(), mask.data().end())}};
}

ImageMask image_mask_from_json(const json& j) { return mask_from_json<ImageMask>(j); }

DownsampledMask downsampled_mask_from_json(const json& j) {
  return mask_from_json<DownsampledMask>(j);
}

json hit_to_json(const SearchHit& hit) {
  return json{{"image_id", hit.image_id},
              {"score", hit.score},
              {"alpha", hit.alpha},
              {"beta", hit.beta},
              {"region_mask", mask_to_json(hit.region_mask)}};
}

SearchHit hit_from_json(const json& j) {
  SearchHit hit;
  try {
    hit.image_id = j.at("image_id").get<std::string>();
    hit.score = j.at("score").get<double>();
    hit.alpha = j.value("alpha", std::size_t{0});
    hit.beta = j.value("beta", std::size_t{0});
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("malformed hit record: ") + e.what());
  }
  if (j.contains("region_mask")) hit.region_mask = downsampled_mask_from_json(j["region_mask"]);
  return hit;
}

json hits_to_json(std::span<const SearchHit> hits) {
  json arr = json::array();
  for (const auto& h : hits) arr.push_back(hit_to_json(h));
  return arr;
}

FeatureMap feature_map_from_json(const json& j, const std::string& default_id) {
  try {
    Dims dims{j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
              j.at("channels").get<std::size_t>()};
    return FeatureMap(j.value("image_id", default_id), dims,
                      j.at("data").get<std::vector<float>>());
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse,
         std::string("feature map must be {rows, cols, channels, data}: ") + e.what());
  }
}

}  // namespace featscan
