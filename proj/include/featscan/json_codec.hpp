#pragma once

// JSON shapes shared by the CLI, the HTTP service and the metrics readers.

#include <json.hpp>

#include "featscan/search.hpp"
#include "featscan/tensor.hpp"

namespace featscan {

// {"rows": R, "cols": C, "data": [R*C floats, row-major]}
nlohmann::json mask_to_json(const DownsampledMask& mask);
// Accepts the same shape; throws kInvalidArgument / kParse on bad input.
ImageMask image_mask_from_json(const nlohmann::json& j);
DownsampledMask downsampled_mask_from_json(const nlohmann::json& j);

// {"image_id", "score", "alpha", "beta", "region_mask"}
nlohmann::json hit_to_json(const SearchHit& hit);
SearchHit hit_from_json(const nlohmann::json& j);
nlohmann::json hits_to_json(std::span<const SearchHit> hits);

// {"image_id"?, "rows", "cols", "channels", "data"}
FeatureMap feature_map_from_json(const nlohmann::json& j,
                                 const std::string& default_id);

}  // namespace featscan
