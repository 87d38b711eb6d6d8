#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "featscan/tensor.hpp"

namespace featscan {

struct BenchOptions {
  std::size_t repeat = 3;
  std::uint64_t ram_budget_mb = 4096;
  std::size_t k = 6;
  std::optional<std::string> query_id;  // defaults to the first stored image
  // Images pushed through the synthetic extraction stage to estimate the
  // cost of recomputing features instead of reading them from the store.
  std::size_t recompute_sample = 8;
  std::size_t workers = 0;
};

// Times a full top-k search over the store (a) streamed from disk and
// (b) with every map already decoded in RAM, plus a raw load pass and a
// synthetic extraction pass. Returns the JSON report:
//   {"images", "dims", "k", "repeat", "query_id",
//    "streamed_ms", "in_ram_ms",                 (medians; in_ram_ms null if
//                                                 over the RAM budget)
//    "samples": {"streamed_ms": [...], "in_ram_ms": [...]},
//    "load_ms", "recompute_ms_per_image", "recompute_ms_estimate",
//    "warnings": [...]}
std::string run_bench(const std::filesystem::path& store_path, const ImageMask& mask,
                      const BenchOptions& options);

}  // namespace featscan
