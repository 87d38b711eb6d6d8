#include "featscan/bench.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include <json.hpp>

#include "featscan/engine.hpp"
#include "featscan/search.hpp"

namespace featscan {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Stand-in for CNN inference: a 16x16 patch embedding followed by ReLU that
// produces a map with the store's dims from a synthetic RGB image.
FeatureMap synthetic_extract(const Dims& dims, std::mt19937& rng,
                             const std::vector<float>& weights) {
  constexpr std::size_t kPatch = 16;
  constexpr std::size_t kPatchLen = kPatch * kPatch * 3;
  std::uniform_real_distribution<float> pixel(0.0f, 1.0f);
  std::vector<float> image(dims.rows * kPatch * dims.cols * kPatch * 3);
  for (auto& p : image) p = pixel(rng);

  const std::size_t image_cols = dims.cols * kPatch;
  std::vector<float> out(dims.size());
  std::vector<float> patch(kPatchLen);
  for (std::size_t i = 0; i < dims.rows; ++i)
    for (std::size_t j = 0; j < dims.cols; ++j) {
      std::size_t n = 0;
      for (std::size_t u = 0; u < kPatch; ++u)
        for (std::size_t v = 0; v < kPatch; ++v)
          for (std::size_t c = 0; c < 3; ++c)
            patch[n++] = image[((i * kPatch + u) * image_cols + j * kPatch + v) * 3 + c];
      for (std::size_t k = 0; k < dims.channels; ++k) {
        const float* w = weights.data() + k * kPatchLen;
        float acc = 0.0f;
        for (std::size_t p = 0; p < kPatchLen; ++p) acc += w[p] * patch[p];
        out[(i * dims.cols + j) * dims.channels + k] = std::max(acc, 0.0f);
      }
    }
  return FeatureMap("synthetic", dims, std::move(out));
}

}  // namespace

std::string run_bench(const std::filesystem::path& store_path, const ImageMask& mask,
                      const BenchOptions& options) {
  if (options.repeat < 1) fail(ErrorCode::kInvalidArgument, "repeat must be at least 1");
  if (options.k < 1) fail(ErrorCode::kInvalidArgument, "k must be at least 1");

  // Streamed side: ram budget 0 forces chunk-by-chunk decoding per search.
  const MountedStore streamed({"bench", store_path, {}, 0});
  const auto& manifest = streamed.manifest();
  if (streamed.image_count() == 0)
    fail(ErrorCode::kInvalidArgument, "store " + store_path.string() + " is empty");

  const std::string query_id = options.query_id.value_or(streamed.image_ids().front());
  const DownsampledMask grid_mask = streamed.downsample(mask);
  const QueryFilter qf = prepare_query(streamed.features(query_id), grid_mask);
  SearchOptions search_opts;
  search_opts.workers = options.workers;

  json warnings = json::array();
  json report;
  report["images"] = streamed.image_count();
  report["dims"] = {manifest.dims.rows, manifest.dims.cols, manifest.dims.channels};
  report["k"] = options.k;
  report["repeat"] = options.repeat;
  report["query_id"] = query_id;
  report["compression"] = compression_name(manifest.compression);

  std::vector<double> streamed_ms;
  for (std::size_t r = 0; r < options.repeat; ++r) {
    const auto t0 = Clock::now();
    streamed.search(qf, options.k, search_opts);
    streamed_ms.push_back(ms_since(t0));
  }

  const auto load_start = Clock::now();
  const std::uint64_t budget = options.ram_budget_mb * 1024ull * 1024ull;
  std::vector<double> in_ram_ms;
  if (streamed.store().payload_bytes() <= budget) {
    const std::vector<FeatureMap> maps = streamed.store().load_all();
    report["load_ms"] = ms_since(load_start);
    for (std::size_t r = 0; r < options.repeat; ++r) {
      const auto t0 = Clock::now();
      topk_search(qf, maps, options.k, search_opts);
      in_ram_ms.push_back(ms_since(t0));
    }
  } else {
    report["load_ms"] = nullptr;
    warnings.push_back("store payload exceeds the RAM budget; in-RAM search skipped");
  }

  report["streamed_ms"] = median(streamed_ms);
  report["in_ram_ms"] = in_ram_ms.empty() ? json(nullptr) : json(median(in_ram_ms));
  report["samples"] = {{"streamed_ms", streamed_ms}, {"in_ram_ms", in_ram_ms}};
  if (!in_ram_ms.empty() && median(in_ram_ms) > 2.0 * median(streamed_ms))
    warnings.push_back("in-RAM search was more than twice as slow as streamed search");

  if (options.recompute_sample > 0) {
    std::mt19937 rng(12345);
    std::normal_distribution<float> gauss(0.0f, 0.05f);
    std::vector<float> weights(manifest.dims.channels * 16 * 16 * 3);
    for (auto& w : weights) w = gauss(rng);
    const auto t0 = Clock::now();
    for (std::size_t n = 0; n < options.recompute_sample; ++n)
      synthetic_extract(manifest.dims, rng, weights);
    const double per_image = ms_since(t0) / static_cast<double>(options.recompute_sample);
    report["recompute_ms_per_image"] = per_image;
    report["recompute_ms_estimate"] = per_image * static_cast<double>(streamed.image_count());
  }
  report["warnings"] = warnings;
  return report.dump(2);
}

}  // namespace featscan
