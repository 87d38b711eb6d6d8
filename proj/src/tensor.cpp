#include "featscan/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace featscan {

std::string to_string(const Dims& dims) {
  return std::to_string(dims.rows) + "x" + std::to_string(dims.cols) + "x" +
         std::to_string(dims.channels);
}

FeatureMap::FeatureMap(std::string image_id, Dims dims, std::vector<float> data)
    : image_id_(std::move(image_id)), dims_(dims), data_(std::move(data)) {
  if (dims_.rows == 0 || dims_.cols == 0 || dims_.channels == 0)
    fail(ErrorCode::kInvalidArgument,
         "feature map '" + image_id_ + "' has a zero extent");
  if (data_.size() != dims_.size())
    fail(ErrorCode::kInvalidArgument,
         "feature map '" + image_id_ + "' holds " +
             std::to_string(data_.size()) + " values, expected " +
             std::to_string(dims_.size()));
  for (float v : data_)
    if (!std::isfinite(v))
      fail(ErrorCode::kInvalidArgument,
           "feature map '" + image_id_ + "' contains a non-finite value");
}

namespace {

// weights[out][in] for pooling `source` cells into `target` cells, stored as
// a dense target x source matrix. Row sums are exactly normalised to one.
std::vector<double> pooling_weights(std::size_t source, std::size_t target) {
  std::vector<double> weights(target * source, 0.0);
  const double scale = static_cast<double>(source) / static_cast<double>(target);
  for (std::size_t out = 0; out < target; ++out) {
    const double lo = static_cast<double>(out) * scale;
    const double hi = static_cast<double>(out + 1) * scale;
    double total = 0.0;
    const auto first = static_cast<std::size_t>(std::floor(lo));
    const auto last = std::min(source, static_cast<std::size_t>(std::ceil(hi)));
    for (std::size_t in = first; in < last; ++in) {
      const double overlap = std::min(hi, static_cast<double>(in + 1)) -
                             std::max(lo, static_cast<double>(in));
      if (overlap > 0.0) {
        weights[out * source + in] = overlap;
        total += overlap;
      }
    }
    for (std::size_t in = first; in < last; ++in) weights[out * source + in] /= total;
  }
  return weights;
}

}  // namespace

DownsampledMask downsample_mask(const ImageMask& mask, std::size_t target_rows,
                                std::size_t target_cols) {
  if (target_rows == 0 || target_cols == 0)
    fail(ErrorCode::kInvalidArgument, "target mask extents must be positive");
  if (target_rows > mask.rows() || target_cols > mask.cols())
    fail(ErrorCode::kInvalidArgument,
         "cannot downsample a " + std::to_string(mask.rows()) + "x" +
             std::to_string(mask.cols()) + " mask to " +
             std::to_string(target_rows) + "x" + std::to_string(target_cols));

  const std::size_t src_rows = mask.rows();
  const std::size_t src_cols = mask.cols();
  const auto row_w = pooling_weights(src_rows, target_rows);
  const auto col_w = pooling_weights(src_cols, target_cols);

  // Pool along rows first, then along columns.
  std::vector<double> partial(target_rows * src_cols, 0.0);
  for (std::size_t r = 0; r < target_rows; ++r)
    for (std::size_t i = 0; i < src_rows; ++i) {
      const double w = row_w[r * src_rows + i];
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < src_cols; ++j)
        partial[r * src_cols + j] += w * mask.at(i, j);
    }

  std::vector<float> out(target_rows * target_cols);
  for (std::size_t r = 0; r < target_rows; ++r)
    for (std::size_t c = 0; c < target_cols; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < src_cols; ++j) {
        const double w = col_w[c * src_cols + j];
        if (w != 0.0) acc += w * partial[r * src_cols + j];
      }
      out[r * target_cols + c] = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
    }
  return DownsampledMask(target_rows, target_cols, std::move(out));
}

namespace {

void require_same_grid(const FeatureMap& fmap, const DownsampledMask& mask) {
  if (fmap.rows() != mask.rows() || fmap.cols() != mask.cols())
    fail(ErrorCode::kInvalidArgument,
         "mask " + std::to_string(mask.rows()) + "x" +
             std::to_string(mask.cols()) + " does not match feature map " +
             to_string(fmap.dims()));
}

}  // namespace

FeatureMap apply_mask(const FeatureMap& fmap, const DownsampledMask& mask) {
  require_same_grid(fmap, mask);
  const std::size_t depth = fmap.channels();
  std::vector<float> out(fmap.data().begin(), fmap.data().end());
  for (std::size_t i = 0; i < fmap.rows(); ++i)
    for (std::size_t j = 0; j < fmap.cols(); ++j) {
      const float m = mask.at(i, j);
      float* px = out.data() + (i * fmap.cols() + j) * depth;
      for (std::size_t k = 0; k < depth; ++k) px[k] *= m;
    }
  return FeatureMap(fmap.image_id(), fmap.dims(), std::move(out));
}

std::vector<float> build_query_vector(const FeatureMap& masked,
                                      const DownsampledMask& mask) {
  require_same_grid(masked, mask);
  const std::size_t active = mask.positive_count();
  if (active == 0) fail(ErrorCode::kEmptyQuery, "mask has no positive cell");
  std::vector<float> q;
  q.reserve(active * masked.channels());
  for (std::size_t i = 0; i < masked.rows(); ++i)
    for (std::size_t j = 0; j < masked.cols(); ++j)
      if (mask.at(i, j) > 0.0f) {
        const auto px = masked.pixel(i, j);
        q.insert(q.end(), px.begin(), px.end());
      }
  return q;
}

BoundingBox positive_support(const DownsampledMask& mask) {
  BoundingBox box{mask.rows(), mask.cols(), 0, 0};
  for (std::size_t i = 0; i < mask.rows(); ++i)
    for (std::size_t j = 0; j < mask.cols(); ++j)
      if (mask.at(i, j) > 0.0f) {
        box.row0 = std::min(box.row0, i);
        box.col0 = std::min(box.col0, j);
        box.row1 = std::max(box.row1, i + 1);
        box.col1 = std::max(box.col1, j + 1);
      }
  if (box.row1 == 0) fail(ErrorCode::kEmptyQuery, "mask has no positive cell");
  return box;
}

std::pair<FeatureMap, BoundingBox> crop_nonzero(const FeatureMap& masked,
                                                const DownsampledMask& mask) {
  require_same_grid(masked, mask);
  const BoundingBox box = positive_support(mask);
  const std::size_t depth = masked.channels();
  std::vector<float> out;
  out.reserve(box.area() * depth);
  for (std::size_t i = box.row0; i < box.row1; ++i)
    for (std::size_t j = box.col0; j < box.col1; ++j) {
      const float m = mask.at(i, j);
      for (float v : masked.pixel(i, j)) out.push_back(v * m);
    }
  return {FeatureMap(masked.image_id(), Dims{box.height(), box.width(), depth},
                     std::move(out)),
          box};
}

}  // namespace featscan
