#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "featscan/error.hpp"

namespace featscan {

// Spatial extent plus channel count of a feature map.
struct Dims {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 0;

  std::size_t size() const noexcept { return rows * cols * channels; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& dims);

// Dense rows x cols x channels activation tensor for one image, stored
// row-major with the channel index varying fastest.
class FeatureMap {
 public:
  FeatureMap() = default;
  // Throws kInvalidArgument on zero extents, a size mismatch or non-finite
  // values.
  FeatureMap(std::string image_id, Dims dims, std::vector<float> data);

  const std::string& image_id() const noexcept { return image_id_; }
  const Dims& dims() const noexcept { return dims_; }
  std::size_t rows() const noexcept { return dims_.rows; }
  std::size_t cols() const noexcept { return dims_.cols; }
  std::size_t channels() const noexcept { return dims_.channels; }

  float at(std::size_t row, std::size_t col, std::size_t channel) const {
    return data_[(row * dims_.cols + col) * dims_.channels + channel];
  }
  // Channel vector at one spatial position.
  std::span<const float> pixel(std::size_t row, std::size_t col) const {
    return {data_.data() + (row * dims_.cols + col) * dims_.channels,
            dims_.channels};
  }
  std::span<const float> data() const noexcept { return data_; }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::string image_id_;
  Dims dims_;
  std::vector<float> data_;
};

namespace detail {
struct ImageMaskTag {};
struct DownsampledMaskTag {};
}  // namespace detail

// Row-major 2-D weight grid with values in [0, 1]. The tag separates
// full-resolution user masks from masks at feature-map resolution.
template <class Tag>
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows_ == 0 || cols_ == 0)
      fail(ErrorCode::kInvalidArgument, "mask must have positive extents");
    if (data_.size() != rows_ * cols_)
      fail(ErrorCode::kInvalidArgument,
           "mask data length " + std::to_string(data_.size()) +
               " does not match " + std::to_string(rows_) + "x" +
               std::to_string(cols_));
    for (float v : data_)
      if (!(v >= 0.0f && v <= 1.0f))
        fail(ErrorCode::kInvalidArgument, "mask values must lie in [0, 1]");
  }

  static Mask filled(std::size_t rows, std::size_t cols, float value) {
    return Mask(rows, cols, std::vector<float>(rows * cols, value));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  float at(std::size_t row, std::size_t col) const {
    return data_[row * cols_ + col];
  }
  std::span<const float> data() const noexcept { return data_; }

  std::size_t positive_count() const noexcept {
    std::size_t n = 0;
    for (float v : data_) n += v > 0.0f ? 1 : 0;
    return n;
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

using ImageMask = Mask<detail::ImageMaskTag>;
using DownsampledMask = Mask<detail::DownsampledMaskTag>;

// Half-open grid rectangle: rows [row0, row1), cols [col0, col1).
struct BoundingBox {
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t row1 = 0;
  std::size_t col1 = 0;

  std::size_t height() const noexcept { return row1 - row0; }
  std::size_t width() const noexcept { return col1 - col0; }
  std::size_t area() const noexcept { return height() * width(); }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Area-average pooling of a full-resolution mask down to the feature grid.
// Each output cell is the overlap-weighted mean of the input cells its
// footprint covers.
DownsampledMask downsample_mask(const ImageMask& mask, std::size_t target_rows,
                                std::size_t target_cols);

// fmap(i,j,k) * mask(i,j).
FeatureMap apply_mask(const FeatureMap& fmap, const DownsampledMask& mask);

// Channel vectors at every position with mask > 0, concatenated row-major.
// Throws kEmptyQuery when the mask has no positive cell.
std::vector<float> build_query_vector(const FeatureMap& masked,
                                      const DownsampledMask& mask);

// Tight box around the positive mask cells. Throws kEmptyQuery if none.
BoundingBox positive_support(const DownsampledMask& mask);

// Multiplies `masked` by the mask once more and crops it to the positive
// support of the mask.
std::pair<FeatureMap, BoundingBox> crop_nonzero(const FeatureMap& masked,
                                                const DownsampledMask& mask);

}  // namespace featscan
