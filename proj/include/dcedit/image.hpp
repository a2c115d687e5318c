#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dcedit/tensor.hpp"

namespace dcedit {

enum class ValueRange { signed_unit, unsigned_unit };

// Raster [C, H, W] with C in {1, 3}. Internally everything is signed_unit ([-1, 1]).
class Image {
 public:
  Image() = default;
  Image(Tensor data, ValueRange range = ValueRange::signed_unit) : data_(std::move(data)), range_(range) {
    validate();
  }
  Image(int channels, int height, int width, double fill = 0.0, ValueRange range = ValueRange::signed_unit)
      : Image(Tensor({channels, height, width}, fill), range) {}

  const Tensor& tensor() const noexcept { return data_; }
  ValueRange range() const noexcept { return range_; }
  int channels() const { return data_.dim(0); }
  int height() const { return data_.dim(1); }
  int width() const { return data_.dim(2); }
  std::size_t size() const { return data_.size(); }
  double operator()(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x];
  }
  bool same_shape(const Image& o) const { return data_.shape() == o.data_.shape(); }

  Image to_signed() const {
    if (range_ == ValueRange::signed_unit) return *this;
    Tensor t = data_;
    for (double& v : t.values()) v = 2.0 * v - 1.0;
    return Image(std::move(t), ValueRange::signed_unit);
  }
  Image to_unsigned() const {
    if (range_ == ValueRange::unsigned_unit) return *this;
    Tensor t = data_;
    for (double& v : t.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
    return Image(std::move(t), ValueRange::unsigned_unit);
  }

  friend bool operator==(const Image& a, const Image& b) { return a.range_ == b.range_ && a.data_ == b.data_; }

 private:
  void validate() const {
    require(data_.rank() == 3, ErrorCode::shape_mismatch, "image must be [C,H,W], got " + shape_str(data_.shape()));
    require(data_.dim(0) == 1 || data_.dim(0) == 3, ErrorCode::shape_mismatch, "image must have 1 or 3 channels");
    require(data_.all_finite(), ErrorCode::non_finite, "image contains non-finite values");
    const double lo = range_ == ValueRange::signed_unit ? -1.0 : 0.0;
    for (double v : data_.values())
      require(v >= lo && v <= 1.0, ErrorCode::invalid_argument, "image value outside its declared range");
  }

  Tensor data_;
  ValueRange range_ = ValueRange::signed_unit;
};

// Single-channel map in [0, 1].
class ActivationMask {
 public:
  ActivationMask() = default;
  explicit ActivationMask(Tensor data) : data_(std::move(data)) {
    if (data_.rank() == 2) data_ = data_.reshaped({1, data_.dim(0), data_.dim(1)});
    require(data_.rank() == 3 && data_.dim(0) == 1, ErrorCode::shape_mismatch,
            "mask must be [1,h,w], got " + shape_str(data_.shape()));
    for (double v : data_.values())
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::invalid_argument, "mask value outside [0,1]");
  }
  static ActivationMask filled(int height, int width, double value) {
    return ActivationMask(Tensor({1, height, width}, value));
  }

  const Tensor& tensor() const noexcept { return data_; }
  int height() const { return data_.dim(1); }
  int width() const { return data_.dim(2); }
  std::size_t size() const { return data_.size(); }
  double operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width() + x]; }
  double operator[](std::size_t i) const { return data_[i]; }

  friend bool operator==(const ActivationMask& a, const ActivationMask& b) { return a.data_ == b.data_; }

 private:
  Tensor data_;
};

// Stack images into a batch tensor [N, C, H, W].
inline Tensor stack_images(std::span<const Image> images) {
  require(!images.empty(), ErrorCode::invalid_argument, "cannot stack an empty image list");
  const Shape s = images.front().tensor().shape();
  Tensor out({static_cast<int>(images.size()), s[0], s[1], s[2]});
  const std::size_t per = images.front().size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].tensor().shape() == s, ErrorCode::shape_mismatch, "batch images differ in shape");
    std::copy_n(images[i].tensor().data(), per, out.data() + i * per);
  }
  return out;
}

// Slice n of a batch tensor as an Image, clamping into [-1, 1].
inline Image unstack_image(const Tensor& batch, int n) {
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  Tensor t({c, h, w});
  for (std::size_t i = 0; i < per; ++i) t[i] = std::clamp(batch[n * per + i], -1.0, 1.0);
  return Image(std::move(t));
}

// Box-filter downsampling by an integer factor (exact area average).
inline Tensor downsample_area(const Tensor& chw, int factor) {
  require(chw.rank() == 3 && factor >= 1, ErrorCode::invalid_argument, "downsample_area expects [C,H,W]");
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  require(h % factor == 0 && w % factor == 0, ErrorCode::shape_mismatch, "resolution not divisible by factor");
  const int ho = h / factor, wo = w / factor;
  Tensor out({c, ho, wo});
  const double norm = 1.0 / (factor * factor);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::size_t>(ci) * ho + y / factor) * wo + x / factor] +=
            norm * chw[(static_cast<std::size_t>(ci) * h + y) * w + x];
  return out;
}

inline Image downsample_area(const Image& img, int factor) {
  Tensor t = downsample_area(img.tensor(), factor);
  for (double& v : t.values()) v = std::clamp(v, -1.0, 1.0);
  return Image(std::move(t), img.range());
}

// Bilinear resampling with half-pixel centers and edge clamping (align_corners = false).
inline Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
  require(chw.rank() == 3 && out_h > 0 && out_w > 0, ErrorCode::invalid_argument, "resize_bilinear expects [C,H,W]");
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out({c, out_h, out_w});
  auto source = [](int o, int in, int out_n, int& i0, int& i1, double& frac) {
    double s = (o + 0.5) * static_cast<double>(in) / out_n - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    frac = s - i0;
  };
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double fy;
    source(y, h, out_h, y0, y1, fy);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double fx;
      source(x, w, out_w, x0, x1, fx);
      for (int ci = 0; ci < c; ++ci) {
        auto at = [&](int yy, int xx) { return chw[(static_cast<std::size_t>(ci) * h + yy) * w + xx]; };
        const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
        const double bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
        out[(static_cast<std::size_t>(ci) * out_h + y) * out_w + x] = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

}  // namespace dcedit
