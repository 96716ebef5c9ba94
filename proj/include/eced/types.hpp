// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eced/autograd.hpp"
#include "eced/errors.hpp"
#include "eced/tensor.hpp"

namespace eced {

inline constexpr int kImageChannels = 3;
inline constexpr int kLatentChannels = 4;

// Pixel-space image, intensities in [0, 1]. Stored channel-major (3 x H x W).
template <typename T>
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, T fill = T(0)) : data_({kImageChannels, height, width}, fill) { check(); }
  explicit ImageTensor(Tensor<T> chw) : data_(std::move(chw)) { check(); }

  int height() const { return data_.dim(1); }
  int width() const { return data_.dim(2); }
  std::size_t size() const { return data_.size(); }

  T& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x]; }
  const T& at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x];
  }
  const Tensor<T>& tensor() const { return data_; }
  Tensor<T>& mutable_tensor() { return data_; }

  // [1, 3, H, W] batch of one.
  Tensor<T> batch() const { return data_.reshaped({1, kImageChannels, height(), width()}); }

  friend bool operator==(const ImageTensor& a, const ImageTensor& b) { return a.data_ == b.data_; }

 private:
  void check() const {
    if (data_.rank() != 3 || data_.dim(0) != kImageChannels)
      throw ShapeError("ImageTensor expects 3 x H x W, got " + shape_str(data_.shape()));
    if (data_.dim(1) <= 0 || data_.dim(2) <= 0) throw ShapeError("ImageTensor: empty image");
    for (T v : data_.values())
      if (!(v >= T(0) && v <= T(1))) throw DomainError("ImageTensor: intensity outside [0,1]");
  }

  Tensor<T> data_;
};

// VAE latent, 4 x H2 x W2, unbounded reals.
template <typename T>
class LatentTensor {
 public:
  LatentTensor() = default;
  LatentTensor(int height, int width, T fill = T(0)) : data_({kLatentChannels, height, width}, fill) {}
  explicit LatentTensor(Tensor<T> chw) : data_(std::move(chw)) {
    if (data_.rank() == 4 && data_.dim(0) == 1) data_ = data_.reshaped({data_.dim(1), data_.dim(2), data_.dim(3)});
    if (data_.rank() != 3 || data_.dim(0) != kLatentChannels)
      throw ShapeError("LatentTensor expects 4 x H2 x W2, got " + shape_str(data_.shape()));
  }

  int height() const { return data_.dim(1); }
  int width() const { return data_.dim(2); }
  std::size_t size() const { return data_.size(); }
  T& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x]; }
  const T& at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x];
  }
  const Tensor<T>& tensor() const { return data_; }
  Tensor<T>& mutable_tensor() { return data_; }
  Tensor<T> batch() const { return data_.reshaped({1, kLatentChannels, height(), width()}); }

  friend bool operator==(const LatentTensor& a, const LatentTensor& b) { return a.data_ == b.data_; }

 private:
  Tensor<T> data_;
};

// Class attention map U, H x W, values in [0, 1].
struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
};

// Foreground (1) / background (0) partition of an H x W grid.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;
  double threshold = 0.0;  // xi that produced the mask, when thresholded

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
  std::size_t background_count() const { return data.size() - foreground_count(); }

  // Flat (row-major) indices of the foreground set F and background set B.
  std::vector<std::size_t> foreground() const { return indices(1); }
  std::vector<std::size_t> background() const { return indices(0); }

  // 0/1 map as a tensor of the requested scalar type.
  template <typename T>
  Tensor<T> as_tensor() const {
    Tensor<T> t({height, width});
    for (std::size_t i = 0; i < data.size(); ++i) t[i] = static_cast<T>(data[i]);
    return t;
  }
  template <typename T>
  Tensor<T> complement_tensor() const {
    Tensor<T> t({height, width});
    for (std::size_t i = 0; i < data.size(); ++i) t[i] = static_cast<T>(1 - data[i]);
    return t;
  }

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.height == b.height && a.width == b.width && a.data == b.data;
  }

 private:
  std::vector<std::size_t> indices(std::uint8_t v) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data[i] == v) out.push_back(i);
    return out;
  }
};

// Latent-grid mask M'. Same representation as the pixel mask at latent resolution.
struct LatentMask : BinaryMask {
  using BinaryMask::BinaryMask;
};

template <typename T>
Tensor<T> stack_images(const std::vector<ImageTensor<T>>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty list");
  const int H = images[0].height(), W = images[0].width();
  Tensor<T> out({static_cast<int>(images.size()), kImageChannels, H, W});
  const std::size_t per = images[0].size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height() != H || images[i].width() != W) throw ShapeError("stack_images: mixed sizes");
    std::copy_n(images[i].tensor().data(), per, out.data() + i * per);
  }
  return out;
}

// Converts a [N, 3, H, W] batch element to an image, clamping tiny excursions from [0, 1].
template <typename T>
ImageTensor<T> image_from_batch(const Tensor<T>& batch, int n) {
  const int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  if (C != kImageChannels) throw ShapeError("image_from_batch: channel count " + std::to_string(C));
  Tensor<T> chw({C, H, W});
  const std::size_t per = chw.size();
  for (std::size_t i = 0; i < per; ++i) chw[i] = std::clamp(batch[n * per + i], T(0), T(1));
  return ImageTensor<T>(std::move(chw));
}

}  // namespace eced
