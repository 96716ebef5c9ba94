// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>

#include "eced/kv.hpp"
#include "eced/nn.hpp"
#include "eced/types.hpp"

namespace eced {

struct VaeArch {
  int enc0 = 16, enc1 = 32, enc2 = 32, enc3 = 64;
  int dec0 = 64, dec1 = 32, dec2 = 16, dec3 = 16;

  KeyValues to_kv() const {
    return {{"enc0", std::to_string(enc0)}, {"enc1", std::to_string(enc1)}, {"enc2", std::to_string(enc2)},
            {"enc3", std::to_string(enc3)}, {"dec0", std::to_string(dec0)}, {"dec1", std::to_string(dec1)},
            {"dec2", std::to_string(dec2)}, {"dec3", std::to_string(dec3)}};
  }
  static VaeArch from_kv(const KeyValues& kv) {
    VaeArch a;
    a.enc0 = kv_int(kv, "enc0");
    a.enc1 = kv_int(kv, "enc1");
    a.enc2 = kv_int(kv, "enc2");
    a.enc3 = kv_int(kv, "enc3");
    a.dec0 = kv_int(kv, "dec0");
    a.dec1 = kv_int(kv, "dec1");
    a.dec2 = kv_int(kv, "dec2");
    a.dec3 = kv_int(kv, "dec3");
    return a;
  }
  // Small widths for finite-difference checks.
  static VaeArch miniature() { return {4, 4, 4, 4, 4, 4, 4, 4}; }
};

// Latent -> image. Output passes through a sigmoid, so every pixel lies in (0, 1).
template <typename T>
struct Decoder {
  nn::Conv2d<T> conv_in, conv_mid, up1, up2, up3, conv_out;
  T latent_scale = T(1);

  Decoder() = default;
  Decoder(const VaeArch& a, Rng& rng)
      : conv_in(kLatentChannels, a.dec0, 3, rng),
        conv_mid(a.dec0, a.dec0, 3, rng),
        up1(a.dec0, a.dec1, 3, rng),
        up2(a.dec1, a.dec2, 3, rng),
        up3(a.dec2, a.dec3, 3, rng),
        conv_out(a.dec3, kImageChannels, 3, rng, 1, 1.0) {}

  // z: [N, 4, h, w] scaled latent -> [N, 3, 8h, 8w]
  Var<T> operator()(const Var<T>& z) const {
    if (z.shape().size() != 4 || z.dim(1) != kLatentChannels)
      throw ShapeError("decode expects [N,4,h,w], got " + shape_str(z.shape()));
    Var<T> h = latent_scale == T(1) ? z : ops::scale(z, T(1) / latent_scale);
    h = ops::silu(conv_in(h));
    h = ops::silu(conv_mid(h));
    h = ops::silu(up1(ops::upsample2x(h)));
    h = ops::silu(up2(ops::upsample2x(h)));
    h = ops::silu(up3(ops::upsample2x(h)));
    return ops::sigmoid(conv_out(h));
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    conv_in.visit(p + "dec.conv_in", f);
    conv_mid.visit(p + "dec.conv_mid", f);
    up1.visit(p + "dec.up1", f);
    up2.visit(p + "dec.up2", f);
    up3.visit(p + "dec.up3", f);
    conv_out.visit(p + "dec.conv_out", f);
  }
};

template <typename T>
struct Encoder {
  nn::Conv2d<T> conv_in, down1, down2, down3, conv_out;

  Encoder() = default;
  Encoder(const VaeArch& a, Rng& rng)
      : conv_in(kImageChannels, a.enc0, 3, rng),
        down1(a.enc0, a.enc1, 3, rng, 2),
        down2(a.enc1, a.enc2, 3, rng, 2),
        down3(a.enc2, a.enc3, 3, rng, 2),
        conv_out(a.enc3, 2 * kLatentChannels, 3, rng, 1, 1.0) {}

  // x: [N, 3, H, W] -> (mean, logvar), each [N, 4, H/8, W/8], before latent scaling.
  std::pair<Var<T>, Var<T>> operator()(const Var<T>& x) const {
    Var<T> h = ops::silu(conv_in(x));
    h = ops::silu(down1(h));
    h = ops::silu(down2(h));
    h = ops::silu(down3(h));
    Var<T> stats = conv_out(h);
    return {ops::slice_channels(stats, 0, kLatentChannels),
            ops::slice_channels(stats, kLatentChannels, 2 * kLatentChannels)};
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    conv_in.visit(p + "enc.conv_in", f);
    down1.visit(p + "enc.down1", f);
    down2.visit(p + "enc.down2", f);
    down3.visit(p + "enc.down3", f);
    conv_out.visit(p + "enc.conv_out", f);
  }
};

template <typename T>
struct VaeModel {
  static constexpr int kFactor = 8;

  VaeArch arch;
  Encoder<T> encoder;
  Decoder<T> decoder;
  T latent_scale = T(1);

  VaeModel() = default;
  VaeModel(const VaeArch& a, Rng& rng) : arch(a), encoder(a, rng), decoder(a, rng) {}

  int factor() const { return kFactor; }

  void set_latent_scale(T s) {
    latent_scale = s;
    decoder.latent_scale = s;
  }

  static void check_image_dims(int h, int w) {
    if (h <= 0 || w <= 0 || h % kFactor || w % kFactor)
      throw ShapeError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not a positive multiple of the VAE factor 8");
  }

  // Posterior mean, scaled; differentiable in x.
  Var<T> encode_batch(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != kImageChannels)
      throw ShapeError("encode expects [N,3,H,W], got " + shape_str(x.shape()));
    check_image_dims(x.dim(2), x.dim(3));
    auto [mu, logvar] = encoder(x);
    (void)logvar;
    return latent_scale == T(1) ? mu : ops::scale(mu, latent_scale);
  }

  LatentTensor<T> encode(const ImageTensor<T>& image) const {
    check_image_dims(image.height(), image.width());
    NoGradGuard ng;
    return LatentTensor<T>(encode_batch(Var<T>(image.batch())).value());
  }

  Var<T> decode_batch(const Var<T>& z) const { return decoder(z); }

  ImageTensor<T> decode(const LatentTensor<T>& z) const {
    NoGradGuard ng;
    return image_from_batch(decoder(Var<T>(z.batch())).value(), 0);
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    encoder.visit(p, f);
    decoder.visit(p, f);
  }
};

}  // namespace eced
