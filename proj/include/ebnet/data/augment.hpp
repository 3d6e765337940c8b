#pragma once

#include <vector>

#include "ebnet/rng.hpp"
#include "ebnet/tensor.hpp"

namespace ebnet::data {

struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;
};

/// (x - mean) / std per channel; throws ConfigError on a non-positive std.
Tensor<float> normalize(const Tensor<float>& img, const Normalization& n);
Tensor<float> denormalize(const Tensor<float>& img, const Normalization& n);

Tensor<float> hflip(const Tensor<float>& img);
Tensor<float> reflect_pad(const Tensor<float>& img, Index pad);
Tensor<float> crop(const Tensor<float>& img, Index top, Index left, Index h, Index w);
Tensor<float> resize_bilinear(const Tensor<float>& img, Index h, Index w);
Tensor<float> resize_short_side(const Tensor<float>& img, Index side);
Tensor<float> center_crop(const Tensor<float>& img, Index h, Index w);

/// Reflect-pad 4, random 32x32 crop, horizontal flip with probability p.
Tensor<float> augment_cifar(const Tensor<float>& img, Rng& rng, double flip_p = 0.5);
/// Random-resized crop (scale 0.08..1, aspect 3/4..4/3) to `size`, then flip.
Tensor<float> augment_imagenet(const Tensor<float>& img, Rng& rng, Index size = 224);
/// Resize short side to 256, center-crop 224.
Tensor<float> eval_imagenet(const Tensor<float>& img);

}  // namespace ebnet::data
