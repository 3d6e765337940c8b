#include <algorithm>
#include <cmath>
#include <random>

#include "ebnet/data/augment.hpp"

namespace ebnet::data {

namespace {

void check_norm(const Tensor<float>& img, const Normalization& n) {
  const auto c = static_cast<std::size_t>(img.shape().c);
  if (n.mean.size() != c || n.std.size() != c) throw ShapeError("normalization channel count mismatch");
  for (double s : n.std)
    if (!(s > 0)) throw ConfigError("normalization std must be positive");
}

}  // namespace

Tensor<float> normalize(const Tensor<float>& img, const Normalization& n) {
  check_norm(img, n);
  Tensor<float> out(img.shape());
  const Shape4& s = img.shape();
  for (Index b = 0; b < s.n; ++b)
    for (Index c = 0; c < s.c; ++c)
      out.sample_matrix(b).row(c) =
          ((img.sample_matrix(b).row(c).array().template cast<double>() - n.mean[c]) / n.std[c]).template cast<float>();
  return out;
}

Tensor<float> denormalize(const Tensor<float>& img, const Normalization& n) {
  check_norm(img, n);
  Tensor<float> out(img.shape());
  const Shape4& s = img.shape();
  for (Index b = 0; b < s.n; ++b)
    for (Index c = 0; c < s.c; ++c)
      out.sample_matrix(b).row(c) =
          (img.sample_matrix(b).row(c).array().template cast<double>() * n.std[c] + n.mean[c]).template cast<float>();
  return out;
}

Tensor<float> hflip(const Tensor<float>& img) {
  const Shape4& s = img.shape();
  Tensor<float> out(s);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index y = 0; y < s.h; ++y)
        for (Index x = 0; x < s.w; ++x) out.at(n, c, y, x) = img.at(n, c, y, s.w - 1 - x);
  return out;
}

Tensor<float> reflect_pad(const Tensor<float>& img, Index pad) {
  const Shape4& s = img.shape();
  if (pad >= s.h || pad >= s.w) throw ShapeError("reflect padding larger than the image");
  const auto reflect = [](Index i, Index len) {
    if (i < 0) return -i;
    if (i >= len) return 2 * (len - 1) - i;
    return i;
  };
  Tensor<float> out({s.n, s.c, s.h + 2 * pad, s.w + 2 * pad});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index y = 0; y < s.h + 2 * pad; ++y)
        for (Index x = 0; x < s.w + 2 * pad; ++x)
          out.at(n, c, y, x) = img.at(n, c, reflect(y - pad, s.h), reflect(x - pad, s.w));
  return out;
}

Tensor<float> crop(const Tensor<float>& img, Index top, Index left, Index h, Index w) {
  const Shape4& s = img.shape();
  if (top < 0 || left < 0 || top + h > s.h || left + w > s.w || h < 1 || w < 1)
    throw ShapeError("crop window outside the image");
  Tensor<float> out({s.n, s.c, h, w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out.at(n, c, y, x) = img.at(n, c, top + y, left + x);
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& img, Index h, Index w) {
  const Shape4& s = img.shape();
  Tensor<float> out({s.n, s.c, h, w});
  const double sy = double(s.h) / double(h), sx = double(s.w) / double(w);
  for (Index y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(s.h - 1));
    const auto y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, s.h - 1);
    const double ay = fy - double(y0);
    for (Index x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(s.w - 1));
      const auto x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, s.w - 1);
      const double ax = fx - double(x0);
      for (Index n = 0; n < s.n; ++n)
        for (Index c = 0; c < s.c; ++c) {
          const double top = img.at(n, c, y0, x0) * (1 - ax) + img.at(n, c, y0, x1) * ax;
          const double bot = img.at(n, c, y1, x0) * (1 - ax) + img.at(n, c, y1, x1) * ax;
          out.at(n, c, y, x) = static_cast<float>(top * (1 - ay) + bot * ay);
        }
    }
  }
  return out;
}

Tensor<float> resize_short_side(const Tensor<float>& img, Index side) {
  const Shape4& s = img.shape();
  if (s.h <= s.w) return resize_bilinear(img, side, std::max<Index>(1, (s.w * side + s.h / 2) / s.h));
  return resize_bilinear(img, std::max<Index>(1, (s.h * side + s.w / 2) / s.w), side);
}

Tensor<float> center_crop(const Tensor<float>& img, Index h, Index w) {
  const Shape4& s = img.shape();
  return crop(img, (s.h - h) / 2, (s.w - w) / 2, h, w);
}

Tensor<float> augment_cifar(const Tensor<float>& img, Rng& rng, double flip_p) {
  const Shape4& s = img.shape();
  const Tensor<float> padded = reflect_pad(img, 4);
  std::uniform_int_distribution<Index> off(0, 8);
  const Index top = off(rng);
  const Index left = off(rng);
  Tensor<float> out = crop(padded, top, left, s.h, s.w);
  std::bernoulli_distribution flip(flip_p);
  return flip(rng) ? hflip(out) : out;
}

Tensor<float> augment_imagenet(const Tensor<float>& img, Rng& rng, Index size) {
  const Shape4& s = img.shape();
  const double area = double(s.h * s.w);
  std::uniform_real_distribution<double> scale(0.08, 1.0);
  std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  Index ch = 0, cw = 0, top = 0, left = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const auto w = static_cast<Index>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<Index>(std::lround(std::sqrt(target / ratio)));
    if (w >= 1 && h >= 1 && w <= s.w && h <= s.h) {
      ch = h;
      cw = w;
      top = std::uniform_int_distribution<Index>(0, s.h - h)(rng);
      left = std::uniform_int_distribution<Index>(0, s.w - w)(rng);
      found = true;
      break;
    }
  }
  if (!found) {  // central square
    ch = cw = std::min(s.h, s.w);
    top = (s.h - ch) / 2;
    left = (s.w - cw) / 2;
  }
  Tensor<float> out = resize_bilinear(crop(img, top, left, ch, cw), size, size);
  std::bernoulli_distribution flip(0.5);
  return flip(rng) ? hflip(out) : out;
}

Tensor<float> eval_imagenet(const Tensor<float>& img) { return center_crop(resize_short_side(img, 256), 224, 224); }

}  // namespace ebnet::data
