#include "nlvt/augmix.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace nlvt {

namespace {

struct Dims {
  std::size_t c, h, w;
};

Dims dims_of(const Image& img) { return {img.dim(0), img.dim(1), img.dim(2)}; }

int quantize(double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Inverse-mapped resampling: out(x, y) = img(src(x, y)), bilinear, zero outside.
template <typename Map>
Image resample(const Image& img, Map&& src_of) {
  const Dims d = dims_of(img);
  Image out(img.shape());
  auto o = out.mutable_data();
  auto in = img.data();
  const auto pixel = [&](std::size_t c, long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(d.h) || x >= static_cast<long>(d.w)) return 0.0;
    return in[(c * d.h + static_cast<std::size_t>(y)) * d.w + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < d.h; ++y) {
    for (std::size_t x = 0; x < d.w; ++x) {
      const auto [sx, sy] = src_of(static_cast<double>(x), static_cast<double>(y));
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t c = 0; c < d.c; ++c) {
        double v = (1 - ay) * ((1 - ax) * pixel(c, y0, x0) + (ax ? ax * pixel(c, y0, x0 + 1) : 0.0));
        if (ay) v += ay * ((1 - ax) * pixel(c, y0 + 1, x0) + (ax ? ax * pixel(c, y0 + 1, x0 + 1) : 0.0));
        o[(c * d.h + y) * d.w + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

template <typename F>
Image map_values(const Image& img, F&& f) {
  Image out(img.shape());
  auto o = out.mutable_data();
  auto in = img.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
  return out;
}

double sample_level(int severity, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.1, static_cast<double>(severity));
  return dist(rng);
}

double random_sign(Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  return coin(rng) ? -1.0 : 1.0;
}

}  // namespace

void require_unit_range(const Image& img, const char* what) {
  if (img.rank() != 3) {
    throw ContractError(std::string(what) + ": expected a [C, H, W] image, got " +
                        shape_str(img.shape()));
  }
  for (double v : img.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError(std::string(what) + ": pixel value " + std::to_string(v) +
                          " outside [0, 1]");
    }
  }
}

const std::array<AugOp, 9>& all_aug_ops() {
  static const std::array<AugOp, 9> ops{AugOp::autocontrast, AugOp::equalize,   AugOp::posterize,
                                        AugOp::solarize,     AugOp::rotate,     AugOp::shear_x,
                                        AugOp::shear_y,      AugOp::translate_x, AugOp::translate_y};
  return ops;
}

std::string aug_op_name(AugOp op) {
  switch (op) {
    case AugOp::autocontrast: return "autocontrast";
    case AugOp::equalize: return "equalize";
    case AugOp::posterize: return "posterize";
    case AugOp::solarize: return "solarize";
    case AugOp::rotate: return "rotate";
    case AugOp::shear_x: return "shear-x";
    case AugOp::shear_y: return "shear-y";
    case AugOp::translate_x: return "translate-x";
    case AugOp::translate_y: return "translate-y";
  }
  return "?";
}

AugOp parse_aug_op(const std::string& name) {
  for (AugOp op : all_aug_ops()) {
    if (aug_op_name(op) == name) return op;
  }
  throw ConfigError("unknown augmentation op '" + name + "'");
}

namespace augment {

Image autocontrast(const Image& img) {
  const Dims d = dims_of(img);
  Image out = img.clone();
  auto o = out.mutable_data();
  const std::size_t plane = d.h * d.w;
  for (std::size_t c = 0; c < d.c; ++c) {
    auto ch = o.subspan(c * plane, plane);
    const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
    const double lo_v = *lo, hi_v = *hi;
    if (hi_v <= lo_v) continue;
    for (double& v : ch) v = (v - lo_v) / (hi_v - lo_v);
  }
  return out;
}

Image equalize(const Image& img) {
  const Dims d = dims_of(img);
  Image out(img.shape());
  auto o = out.mutable_data();
  auto in = img.data();
  const std::size_t plane = d.h * d.w;
  for (std::size_t c = 0; c < d.c; ++c) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < plane; ++i) ++hist[quantize(in[c * plane + i])];
    // Cumulative lookup table; the topmost occupied bin is excluded from the step.
    std::size_t last = 0;
    for (std::size_t b = 0; b < 256; ++b) {
      if (hist[b]) last = hist[b];
    }
    const std::size_t step = (plane - last) / 255;
    std::array<int, 256> lut{};
    if (step == 0) {
      for (int b = 0; b < 256; ++b) lut[b] = b;
    } else {
      std::size_t n = step / 2;
      for (std::size_t b = 0; b < 256; ++b) {
        lut[b] = static_cast<int>(std::min<std::size_t>(n / step, 255));
        n += hist[b];
      }
    }
    for (std::size_t i = 0; i < plane; ++i) {
      o[c * plane + i] = lut[quantize(in[c * plane + i])] / 255.0;
    }
  }
  return out;
}

Image posterize(const Image& img, int bits) {
  bits = std::clamp(bits, 0, 8);
  const int mask = (0xFF << (8 - bits)) & 0xFF;
  return map_values(img, [mask](double v) { return (quantize(v) & mask) / 255.0; });
}

Image solarize(const Image& img, double threshold) {
  return map_values(img, [threshold](double v) { return v > threshold ? 1.0 - v : v; });
}

Image rotate(const Image& img, double degrees) {
  if (degrees == 0.0) return img.clone();
  const Dims d = dims_of(img);
  const double cx = (static_cast<double>(d.w) - 1) / 2, cy = (static_cast<double>(d.h) - 1) / 2;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  // Counter-clockwise on screen: sample the source at the inverse rotation.
  return resample(img, [&](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    return std::pair{cs * dx - sn * dy + cx, sn * dx + cs * dy + cy};
  });
}

Image shear_x(const Image& img, double factor) {
  const double cy = (static_cast<double>(img.dim(1)) - 1) / 2;
  return resample(img, [&](double x, double y) { return std::pair{x + factor * (y - cy), y}; });
}

Image shear_y(const Image& img, double factor) {
  const double cx = (static_cast<double>(img.dim(2)) - 1) / 2;
  return resample(img, [&](double x, double y) { return std::pair{x, y + factor * (x - cx)}; });
}

Image translate_x(const Image& img, double pixels) {
  return resample(img, [&](double x, double y) { return std::pair{x - pixels, y}; });
}

Image translate_y(const Image& img, double pixels) {
  return resample(img, [&](double x, double y) { return std::pair{x, y - pixels}; });
}

}  // namespace augment

double sample_magnitude(AugOp op, int severity, std::size_t image_side, Rng& rng) {
  switch (op) {
    case AugOp::autocontrast:
    case AugOp::equalize:
      return 0.0;
    case AugOp::posterize:
      return 4.0 - std::floor(sample_level(severity, rng) * 4.0 / 10.0);
    case AugOp::solarize:
      return (256.0 - std::floor(sample_level(severity, rng) * 256.0 / 10.0)) / 256.0;
    case AugOp::rotate: {
      const double deg = std::floor(sample_level(severity, rng) * 30.0 / 10.0);
      return deg * random_sign(rng);
    }
    case AugOp::shear_x:
    case AugOp::shear_y: {
      const double f = sample_level(severity, rng) * 0.3 / 10.0;
      return f * random_sign(rng);
    }
    case AugOp::translate_x:
    case AugOp::translate_y: {
      const double limit = static_cast<double>(image_side) / 3.0;
      const double px = std::floor(sample_level(severity, rng) * limit / 10.0);
      return px * random_sign(rng);
    }
  }
  return 0.0;
}

Image apply_op_magnitude(const Image& img, AugOp op, double magnitude) {
  switch (op) {
    case AugOp::autocontrast: return augment::autocontrast(img);
    case AugOp::equalize: return augment::equalize(img);
    case AugOp::posterize: return augment::posterize(img, static_cast<int>(magnitude));
    case AugOp::solarize: return augment::solarize(img, magnitude);
    case AugOp::rotate: return augment::rotate(img, magnitude);
    case AugOp::shear_x: return augment::shear_x(img, magnitude);
    case AugOp::shear_y: return augment::shear_y(img, magnitude);
    case AugOp::translate_x: return augment::translate_x(img, magnitude);
    case AugOp::translate_y: return augment::translate_y(img, magnitude);
  }
  throw ConfigError("unknown augmentation op");
}

Image apply_op(const Image& img, AugOp op, int severity, Rng& rng) {
  require_unit_range(img, "apply_op");
  return apply_op_magnitude(img, op, sample_magnitude(op, severity, img.dim(2), rng));
}

std::vector<double> sample_dirichlet(std::size_t k, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> w(k);
  double total = 0.0;
  // A draw of all zeros can only happen through underflow at tiny alpha; redraw.
  while (!(total > 0.0)) {
    total = 0.0;
    for (double& v : w) {
      v = gamma(rng);
      total += v;
    }
  }
  for (double& v : w) v /= total;
  return w;
}

double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  double x = 0.0, y = 0.0;
  while (!(x + y > 0.0)) {
    x = ga(rng);
    y = gb(rng);
  }
  return x / (x + y);
}

AugmixPlan sample_augmix_plan(const AugmixConfig& cfg, std::size_t image_side, Rng& rng) {
  cfg.validate();
  AugmixPlan plan;
  plan.chain_weights = sample_dirichlet(cfg.width, cfg.alpha, rng);
  plan.skip_weight = sample_beta(cfg.alpha, cfg.alpha, rng);
  const auto& ops = all_aug_ops();
  std::uniform_int_distribution<std::size_t> depth_dist(1, cfg.max_depth);
  std::uniform_int_distribution<std::size_t> op_dist(0, ops.size() - 1);
  plan.chains.resize(cfg.width);
  for (auto& chain : plan.chains) {
    const std::size_t depth = depth_dist(rng);
    for (std::size_t i = 0; i < depth; ++i) {
      const AugOp op = ops[op_dist(rng)];
      chain.push_back({op, sample_magnitude(op, cfg.severity, image_side, rng)});
    }
  }
  return plan;
}

Image apply_augmix_plan(const Image& img, const AugmixPlan& plan) {
  require_unit_range(img, "augmix");
  if (plan.chain_weights.size() != plan.chains.size()) {
    throw ContractError("augmix: one weight per chain required");
  }
  std::vector<double> mix(img.numel(), 0.0);
  for (std::size_t i = 0; i < plan.chains.size(); ++i) {
    Image aug = img;
    for (const auto& step : plan.chains[i]) aug = apply_op_magnitude(aug, step.op, step.magnitude);
    const double w = plan.chain_weights[i];
    auto a = aug.data();
    for (std::size_t j = 0; j < mix.size(); ++j) mix[j] += w * a[j];
  }
  const double m = plan.skip_weight;
  Image out(img.shape());
  auto o = out.mutable_data();
  auto in = img.data();
  for (std::size_t j = 0; j < o.size(); ++j) {
    o[j] = std::clamp(m * in[j] + (1.0 - m) * mix[j], 0.0, 1.0);
  }
  return out;
}

Image augmix(const Image& img, const AugmixConfig& cfg, Rng& rng) {
  require_unit_range(img, "augmix");
  return apply_augmix_plan(img, sample_augmix_plan(cfg, img.dim(2), rng));
}

}  // namespace nlvt
