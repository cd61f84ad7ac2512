#pragma once

// AugMix: several short chains of random augmentations, mixed convexly with
// Dirichlet weights, then blended with the original through a Beta-distributed
// skip weight.
//
// Images are [C, H, W] tensors with values in [0, 1]. The op set keeps to
// geometric and histogram-type operations; flips and large rotations are left
// out because traffic signs change meaning under them.

#include <array>
#include <string>
#include <vector>

#include "nlvt/config.hpp"

namespace nlvt {

using Image = Tensor<double>;

enum class AugOp {
  autocontrast,
  equalize,
  posterize,
  solarize,
  rotate,
  shear_x,
  shear_y,
  translate_x,
  translate_y,
};

const std::array<AugOp, 9>& all_aug_ops();
std::string aug_op_name(AugOp op);
// Throws ConfigError for an unknown name.
AugOp parse_aug_op(const std::string& name);

// Deterministic primitives. Geometric ops resample bilinearly about the image
// centre and fill uncovered area with zeros.
namespace augment {
Image autocontrast(const Image& img);
Image equalize(const Image& img);
// Keeps the top `bits` bits of each 8-bit quantized value.
Image posterize(const Image& img, int bits);
// Inverts every value strictly above `threshold`.
Image solarize(const Image& img, double threshold);
Image rotate(const Image& img, double degrees);
Image shear_x(const Image& img, double factor);
Image shear_y(const Image& img, double factor);
Image translate_x(const Image& img, double pixels);
Image translate_y(const Image& img, double pixels);
}  // namespace augment

// Severity-to-magnitude mapping. Severity 1..10 scales each op's maximum:
//   posterize   bits = 4 - floor(level * 4 / 10)
//   solarize    threshold = (256 - floor(level * 256 / 10)) / 256
//   rotate      +-floor(level * 30 / 10) degrees
//   shear       +-level * 0.3 / 10
//   translate   +-floor(level * (side / 3) / 10) pixels
// where level ~ U(0.1, severity) and the sign is a fair coin.
double sample_magnitude(AugOp op, int severity, std::size_t image_side, Rng& rng);
Image apply_op_magnitude(const Image& img, AugOp op, double magnitude);
Image apply_op(const Image& img, AugOp op, int severity, Rng& rng);

struct AugmixStep {
  AugOp op = AugOp::autocontrast;
  double magnitude = 0.0;
};

// Every random draw of one augmix call.
struct AugmixPlan {
  std::vector<double> chain_weights;  // Dirichlet(alpha, ..., alpha), sums to 1
  double skip_weight = 0.0;           // m ~ Beta(alpha, alpha)
  std::vector<std::vector<AugmixStep>> chains;
};

std::vector<double> sample_dirichlet(std::size_t k, double alpha, Rng& rng);
double sample_beta(double alpha, double beta, Rng& rng);

AugmixPlan sample_augmix_plan(const AugmixConfig& cfg, std::size_t image_side, Rng& rng);
// m * img + (1 - m) * sum_i w_i * chain_i(img), clamped to [0, 1].
Image apply_augmix_plan(const Image& img, const AugmixPlan& plan);
Image augmix(const Image& img, const AugmixConfig& cfg, Rng& rng);

// Throws ContractError unless img is [C, H, W] with every value in [0, 1].
void require_unit_range(const Image& img, const char* what);

}  // namespace nlvt
