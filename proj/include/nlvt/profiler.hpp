#pragma once

// Closed-form parameter and multiply-accumulate accounting. The walker mirrors
// the model layout from the configuration alone; it never looks at tensors, so
// comparing it with a parameter-tensor walk is a real cross-check.

#include <cstdint>
#include <string>
#include <vector>

#include "nlvt/blocks.hpp"

namespace nlvt {

struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  // Normalization, activation, residual, softmax and pooling operations.
  std::uint64_t elementwise = 0;
};

struct CostReport {
  std::vector<CostRow> rows;

  std::uint64_t total_params() const;
  std::uint64_t total_macs() const;
  std::uint64_t total_elementwise() const;
  // Totals of rows whose name starts with `prefix`.
  CostRow subtotal(const std::string& prefix) const;
  void append(const CostReport& other, const std::string& prefix = "");

  // Aligned per-layer table followed by totals, MACs and 2 x MACs both labelled.
  std::string table() const;
  // `layer,params,macs`
  std::string csv() const;
};

std::uint64_t conv_params(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t groups,
                          bool bias);
std::uint64_t conv_macs(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t groups,
                        std::size_t out_h, std::size_t out_w);
std::uint64_t linear_params(std::size_t d_in, std::size_t d_out, bool bias);
std::uint64_t linear_macs(std::size_t d_in, std::size_t d_out, std::size_t tokens);
// One of the two attention products: h * N * N' * D_h.
std::uint64_t attention_product_macs(std::size_t queries, std::size_t keys, std::size_t dim,
                                     std::size_t heads);

// Rows q, k, v, o, qk, av (and pool for E-MHSA with stride > 1).
CostReport sdpa_cost(std::size_t tokens, std::size_t dim, std::size_t heads);
CostReport emhsa_cost(std::size_t grid_h, std::size_t grid_w, std::size_t dim, std::size_t heads,
                      std::size_t stride);

// Per-layer report for one image at the configuration's input size.
CostReport profile_model(const ModelConfig& cfg);
CostReport count_params(const ModelConfig& cfg);
// Same layout evaluated at a different square input side. Throws ConfigError if
// the layout is invalid at that size.
CostReport estimate_flops(const ModelConfig& cfg, std::size_t image_side);

template <typename T>
CostReport count_params(const Model<T>& model) {
  return count_params(model.config());
}

// Exhaustive walk over the model's parameter tensors.
template <typename T>
std::uint64_t walk_param_count(const Model<T>& model) {
  std::uint64_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace nlvt
