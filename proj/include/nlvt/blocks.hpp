#pragma once

// Composite units of the hybrid network and the whole-model assembler.
//
// Model layout: patch-embedding stem, then per stage an optional transition and
// the block sequence (NCB x N + NTB x 1) x L, then norm, global pooling and a
// linear classifier. Only the earliest NTB of the network uses the LFF tail.

#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include "nlvt/attention.hpp"
#include "nlvt/config.hpp"

namespace nlvt {

// Splits the image into P x P patches and maps each to width D with a stride-P
// convolution.
template <typename T>
struct PatchEmbed {
  Conv2d<T> proj;
  std::size_t patch = 1;

  PatchEmbed() = default;
  PatchEmbed(std::size_t in_channels, std::size_t width, std::size_t patch, Rng& rng);

  // [B, C, H, W] -> [B, D, H/P, W/P]
  Tensor<T> forward(const Tensor<T>& img) const;
  // [B, C, H, W] -> [B, N, D], N = HW / P^2
  Tensor<T> tokens(const Tensor<T>& img) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

// Two pointwise convolutions with expansion m.
template <typename T>
struct Mlp {
  Conv2d<T> fc1, fc2;
  Activation activation = Activation::gelu;

  Mlp() = default;
  Mlp(std::size_t channels, std::size_t ratio, Activation activation, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

// Locality feed-forward: inverted residual (pointwise expand, depthwise k x k,
// activation, pointwise project). The residual is added by the caller.
template <typename T>
struct Lff {
  Conv2d<T> expand, depthwise, project;
  Activation activation = Activation::gelu;

  Lff() = default;
  Lff(std::size_t channels, std::size_t ratio, std::size_t kernel, Activation activation, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Ncb {
  Mhca<T> mhca;
  BatchNorm2d<T> norm;  // pre-norm of the MLP branch
  Mlp<T> mlp;

  Ncb() = default;
  Ncb(const ModelConfig& cfg, std::size_t stage, Rng& rng);
  // z' = MHCA(z) + z ; out = MLP(z') + z'
  Tensor<T> forward(const Tensor<T>& z, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(ParamList<T>& out, const std::string& prefix) const;
};

// Every intermediate of one NTB forward pass, in evaluation order.
template <typename T>
struct NtbTrace {
  Tensor<T> reduced;      // Proj(z) to floor(rC) channels
  Tensor<T> global;       // E-MHSA(reduced) + reduced
  Tensor<T> projected;    // Proj(global) to C - floor(rC) channels
  Tensor<T> local;        // MHCA(projected) + projected
  Tensor<T> mixed;        // Concat(global, local) along channels
  Tensor<T> output;       // FFN(mixed) + mixed, FFN = LFF or MLP
};

template <typename T>
struct Ntb {
  Conv2d<T> reduce;
  BatchNorm2d<T> reduce_norm;
  LayerNorm<T> attn_norm;
  EMhsa<T> attn;
  Conv2d<T> expand;
  BatchNorm2d<T> expand_norm;
  Mhca<T> mhca;
  BatchNorm2d<T> tail_norm;
  bool use_lff = false;
  Mlp<T> mlp;  // tail when !use_lff
  Lff<T> lff;  // tail when use_lff

  Ntb() = default;
  Ntb(const ModelConfig& cfg, std::size_t stage, bool use_lff, Rng& rng);

  std::size_t attention_channels() const { return attn.dim; }
  std::size_t conv_channels() const { return mhca.channels; }

  Tensor<T> forward(const Tensor<T>& z, bool training) { return trace(z, training).output; }
  NtbTrace<T> trace(const Tensor<T>& z, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(ParamList<T>& out, const std::string& prefix) const;
};

// Stage entry: pointwise width change and, when downsampling, a stride-2
// depthwise 2 x 2 convolution, followed by batch norm.
template <typename T>
struct Transition {
  Conv2d<T> pointwise;
  std::optional<Conv2d<T>> depthwise;
  BatchNorm2d<T> norm;

  Transition() = default;
  Transition(std::size_t in_channels, std::size_t out_channels, bool downsample, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(ParamList<T>& out, const std::string& prefix) const;
};

enum class BlockKind { ncb, ntb };

struct BlockInfo {
  std::size_t stage = 0;
  BlockKind kind = BlockKind::ncb;
  bool use_lff = false;
};

template <typename T>
using Block = std::variant<Ncb<T>, Ntb<T>>;

template <typename T>
struct Stage {
  std::optional<Transition<T>> transition;
  std::vector<Block<T>> blocks;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  // [B, C, H, W] -> logits [B, num_classes]
  Tensor<T> forward(const Tensor<T>& images, bool training);

  const ModelConfig& config() const { return cfg_; }
  std::vector<BlockInfo> block_sequence() const;

  // Learnable tensors, in a fixed order with unique dotted names.
  ParamList<T> parameters() const;
  // Non-learnable state (batch-norm running statistics).
  ParamList<T> buffers() const;
  // parameters() followed by buffers(): everything a checkpoint stores.
  ParamList<T> state() const;

  PatchEmbed<T> stem;
  std::vector<Stage<T>> stages;
  BatchNorm2d<T> final_norm;
  Linear<T> classifier;

 private:
  ModelConfig cfg_;
};

// Validates `cfg` and builds a freshly initialized model.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed = 0) {
  return Model<T>(cfg, seed);
}

}  // namespace nlvt
