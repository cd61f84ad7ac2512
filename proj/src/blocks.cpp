#include "nlvt/blocks.hpp"

#include "nlvt/ops.hpp"

namespace nlvt {

namespace {

template <typename T>
void require_channels(const Tensor<T>& x, std::size_t channels, const char* what) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError(std::string(what) + ": expected [B, " + std::to_string(channels) +
                     ", H, W], got " + shape_str(x.shape()));
  }
}

}  // namespace

template <typename T>
PatchEmbed<T>::PatchEmbed(std::size_t in_channels, std::size_t width, std::size_t patch_,
                          Rng& rng)
    : proj(in_channels, width, patch_, patch_, 0, 1, true, rng), patch(patch_) {}

template <typename T>
Tensor<T> PatchEmbed<T>::forward(const Tensor<T>& img) const {
  if (img.rank() != 4 || img.dim(2) % patch != 0 || img.dim(3) % patch != 0) {
    throw ConfigError("patch_embed: patch size " + std::to_string(patch) +
                      " does not tile image " + shape_str(img.shape()));
  }
  return proj.forward(img);
}

template <typename T>
Tensor<T> PatchEmbed<T>::tokens(const Tensor<T>& img) const {
  return grid_to_tokens(forward(img));
}

template <typename T>
void PatchEmbed<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  proj.collect(out, prefix + ".proj");
}

template <typename T>
Mlp<T>::Mlp(std::size_t channels, std::size_t ratio, Activation act, Rng& rng)
    : fc1(channels, channels * ratio, 1, 1, 0, 1, true, rng),
      fc2(channels * ratio, channels, 1, 1, 0, 1, true, rng),
      activation(act) {}

template <typename T>
Tensor<T> Mlp<T>::forward(const Tensor<T>& x) const {
  return fc2.forward(activate(fc1.forward(x), activation));
}

template <typename T>
void Mlp<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

template <typename T>
Lff<T>::Lff(std::size_t channels, std::size_t ratio, std::size_t kernel, Activation act, Rng& rng)
    : expand(channels, channels * ratio, 1, 1, 0, 1, true, rng),
      depthwise(channels * ratio, channels * ratio, kernel, 1, kernel / 2, channels * ratio, true,
                rng),
      project(channels * ratio, channels, 1, 1, 0, 1, true, rng),
      activation(act) {}

template <typename T>
Tensor<T> Lff<T>::forward(const Tensor<T>& x) const {
  return project.forward(activate(depthwise.forward(expand.forward(x)), activation));
}

template <typename T>
void Lff<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  expand.collect(out, prefix + ".expand");
  depthwise.collect(out, prefix + ".depthwise");
  project.collect(out, prefix + ".project");
}

template <typename T>
Ncb<T>::Ncb(const ModelConfig& cfg, std::size_t stage, Rng& rng) {
  const std::size_t c = cfg.widths[stage];
  mhca = Mhca<T>(c, cfg.heads[stage], cfg.ca_kernel, cfg.ca_norm, cfg.ca_activation, rng);
  norm = BatchNorm2d<T>(c);
  mlp = Mlp<T>(c, cfg.mlp_ratio, cfg.mlp_activation, rng);
}

template <typename T>
Tensor<T> Ncb<T>::forward(const Tensor<T>& z, bool training) {
  require_channels(z, mhca.channels, "ncb");
  const Tensor<T> mixed = add(mhca.forward(z, training), z);
  return add(mlp.forward(norm.forward(mixed, training)), mixed);
}

template <typename T>
void Ncb<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  mhca.collect(out, prefix + ".mhca");
  norm.collect(out, prefix + ".norm");
  mlp.collect(out, prefix + ".mlp");
}

template <typename T>
void Ncb<T>::collect_buffers(ParamList<T>& out, const std::string& prefix) const {
  mhca.collect_buffers(out, prefix + ".mhca");
  norm.collect_buffers(out, prefix + ".norm");
}

template <typename T>
Ntb<T>::Ntb(const ModelConfig& cfg, std::size_t stage, bool use_lff_, Rng& rng)
    : use_lff(use_lff_) {
  const std::size_t c = cfg.widths[stage];
  const std::size_t c_attn = cfg.attention_channels(stage);
  const std::size_t c_conv = c - c_attn;
  if (c_attn < 1 || c_conv < 1) {
    throw ConfigError("ntb: shrink ratio " + std::to_string(cfg.shrink_ratio) +
                      " leaves an empty channel path for width " + std::to_string(c));
  }
  const std::size_t h = cfg.heads[stage];
  reduce = Conv2d<T>(c, c_attn, 1, 1, 0, 1, false, rng);
  reduce_norm = BatchNorm2d<T>(c_attn);
  attn_norm = LayerNorm<T>(c_attn);
  attn = EMhsa<T>(c_attn, h, cfg.pool_strides[stage], rng);
  expand = Conv2d<T>(c_attn, c_conv, 1, 1, 0, 1, false, rng);
  expand_norm = BatchNorm2d<T>(c_conv);
  mhca = Mhca<T>(c_conv, h, cfg.ca_kernel, cfg.ca_norm, cfg.ca_activation, rng);
  tail_norm = BatchNorm2d<T>(c);
  if (use_lff) {
    lff = Lff<T>(c, cfg.mlp_ratio, cfg.ca_kernel, cfg.mlp_activation, rng);
  } else {
    mlp = Mlp<T>(c, cfg.mlp_ratio, cfg.mlp_activation, rng);
  }
}

template <typename T>
NtbTrace<T> Ntb<T>::trace(const Tensor<T>& z, bool training) {
  require_channels(z, tail_norm.channels(), "ntb");
  const std::size_t gh = z.dim(2), gw = z.dim(3);
  NtbTrace<T> t;
  t.reduced = reduce_norm.forward(reduce.forward(z), training);
  const Tensor<T> tokens = attn_norm.forward(grid_to_tokens(t.reduced));
  t.global = add(tokens_to_grid(attn.forward(tokens, gh, gw), gh, gw), t.reduced);
  t.projected = expand_norm.forward(expand.forward(t.global), training);
  t.local = add(mhca.forward(t.projected, training), t.projected);
  t.mixed = concat<T>({t.global, t.local}, 1);
  const Tensor<T> normed = tail_norm.forward(t.mixed, training);
  t.output = add(use_lff ? lff.forward(normed) : mlp.forward(normed), t.mixed);
  return t;
}

template <typename T>
void Ntb<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  reduce.collect(out, prefix + ".reduce");
  reduce_norm.collect(out, prefix + ".reduce_norm");
  attn_norm.collect(out, prefix + ".attn_norm");
  attn.collect(out, prefix + ".attn");
  expand.collect(out, prefix + ".expand");
  expand_norm.collect(out, prefix + ".expand_norm");
  mhca.collect(out, prefix + ".mhca");
  tail_norm.collect(out, prefix + ".tail_norm");
  if (use_lff) {
    lff.collect(out, prefix + ".lff");
  } else {
    mlp.collect(out, prefix + ".mlp");
  }
}

template <typename T>
void Ntb<T>::collect_buffers(ParamList<T>& out, const std::string& prefix) const {
  reduce_norm.collect_buffers(out, prefix + ".reduce_norm");
  expand_norm.collect_buffers(out, prefix + ".expand_norm");
  mhca.collect_buffers(out, prefix + ".mhca");
  tail_norm.collect_buffers(out, prefix + ".tail_norm");
}

template <typename T>
Transition<T>::Transition(std::size_t in_channels, std::size_t out_channels, bool downsample,
                          Rng& rng)
    : pointwise(in_channels, out_channels, 1, 1, 0, 1, false, rng), norm(out_channels) {
  if (downsample) depthwise.emplace(out_channels, out_channels, 2, 2, 0, out_channels, false, rng);
}

template <typename T>
Tensor<T> Transition<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> h = pointwise.forward(x);
  if (depthwise) h = depthwise->forward(h);
  return norm.forward(h, training);
}

template <typename T>
void Transition<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  pointwise.collect(out, prefix + ".pointwise");
  if (depthwise) depthwise->collect(out, prefix + ".depthwise");
  norm.collect(out, prefix + ".norm");
}

template <typename T>
void Transition<T>::collect_buffers(ParamList<T>& out, const std::string& prefix) const {
  norm.collect_buffers(out, prefix + ".norm");
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  stem = PatchEmbed<T>(cfg_.in_channels, cfg_.stem_width(), cfg_.patch_size, rng);
  bool lff_assigned = false;
  std::size_t width = cfg_.stem_width();
  for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
    const StageSpec& spec = cfg_.stages[s];
    Stage<T> stage;
    if (spec.downsample || cfg_.widths[s] != width) {
      stage.transition.emplace(width, cfg_.widths[s], spec.downsample, rng);
    }
    width = cfg_.widths[s];
    for (std::size_t rep = 0; rep < spec.repeat; ++rep) {
      for (std::size_t i = 0; i < spec.ncb_count; ++i) stage.blocks.emplace_back(Ncb<T>(cfg_, s, rng));
      stage.blocks.emplace_back(Ntb<T>(cfg_, s, !lff_assigned, rng));
      lff_assigned = true;
    }
    stages.push_back(std::move(stage));
  }
  final_norm = BatchNorm2d<T>(width);
  classifier = Linear<T>(width, cfg_.num_classes, true, rng);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& images, bool training) {
  if (images.rank() != 4 || images.dim(1) != cfg_.in_channels ||
      images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size) {
    throw ShapeError("model: expected [B, " + std::to_string(cfg_.in_channels) + ", " +
                     std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) +
                     "], got " + shape_str(images.shape()));
  }
  Tensor<T> x = stem.forward(images);
  for (auto& stage : stages) {
    if (stage.transition) x = stage.transition->forward(x, training);
    for (auto& block : stage.blocks) {
      x = std::visit([&](auto& b) { return b.forward(x, training); }, block);
    }
  }
  x = final_norm.forward(x, training);
  return classifier.forward(global_avg_pool(x));
}

template <typename T>
std::vector<BlockInfo> Model<T>::block_sequence() const {
  std::vector<BlockInfo> seq;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (const auto& block : stages[s].blocks) {
      if (const auto* ntb = std::get_if<Ntb<T>>(&block)) {
        seq.push_back({s, BlockKind::ntb, ntb->use_lff});
      } else {
        seq.push_back({s, BlockKind::ncb, false});
      }
    }
  }
  return seq;
}

template <typename T>
ParamList<T> Model<T>::parameters() const {
  ParamList<T> out;
  stem.collect(out, "stem");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = "stages." + std::to_string(s);
    if (stages[s].transition) stages[s].transition->collect(out, sp + ".transition");
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      const std::string bp = sp + ".blocks." + std::to_string(b);
      std::visit([&](const auto& blk) { blk.collect(out, bp); }, stages[s].blocks[b]);
    }
  }
  final_norm.collect(out, "final_norm");
  classifier.collect(out, "classifier");
  return out;
}

template <typename T>
ParamList<T> Model<T>::buffers() const {
  ParamList<T> out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = "stages." + std::to_string(s);
    if (stages[s].transition) stages[s].transition->collect_buffers(out, sp + ".transition");
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      const std::string bp = sp + ".blocks." + std::to_string(b);
      std::visit([&](const auto& blk) { blk.collect_buffers(out, bp); }, stages[s].blocks[b]);
    }
  }
  final_norm.collect_buffers(out, "final_norm");
  return out;
}

template <typename T>
ParamList<T> Model<T>::state() const {
  ParamList<T> out = parameters();
  ParamList<T> bufs = buffers();
  out.insert(out.end(), bufs.begin(), bufs.end());
  return out;
}

#define NLVT_INSTANTIATE_BLOCKS(T) \
  template struct PatchEmbed<T>;   \
  template struct Mlp<T>;          \
  template struct Lff<T>;          \
  template struct Ncb<T>;          \
  template struct Ntb<T>;          \
  template struct Transition<T>;   \
  template class Model<T>;

NLVT_INSTANTIATE_BLOCKS(float)
NLVT_INSTANTIATE_BLOCKS(double)

#undef NLVT_INSTANTIATE_BLOCKS

}  // namespace nlvt
