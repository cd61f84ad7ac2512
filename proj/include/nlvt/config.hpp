#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nlvt/layers.hpp"

namespace nlvt {

enum class Precision { f32, f64 };

// One hybrid stage: (NCB x ncb_count + NTB x 1) x repeat, optionally entered
// through a stride-2 transition.
struct StageSpec {
  std::size_t ncb_count = 1;
  std::size_t repeat = 1;
  bool downsample = false;
};

struct ModelConfig {
  std::string name = "next-lvt-desk";
  std::size_t in_channels = 3;
  std::size_t image_size = 32;  // square inputs, H = W
  std::size_t patch_size = 4;
  std::vector<StageSpec> stages;
  std::vector<std::size_t> widths;        // per stage
  std::vector<std::size_t> heads;         // per stage
  std::vector<std::size_t> pool_strides;  // per stage, E-MHSA key/value pooling
  double shrink_ratio = 0.75;             // fraction of NTB channels routed to E-MHSA
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 43;
  std::size_t ca_kernel = 3;
  bool ca_norm = true;
  Activation ca_activation = Activation::relu;
  Activation mlp_activation = Activation::gelu;
  Precision precision = Precision::f32;
  std::array<double, 3> norm_mean{0.5, 0.5, 0.5};
  std::array<double, 3> norm_std{0.5, 0.5, 0.5};

  std::size_t stem_grid() const { return image_size / patch_size; }
  // Token-grid side inside stage i.
  std::size_t stage_grid(std::size_t stage) const;
  std::size_t stem_width() const { return widths.empty() ? 0 : widths.front(); }
  // Channel split inside an NTB of the given stage.
  std::size_t attention_channels(std::size_t stage) const;
  std::size_t conv_channels(std::size_t stage) const {
    return widths[stage] - attention_channels(stage);
  }
  // Tokens per image after patch embedding, N = HW / P^2.
  std::size_t patch_count() const { return image_size * image_size / (patch_size * patch_size); }
  // Raw patch dimension d = C P^2.
  std::size_t patch_dim() const { return in_channels * patch_size * patch_size; }

  // Throws ConfigError naming the first violated invariant.
  void validate() const;
  // `key = value` lines; lists are comma separated.
  std::string to_text() const;
};

// 32x32 desk-scale stand-in used by the acceptance suite.
ModelConfig desk_config();
// Single stage, N=1, L=1, width 8: gradient-check scale.
ModelConfig micro_config();
// 224x224 four-stage layout sized toward the published parameter budget.
ModelConfig paper_config();

struct TrainConfig {
  double base_lr = 0.007;
  double decay_factor = 0.1;
  std::size_t decay_every = 3;  // epochs between learning-rate decays
  bool decay_once = false;      // decay a single time at decay_every instead of recurring
  std::size_t epochs = 20;
  std::size_t train_batch = 64;
  std::size_t eval_batch = 256;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const;
};

struct AugmixConfig {
  std::size_t width = 3;
  std::size_t max_depth = 3;
  int severity = 3;
  double alpha = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DataConfig {
  std::string train_manifest;
  std::string test_manifest;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmixConfig augmix;
  DataConfig data;
};

// Ordered `key = value` entries with their source line numbers.
class KeyValues {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };

  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::string& path);

  // Applies a `key=value` override; later settings win.
  void set(const std::string& assignment);
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

// Builds a full run configuration starting from the desk defaults. Every key must be
// recognised; an unknown key is a ConfigError.
RunConfig run_config_from(const KeyValues& kv);
ModelConfig model_config_from_text(const std::string& text);

}  // namespace nlvt
