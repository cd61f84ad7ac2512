#include "nlvt/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace nlvt {

std::uint64_t CostReport::total_params() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::uint64_t CostReport::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

std::uint64_t CostReport::total_elementwise() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.elementwise;
  return n;
}

CostRow CostReport::subtotal(const std::string& prefix) const {
  CostRow s{prefix};
  for (const auto& r : rows) {
    if (r.name.compare(0, prefix.size(), prefix) == 0) {
      s.params += r.params;
      s.macs += r.macs;
      s.elementwise += r.elementwise;
    }
  }
  return s;
}

void CostReport::append(const CostReport& other, const std::string& prefix) {
  for (CostRow r : other.rows) {
    r.name = prefix.empty() ? r.name : prefix + "." + r.name;
    rows.push_back(std::move(r));
  }
}

std::string CostReport::table() const {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.name.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %14s %16s %14s\n", static_cast<int>(w), "layer", "params", "macs",
                "elementwise");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %14llu %16llu %14llu\n", static_cast<int>(w), r.name.c_str(),
                  static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.macs),
                  static_cast<unsigned long long>(r.elementwise));
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s %14llu %16llu %14llu\n", static_cast<int>(w), "total",
                static_cast<unsigned long long>(total_params()), static_cast<unsigned long long>(total_macs()),
                static_cast<unsigned long long>(total_elementwise()));
  out << buf;
  const double macs = static_cast<double>(total_macs());
  std::snprintf(buf, sizeof buf, "params (M): %.4f\nGMACs: %.4f\nGFLOPs (2 x MACs): %.4f\n",
                static_cast<double>(total_params()) / 1e6, macs / 1e9, 2 * macs / 1e9);
  out << buf;
  return out.str();
}

std::string CostReport::csv() const {
  std::ostringstream out;
  out << "layer,params,macs\n";
  for (const auto& r : rows) out << r.name << ',' << r.params << ',' << r.macs << '\n';
  return out.str();
}

std::uint64_t conv_params(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t groups,
                          bool bias) {
  return static_cast<std::uint64_t>(c_out) * (c_in / groups) * kernel * kernel + (bias ? c_out : 0);
}

std::uint64_t conv_macs(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t groups,
                        std::size_t out_h, std::size_t out_w) {
  return static_cast<std::uint64_t>(out_h) * out_w * c_out * (c_in / groups) * kernel * kernel;
}

std::uint64_t linear_params(std::size_t d_in, std::size_t d_out, bool bias) {
  return static_cast<std::uint64_t>(d_in) * d_out + (bias ? d_out : 0);
}

std::uint64_t linear_macs(std::size_t d_in, std::size_t d_out, std::size_t tokens) {
  return static_cast<std::uint64_t>(d_in) * d_out * tokens;
}

std::uint64_t attention_product_macs(std::size_t queries, std::size_t keys, std::size_t dim,
                                     std::size_t heads) {
  return static_cast<std::uint64_t>(heads) * queries * keys * (dim / heads);
}

namespace {

CostRow conv_row(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                 std::size_t groups, bool bias, std::size_t out_h, std::size_t out_w) {
  return {name, conv_params(c_in, c_out, k, groups, bias), conv_macs(c_in, c_out, k, groups, out_h, out_w), 0};
}

CostRow norm_row(const std::string& name, std::size_t channels, std::uint64_t elements) {
  return {name, 2ull * channels, 0, elements};
}

CostReport attention_cost(std::size_t tokens, std::size_t kv_tokens, std::size_t dim, std::size_t heads,
                          std::uint64_t pool_elements) {
  CostReport r;
  for (const char* n : {"q", "k", "v"}) r.rows.push_back({n, linear_params(dim, dim, true), linear_macs(dim, dim, tokens), 0});
  if (pool_elements) r.rows.push_back({"pool", 0, 0, pool_elements});
  // Softmax exponentials and normalization are elementwise.
  r.rows.push_back({"qk", 0, attention_product_macs(tokens, kv_tokens, dim, heads),
                    static_cast<std::uint64_t>(heads) * tokens * kv_tokens});
  r.rows.push_back({"av", 0, attention_product_macs(tokens, kv_tokens, dim, heads), 0});
  r.rows.push_back({"o", linear_params(dim, dim, true), linear_macs(dim, dim, tokens), 0});
  return r;
}

struct Walker {
  const ModelConfig& cfg;
  CostReport report;

  void add(CostRow r) { report.rows.push_back(std::move(r)); }

  void mhca(const std::string& p, std::size_t c, std::size_t heads, std::size_t g) {
    const std::uint64_t e = static_cast<std::uint64_t>(c) * g * g;
    add(conv_row(p + ".ca", c, c, cfg.ca_kernel, heads, false, g, g));
    if (cfg.ca_norm) add(norm_row(p + ".norm", c, e));
    if (cfg.ca_activation != Activation::identity) add({p + ".act", 0, 0, e});
    add(conv_row(p + ".proj", c, c, 1, 1, true, g, g));
  }

  void mlp(const std::string& p, std::size_t c, std::size_t g) {
    const std::size_t hidden = c * cfg.mlp_ratio;
    add(conv_row(p + ".fc1", c, hidden, 1, 1, true, g, g));
    add({p + ".act", 0, 0, static_cast<std::uint64_t>(hidden) * g * g});
    add(conv_row(p + ".fc2", hidden, c, 1, 1, true, g, g));
  }

  void lff(const std::string& p, std::size_t c, std::size_t g) {
    const std::size_t hidden = c * cfg.mlp_ratio;
    add(conv_row(p + ".expand", c, hidden, 1, 1, true, g, g));
    add(conv_row(p + ".depthwise", hidden, hidden, cfg.ca_kernel, hidden, true, g, g));
    add({p + ".act", 0, 0, static_cast<std::uint64_t>(hidden) * g * g});
    add(conv_row(p + ".project", hidden, c, 1, 1, true, g, g));
  }

  void ncb(const std::string& p, std::size_t s, std::size_t g) {
    const std::size_t c = cfg.widths[s];
    const std::uint64_t e = static_cast<std::uint64_t>(c) * g * g;
    mhca(p + ".mhca", c, cfg.heads[s], g);
    add({p + ".residual", 0, 0, 2 * e});
    add(norm_row(p + ".norm", c, e));
    mlp(p + ".mlp", c, g);
  }

  void ntb(const std::string& p, std::size_t s, std::size_t g, bool use_lff) {
    const std::size_t c = cfg.widths[s];
    const std::size_t ca = cfg.attention_channels(s), cc = c - ca;
    const std::size_t h = cfg.heads[s], st = cfg.pool_strides[s];
    const std::size_t n = g * g;
    add(conv_row(p + ".reduce", c, ca, 1, 1, false, g, g));
    add(norm_row(p + ".reduce_norm", ca, static_cast<std::uint64_t>(ca) * n));
    add(norm_row(p + ".attn_norm", ca, static_cast<std::uint64_t>(ca) * n));
    report.append(emhsa_cost(g, g, ca, h, st), p + ".attn");
    add(conv_row(p + ".expand", ca, cc, 1, 1, false, g, g));
    add(norm_row(p + ".expand_norm", cc, static_cast<std::uint64_t>(cc) * n));
    mhca(p + ".mhca", cc, h, g);
    add({p + ".residual", 0, 0, static_cast<std::uint64_t>(ca + cc + c) * n});
    add(norm_row(p + ".tail_norm", c, static_cast<std::uint64_t>(c) * n));
    if (use_lff) {
      lff(p + ".lff", c, g);
    } else {
      mlp(p + ".mlp", c, g);
    }
  }

  void run() {
    cfg.validate();
    const std::size_t g0 = cfg.stem_grid();
    add(conv_row("stem.proj", cfg.in_channels, cfg.stem_width(), cfg.patch_size, 1, true, g0, g0));
    std::size_t width = cfg.stem_width();
    bool lff_assigned = false;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
      const StageSpec& spec = cfg.stages[s];
      const std::string sp = "stages." + std::to_string(s);
      const std::size_t g = cfg.stage_grid(s);
      const std::size_t c = cfg.widths[s];
      if (spec.downsample || c != width) {
        const std::size_t gin = spec.downsample ? 2 * g : g;
        add(conv_row(sp + ".transition.pointwise", width, c, 1, 1, false, gin, gin));
        if (spec.downsample) add(conv_row(sp + ".transition.depthwise", c, c, 2, c, false, g, g));
        add(norm_row(sp + ".transition.norm", c, static_cast<std::uint64_t>(c) * g * g));
      }
      width = c;
      std::size_t b = 0;
      for (std::size_t rep = 0; rep < spec.repeat; ++rep) {
        for (std::size_t i = 0; i < spec.ncb_count; ++i) ncb(sp + ".blocks." + std::to_string(b++), s, g);
        ntb(sp + ".blocks." + std::to_string(b++), s, g, !lff_assigned);
        lff_assigned = true;
      }
    }
    const std::size_t gl = cfg.stage_grid(cfg.stages.size() - 1);
    add(norm_row("final_norm", width, static_cast<std::uint64_t>(width) * gl * gl));
    add({"pool", 0, 0, static_cast<std::uint64_t>(width) * gl * gl});
    add({"classifier", linear_params(width, cfg.num_classes, true), linear_macs(width, cfg.num_classes, 1), 0});
  }
};

}  // namespace

CostReport sdpa_cost(std::size_t tokens, std::size_t dim, std::size_t heads) {
  return attention_cost(tokens, tokens, dim, heads, 0);
}

CostReport emhsa_cost(std::size_t grid_h, std::size_t grid_w, std::size_t dim, std::size_t heads,
                      std::size_t stride) {
  const std::size_t n = grid_h * grid_w;
  if (stride <= 1) return attention_cost(n, n, dim, heads, 0);
  const std::size_t kv = (grid_h / stride) * (grid_w / stride);
  // Each pooled output averages stride^2 inputs, for keys and values.
  return attention_cost(n, kv, dim, heads, 2ull * dim * n);
}

CostReport profile_model(const ModelConfig& cfg) {
  Walker w{cfg, {}};
  w.run();
  return std::move(w.report);
}

CostReport count_params(const ModelConfig& cfg) { return profile_model(cfg); }

CostReport estimate_flops(const ModelConfig& cfg, std::size_t image_side) {
  ModelConfig c = cfg;
  c.image_size = image_side;
  return profile_model(c);
}

}  // namespace nlvt
