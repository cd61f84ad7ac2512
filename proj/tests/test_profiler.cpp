#include <gtest/gtest.h>

#include <map>

#include "nlvt/profiler.hpp"
#include "random_config.hpp"

using namespace nlvt;

namespace {

const CostRow& row(const CostReport& r, const std::string& name) {
  for (const auto& x : r.rows) {
    if (x.name == name) return x;
  }
  throw std::runtime_error("no row " + name);
}

// Parameter counts per layer, grouped by the tensor name minus its last component.
std::map<std::string, std::uint64_t> tensor_groups(const Model<float>& m) {
  std::map<std::string, std::uint64_t> g;
  for (const auto& p : m.parameters()) g[p.name.substr(0, p.name.rfind('.'))] += p.tensor.numel();
  return g;
}

}  // namespace

TEST(Profiler, ClosedFormLayers) {
  EXPECT_EQ(linear_params(10, 5, true), 55u);
  EXPECT_EQ(conv_params(3, 8, 3, 1, true), 224u);
  EXPECT_EQ(conv_macs(3, 8, 3, 1, 32, 32), 221184u);
  EXPECT_EQ(conv_params(8, 8, 3, 8, false), 72u);
  EXPECT_EQ(conv_macs(8, 8, 3, 8, 4, 4), 8u * 9 * 16);
  EXPECT_EQ(linear_macs(10, 5, 7), 350u);
}

TEST(Profiler, SdpaProducts) {
  const CostReport r = sdpa_cost(4, 8, 1);
  EXPECT_EQ(row(r, "qk").macs, 128u);
  EXPECT_EQ(row(r, "av").macs, 128u);
  EXPECT_EQ(r.total_params(), 4 * linear_params(8, 8, true));
}

TEST(Profiler, PooledAttentionQuartersKeyValueProducts) {
  const CostReport s1 = emhsa_cost(4, 4, 8, 2, 1), s2 = emhsa_cost(4, 4, 8, 2, 2);
  EXPECT_EQ(row(s2, "qk").macs * 4, row(s1, "qk").macs);
  EXPECT_EQ(row(s2, "av").macs * 4, row(s1, "av").macs);
  EXPECT_EQ(s1.total_macs(), sdpa_cost(16, 8, 2).total_macs());
  EXPECT_EQ(s1.total_params(), sdpa_cost(16, 8, 2).total_params());
}

TEST(Profiler, MatchesTensorWalkOnRandomConfigs) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    const ModelConfig cfg = testing_support::random_config(rng);
    const Model<float> m(cfg, i);
    EXPECT_EQ(count_params(cfg).total_params(), walk_param_count(m)) << cfg.to_text();
  }
}

TEST(Profiler, PerLayerRowsMatchParameterTensors) {
  const Model<float> m(desk_config(), 0);
  const auto groups = tensor_groups(m);
  const CostReport r = profile_model(desk_config());
  std::map<std::string, std::uint64_t> rows;
  for (const auto& x : r.rows) {
    if (x.params) rows[x.name] += x.params;
  }
  EXPECT_EQ(rows, groups);
}

TEST(Profiler, DeskClassifierAndTotals) {
  const CostReport r = profile_model(desk_config());
  EXPECT_EQ(row(r, "classifier").params, 192u * 43 + 43);
  EXPECT_EQ(row(r, "classifier").macs, 192u * 43);
  EXPECT_EQ(r.total_macs(), estimate_flops(desk_config(), 32).total_macs());
  EXPECT_NE(r.table().find("GFLOPs (2 x MACs)"), std::string::npos);
  EXPECT_EQ(r.csv().substr(0, 17), "layer,params,macs");
}

TEST(Profiler, MonotoneInResolutionAndWidth) {
  const ModelConfig cfg = desk_config();
  EXPECT_LT(estimate_flops(cfg, 32).total_macs(), estimate_flops(cfg, 64).total_macs());
  EXPECT_EQ(estimate_flops(cfg, 32).total_params(), estimate_flops(cfg, 64).total_params());
  ModelConfig wide = cfg;
  wide.widths[2] = 256;
  wide.heads[2] = 16;
  EXPECT_LT(profile_model(cfg).total_macs(), profile_model(wide).total_macs());
  EXPECT_LT(profile_model(cfg).total_params(), profile_model(wide).total_params());
}

TEST(Profiler, InvalidSideIsAConfigError) {
  EXPECT_THROW(estimate_flops(desk_config(), 30), ConfigError);
}
