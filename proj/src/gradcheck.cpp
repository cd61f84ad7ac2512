#include "nlvt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <type_traits>

#include "nlvt/blocks.hpp"
#include "nlvt/ops.hpp"
#include "nlvt/train.hpp"

namespace nlvt {

double default_step(int bits) { return bits == 64 ? 1e-5 : 1e-2; }
double default_tolerance(int bits) { return bits == 64 ? 1e-6 : 1e-3; }

namespace {

template <typename T>
std::vector<std::vector<double>> analytic_grads(const std::function<Tensor<T>()>& loss, const ParamList<T>& wrt) {
  for (const auto& p : wrt) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    tape.backward(loss());
  }
  std::vector<std::vector<double>> out;
  for (const auto& p : wrt) {
    const Tensor<T>& t = p.tensor;
    if (t.has_grad()) {
      out.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      out.emplace_back(t.numel(), 0.0);
    }
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> numeric_grads(const std::function<Tensor<T>()>& loss, const ParamList<T>& wrt,
                                               double step, std::size_t& refined) {
  NoGradScope<T> no_grad;
  const auto eval = [&]() { return static_cast<double>(loss().item()); };
  const double f0 = eval();
  std::vector<std::vector<double>> out;
  for (const auto& p : wrt) {
    Tensor<T> t = p.tensor;
    std::vector<double> numeric(t.numel());
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T orig = x[i];
      double h = step;
      double est = 0.0;
      for (int attempt = 0; attempt < 4; ++attempt) {
        x[i] = static_cast<T>(orig + h);
        const double fp = eval();
        x[i] = static_cast<T>(orig - h);
        const double fm = eval();
        x[i] = orig;
        // Exact achieved step (the perturbation is rounded to T).
        const double hp = static_cast<double>(static_cast<T>(orig + h)) - orig;
        const double hm = orig - static_cast<double>(static_cast<T>(orig - h));
        est = (fp - fm) / (hp + hm);
        const double right = (fp - f0) / hp, left = (f0 - fm) / hm;
        // Smooth functions agree to O(h); a kink gives an O(1) jump.
        const double scale = std::max({std::abs(right), std::abs(left), 1.0});
        if (std::abs(right - left) <= 100.0 * h * scale || attempt == 3) break;
        ++refined;
        h /= 10.0;
      }
      numeric[i] = est;
    }
    out.push_back(std::move(numeric));
  }
  return out;
}

template <typename T>
GradcheckReport compare(const ParamList<T>& wrt, const std::vector<std::vector<double>>& analytic,
                        const std::vector<std::vector<double>>& numeric, std::size_t refined) {
  GradcheckReport report;
  report.refined = refined;
  std::vector<std::pair<double, double>> norms;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      diff += (a - n) * (a - n);
      na += a * a;
      nn += n * n;
    }
    norms.push_back({std::sqrt(diff), std::max(std::sqrt(na), std::sqrt(nn))});
    report.tensors.push_back({wrt[k].name, 0.0, numeric[k].size()});
  }
  // A tensor whose gradient vanishes identically (a key bias under softmax shift
  // invariance) is measured against a floor tied to the largest gradient.
  double largest = 0.0;
  for (const auto& [d, n] : norms) largest = std::max(largest, n);
  const double floor = std::max(1e-3 * largest, 1e-12);
  for (std::size_t k = 0; k < norms.size(); ++k) {
    const double rel = norms[k].first / std::max(norms[k].second, floor);
    report.tensors[k].rel_error = rel;
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  return report;
}

}  // namespace

template <typename T>
GradcheckReport gradcheck(const std::function<Tensor<T>()>& loss, const ParamList<T>& wrt, double step) {
  const auto analytic = analytic_grads(loss, wrt);
  std::size_t refined = 0;
  const auto numeric = numeric_grads(loss, wrt, step, refined);
  return compare(wrt, analytic, numeric, refined);
}

GradcheckReport gradcheck_against_reference(const std::function<Tensor<float>()>& loss, const ParamList<float>& wrt,
                                            const std::function<Tensor<double>()>& reference,
                                            const ParamList<double>& reference_wrt, double step) {
  if (wrt.size() != reference_wrt.size()) throw ContractError("gradcheck reference has a different tensor list");
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    if (wrt[k].tensor.shape() != reference_wrt[k].tensor.shape()) {
      throw ContractError("gradcheck reference shape differs for '" + wrt[k].name + "'");
    }
    Tensor<double> d = reference_wrt[k].tensor;
    auto dst = d.mutable_data();
    const auto src = wrt[k].tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(src[i]);
  }
  const auto analytic = analytic_grads(loss, wrt);
  std::size_t refined = 0;
  const auto numeric = numeric_grads(reference, reference_wrt, step, refined);
  return compare(wrt, analytic, numeric, refined);
}

template GradcheckReport gradcheck<float>(const std::function<Tensor<float>()>&, const ParamList<float>&, double);
template GradcheckReport gradcheck<double>(const std::function<Tensor<double>()>&, const ParamList<double>&, double);

namespace {

template <typename T>
Tensor<T> uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

// sum(out * r) with a fixed random r, so no output direction is privileged.
template <typename T>
Tensor<T> project(const Tensor<T>& out, const Tensor<T>& r) {
  return sum(mul(out, r));
}

template <typename T>
Tensor<T> fixed_like(const Tensor<T>& out, Rng& rng) {
  Tensor<T> r = uniform<T>(out.shape(), rng);
  r.set_requires_grad(false);
  return r;
}

template <typename T>
struct Suite {
  // Returns the loss builder and the tensors to differentiate.
  std::function<std::pair<std::function<Tensor<T>()>, ParamList<T>>(Rng&)> build;
};

template <typename T>
using Built = std::pair<std::function<Tensor<T>()>, ParamList<T>>;

// Wraps out = f(inputs) with a random projection computed once from the first output.
template <typename T, typename F>
Built<T> projected(ParamList<T> inputs, F f, Rng& rng) {
  Tensor<T> r;
  {
    NoGradScope<T> ng;
    r = fixed_like(f(), rng);
  }
  return {[f, r]() mutable { return project(f(), r); }, std::move(inputs)};
}

ModelConfig suite_config() {
  ModelConfig cfg = micro_config();
  cfg.precision = Precision::f64;
  return cfg;
}

template <typename T>
const std::map<std::string, Suite<T>>& suites() {
  static const std::map<std::string, Suite<T>> table = [] {
    std::map<std::string, Suite<T>> m;
    m["add"] = {[](Rng& rng) {
      auto a = uniform<T>({3, 4}, rng), b = uniform<T>({3, 4}, rng);
      return projected<T>({{"a", a}, {"b", b}}, [a, b] { return add(a, b); }, rng);
    }};
    m["sub"] = {[](Rng& rng) {
      auto a = uniform<T>({3, 4}, rng), b = uniform<T>({3, 4}, rng);
      return projected<T>({{"a", a}, {"b", b}}, [a, b] { return sub(a, b); }, rng);
    }};
    m["mul"] = {[](Rng& rng) {
      auto a = uniform<T>({3, 4}, rng), b = uniform<T>({3, 4}, rng);
      return projected<T>({{"a", a}, {"b", b}}, [a, b] { return mul(a, b); }, rng);
    }};
    m["scale"] = {[](Rng& rng) {
      auto a = uniform<T>({5}, rng);
      return projected<T>({{"a", a}}, [a] { return scale(a, T(-1.75)); }, rng);
    }};
    m["add_bias"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 2, 2}, rng), b = uniform<T>({3}, rng);
      return projected<T>({{"x", x}, {"bias", b}}, [x, b] { return add_bias(x, b, 1); }, rng);
    }};
    m["sum"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 3}, rng);
      return Built<T>{[a] { return sum(mul(a, a)); }, {{"a", a}}};
    }};
    m["mean"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 3}, rng);
      return Built<T>{[a] { return mean(mul(a, a)); }, {{"a", a}}};
    }};
    m["matmul"] = {[](Rng& rng) {
      auto a = uniform<T>({3, 4}, rng), b = uniform<T>({4, 5}, rng);
      return projected<T>({{"a", a}, {"b", b}}, [a, b] { return matmul(a, b); }, rng);
    }};
    m["matmul_batched"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 3, 4}, rng), b = uniform<T>({2, 4, 3}, rng), c = uniform<T>({4, 3}, rng);
      return projected<T>({{"a", a}, {"b", b}, {"c", c}},
                          [a, b, c] { return add(matmul(a, b), transpose_last2(matmul(transpose_last2(b), c))); },
                          rng);
    }};
    m["transpose"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 3, 4}, rng);
      return projected<T>({{"a", a}}, [a] { return transpose_last2(a); }, rng);
    }};
    m["softmax"] = {[](Rng& rng) {
      auto a = uniform<T>({3, 5}, rng);
      return projected<T>({{"a", a}}, [a] { return add(softmax(a, 1), softmax(a, 0)); }, rng);
    }};
    m["relu"] = {[](Rng& rng) {
      auto a = uniform<T>({4, 6}, rng);
      return projected<T>({{"a", a}}, [a] { return relu(a); }, rng);
    }};
    m["gelu"] = {[](Rng& rng) {
      auto a = uniform<T>({4, 6}, rng, -3.0, 3.0);
      return projected<T>({{"a", a}}, [a] { return gelu(a); }, rng);
    }};
    m["reshape"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 6}, rng);
      return projected<T>({{"a", a}}, [a] { return mul(reshape(a, {3, 4}), reshape(a, {3, 4})); }, rng);
    }};
    m["permute"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 3, 4}, rng);
      return projected<T>({{"a", a}}, [a] { return permute(a, {2, 0, 1}); }, rng);
    }};
    m["concat"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 3, 2}, rng), b = uniform<T>({2, 1, 2}, rng);
      return projected<T>({{"a", a}, {"b", b}}, [a, b] { return concat<T>({a, b, a}, 1); }, rng);
    }};
    m["slice"] = {[](Rng& rng) {
      auto a = uniform<T>({2, 5, 3}, rng);
      return projected<T>({{"a", a}}, [a] { return slice(a, 1, 1, 3); }, rng);
    }};
    m["conv2d"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 6, 5, 5}, rng), w = uniform<T>({6, 2, 3, 3}, rng), b = uniform<T>({6}, rng);
      return projected<T>({{"x", x}, {"weight", w}, {"bias", b}},
                          [x, w, b] { return conv2d(x, w, b, 2, 1, 3); }, rng);
    }};
    m["conv2d_pointwise"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 3, 3}, rng), w = uniform<T>({4, 3, 1, 1}, rng);
      return projected<T>({{"x", x}, {"weight", w}}, [x, w] { return conv2d(x, w, Tensor<T>(), 1, 0, 1); }, rng);
    }};
    m["conv2d_depthwise"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 4, 4, 4}, rng), w = uniform<T>({4, 1, 3, 3}, rng), b = uniform<T>({4}, rng);
      return projected<T>({{"x", x}, {"weight", w}, {"bias", b}}, [x, w, b] { return conv2d(x, w, b, 1, 1, 4); },
                          rng);
    }};
    m["linear"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 4}, rng), w = uniform<T>({4, 5}, rng), b = uniform<T>({5}, rng);
      return projected<T>({{"x", x}, {"weight", w}, {"bias", b}}, [x, w, b] { return linear(x, w, b); }, rng);
    }};
    m["layer_norm"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 6}, rng), g = uniform<T>({6}, rng), b = uniform<T>({6}, rng);
      return projected<T>({{"x", x}, {"gamma", g}, {"beta", b}},
                          [x, g, b] { return layer_norm(x, g, b, T(1e-5)); }, rng);
    }};
    m["batch_norm"] = {[](Rng& rng) {
      auto x = uniform<T>({3, 4, 2, 2}, rng), g = uniform<T>({4}, rng), b = uniform<T>({4}, rng);
      return projected<T>({{"x", x}, {"gamma", g}, {"beta", b}},
                          [x, g, b] {
                            Tensor<T> rm(Shape{4}, T(0)), rv(Shape{4}, T(1));
                            return batch_norm(x, g, b, rm, rv, T(1e-5), T(0.1), true);
                          },
                          rng);
    }};
    m["batch_norm_eval"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 2, 2}, rng), g = uniform<T>({3}, rng), b = uniform<T>({3}, rng);
      Tensor<T> rm = uniform<T>({3}, rng), rv = uniform<T>({3}, rng, 0.5, 2.0);
      return projected<T>({{"x", x}, {"gamma", g}, {"beta", b}},
                          [x, g, b, rm, rv]() mutable { return batch_norm(x, g, b, rm, rv, T(1e-5), T(0.1), false); },
                          rng);
    }};
    m["avg_pool"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 2, 5, 4}, rng);
      return projected<T>({{"x", x}}, [x] { return add(avg_pool2d(x, 2), avg_pool2d(x, 2)); }, rng);
    }};
    m["global_avg_pool"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 3, 2}, rng);
      return projected<T>({{"x", x}}, [x] { return global_avg_pool(x); }, rng);
    }};
    m["tokens"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 2, 4}, rng);
      return projected<T>({{"x", x}}, [x] { return tokens_to_grid(mul(grid_to_tokens(x), grid_to_tokens(x)), 2, 4); },
                          rng);
    }};
    m["cross_entropy"] = {[](Rng& rng) {
      auto x = uniform<T>({4, 5}, rng, -3.0, 3.0);
      return Built<T>{[x] { return cross_entropy(x, {0, 4, 2, 2}); }, {{"logits", x}}};
    }};
    m["attention"] = {[](Rng& rng) {
      auto q = uniform<T>({2, 5, 6}, rng), k = uniform<T>({2, 3, 6}, rng), v = uniform<T>({2, 3, 6}, rng);
      return projected<T>({{"q", q}, {"k", k}, {"v", v}}, [q, k, v] { return multi_head_attention(q, k, v, 2); },
                          rng);
    }};
    m["sdpa"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 5, 8}, rng);
      auto layer = std::make_shared<Sdpa<T>>(8, 2, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "sdpa");
      return projected<T>(wrt, [x, layer] { return layer->forward(x); }, rng);
    }};
    m["e_mhsa"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 16, 8}, rng);
      auto layer = std::make_shared<EMhsa<T>>(8, 2, 2, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "e_mhsa");
      return projected<T>(wrt, [x, layer] { return layer->forward(x, 4, 4); }, rng);
    }};
    m["mhca"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 8, 4, 4}, rng);
      auto layer = std::make_shared<Mhca<T>>(8, 2, 3, true, Activation::relu, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "mhca");
      return projected<T>(wrt, [x, layer] { return layer->forward(x, true); }, rng);
    }};
    m["mlp"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 4, 3, 3}, rng);
      auto layer = std::make_shared<Mlp<T>>(4, 2, Activation::gelu, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "mlp");
      return projected<T>(wrt, [x, layer] { return layer->forward(x); }, rng);
    }};
    m["lff"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 4, 3, 3}, rng);
      auto layer = std::make_shared<Lff<T>>(4, 2, 3, Activation::gelu, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "lff");
      return projected<T>(wrt, [x, layer] { return layer->forward(x); }, rng);
    }};
    m["patch_embed"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 3, 4, 4}, rng);
      auto layer = std::make_shared<PatchEmbed<T>>(3, 4, 2, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "patch_embed");
      return projected<T>(wrt, [x, layer] { return layer->tokens(x); }, rng);
    }};
    m["ncb"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 8, 4, 4}, rng);
      auto layer = std::make_shared<Ncb<T>>(suite_config(), 0, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "ncb");
      return projected<T>(wrt, [x, layer] { return layer->forward(x, true); }, rng);
    }};
    m["ntb"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 8, 4, 4}, rng);
      auto layer = std::make_shared<Ntb<T>>(suite_config(), 0, true, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "ntb");
      return projected<T>(wrt, [x, layer] { return layer->forward(x, true); }, rng);
    }};
    m["ntb_mlp"] = {[](Rng& rng) {
      auto x = uniform<T>({2, 8, 4, 4}, rng);
      auto layer = std::make_shared<Ntb<T>>(suite_config(), 0, false, rng);
      ParamList<T> wrt{{"x", x}};
      layer->collect(wrt, "ntb");
      return projected<T>(wrt, [x, layer] { return layer->forward(x, true); }, rng);
    }};
    m["model"] = {[](Rng& rng) {
      const ModelConfig cfg = suite_config();
      auto x = uniform<T>({2, cfg.in_channels, cfg.image_size, cfg.image_size}, rng);
      std::uniform_int_distribution<std::uint64_t> seed_dist;
      auto model = std::make_shared<Model<T>>(cfg, seed_dist(rng));
      std::uniform_int_distribution<std::size_t> label(0, cfg.num_classes - 1);
      const std::vector<std::size_t> targets{label(rng), label(rng)};
      ParamList<T> wrt{{"images", x}};
      for (auto& p : model->parameters()) wrt.push_back(p);
      return Built<T>{[x, model, targets] { return cross_entropy(model->forward(x, true), targets); }, wrt};
    }};
    return m;
  }();
  return table;
}

template <typename T>
GradcheckReport run_suite(const std::string& name, int bits, std::uint64_t seed) {
  const auto& table = suites<T>();
  const auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown gradcheck op '" + name + "'");
  Rng rng(seed);
  auto [loss, wrt] = it->second.build(rng);
  GradcheckReport r;
  if constexpr (std::is_same_v<T, float>) {
    // Single-precision differencing drowns in rounding, so the float backward
    // pass is measured against double differences of the same network.
    Rng twin_rng(seed);
    auto [ref_loss, ref_wrt] = suites<double>().at(name).build(twin_rng);
    r = gradcheck_against_reference(loss, wrt, ref_loss, ref_wrt, default_step(64));
  } else {
    r = gradcheck<T>(loss, wrt, default_step(bits));
  }
  r.suite = name;
  return r;
}

}  // namespace

const std::vector<std::string>& gradcheck_suites() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [k, v] : suites<double>()) n.push_back(k);
    return n;
  }();
  return names;
}

GradcheckReport run_gradcheck(const std::string& suite, int bits, std::uint64_t seed) {
  if (bits == 64) return run_suite<double>(suite, bits, seed);
  if (bits == 32) return run_suite<float>(suite, bits, seed);
  throw ConfigError("gradcheck precision must be 32 or 64 bits, got " + std::to_string(bits));
}

}  // namespace nlvt
