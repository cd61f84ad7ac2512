#include "nlvt/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace nlvt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest representation that round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    char shorter[64];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

template <typename Seq>
std::string join(const Seq& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ", ";
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
      out += format_double(v);
    } else {
      out += std::to_string(v);
    }
  }
  return out;
}

// Consumes recognised keys from a KeyValues map; whatever is left over is unknown.
class KeyReader {
 public:
  explicit KeyReader(const KeyValues& kv) : kv_(kv) {}

  bool has(const std::string& key) const { return kv_.contains(key); }

  const std::string* raw(const std::string& key) {
    auto it = kv_.entries().find(key);
    if (it == kv_.entries().end()) return nullptr;
    used_.insert(key);
    return &it->second.value;
  }

  void read(const std::string& key, std::string& out) {
    if (auto* v = raw(key)) out = *v;
  }

  void read(const std::string& key, std::size_t& out) {
    if (auto* v = raw(key)) out = to_size(key, *v);
  }

  void read(const std::string& key, int& out) {
    if (auto* v = raw(key)) out = static_cast<int>(to_size(key, *v));
  }

  void read(const std::string& key, double& out) {
    if (auto* v = raw(key)) out = to_double(key, *v);
  }

  void read(const std::string& key, bool& out) {
    if (auto* v = raw(key)) out = to_bool(key, *v);
  }

  void read(const std::string& key, Activation& out) {
    if (auto* v = raw(key)) {
      try {
        out = parse_activation(*v);
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      }
    }
  }

  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (auto* v = raw(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) out.push_back(to_size(key, item));
    }
  }

  void read(const std::string& key, std::array<double, 3>& out) {
    if (auto* v = raw(key)) {
      const auto items = split_list(*v);
      if (items.size() != 3) throw ConfigError(key + ": expected 3 comma-separated values");
      for (std::size_t i = 0; i < 3; ++i) out[i] = to_double(key, items[i]);
    }
  }

  void reject_unknown() const {
    for (const auto& [key, entry] : kv_.entries()) {
      if (!used_.count(key)) {
        throw ConfigError("unknown key '" + key + "' (line " + std::to_string(entry.line) + ")");
      }
    }
  }

  static std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      n = std::stoull(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != v.size()) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(n);
  }

  static double to_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double d = 0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != v.size()) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    return d;
  }

  static bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
  }

 private:
  const KeyValues& kv_;
  std::set<std::string> used_;
};

void read_model(KeyReader& r, ModelConfig& m) {
  r.read("name", m.name);
  r.read("in_channels", m.in_channels);
  r.read("image_size", m.image_size);
  r.read("patch_size", m.patch_size);
  std::vector<std::size_t> ncb, repeats, down;
  for (const auto& s : m.stages) {
    ncb.push_back(s.ncb_count);
    repeats.push_back(s.repeat);
    down.push_back(s.downsample ? 1 : 0);
  }
  r.read("ncb_counts", ncb);
  r.read("repeats", repeats);
  r.read("downsample", down);
  if (ncb.size() != repeats.size() || ncb.size() != down.size()) {
    throw ConfigError("ncb_counts, repeats and downsample must list one entry per stage");
  }
  m.stages.clear();
  for (std::size_t i = 0; i < ncb.size(); ++i) {
    if (down[i] > 1) throw ConfigError("downsample: entries must be 0 or 1");
    m.stages.push_back(StageSpec{ncb[i], repeats[i], down[i] == 1});
  }
  r.read("widths", m.widths);
  r.read("heads", m.heads);
  r.read("pool_strides", m.pool_strides);
  r.read("shrink_ratio", m.shrink_ratio);
  r.read("mlp_ratio", m.mlp_ratio);
  r.read("num_classes", m.num_classes);
  r.read("ca_kernel", m.ca_kernel);
  r.read("ca_norm", m.ca_norm);
  r.read("ca_activation", m.ca_activation);
  r.read("mlp_activation", m.mlp_activation);
  if (const auto* p = r.raw("precision")) {
    if (*p == "32") {
      m.precision = Precision::f32;
    } else if (*p == "64") {
      m.precision = Precision::f64;
    } else {
      throw ConfigError("precision: expected 32 or 64, got '" + *p + "'");
    }
  }
  r.read("norm_mean", m.norm_mean);
  r.read("norm_std", m.norm_std);
}

}  // namespace

std::size_t ModelConfig::stage_grid(std::size_t stage) const {
  std::size_t grid = stem_grid();
  for (std::size_t i = 0; i <= stage && i < stages.size(); ++i) {
    if (stages[i].downsample) grid /= 2;
  }
  return grid;
}

std::size_t ModelConfig::attention_channels(std::size_t stage) const {
  return static_cast<std::size_t>(std::floor(shrink_ratio * static_cast<double>(widths[stage])));
}

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (in_channels == 0) fail("in_channels >= 1");
  if (patch_size == 0 || image_size == 0) fail("image_size and patch_size >= 1");
  if (image_size % patch_size != 0) {
    fail("patch_size must divide image_size ((H*W) mod P^2 == 0), got H=W=" +
         std::to_string(image_size) + ", P=" + std::to_string(patch_size));
  }
  if (stages.empty()) fail("at least one stage");
  const std::size_t n = stages.size();
  if (widths.size() != n || heads.size() != n || pool_strides.size() != n) {
    fail("widths, heads and pool_strides need one entry per stage (" + std::to_string(n) + ")");
  }
  if (!(shrink_ratio > 0.0 && shrink_ratio < 1.0)) fail("shrink ratio r in (0, 1)");
  if (mlp_ratio == 0) fail("mlp_ratio m >= 1");
  if (num_classes == 0) fail("num_classes >= 1");
  if (ca_kernel == 0 || ca_kernel % 2 == 0) fail("ca_kernel must be odd");
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(norm_std[c] > 0.0)) fail("norm_std entries > 0");
  }
  std::size_t grid = stem_grid();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string at = " (stage " + std::to_string(i) + ")";
    if (stages[i].repeat == 0) fail("repeat L >= 1" + at);
    if (stages[i].downsample) {
      if (grid < 2 || grid % 2 != 0) fail("downsampling needs an even token grid, got " + std::to_string(grid) + at);
      grid /= 2;
    }
    const std::size_t d = widths[i], h = heads[i];
    if (d == 0 || h == 0) fail("width and heads >= 1" + at);
    if (d % h != 0) fail("width D_i divisible by heads h_i" + at);
    const std::size_t attn = attention_channels(i);
    if (attn < h) fail("floor(r*D_i) >= h_i" + at);
    if (attn % h != 0 || (d - attn) % h != 0) {
      fail("both NTB channel paths (floor(r*D_i) = " + std::to_string(attn) + ", D_i - floor(r*D_i) = " +
           std::to_string(d - attn) + ") divisible by h_i" + at);
    }
    if (pool_strides[i] == 0 || grid % pool_strides[i] != 0) {
      fail("pooling stride S_i must divide the stage grid side " + std::to_string(grid) + at);
    }
  }
}

std::string ModelConfig::to_text() const {
  std::vector<std::size_t> ncb, repeats, down;
  for (const auto& s : stages) {
    ncb.push_back(s.ncb_count);
    repeats.push_back(s.repeat);
    down.push_back(s.downsample ? 1 : 0);
  }
  std::ostringstream os;
  os << "name = " << name << '\n'
     << "in_channels = " << in_channels << '\n'
     << "image_size = " << image_size << '\n'
     << "patch_size = " << patch_size << '\n'
     << "ncb_counts = " << join(ncb) << '\n'
     << "repeats = " << join(repeats) << '\n'
     << "downsample = " << join(down) << '\n'
     << "widths = " << join(widths) << '\n'
     << "heads = " << join(heads) << '\n'
     << "pool_strides = " << join(pool_strides) << '\n'
     << "shrink_ratio = " << format_double(shrink_ratio) << '\n'
     << "mlp_ratio = " << mlp_ratio << '\n'
     << "num_classes = " << num_classes << '\n'
     << "ca_kernel = " << ca_kernel << '\n'
     << "ca_norm = " << (ca_norm ? 1 : 0) << '\n'
     << "ca_activation = " << activation_name(ca_activation) << '\n'
     << "mlp_activation = " << activation_name(mlp_activation) << '\n'
     << "precision = " << (precision == Precision::f64 ? 64 : 32) << '\n'
     << "norm_mean = " << join(norm_mean) << '\n'
     << "norm_std = " << join(norm_std) << '\n';
  return os.str();
}

ModelConfig desk_config() {
  ModelConfig m;
  m.name = "next-lvt-desk";
  m.image_size = 32;
  m.patch_size = 4;
  m.stages = {{1, 1, false}, {1, 1, true}, {2, 1, true}, {1, 1, true}};
  m.widths = {32, 64, 128, 192};
  m.heads = {2, 4, 8, 12};  // width / 16
  m.pool_strides = {4, 2, 1, 1};
  m.shrink_ratio = 0.75;
  m.mlp_ratio = 2;
  m.num_classes = 43;
  return m;
}

ModelConfig micro_config() {
  ModelConfig m;
  m.name = "next-lvt-micro";
  m.image_size = 8;
  m.patch_size = 2;
  m.stages = {{1, 1, false}};
  m.widths = {8};
  m.heads = {2};
  m.pool_strides = {2};
  m.shrink_ratio = 0.5;
  m.mlp_ratio = 2;
  m.num_classes = 4;
  m.precision = Precision::f64;
  return m;
}

ModelConfig paper_config() {
  ModelConfig m;
  m.name = "next-lvt-paper";
  m.image_size = 224;
  m.patch_size = 4;
  m.stages = {{3, 1, false}, {3, 1, true}, {4, 2, true}, {2, 1, true}};
  m.widths = {96, 256, 512, 1024};
  m.heads = {3, 8, 16, 32};  // width / 32
  m.pool_strides = {8, 4, 2, 1};
  m.shrink_ratio = 0.75;
  m.mlp_ratio = 3;
  m.num_classes = 43;
  return m;
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("invalid train config: " + what); };
  if (!(base_lr > 0.0)) fail("base_lr > 0");
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) fail("0 < decay_factor < 1");
  if (decay_every == 0) fail("decay_every >= 1");
  if (train_batch == 0 || eval_batch == 0) fail("batch sizes >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("0 <= momentum < 1");
  if (!(weight_decay >= 0.0)) fail("weight_decay >= 0");
}

void AugmixConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("invalid augmix config: " + what); };
  if (width == 0) fail("width k >= 1");
  if (max_depth == 0) fail("depth >= 1");
  if (severity < 1 || severity > 10) fail("severity in [1, 10]");
  if (!(alpha > 0.0)) fail("alpha > 0");
}

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", number);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", number);
    kv.entries_[key] = Entry{trim(line.substr(eq + 1)), number};
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KeyValues::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  entries_[trim(assignment.substr(0, eq))] = Entry{trim(assignment.substr(eq + 1)), 0};
}

RunConfig run_config_from(const KeyValues& kv) {
  RunConfig rc;
  rc.model = desk_config();
  KeyReader r(kv);
  read_model(r, rc.model);

  TrainConfig& t = rc.train;
  r.read("base_lr", t.base_lr);
  r.read("decay_factor", t.decay_factor);
  r.read("decay_every", t.decay_every);
  r.read("decay_once", t.decay_once);
  r.read("epochs", t.epochs);
  r.read("train_batch", t.train_batch);
  r.read("eval_batch", t.eval_batch);
  r.read("momentum", t.momentum);
  r.read("weight_decay", t.weight_decay);
  if (const auto* v = r.raw("seed")) t.seed = KeyReader::to_size("seed", *v);
  r.read("augment", t.augment);

  AugmixConfig& a = rc.augmix;
  r.read("augmix_width", a.width);
  r.read("augmix_depth", a.max_depth);
  r.read("augmix_severity", a.severity);
  r.read("augmix_alpha", a.alpha);
  if (const auto* v = r.raw("augmix_seed")) a.seed = KeyReader::to_size("augmix_seed", *v);

  r.read("train_manifest", rc.data.train_manifest);
  r.read("test_manifest", rc.data.test_manifest);

  r.reject_unknown();
  rc.model.validate();
  rc.train.validate();
  rc.augmix.validate();
  return rc;
}

ModelConfig model_config_from_text(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text);
  ModelConfig m = desk_config();
  KeyReader r(kv);
  read_model(r, m);
  r.reject_unknown();
  m.validate();
  return m;
}

}  // namespace nlvt
