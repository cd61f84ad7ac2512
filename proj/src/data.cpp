#include "nlvt/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace nlvt {

namespace fs = std::filesystem;

// ---- files -----------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot replace '" + path + "'");
  }
}

// ---- PPM -------------------------------------------------------------------

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("ppm: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) {
      throw FormatError(std::string("ppm: expected ") + what + (pos_ >= b_.size() ? ", got end of file" : ""),
                        start);
    }
    start_ = start;
    return v;
  }

  std::size_t pos() const { return pos_; }
  std::size_t last_start() const { return start_; }
  void advance() { ++pos_; }
  bool at_space() const { return pos_ < b_.size() && std::isspace(b_[pos_]); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
  std::size_t start_ = 0;
};

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw FormatError("ppm: bad magic, expected 'P6'", 0);
  }
  HeaderReader r(bytes.subspan(0));
  r.advance();
  r.advance();
  if (!r.at_space()) throw FormatError("ppm: expected whitespace after magic", 2);
  const std::size_t width = r.number("width");
  if (width == 0) throw FormatError("ppm: zero width", r.last_start());
  const std::size_t height = r.number("height");
  if (height == 0) throw FormatError("ppm: zero height", r.last_start());
  const std::size_t maxval = r.number("maxval");
  if (maxval != 255) {
    throw FormatError("ppm: maxval " + std::to_string(maxval) + " unsupported, expected 255",
                      r.last_start());
  }
  if (!r.at_space()) throw FormatError("ppm: expected single whitespace after maxval", r.pos());
  r.advance();
  const std::size_t offset = r.pos();
  const std::size_t need = width * height * 3;
  if (bytes.size() - offset < need) {
    throw FormatError("ppm: truncated payload, " + std::to_string(bytes.size() - offset) + " of " +
                          std::to_string(need) + " bytes",
                      bytes.size());
  }
  Image img(Shape{3, height, width});
  auto d = img.mutable_data();
  const std::size_t plane = width * height;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) d[c * plane + i] = bytes[offset + 3 * i + c] / 255.0;
  }
  return img;
}

Image load_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("ppm: expected a [3, H, W] image, got " + shape_str(img.shape()));
  }
  const std::size_t h = img.dim(1), w = img.dim(2), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * plane);
  auto d = img.data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(d[c * plane + i]));
  }
  return out;
}

void write_ppm(const std::string& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  write_file_atomic(path, bytes);
}

// ---- manifests -------------------------------------------------------------

namespace {

std::string lower_trim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  s.erase(0, i);
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<std::size_t> find_column(const std::vector<std::string>& header,
                                       std::initializer_list<const char*> names) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    for (const char* n : names) {
      if (header[i] == n) return i;
    }
  }
  return std::nullopt;
}

std::size_t parse_index(const std::string& field, const char* what, std::size_t line) {
  const std::string s = lower_trim(field);
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw ParseError(std::string(what) + " '" + field + "' is not a non-negative integer", line);
  }
  try {
    return static_cast<std::size_t>(std::stoull(s));
  } catch (const std::exception&) {
    throw ParseError(std::string(what) + " '" + field + "' out of range", line);
  }
}

}  // namespace

Manifest parse_manifest(const std::string& text, const std::string& base_dir,
                        const ManifestOptions& opts) {
  Manifest m;
  m.num_classes = opts.num_classes;
  m.split = opts.split;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  std::vector<std::string> header;
  char sep = ',';
  std::size_t col_path = 0, col_label = 0;
  std::optional<std::array<std::size_t, 4>> col_roi;

  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lower_trim(line).empty()) continue;
    if (header.empty()) {
      sep = line.find(';') != std::string::npos ? ';' : ',';
      for (auto& f : split(line, sep)) header.push_back(lower_trim(f));
      const auto p = find_column(header, {"path", "filename", "file"});
      if (!p) throw ParseError("missing path column", number);
      const auto l = find_column(header, {"label", "classid", "class"});
      if (!l) throw ParseError("missing label column", number);
      col_path = *p;
      col_label = *l;
      const auto x1 = find_column(header, {"x1", "roi.x1"});
      const auto y1 = find_column(header, {"y1", "roi.y1"});
      const auto x2 = find_column(header, {"x2", "roi.x2"});
      const auto y2 = find_column(header, {"y2", "roi.y2"});
      const int present = !!x1 + !!y1 + !!x2 + !!y2;
      if (present != 0 && present != 4) throw ParseError("incomplete ROI columns, need x1,y1,x2,y2", number);
      if (present == 4) col_roi = std::array<std::size_t, 4>{*x1, *y1, *x2, *y2};
      continue;
    }
    const auto fields = split(line, sep);
    if (fields.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()),
                       number);
    }
    Sample s;
    std::string rel = fields[col_path];
    while (!rel.empty() && std::isspace(static_cast<unsigned char>(rel.back()))) rel.pop_back();
    while (!rel.empty() && std::isspace(static_cast<unsigned char>(rel.front()))) rel.erase(0, 1);
    if (rel.empty()) throw ParseError("empty path", number);
    const fs::path p(rel);
    s.path = p.is_absolute() || base_dir.empty() ? p.string() : (fs::path(base_dir) / p).string();
    s.label = parse_index(fields[col_label], "label", number);
    if (s.label >= opts.num_classes) {
      throw ParseError("label " + std::to_string(s.label) + " outside [0, " +
                           std::to_string(opts.num_classes) + ")",
                       number);
    }
    if (col_roi) {
      Roi r;
      r.x1 = parse_index(fields[(*col_roi)[0]], "x1", number);
      r.y1 = parse_index(fields[(*col_roi)[1]], "y1", number);
      r.x2 = parse_index(fields[(*col_roi)[2]], "x2", number);
      r.y2 = parse_index(fields[(*col_roi)[3]], "y2", number);
      if (r.x2 <= r.x1 || r.y2 <= r.y1) throw ParseError("empty ROI", number);
      s.roi = r;
    }
    if (opts.verify_paths && !fs::exists(s.path)) {
      throw IoError("line " + std::to_string(number) + ": image '" + s.path + "' not found");
    }
    m.samples.push_back(std::move(s));
  }
  if (header.empty()) throw ParseError("empty manifest, header expected", std::max<std::size_t>(number, 1));
  return m;
}

Manifest load_manifest(const std::string& path, const ManifestOptions& opts) {
  const auto bytes = read_file_bytes(path);
  const std::string base = fs::path(path).parent_path().string();
  return parse_manifest(std::string(bytes.begin(), bytes.end()), base, opts);
}

void write_manifest(const std::string& path, const Manifest& manifest) {
  std::ostringstream out;
  const bool roi = std::any_of(manifest.samples.begin(), manifest.samples.end(),
                               [](const Sample& s) { return s.roi.has_value(); });
  out << (roi ? "path;label;x1;y1;x2;y2\n" : "path;label\n");
  const fs::path base = fs::path(path).parent_path();
  for (const auto& s : manifest.samples) {
    const fs::path p(s.path);
    out << (base.empty() ? p : p.lexically_proximate(base)).string() << ';' << s.label;
    if (roi) {
      if (!s.roi) throw ContractError("write_manifest: ROI columns need a ROI on every sample");
      out << ';' << s.roi->x1 << ';' << s.roi->y1 << ';' << s.roi->x2 << ';' << s.roi->y2;
    }
    out << '\n';
  }
  const std::string text = out.str();
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---- preprocessing ---------------------------------------------------------

Image crop_resize(const Image& img, const std::optional<Roi>& roi, std::size_t side) {
  if (img.rank() != 3) throw ShapeError("crop_resize: expected [C, H, W], got " + shape_str(img.shape()));
  if (side == 0) throw ContractError("crop_resize: side must be >= 1");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Roi box{0, 0, w, h};
  if (roi) {
    box = *roi;
    if (box.x2 <= box.x1 || box.y2 <= box.y1) throw ContractError("crop_resize: degenerate ROI");
    if (box.x2 > w || box.y2 > h) {
      throw ContractError("crop_resize: ROI exceeds the " + std::to_string(w) + "x" + std::to_string(h) +
                          " image");
    }
  }
  const std::size_t ch = box.y2 - box.y1, cw = box.x2 - box.x1;
  Image out(Shape{c, side, side});
  auto o = out.mutable_data();
  auto in = img.data();
  const auto src = [](std::size_t dst, std::size_t in_len, std::size_t out_len) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_len) / static_cast<double>(out_len) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in_len - 1));
  };
  for (std::size_t y = 0; y < side; ++y) {
    const double sy = src(y, ch, side);
    const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, ch - 1);
    const double ay = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < side; ++x) {
      const double sx = src(x, cw, side);
      const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, cw - 1);
      const double ax = sx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const auto at = [&](std::size_t yy, std::size_t xx) {
          return in[(k * h + box.y1 + yy) * w + box.x1 + xx];
        };
        double v = (1 - ay) * (1 - ax) * at(y0, x0);
        if (ax > 0) v += (1 - ay) * ax * at(y0, x1);
        if (ay > 0) v += ay * (1 - ax) * at(y1, x0);
        if (ax > 0 && ay > 0) v += ay * ax * at(y1, x1);
        o[(k * side + y) * side + x] = v;
      }
    }
  }
  return out;
}

Image normalize(const Image& img, const std::array<double, 3>& mean, const std::array<double, 3>& std) {
  if (img.rank() != 3 || img.dim(0) > 3) {
    throw ShapeError("normalize: expected [C<=3, H, W], got " + shape_str(img.shape()));
  }
  Image out(img.shape());
  const std::size_t plane = img.dim(1) * img.dim(2);
  auto o = out.mutable_data();
  auto in = img.data();
  for (std::size_t c = 0; c < img.dim(0); ++c) {
    if (!(std[c] > 0.0)) throw ContractError("normalize: std must be positive");
    for (std::size_t i = 0; i < plane; ++i) o[c * plane + i] = (in[c * plane + i] - mean[c]) / std[c];
  }
  return out;
}

Image preprocess(const Image& img, const std::optional<Roi>& roi, std::size_t side,
                 const std::array<double, 3>& mean, const std::array<double, 3>& std) {
  return normalize(crop_resize(img, roi, side), mean, std);
}

Dataset load_dataset(const Manifest& manifest, std::size_t side) {
  Dataset ds;
  ds.num_classes = manifest.num_classes;
  ds.images.resize(manifest.size());
  ds.labels.resize(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const Sample& s = manifest.samples[i];
    ds.images[i] = crop_resize(load_ppm(s.path), s.roi, side);
    ds.labels[i] = s.label;
  }
  return ds;
}

// ---- synthetic signs -------------------------------------------------------

namespace {

constexpr std::array<std::array<double, 3>, 3> kRimColours{{
    {0.85, 0.08, 0.10},  // red
    {0.10, 0.25, 0.80},  // blue
    {0.95, 0.80, 0.10},  // yellow
}};

bool inside_shape(std::size_t shape, double u, double v, double r) {
  u /= r;
  v /= r;
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return v <= 0.6 && v >= -1.0 && std::abs(u) * 1.1547 <= (v + 1.0);
    case 2: return std::abs(u) + std::abs(v) <= 1.0;
    default: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
  }
}

bool inside_glyph(std::size_t glyph, double u, double v, double r) {
  u /= r;
  v /= r;
  switch (glyph) {
    case 1: return std::abs(v) <= 0.12 && std::abs(u) <= 0.45;                          // bar
    case 2: return std::abs(u) <= 0.12 && std::abs(v) <= 0.45;                          // post
    case 3: return u * u + v * v <= 0.06;                                               // dot
    default: return false;
  }
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

Image synth_sign(std::size_t label, std::size_t side, Rng& rng) {
  if (label >= 48) throw ConfigError("synthetic signs support at most 48 classes");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t shape = label % 4, colour = (label / 4) % 3, glyph = (label / 12) % 4;
  const double s = static_cast<double>(side);
  const double radius = s * (0.30 + 0.12 * unit(rng));
  const double cx = s / 2 + (unit(rng) - 0.5) * 0.16 * s;
  const double cy = s / 2 + (unit(rng) - 0.5) * 0.16 * s;
  const double gain = 0.65 + 0.35 * unit(rng);
  std::array<double, 3> bg;
  for (double& b : bg) b = 0.15 + 0.45 * unit(rng);
  std::normal_distribution<double> noise(0.0, 0.04);

  Image img(Shape{3, side, side});
  auto d = img.mutable_data();
  const std::size_t plane = side * side;
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      // 2 x 2 supersampling for soft edges.
      std::array<double, 3> acc{0, 0, 0};
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double u = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double v = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          std::array<double, 3> px = bg;
          if (inside_shape(shape, u, v, radius)) {
            px = kRimColours[colour];
            if (inside_shape(shape, u, v, radius * 0.62)) {
              px = {0.95, 0.95, 0.95};
              if (inside_glyph(glyph, u, v, radius)) px = {0.05, 0.05, 0.05};
            }
          }
          for (int c = 0; c < 3; ++c) acc[c] += px[c] / 4;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        d[c * plane + y * side + x] = std::clamp(acc[c] * gain + noise(rng), 0.0, 1.0);
      }
    }
  }
  return img;
}

Dataset synth_dataset(std::size_t count, std::size_t classes, std::size_t side, std::uint64_t seed) {
  if (classes == 0 || classes > 48) throw ConfigError("synthetic classes must be in [1, 48]");
  Dataset ds;
  ds.num_classes = classes;
  ds.images.resize(count);
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(splitmix(seed * 0x100000001B3ull + i));
    ds.labels[i] = i % classes;
    ds.images[i] = synth_sign(ds.labels[i], side, rng);
  }
  return ds;
}

std::string write_synth_dataset(const std::string& dir, std::size_t count, std::size_t classes,
                                std::size_t side, std::uint64_t seed) {
  fs::create_directories(dir);
  const Dataset ds = synth_dataset(count, classes, side, seed);
  Manifest m;
  m.num_classes = classes;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = "sign_" + std::to_string(i) + ".ppm";
    write_ppm((fs::path(dir) / name).string(), ds.images[i]);
    m.samples.push_back({(fs::path(dir) / name).string(), ds.labels[i], std::nullopt});
  }
  const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  write_manifest(manifest_path, m);
  return manifest_path;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) { put(&v, 4); }
  void u64(std::uint64_t v) { put(&v, 8); }
  void f32(float v) { put(&v, 4); }
  void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& out() { return out_; }

 private:
  // Little-endian hosts only; checked at compile time below.
  void put(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> out_;
};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32(const char* what) { return get<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return get<std::uint64_t>(what); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& out, std::size_t n, const char* what) {
    if (n > (b_.size() - pos_) / 4) need(n * 4, what);
    out.resize(n);
    std::memcpy(out.data(), b_.data() + pos_, n * 4);
    pos_ += n * 4;
  }
  std::size_t pos() const { return pos_; }

 private:
  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("NLVT");
  w.u32(ckpt.version);
  w.u32(static_cast<std::uint32_t>(ckpt.config_text.size()));
  w.bytes(ckpt.config_text);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (shape_numel(e.shape) != e.values.size()) {
      throw ContractError("checkpoint entry '" + e.name + "' has inconsistent shape");
    }
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.u64(d);
    for (float v : e.values) w.f32(v);
  }
  const std::uint32_t crc = crc_of(w.out());
  w.u32(crc);
  return std::move(w.out());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "NLVT", 4) != 0) {
    throw CorruptionError("checkpoint: bad magic, expected 'NLVT'");
  }
  if (bytes.size() < 12) throw CorruptionError("checkpoint truncated: header incomplete");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  Reader r(body);
  r.str(4, "magic");
  Checkpoint ck;
  ck.version = r.u32("version");
  // A checksum failure on a file of another version is reported as a version problem.
  if (ck.version != kCheckpointVersion) {
    throw CorruptionError("checkpoint version " + std::to_string(ck.version) + " unsupported, expected " +
                          std::to_string(kCheckpointVersion));
  }
  if (crc_of(body) != stored) throw CorruptionError("checkpoint checksum mismatch (truncated or corrupted file)");
  ck.config_text = r.str(r.u32("config length"), "config text");
  const std::uint32_t count = r.u32("entry count");
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u32("name length"), "name");
    if (!seen.insert(e.name).second) throw CorruptionError("checkpoint: duplicate entry '" + e.name + "'");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw CorruptionError("checkpoint: entry '" + e.name + "' has invalid rank");
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t dim = r.u64("dimension");
      if (dim == 0 || dim > (1ull << 32)) throw CorruptionError("checkpoint: entry '" + e.name + "' has invalid shape");
      e.shape.push_back(static_cast<std::size_t>(dim));
      numel *= static_cast<std::size_t>(dim);
      if (numel > body.size()) throw CorruptionError("checkpoint: entry '" + e.name + "' larger than file");
    }
    r.floats(e.values, numel, "values");
    ck.entries.push_back(std::move(e));
  }
  if (r.pos() != body.size()) throw CorruptionError("checkpoint: trailing bytes after last entry");
  return ck;
}

Checkpoint read_checkpoint_file(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model) {
  Checkpoint ck;
  ck.config_text = model.config().to_text();
  for (const auto& [name, t] : model.state()) {
    CheckpointEntry e{name, t.shape(), {}};
    e.values.reserve(t.numel());
    for (T v : t.data()) e.values.push_back(static_cast<float>(v));
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

template <typename T>
void apply_checkpoint(Model<T>& model, const Checkpoint& ckpt) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.entries) by_name.emplace(e.name, &e);
  auto state = model.state();
  std::unordered_set<std::string> known;
  for (const auto& [name, t] : state) {
    known.insert(name);
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CorruptionError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape != t.shape()) {
      throw ShapeError("checkpoint shape mismatch at '" + name + "': stored " + shape_str(it->second->shape) +
                       ", model " + shape_str(t.shape()));
    }
  }
  for (const auto& e : ckpt.entries) {
    if (!known.count(e.name)) throw CorruptionError("checkpoint has unknown tensor '" + e.name + "'");
  }
  for (auto& [name, t] : state) {
    const auto& src = by_name.at(name)->values;
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  const auto bytes = encode_checkpoint(make_checkpoint(model));
  write_file_atomic(path, bytes);
}

template <typename T>
void load_checkpoint(Model<T>& model, const std::string& path) {
  apply_checkpoint(model, read_checkpoint_file(path));
}

template <typename T>
Model<T> load_model(const std::string& path) {
  const Checkpoint ck = read_checkpoint_file(path);
  ModelConfig cfg;
  try {
    cfg = model_config_from_text(ck.config_text);
  } catch (const std::exception& e) {
    throw CorruptionError(std::string("checkpoint config unreadable: ") + e.what());
  }
  Model<T> model(cfg, 0);
  apply_checkpoint(model, ck);
  return model;
}

#define NLVT_INSTANTIATE_DATA(T)                                            \
  template Checkpoint make_checkpoint<T>(const Model<T>&);                  \
  template void apply_checkpoint<T>(Model<T>&, const Checkpoint&);          \
  template void save_checkpoint<T>(const Model<T>&, const std::string&);    \
  template void load_checkpoint<T>(Model<T>&, const std::string&);          \
  template Model<T> load_model<T>(const std::string&);

NLVT_INSTANTIATE_DATA(float)
NLVT_INSTANTIATE_DATA(double)

}  // namespace nlvt
