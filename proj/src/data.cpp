#include "diat/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace diat::data {

namespace fs = std::filesystem;

int attribute_index(std::string_view name) {
  for (std::size_t i = 0; i < kAttributes.size(); ++i)
    if (kAttributes[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("unknown attribute '" + std::string(name) + "'");
}

int local_index(std::string_view name) {
  attribute_index(name);
  for (std::size_t i = 0; i < kLocalAttributes.size(); ++i)
    if (kLocalAttributes[i] == name) return static_cast<int>(i);
  return -1;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view s, const char* what) {
  s = trim(s);
  T v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw std::invalid_argument(std::string("bad ") + what + ": '" + std::string(s) + "'");
  return v;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// splitmix64 finalizer; decorrelates (seed, stream, index) triples.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return mix(mix(seed ^ mix(stream)) + index);
}

constexpr std::uint64_t kIdentityStream = 1, kSampleStream = 2;

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Rgb scale(const Rgb& c, double k) { return {c[0] * k, c[1] * k, c[2] * k}; }
Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

bool in_ellipse(double u, double v, double cx, double cy, double rx, double ry) {
  const double a = (u - cx) / rx, b = (v - cy) / ry;
  return a * a + b * b <= 1.0;
}

bool in_rect(double u, double v, double cx, double cy, double hw, double hh) {
  return std::abs(u - cx) <= hw && std::abs(v - cy) <= hh;
}

constexpr double kFaceCy = 0.53;
constexpr double kFrameT = 0.016;
constexpr double kOpenMouthH = 0.045;

struct Painter {
  const IdentityParams& p;
  const Attributes& a;

  double glasses_hw() const { return p.eye_r * 1.5 + 0.02; }
  double glasses_hh() const { return p.eye_r + 0.025; }

  bool in_glasses_region(double u, double v) const {
    const double hw = glasses_hw(), hh = glasses_hh();
    for (int s : {-1, 1})
      if (in_rect(u, v, 0.5 + s * p.eye_dx, p.eye_y, hw, hh)) return true;
    return in_rect(u, v, 0.5, p.eye_y - hh * 0.3, p.eye_dx - hw + 0.001, kFrameT / 2);
  }

  bool in_closed_mouth(double u, double v) const {
    const double du = (u - 0.5) / p.mouth_w;
    if (std::abs(du) > 1.0) return false;
    return std::abs(v - (p.mouth_y + 0.02 * (1 - du * du))) < 0.008;
  }
  bool in_open_mouth(double u, double v) const { return in_ellipse(u, v, 0.5, p.mouth_y, p.mouth_w, kOpenMouthH); }
  bool in_mouth_region(double u, double v) const { return in_open_mouth(u, v) || in_closed_mouth(u, v); }

  Rgb shade(double u, double v) const {
    const bool male = a[3], elderly = a[2];
    Rgb c = p.background;
    if (in_ellipse(u, v, 0.5, kFaceCy - p.face_ry * 0.55, p.face_rx * 1.12, p.face_ry * 0.55 + p.hair_height))
      c = p.hair;
    double rx = p.face_rx;
    if (male) rx *= 1.0 + 0.18 * std::clamp((v - kFaceCy) / p.face_ry + 0.2, 0.0, 1.0);
    const bool face = in_ellipse(u, v, 0.5, kFaceCy, rx, p.face_ry);
    if (face) c = p.skin;
    if (face && elderly) {
      for (int k = 0; k < 3; ++k) {
        const double y = kFaceCy - p.face_ry * 0.62 + k * 0.035 + 0.01 * std::cos(12.0 * (u - 0.5));
        if (std::abs(v - y) < 0.006 && std::abs(u - 0.5) < p.face_rx * 0.45) c = scale(p.skin, 0.72);
      }
      for (int s : {-1, 1}) {
        // Lines from the nose wings to the mouth corners.
        const double t = (v - (p.eye_y + 0.1)) / (p.mouth_y - p.eye_y - 0.1);
        const double x = 0.5 + s * (0.04 + t * (p.mouth_w + 0.01 - 0.04));
        if (t >= 0 && t <= 1 && std::abs(u - x) < 0.006) c = scale(p.skin, 0.72);
      }
    }
    for (int s : {-1, 1}) {
      const double ex = 0.5 + s * p.eye_dx;
      if (in_ellipse(u, v, ex, p.eye_y, p.eye_r * 1.5, p.eye_r)) c = {0.95, 0.95, 0.93};
      if (in_ellipse(u, v, ex, p.eye_y, p.eye_r * 0.65, p.eye_r * 0.65)) c = p.iris;
      if (in_ellipse(u, v, ex, p.eye_y, p.eye_r * 0.3, p.eye_r * 0.3)) c = {0.03, 0.03, 0.03};
    }
    if (std::abs(u - 0.5) < 0.008 && v > p.eye_y + 0.04 && v < p.eye_y + 0.04 + p.nose_len) c = scale(p.skin, 0.75);
    if (a[1]) {
      if (in_open_mouth(u, v)) c = {0.35, 0.05, 0.08};
    } else if (in_closed_mouth(u, v)) {
      c = {0.6, 0.15, 0.2};
    }
    if (a[0] && in_glasses_region(u, v)) {
      const double hw = glasses_hw(), hh = glasses_hh();
      bool lens = false;
      for (int s : {-1, 1}) lens |= in_rect(u, v, 0.5 + s * p.eye_dx, p.eye_y, hw - kFrameT, hh - kFrameT);
      c = lens ? lerp(c, {0.6, 0.7, 0.8}, 0.25) : p.frame;
    }
    return c;
  }
};

// Pixels within `r` (Euclidean) of a set pixel.
std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, int size, int r) {
  std::vector<std::uint8_t> out(m.size(), 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!m[static_cast<std::size_t>(y * size + x)]) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (dx * dx + dy * dy > r * r || yy < 0 || xx < 0 || yy >= size || xx >= size) continue;
          out[static_cast<std::size_t>(yy * size + xx)] = 1;
        }
    }
  return out;
}

}  // namespace

Marginals Marginals::parse(std::string_view text) {
  Marginals m;
  text = trim(text);
  if (text.empty()) return m;
  for (auto item : split(text, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("marginal '" + std::string(item) + "' lacks '='");
    const int i = attribute_index(trim(item.substr(0, eq)));
    const double p = parse_number<double>(item.substr(eq + 1), "marginal");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("marginal must lie in [0,1]");
    m.p[static_cast<std::size_t>(i)] = p;
  }
  return m;
}

std::string Marginals::str() const {
  std::string out;
  for (std::size_t i = 0; i < kAttributes.size(); ++i) {
    if (i) out += ',';
    out += std::string(kAttributes[i]) + "=" + fmt_double(p[i]);
  }
  return out;
}

void GeneratorConfig::validate() const {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  if (size != 16 && size != 32 && size != 64 && size != 128)
    throw std::invalid_argument("image size must be 16, 32, 64 or 128, got " + std::to_string(size));
  if (n_identities < 1) throw std::invalid_argument("n_identities must be >= 1");
  for (double p : marginals.p)
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("marginal must lie in [0,1]");
}

std::vector<double> IdentityParams::flat() const {
  std::vector<double> v;
  for (const auto* c : {&skin, &background, &hair, &iris, &frame}) v.insert(v.end(), c->begin(), c->end());
  for (double x : {face_rx, face_ry, hair_height, eye_dx, eye_y, eye_r, nose_len, mouth_y, mouth_w}) v.push_back(x);
  return v;
}

IdentityParams identity_params(std::uint64_t seed, int identity) {
  std::mt19937_64 rng(stream_seed(seed, kIdentityStream, static_cast<std::uint64_t>(identity)));
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto rgb = [&](double lo, double hi) { return Rgb{u(lo, hi), u(lo, hi), u(lo, hi)}; };
  IdentityParams p{};
  p.skin = hsv(u(0, 1), u(0.25, 0.55), u(0.55, 0.95));
  p.background = rgb(0.05, 0.95);
  p.hair = hsv(u(0, 1), u(0.2, 0.9), u(0.05, 0.6));
  p.iris = rgb(0.0, 0.6);
  p.frame = rgb(0.0, 0.4);
  p.face_rx = u(0.25, 0.33);
  p.face_ry = u(0.31, 0.38);
  p.hair_height = u(0.05, 0.15);
  p.eye_dx = u(0.10, 0.14);
  p.eye_y = u(0.42, 0.47);
  p.eye_r = u(0.03, 0.045);
  p.nose_len = u(0.06, 0.10);
  p.mouth_y = u(0.70, 0.74);
  p.mouth_w = u(0.07, 0.11);
  return p;
}

int mask_margin(int size) { return std::max(1, static_cast<int>(std::lround(2.0 * size / 32.0))); }

float quantize_u8(double v) {
  const long k = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<float>(k) / 255.0f;
}

SyntheticFaceSample render_face(const GeneratorConfig& cfg, int identity, const Attributes& attrs,
                                const Nuisance& nuisance, DType dt) {
  cfg.validate();
  if (identity < 0 || identity >= cfg.n_identities)
    throw std::invalid_argument("identity " + std::to_string(identity) + " out of range");
  const int S = cfg.size;
  const auto p = identity_params(cfg.seed, identity);
  const Painter painter{p, attrs};
  constexpr int kSub = 4;
  std::vector<double> img(static_cast<std::size_t>(3 * S * S));
  std::vector<std::uint8_t> cover_glasses(static_cast<std::size_t>(S * S)), cover_mouth(cover_glasses.size());
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      Rgb acc{0, 0, 0};
      bool g = false, m = false;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double u = (x + (sx + 0.5) / kSub) / S - nuisance.dx;
          const double v = (y + (sy + 0.5) / kSub) / S - nuisance.dy;
          const auto c = painter.shade(u, v);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
          g |= painter.in_glasses_region(u, v);
          m |= painter.in_mouth_region(u, v);
        }
      const std::size_t pix = static_cast<std::size_t>(y * S + x);
      cover_glasses[pix] = g;
      cover_mouth[pix] = m;
      Rgb c = scale(acc, nuisance.brightness / (kSub * kSub));
      if (attrs[2]) {
        const double grey = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        c = lerp(c, {grey, grey, grey}, 0.6);
      }
      for (int k = 0; k < 3; ++k) img[static_cast<std::size_t>(k * S * S) + pix] = quantize_u8(c[k]);
    }
  SyntheticFaceSample s;
  s.image = Tensor::from(Shape{3, S, S}, img, dt);
  s.attributes = attrs;
  s.identity = identity;
  const int r = mask_margin(S);
  std::size_t li = 0;
  for (const auto* cover : {&cover_glasses, &cover_mouth}) {
    const auto d = dilate(*cover, S, r);
    std::vector<double> mv(d.begin(), d.end());
    s.masks[li++] = Tensor::from(Shape{1, S, S}, mv, dt);
  }
  s.provenance = p.flat();
  for (double v : {nuisance.brightness, nuisance.dx, nuisance.dy}) s.provenance.push_back(v);
  for (bool b : attrs) s.provenance.push_back(b ? 1.0 : 0.0);
  return s;
}

SyntheticFaceSample generate_sample(const GeneratorConfig& cfg, std::int64_t index) {
  cfg.validate();
  if (index < 0 || index >= cfg.n) throw std::invalid_argument("sample index out of range");
  std::mt19937_64 rng(stream_seed(cfg.seed, kSampleStream, static_cast<std::uint64_t>(index)));
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const int identity = std::uniform_int_distribution<int>(0, cfg.n_identities - 1)(rng);
  Attributes attrs{};
  for (std::size_t i = 0; i < attrs.size(); ++i) attrs[i] = u(0, 1) < cfg.marginals.p[i];
  Nuisance nz;
  nz.brightness = u(0.92, 1.08);
  nz.dx = u(-1.0, 1.0) / cfg.size;
  nz.dy = u(-1.0, 1.0) / cfg.size;
  return render_face(cfg, identity, attrs, nz);
}

// --- codec ---

std::string encode_ppm(const Tensor& image) {
  const auto& s = image.shape();
  if (s.rank() != 3 || (s[0] != 3 && s[0] != 1))
    throw CodecError("encode_ppm: expected [3,H,W] or [1,H,W], got " + s.str());
  const auto h = s[1], w = s[2], c = s[0];
  const auto v = image.to_vector();
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const auto header = out.size();
  out.resize(header + static_cast<std::size_t>(3 * h * w));
  for (std::int64_t i = 0; i < h * w; ++i)
    for (int k = 0; k < 3; ++k) {
      const double x = v[static_cast<std::size_t>((c == 3 ? k : 0) * h * w + i)];
      out[header + static_cast<std::size_t>(3 * i + k)] =
          static_cast<char>(std::lround(std::clamp(std::isnan(x) ? 0.0 : x, 0.0, 1.0) * 255.0));
    }
  return out;
}

Tensor decode_ppm(std::string_view bytes, DType dt) {
  std::size_t pos = 0;
  // Header tokens separated by whitespace, with '#' comments.
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const auto start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw CodecError("truncated PPM header");
    return std::string(bytes.substr(start, pos - start));
  };
  const auto magic = token();
  if (magic != "P6" && magic != "P5") throw CodecError("not a binary PPM/PGM file (magic '" + magic + "')");
  const int channels = magic == "P6" ? 3 : 1;
  long w = 0, h = 0, maxval = 0;
  try {
    w = parse_number<long>(token(), "width");
    h = parse_number<long>(token(), "height");
    maxval = parse_number<long>(token(), "maxval");
  } catch (const std::invalid_argument& e) {
    throw CodecError(std::string("malformed PPM header: ") + e.what());
  }
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16) throw CodecError("PPM dimensions out of range");
  if (maxval != 255) throw CodecError("only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw CodecError("malformed PPM header");
  ++pos;
  const auto n = static_cast<std::size_t>(w * h * channels);
  if (bytes.size() - pos != n)
    throw CodecError("PPM payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " + std::to_string(n));
  std::vector<double> v(static_cast<std::size_t>(3 * w * h));
  for (long i = 0; i < w * h; ++i)
    for (int k = 0; k < 3; ++k) {
      const auto b = static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i * channels + (channels == 3 ? k : 0))]);
      v[static_cast<std::size_t>(k * w * h + i)] = static_cast<float>(b) / 255.0f;
    }
  return Tensor::from(Shape{3, h, w}, v, dt);
}

void encode_image(const Tensor& image, const fs::path& path) {
  const auto bytes = encode_ppm(image);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CodecError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CodecError("write failed for " + path.string());
}

Tensor decode_image(const fs::path& path, int expected_size, DType dt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CodecError("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  Tensor t;
  try {
    t = decode_ppm(bytes, dt);
  } catch (const CodecError& e) {
    throw CodecError(path.string() + ": " + e.what());
  }
  if (expected_size > 0 && (t.shape()[1] != expected_size || t.shape()[2] != expected_size))
    throw CodecError(path.string() + ": expected " + std::to_string(expected_size) + "x" +
                     std::to_string(expected_size) + ", got " + t.shape().str());
  return t;
}

Tensor decode_mask(const fs::path& path, int expected_size, DType dt) {
  const auto t = decode_image(path, expected_size, DType::f64);
  const auto h = t.shape()[1], w = t.shape()[2];
  const auto v = t.to_vector();
  std::vector<double> m(static_cast<std::size_t>(h * w));
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v[i] > 0.5 ? 1.0 : 0.0;
  return Tensor::from(Shape{1, h, w}, m, dt);
}

// --- manifests ---

namespace {

constexpr std::string_view kManifestMagic = "# diat synthetic faces v1";

std::string image_rel(std::int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%06lld.ppm", static_cast<long long>(i));
  return buf;
}

std::string mask_rel(std::string_view attr, std::int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld.ppm", static_cast<long long>(i));
  return "masks/" + std::string(attr) + "/" + buf;
}

ManifestRow row_for(const SyntheticFaceSample& s, std::int64_t i) {
  ManifestRow r;
  r.index = i;
  r.identity = s.identity;
  r.attributes = s.attributes;
  r.image = image_rel(i);
  for (std::size_t k = 0; k < kLocalAttributes.size(); ++k) r.masks[k] = mask_rel(kLocalAttributes[k], i);
  return r;
}

}  // namespace

std::string DatasetManifest::to_tsv() const {
  std::ostringstream o;
  o << kManifestMagic << "\n";
  o << "# seed\t" << config.seed << "\n";
  o << "# n\t" << config.n << "\n";
  o << "# size\t" << config.size << "\n";
  o << "# n_identities\t" << config.n_identities << "\n";
  o << "# marginals\t" << config.marginals.str() << "\n";
  o << "index\tidentity";
  for (auto a : kAttributes) o << "\t" << a;
  o << "\timage";
  for (auto a : kLocalAttributes) o << "\tmask_" << a;
  o << "\n";
  for (const auto& r : rows) {
    o << r.index << "\t" << r.identity;
    for (bool b : r.attributes) o << "\t" << (b ? 1 : 0);
    o << "\t" << r.image;
    for (const auto& m : r.masks) o << "\t" << m;
    o << "\n";
  }
  return o.str();
}

DatasetManifest DatasetManifest::from_tsv(std::string_view text) {
  DatasetManifest m;
  auto lines = split(text, '\n');
  if (lines.empty() || trim(lines[0]) != kManifestMagic) throw CodecError("manifest: missing header line");
  const std::size_t cols = 3 + kAttributes.size() + kLocalAttributes.size();
  bool saw_columns = false;
  try {
    for (std::size_t li = 1; li < lines.size(); ++li) {
      auto line = lines[li];
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (line.empty()) continue;
      if (line.front() == '#') {
        auto kv = split(line.substr(1), '\t');
        if (kv.size() != 2) throw CodecError("manifest: malformed metadata line " + std::to_string(li + 1));
        const auto key = trim(kv[0]);
        if (key == "seed") m.config.seed = parse_number<std::uint64_t>(kv[1], "seed");
        else if (key == "n") m.config.n = parse_number<std::int64_t>(kv[1], "n");
        else if (key == "size") m.config.size = parse_number<int>(kv[1], "size");
        else if (key == "n_identities") m.config.n_identities = parse_number<int>(kv[1], "n_identities");
        else if (key == "marginals") m.config.marginals = Marginals::parse(kv[1]);
        continue;
      }
      auto f = split(line, '\t');
      if (!saw_columns) {
        if (f.size() != cols || f[0] != "index") throw CodecError("manifest: unexpected column header");
        saw_columns = true;
        continue;
      }
      if (f.size() != cols) throw CodecError("manifest: line " + std::to_string(li + 1) + " has wrong field count");
      ManifestRow r;
      r.index = parse_number<std::int64_t>(f[0], "index");
      r.identity = parse_number<int>(f[1], "identity");
      for (std::size_t k = 0; k < kAttributes.size(); ++k) {
        const int b = parse_number<int>(f[2 + k], "attribute flag");
        if (b != 0 && b != 1) throw CodecError("manifest: attribute flags must be 0 or 1");
        r.attributes[k] = b == 1;
      }
      r.image = std::string(f[2 + kAttributes.size()]);
      for (std::size_t k = 0; k < kLocalAttributes.size(); ++k) r.masks[k] = std::string(f[3 + kAttributes.size() + k]);
      m.rows.push_back(std::move(r));
    }
  } catch (const std::invalid_argument& e) {
    throw CodecError(std::string("manifest: ") + e.what());
  }
  if (!saw_columns) throw CodecError("manifest: missing column header");
  if (static_cast<std::int64_t>(m.rows.size()) != m.config.n)
    throw CodecError("manifest: declares n=" + std::to_string(m.config.n) + " but lists " +
                     std::to_string(m.rows.size()) + " rows");
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    if (m.rows[i].index != static_cast<std::int64_t>(i)) throw CodecError("manifest: rows out of order");
    if (m.rows[i].identity < 0 || m.rows[i].identity >= m.config.n_identities)
      throw CodecError("manifest: identity out of range");
  }
  try {
    m.config.validate();
  } catch (const std::invalid_argument& e) {
    throw CodecError(std::string("manifest: ") + e.what());
  }
  return m;
}

std::int64_t DatasetManifest::count(std::string_view attribute) const {
  const auto k = static_cast<std::size_t>(attribute_index(attribute));
  return std::count_if(rows.begin(), rows.end(), [&](const ManifestRow& r) { return r.attributes[k]; });
}

bool Dataset::has(std::int64_t i, std::string_view attribute) const {
  return manifest.rows.at(static_cast<std::size_t>(i)).attributes[static_cast<std::size_t>(attribute_index(attribute))];
}

const Tensor& Dataset::mask(std::string_view attribute) const {
  const int k = local_index(attribute);
  if (k < 0) throw std::invalid_argument("attribute '" + std::string(attribute) + "' has no mask");
  return masks[static_cast<std::size_t>(k)];
}

DatasetManifest generate_dataset(const GeneratorConfig& cfg, const fs::path& root) {
  cfg.validate();
  DatasetManifest m;
  m.config = cfg;
  for (std::int64_t i = 0; i < cfg.n; ++i) {
    const auto s = generate_sample(cfg, i);
    auto row = row_for(s, i);
    encode_image(s.image, root / row.image);
    for (std::size_t k = 0; k < kLocalAttributes.size(); ++k) encode_image(s.masks[k], root / row.masks[k]);
    m.rows.push_back(std::move(row));
  }
  const auto tmp = root / "manifest.tsv.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << m.to_tsv();
    if (!out) throw CodecError("cannot write manifest under " + root.string());
  }
  fs::rename(tmp, root / "manifest.tsv");
  return m;
}

namespace {

struct BatchBuilder {
  std::int64_t n;
  int S;
  std::vector<double> images, masks[kLocalAttributes.size()];

  BatchBuilder(std::int64_t n_, int S_) : n(n_), S(S_) {
    images.reserve(static_cast<std::size_t>(n * 3 * S * S));
    for (auto& m : masks) m.reserve(static_cast<std::size_t>(n * S * S));
  }
  void add(const Tensor& image, const std::array<Tensor, kLocalAttributes.size()>& ms) {
    for (double v : image.to_vector()) images.push_back(v);
    for (std::size_t k = 0; k < ms.size(); ++k)
      for (double v : ms[k].to_vector()) masks[k].push_back(v);
  }
  void finish(Dataset& d, DType dt) const {
    d.images = Tensor::from(Shape{n, 3, S, S}, images, dt);
    for (std::size_t k = 0; k < kLocalAttributes.size(); ++k) d.masks[k] = Tensor::from(Shape{n, 1, S, S}, masks[k], dt);
  }
};

}  // namespace

Dataset generate_in_memory(const GeneratorConfig& cfg, DType dt) {
  cfg.validate();
  Dataset d;
  d.manifest.config = cfg;
  BatchBuilder b(cfg.n, cfg.size);
  for (std::int64_t i = 0; i < cfg.n; ++i) {
    const auto s = generate_sample(cfg, i);
    d.manifest.rows.push_back(row_for(s, i));
    b.add(s.image, s.masks);
  }
  b.finish(d, dt);
  return d;
}

Dataset load_dataset(const fs::path& root, DType dt) {
  std::ifstream in(root / "manifest.tsv", std::ios::binary);
  if (!in) throw CodecError("no manifest.tsv under " + root.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  Dataset d;
  d.manifest = DatasetManifest::from_tsv(text);
  const int S = d.manifest.config.size;
  BatchBuilder b(d.manifest.config.n, S);
  for (const auto& r : d.manifest.rows) {
    const auto img = decode_image(root / r.image, S, DType::f64);
    std::array<Tensor, kLocalAttributes.size()> ms;
    for (std::size_t k = 0; k < ms.size(); ++k) ms[k] = decode_mask(root / r.masks[k], S, DType::f64);
    b.add(img, ms);
  }
  b.finish(d, dt);
  return d;
}

TrainHeldOut train_held_out(std::int64_t n) {
  TrainHeldOut s;
  const std::int64_t cut = n - n / 5;
  for (std::int64_t i = 0; i < n; ++i) (i < cut ? s.train : s.held_out).push_back(i);
  return s;
}

AttributeTarget AttributeTarget::parse(std::string_view text) {
  text = trim(text);
  AttributeTarget t;
  if (!text.empty() && (text.front() == '-' || text.front() == '!')) {
    t.value = false;
    text.remove_prefix(1);
  }
  t.index = attribute_index(text);
  return t;
}

std::string AttributeTarget::str() const { return (value ? "" : "-") + std::string(name()); }

GuidedSplit split_guided_and_input(const DatasetManifest& manifest, const AttributeTarget& target,
                                   std::int64_t input_limit, std::uint64_t seed,
                                   const std::vector<std::int64_t>& pool) {
  std::vector<std::int64_t> rows = pool;
  if (rows.empty()) {
    rows.resize(manifest.rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<std::int64_t>(i);
  }
  GuidedSplit s;
  const auto k = static_cast<std::size_t>(target.index);
  for (auto i : rows) {
    const bool v = manifest.rows.at(static_cast<std::size_t>(i)).attributes[k];
    (v == target.value ? s.guided : s.input).push_back(i);
  }
  if (input_limit > 0 && static_cast<std::int64_t>(s.input.size()) > input_limit) {
    std::mt19937_64 rng(stream_seed(seed, 3, static_cast<std::uint64_t>(target.index)));
    std::shuffle(s.input.begin(), s.input.end(), rng);
    s.input.resize(static_cast<std::size_t>(input_limit));
    std::sort(s.input.begin(), s.input.end());
  }
  if (s.input.empty()) s.warning = "no input images lack target " + target.str() + "; input set is empty";
  else if (s.guided.empty()) s.warning = "no images carry target " + target.str() + "; guided set is empty";
  return s;
}

Tensor gather(const Tensor& batch, const std::vector<std::int64_t>& rows) {
  if (batch.rank() < 1) throw ShapeError("gather: batch must have a leading dimension");
  auto dims = batch.shape().dims();
  const auto n = dims[0];
  const auto row = batch.numel() / n;
  if (rows.empty()) throw ShapeError("gather: no rows selected");
  dims[0] = static_cast<std::int64_t>(rows.size());
  return dispatch(batch.dtype(), [&]<class T>() {
    auto src = batch.data<T>();
    auto out = Tensor::zeros(Shape(dims), batch.dtype());
    auto dst = out.template mutable_data<T>();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= n) throw std::out_of_range("gather: row " + std::to_string(rows[i]));
      std::copy_n(src.begin() + rows[i] * row, row, dst.begin() + static_cast<std::int64_t>(i) * row);
    }
    return out;
  });
}

}  // namespace diat::data
