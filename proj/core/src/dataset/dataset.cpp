#include "o2mag/dataset/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "o2mag/common/config.hpp"

namespace o2mag::dataset {

namespace {

constexpr float kPi = std::numbers::pi_v<float>;
// Textures stay inside this band so that dark and bright defects always move pixels.
constexpr float kLo = -0.8f, kHi = 0.82f;

float uniform(Rng& rng, float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::array<float, 3> jitter_color(Rng& rng, std::array<float, 3> c, float amount) {
  for (auto& v : c) v = std::clamp(v + uniform(rng, -amount, amount), kLo, kHi);
  return c;
}

float clamp_band(float v) { return std::clamp(v, kLo, kHi); }

float smooth_alpha(float signed_dist) { return std::clamp(0.5f - signed_dist, 0.0f, 1.0f); }

std::vector<float> ellipse_alpha(float cx, float cy, float rx, float ry, float theta, std::size_t size) {
  std::vector<float> a(size * size);
  const float c = std::cos(theta), s = std::sin(theta);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
      const float u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
      const float q = std::sqrt(u * u + v * v);
      a[y * size + x] = smooth_alpha((q - 1.0f) * std::min(rx, ry));
    }
  }
  return a;
}

std::vector<float> segment_alpha(float x0, float y0, float x1, float y1, float width, std::size_t size) {
  std::vector<float> a(size * size);
  const float vx = x1 - x0, vy = y1 - y0;
  const float len2 = vx * vx + vy * vy;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const float px = static_cast<float>(x) - x0, py = static_cast<float>(y) - y0;
      const float t = std::clamp((px * vx + py * vy) / len2, 0.0f, 1.0f);
      const float dx = px - t * vx, dy = py - t * vy;
      a[y * size + x] = smooth_alpha(std::sqrt(dx * dx + dy * dy) - 0.5f * width);
    }
  }
  return a;
}

std::vector<float> draw_shape(const std::string& type, Rng& rng, std::size_t size) {
  const float lo = 4.0f, hi = static_cast<float>(size) - 5.0f;
  if (type == "hole") {
    return ellipse_alpha(uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, 1.8f, 4.0f), uniform(rng, 1.8f, 4.0f),
                         uniform(rng, 0.0f, kPi), size);
  }
  if (type == "scratch") {
    const float len = uniform(rng, 9.0f, 18.0f), th = uniform(rng, 0.0f, kPi);
    const float cx = uniform(rng, lo + 2, hi - 2), cy = uniform(rng, lo + 2, hi - 2);
    const float hx = 0.5f * len * std::cos(th), hy = 0.5f * len * std::sin(th);
    return segment_alpha(cx - hx, cy - hy, cx + hx, cy + hy, uniform(rng, 1.0f, 1.8f), size);
  }
  // color-patch: union of two or three overlapping ellipses
  const float cx = uniform(rng, lo + 1, hi - 1), cy = uniform(rng, lo + 1, hi - 1);
  const int parts = uniform_int(rng, 2, 3);
  std::vector<float> a(size * size, 0.0f);
  for (int p = 0; p < parts; ++p) {
    auto e = ellipse_alpha(cx + uniform(rng, -2.5f, 2.5f), cy + uniform(rng, -2.5f, 2.5f), uniform(rng, 2.0f, 4.0f),
                           uniform(rng, 1.5f, 3.5f), uniform(rng, 0.0f, kPi), size);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::max(a[i], e[i]);
  }
  return a;
}

}  // namespace

const std::vector<std::string>& texture_classes() {
  static const std::vector<std::string> v{"grid", "stripes", "speckle"};
  return v;
}

const std::vector<std::string>& defect_types() {
  static const std::vector<std::string> v{"hole", "scratch", "color-patch"};
  return v;
}

void check_class(const std::string& cls) {
  const auto& v = texture_classes();
  if (std::find(v.begin(), v.end(), cls) == v.end()) throw std::invalid_argument("unknown texture class '" + cls + "'");
}

void check_defect(const std::string& defect) {
  const auto& v = defect_types();
  if (std::find(v.begin(), v.end(), defect) == v.end()) throw std::invalid_argument("unknown defect type '" + defect + "'");
}

TextureParams texture_params(const std::string& cls, std::uint64_t seed) {
  check_class(cls);
  Rng rng(derive_seed(seed, "texture/" + cls));
  TextureParams p;
  p.cls = cls;
  p.phase_x = uniform_int(rng, 0, 15);
  p.phase_y = uniform_int(rng, 0, 15);
  p.phase = uniform(rng, 0.0f, 2.0f * kPi);
  if (cls == "grid") {
    p.period = uniform_int(rng, 6, 9);
    p.line_width = uniform_int(rng, 1, 2);
    p.base = jitter_color(rng, {-0.1f, 0.0f, 0.15f}, 0.12f);
    p.accent = jitter_color(rng, {-0.6f, -0.55f, -0.45f}, 0.1f);
    p.noise = 0.03f;
  } else if (cls == "stripes") {
    p.period = uniform_int(rng, 5, 8);
    p.angle = uniform(rng, -0.18f, 0.18f);
    p.base = jitter_color(rng, {0.25f, 0.0f, -0.35f}, 0.12f);
    p.accent = {0.25f, 0.2f, 0.15f};
    p.noise = 0.03f;
  } else {
    p.spots = uniform_int(rng, 28, 48);
    p.base = jitter_color(rng, {-0.15f, 0.2f, -0.2f}, 0.12f);
    p.accent = jitter_color(rng, {0.35f, 0.3f, 0.05f}, 0.1f);
    p.noise = 0.04f;
  }
  return p;
}

Image render_texture(const TextureParams& p, std::uint64_t noise_seed, std::size_t size) {
  Image img({3, size, size});
  const std::size_t hw = size * size;
  Rng rng(noise_seed);
  std::vector<float> weight(hw, 0.0f);  // accent blend per pixel
  if (p.cls == "grid") {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const bool on_x = static_cast<int>((x + p.phase_x) % p.period) < p.line_width;
        const bool on_y = static_cast<int>((y + p.phase_y) % p.period) < p.line_width;
        weight[y * size + x] = (on_x || on_y) ? 1.0f : 0.0f;
      }
    }
  } else if (p.cls == "stripes") {
    const float c = std::cos(p.angle), s = std::sin(p.angle);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const float u = static_cast<float>(y) * c - static_cast<float>(x) * s;
        weight[y * size + x] = std::sin(2.0f * kPi * u / static_cast<float>(p.period) + p.phase);
      }
    }
  } else {
    for (int i = 0; i < p.spots; ++i) {
      const float cx = uniform(rng, 0.0f, static_cast<float>(size)), cy = uniform(rng, 0.0f, static_cast<float>(size));
      const float r = uniform(rng, 0.7f, 1.5f), sign = uniform(rng, 0.0f, 1.0f) < 0.7f ? 1.0f : -0.6f;
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          // distances wrap so the texture tiles
          float dx = std::abs(static_cast<float>(x) - cx), dy = std::abs(static_cast<float>(y) - cy);
          dx = std::min(dx, static_cast<float>(size) - dx);
          dy = std::min(dy, static_cast<float>(size) - dy);
          weight[y * size + x] += sign * std::exp(-(dx * dx + dy * dy) / (2.0f * r * r));
        }
      }
    }
  }
  std::normal_distribution<float> n(0.0f, p.noise);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      float v;
      if (p.cls == "grid") {
        v = p.base[c] + weight[i] * (p.accent[c] - p.base[c]);
      } else if (p.cls == "stripes") {
        v = p.base[c] + p.accent[c] * weight[i];
      } else {
        v = p.base[c] + std::clamp(weight[i], -1.0f, 1.5f) * (p.accent[c] - p.base[c]) * 0.8f;
      }
      img[c * hw + i] = clamp_band(v + n(rng));
    }
  }
  quantize_to_u8_grid(img);
  return img;
}

Image gen_normal(const std::string& cls, std::uint64_t seed) {
  return render_texture(texture_params(cls, seed), derive_seed(seed, "noise"));
}

DefectSpec default_defect_spec(const std::string& type) {
  check_defect(type);
  if (type == "hole") return {type, 10, 56, 1.0f};
  if (type == "scratch") return {type, 8, 48, 1.0f};
  return {type, 16, 96, 1.0f};
}

std::vector<float> sample_defect_alpha(const DefectSpec& spec, Rng& rng, std::size_t size) {
  check_defect(spec.type);
  if (spec.min_area > spec.max_area || spec.max_area == 0) {
    throw std::invalid_argument("defect spec for '" + spec.type + "' has an empty area range");
  }
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto a = draw_shape(spec.type, rng, size);
    std::size_t area = 0;
    for (auto& v : a) {
      if (v <= 0.5f) v = 0.0f;  // soft edge lives only inside the support
      area += v > 0.5f;
    }
    if (area >= spec.min_area && area <= spec.max_area) return a;
  }
  throw std::invalid_argument("defect '" + spec.type + "': no shape within area range [" +
                              std::to_string(spec.min_area) + ", " + std::to_string(spec.max_area) + "]");
}

Image composite_defect(const Image& normal, const std::string& type, const std::vector<float>& alpha,
                       float intensity, Rng& rng) {
  check_defect(type);
  const std::size_t h = normal.dim(1), w = normal.dim(2), hw = h * w;
  if (alpha.size() != hw) throw std::invalid_argument("composite_defect: alpha size does not match image");
  Image out = normal;
  const float tint_r = uniform(rng, 0.45f, 0.7f);
  const float scratch_level = uniform(rng, 0.82f, 0.95f);
  for (std::size_t i = 0; i < hw; ++i) {
    const float a = std::clamp(alpha[i] * intensity, 0.0f, 1.0f);
    if (alpha[i] <= 0.5f) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      const float x = normal[c * hw + i];
      float target;
      if (type == "hole") {
        target = -0.92f + 0.08f * x;
      } else if (type == "scratch") {
        target = scratch_level + 0.04f * x;
      } else {
        // hue shift: rotate channels and push towards red
        const float rot = normal[((c + 1) % 3) * hw + i];
        target = std::clamp(c == 0 ? rot + tint_r : rot - 0.35f, -1.0f, 1.0f);
      }
      out[c * hw + i] = (1.0f - a) * x + a * target;
    }
  }
  quantize_to_u8_grid(out);
  // Rounding could in principle land a mask pixel back on the normal value.
  for (std::size_t i = 0; i < hw; ++i) {
    if (alpha[i] <= 0.5f) continue;
    bool same = true;
    for (std::size_t c = 0; c < 3; ++c) same = same && out[c * hw + i] == normal[c * hw + i];
    if (same) {
      const std::uint8_t q = to_u8(out[i]);
      const int dir = type == "hole" ? -2 : 2;
      const int moved = std::clamp(static_cast<int>(q) + dir, 0, 255);
      out[i] = from_u8(static_cast<std::uint8_t>(moved == q ? q - dir : moved));
    }
  }
  return out;
}

DefectSample gen_defect(const std::string& cls, const DefectSpec& spec, std::uint64_t seed) {
  DefectSample s;
  s.normal = gen_normal(cls, derive_seed(seed, "normal"));
  Rng rng(derive_seed(seed, "defect/" + spec.type));
  const auto alpha = sample_defect_alpha(spec, rng, s.normal.dim(1));
  s.mask = BinaryMask(s.normal.dim(1), s.normal.dim(2));
  for (std::size_t i = 0; i < alpha.size(); ++i) s.mask.bits[i] = alpha[i] > 0.5f;
  if (s.mask.area() == 0) throw std::invalid_argument("gen_defect: degenerate zero-area defect");
  s.image = composite_defect(s.normal, spec.type, alpha, spec.intensity, rng);
  return s;
}

std::vector<BinaryMask> gen_target_masks(const std::string& cls, const std::string& defect, std::size_t count,
                                         std::uint64_t seed) {
  check_class(cls);
  const DefectSpec spec = default_defect_spec(defect);
  Rng rng(derive_seed(seed, "target-masks/" + cls + "/" + defect));
  std::vector<BinaryMask> out;
  while (out.size() < count) {
    const auto alpha = sample_defect_alpha(spec, rng);
    BinaryMask m(kImageSize, kImageSize);
    for (std::size_t i = 0; i < alpha.size(); ++i) m.bits[i] = alpha[i] > 0.5f;
    if (m.area() > 0) out.push_back(std::move(m));
  }
  return out;
}

std::string transform_name(Transform t) {
  switch (t) {
    case Transform::identity: return "identity";
    case Transform::shift: return "shift";
    case Transform::flip_h: return "flip_h";
    case Transform::flip_v: return "flip_v";
    case Transform::rot90: return "rot90";
    case Transform::rot180: return "rot180";
    case Transform::rot270: return "rot270";
  }
  return "?";
}

AugmentPolicy augment_policy_for(const std::string& cls) {
  check_class(cls);
  if (cls == "stripes") return {{Transform::identity, Transform::flip_h, Transform::flip_v}};
  return {{Transform::identity, Transform::shift, Transform::flip_h, Transform::flip_v, Transform::rot90,
           Transform::rot180, Transform::rot270}};
}

Image apply_transform(const Image& img, Transform t, int dx, int dy) {
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  if ((t == Transform::rot90 || t == Transform::rot270) && h != w) {
    throw std::invalid_argument("apply_transform: quarter rotations need a square image");
  }
  Image out(img.shape());
  const auto H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t c = 0; c < ch; ++c) {
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        long sy = y, sx = x;  // source pixel
        switch (t) {
          case Transform::identity: break;
          case Transform::shift:
            sy = ((y - dy) % H + H) % H;
            sx = ((x - dx) % W + W) % W;
            break;
          case Transform::flip_h: sx = W - 1 - x; break;
          case Transform::flip_v: sy = H - 1 - y; break;
          case Transform::rot90: sy = x; sx = W - 1 - y; break;
          case Transform::rot180: sy = H - 1 - y; sx = W - 1 - x; break;
          case Transform::rot270: sy = H - 1 - x; sx = y; break;
        }
        out[(c * h + y) * w + x] = img[(c * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Image augment_normal(const Image& img, const AugmentPolicy& policy, Rng& rng) {
  if (policy.transforms.empty()) return img;
  const auto t = policy.transforms[std::uniform_int_distribution<std::size_t>(0, policy.transforms.size() - 1)(rng)];
  int dx = 0, dy = 0;
  if (t == Transform::shift) {
    dx = uniform_int(rng, -8, 8);
    dy = uniform_int(rng, -8, 8);
  }
  return apply_transform(img, t, dx, dy);
}

std::vector<const Record*> Manifest::select(const std::string& split, const std::string& cls,
                                            const std::string& defect) const {
  std::vector<const Record*> out;
  for (const auto& r : records) {
    if (!split.empty() && r.split != split) continue;
    if (!cls.empty() && r.cls != cls) continue;
    if (!defect.empty() && r.defect != defect) continue;
    out.push_back(&r);
  }
  return out;
}

Image Manifest::image(const Record& r) const { return read_png(path_of(r.image)); }

BinaryMask Manifest::mask(const Record& r) const {
  if (r.mask == "-") return BinaryMask(kImageSize, kImageSize);
  return read_mask_png(path_of(r.mask));
}

void Manifest::save(const std::filesystem::path& file) const {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write manifest " + file.string());
  out << "# image\tmask\tclass\tdefect\tsplit\tseed\n";
  for (const auto& r : records) {
    out << r.image << '\t' << r.mask << '\t' << r.cls << '\t' << r.defect << '\t' << r.split << '\t' << r.seed << '\n';
  }
}

Manifest Manifest::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read manifest " + file.string());
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, '\t')) f.push_back(field);
    if (f.size() != 6) {
      throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": expected 6 tab-separated fields");
    }
    m.records.push_back({f[0], f[1], f[2], f[3], f[4], std::stoull(f[5])});
  }
  return m;
}

Manifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Manifest m;
  m.root = dir;
  auto emit = [&](const std::string& cls, const std::string& defect, const std::string& split, std::size_t idx,
                  const Image& img, const BinaryMask* mask, std::uint64_t seed) {
    const std::string stem = cls + "/" + split + "/" + defect + "_" + std::to_string(idx);
    fs::create_directories(dir / "images" / cls / split);
    write_png(dir / ("images/" + stem + ".png"), img);
    std::string mask_rel = "-";
    if (mask) {
      fs::create_directories(dir / "masks" / cls / split);
      mask_rel = "masks/" + stem + ".png";
      write_mask_png(dir / mask_rel, *mask);
    }
    m.records.push_back({"images/" + stem + ".png", mask_rel, cls, defect, split, seed});
  };
  for (const auto& cls : texture_classes()) {
    for (const auto& defect : defect_types()) {
      const DefectSpec spec = default_defect_spec(defect);
      for (const auto& [split, count] :
           {std::pair<std::string, std::size_t>{"reference", cfg.references_per_pair}, {"test", cfg.tests_per_pair}}) {
        for (std::size_t i = 0; i < count; ++i) {
          const std::uint64_t seed = derive_seed(cfg.seed, cls + "/" + defect + "/" + split, i);
          const auto s = gen_defect(cls, spec, seed);
          emit(cls, defect, split, i, s.image, &s.mask, seed);
        }
      }
    }
    for (const auto& [split, count] : {std::pair<std::string, std::size_t>{"test", cfg.test_good_per_class},
                                       {"train-normal", cfg.train_normal_per_class}}) {
      for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t seed = derive_seed(cfg.seed, cls + "/good/" + split, i);
        emit(cls, "good", split, i, gen_normal(cls, seed), nullptr, seed);
      }
    }
  }
  m.save(dir / "manifest.tsv");
  return m;
}

}  // namespace o2mag::dataset
