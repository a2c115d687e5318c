#pragma once

// Desk-scale stand-ins for the pretrained models: a procedural face-proxy scene
// renderer, an analytic generator that renders the same scenes from latent codes,
// and a small convolutional inversion encoder trained against it.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcedit/image_io.hpp"
#include "dcedit/latent_editing.hpp"
#include "dcedit/nn.hpp"

namespace dcedit::toy {

inline constexpr int kResolution = 64;
inline constexpr int kLayers = 4;
inline constexpr int kCodeDims = 8;
inline constexpr int kNumAttributes = 4;
inline constexpr double kEdgeSoftness = 0.6 / 64.0;  // in normalized image units
inline constexpr double kChangeThreshold = 1.0 / 255.0;

enum Attribute : int { glasses = 0, brow_thickness = 1, mouth_open = 2, hair_tone = 3 };
// Latent dims 4..7 drive the in-domain base appearance.
enum BaseDim : int { face_dx = 4, face_dy = 5, skin_tone = 6, bg_tone = 7 };

inline const std::array<std::string, kNumAttributes> kAttributeNames = {"glasses", "brow_thickness", "mouth_open",
                                                                         "hair_tone"};

using Color = std::array<double, 3>;

namespace palette {
inline constexpr Color bg_a{-0.55, -0.45, -0.20};
inline constexpr Color bg_b{0.30, 0.25, 0.05};
inline constexpr Color skin_a{0.55, 0.20, -0.05};
inline constexpr Color skin_b{0.85, 0.55, 0.35};
inline constexpr Color hair_a{-0.70, -0.80, -0.85};
inline constexpr Color hair_b{0.75, 0.55, -0.20};
inline constexpr Color eye{-0.85, -0.85, -0.75};
inline constexpr Color brow{-0.60, -0.70, -0.75};
inline constexpr Color mouth{0.35, -0.75, -0.65};
inline constexpr Color lens{-0.80, -0.55, -0.35};
inline constexpr Color overlay_a{0.95, -0.95, 0.90};
inline constexpr Color overlay_b{-0.90, 0.95, -0.60};
}  // namespace palette

// Geometry constants (normalized coordinates, origin top-left, pixel centers at (i + 0.5) / R).
namespace geom {
inline constexpr double face_cx = 0.5, face_cx_span = 0.08;
inline constexpr double face_cy = 0.54, face_cy_span = 0.06;
inline constexpr double face_rx = 0.27, face_ry = 0.33;
inline constexpr double hair_dy = -0.02, hair_rx = 0.33, hair_ry = 0.38, hair_cut = -0.10;
inline constexpr double eye_dx = 0.11, eye_dy = -0.06, eye_r = 0.035;
inline constexpr double lens_r = 0.08, lens_opacity = 0.9;
inline constexpr double brow_dy = -0.19, brow_hw = 0.075, brow_hh_min = 0.008, brow_hh_span = 0.032;
inline constexpr double mouth_dy = 0.16, mouth_rx = 0.10, mouth_ry_min = 0.012, mouth_ry_span = 0.05;
}  // namespace geom

// Out-of-domain sprite (striped patch) that the generator cannot express.
struct Overlay {
  double cx = 0.87;
  double cy = 0.14;
  double half_w = 0.11;
  double half_h = 0.12;
  double stripe_period = 4.0 / 64.0;
};

struct SyntheticScene {
  std::array<double, kCodeDims> code{};
  std::optional<Overlay> overlay;
};

inline double sigmoid(double v) { return ag::sigmoid_value(v); }

struct SceneParams {
  double p[kCodeDims];
  double cx, cy;
};

inline SceneParams decode_params(const std::array<double, kCodeDims>& code) {
  SceneParams s{};
  for (int i = 0; i < kCodeDims; ++i) s.p[i] = sigmoid(code[static_cast<std::size_t>(i)]);
  s.cx = geom::face_cx + geom::face_cx_span * (2.0 * s.p[face_dx] - 1.0);
  s.cy = geom::face_cy + geom::face_cy_span * (2.0 * s.p[face_dy] - 1.0);
  return s;
}

inline double ellipse_coverage(double u, double v, double cx, double cy, double rx, double ry) {
  const double q = ((u - cx) / rx) * ((u - cx) / rx) + ((v - cy) / ry) * ((v - cy) / ry);
  return sigmoid((1.0 - q) * (std::min(rx, ry) * 0.5) / kEdgeSoftness);
}

inline double rect_coverage(double u, double v, double cx, double cy, double hw, double hh) {
  return sigmoid((hw - std::abs(u - cx)) / kEdgeSoftness) * sigmoid((hh - std::abs(v - cy)) / kEdgeSoftness);
}

inline void blend(Color& px, const Color& c, double a) {
  for (int k = 0; k < 3; ++k) px[static_cast<std::size_t>(k)] += a * (c[static_cast<std::size_t>(k)] - px[static_cast<std::size_t>(k)]);
}

inline Color lerp(const Color& a, const Color& b, double t) {
  return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])};
}

// Scalar reference renderer. Same formulas as ToySceneGenerator, evaluated per pixel.
inline Image render(const SyntheticScene& scene, int resolution = kResolution) {
  require(resolution > 0, ErrorCode::invalid_argument, "render resolution must be positive");
  for (double c : scene.code) require(std::isfinite(c), ErrorCode::invalid_argument, "scene code must be finite");
  if (scene.overlay) {
    const Overlay& o = *scene.overlay;
    require(o.half_w > 0 && o.half_h > 0 && o.stripe_period > 0, ErrorCode::invalid_argument, "invalid overlay geometry");
  }
  const SceneParams s = decode_params(scene.code);
  const Color bg = lerp(palette::bg_a, palette::bg_b, s.p[bg_tone]);
  const Color skin = lerp(palette::skin_a, palette::skin_b, s.p[skin_tone]);
  const Color hair = lerp(palette::hair_a, palette::hair_b, s.p[hair_tone]);
  const double brow_hh = geom::brow_hh_min + geom::brow_hh_span * s.p[brow_thickness];
  const double mouth_ry = geom::mouth_ry_min + geom::mouth_ry_span * s.p[mouth_open];
  const double lens_a = geom::lens_opacity * s.p[glasses];

  Tensor t({3, resolution, resolution});
  for (int y = 0; y < resolution; ++y) {
    const double v = (y + 0.5) / resolution;
    for (int x = 0; x < resolution; ++x) {
      const double u = (x + 0.5) / resolution;
      Color px = bg;
      const double hair_a = ellipse_coverage(u, v, s.cx, s.cy + geom::hair_dy, geom::hair_rx, geom::hair_ry) *
                            sigmoid((s.cy + geom::hair_cut - v) / kEdgeSoftness);
      blend(px, hair, hair_a);
      blend(px, skin, ellipse_coverage(u, v, s.cx, s.cy, geom::face_rx, geom::face_ry));
      for (double side : {-1.0, 1.0}) {
        const double ex = s.cx + side * geom::eye_dx, ey = s.cy + geom::eye_dy;
        blend(px, palette::eye, ellipse_coverage(u, v, ex, ey, geom::eye_r, geom::eye_r));
        blend(px, palette::brow, rect_coverage(u, v, ex, s.cy + geom::brow_dy, geom::brow_hw, brow_hh));
      }
      blend(px, palette::mouth, ellipse_coverage(u, v, s.cx, s.cy + geom::mouth_dy, geom::mouth_rx, mouth_ry));
      for (double side : {-1.0, 1.0}) {
        const double ex = s.cx + side * geom::eye_dx, ey = s.cy + geom::eye_dy;
        blend(px, palette::lens, lens_a * ellipse_coverage(u, v, ex, ey, geom::lens_r, geom::lens_r));
      }
      if (scene.overlay) {
        const Overlay& o = *scene.overlay;
        const double a = rect_coverage(u, v, o.cx, o.cy, o.half_w, o.half_h);
        const bool odd = static_cast<long>(std::floor((u + v - o.cx) / o.stripe_period)) % 2 != 0;
        blend(px, odd ? palette::overlay_a : palette::overlay_b, a);
      }
      for (int k = 0; k < 3; ++k)
        t[(static_cast<std::size_t>(k) * resolution + y) * resolution + x] = std::clamp(px[static_cast<std::size_t>(k)], -1.0, 1.0);
    }
  }
  return Image(std::move(t));
}

// Pixel-space box [x0, x1) x [y0, y1).
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  int area() const { return std::max(0, x1 - x0) * std::max(0, y1 - y0); }
};

inline PixelBox overlay_box(const Overlay& o, int resolution = kResolution) {
  auto px = [resolution](double t) { return static_cast<int>(std::lround(t * resolution)); };
  return {std::max(0, px(o.cx - o.half_w)), std::max(0, px(o.cy - o.half_h)), std::min(resolution, px(o.cx + o.half_w)),
          std::min(resolution, px(o.cy + o.half_h))};
}

// Region an attribute's layer can touch for this scene (any attribute value),
// widened by the soft-edge tail down to the change threshold.
inline PixelBox attribute_region(const SyntheticScene& scene, int attribute, int resolution = kResolution) {
  const SceneParams s = decode_params(scene.code);
  const double margin = kEdgeSoftness * std::log(2.0 * 255.0) + 1.0 / resolution;
  double u0 = 0, u1 = 1, v0 = 0, v1 = 1;
  switch (attribute) {
    case glasses:
      u0 = s.cx - geom::eye_dx - geom::lens_r;
      u1 = s.cx + geom::eye_dx + geom::lens_r;
      v0 = s.cy + geom::eye_dy - geom::lens_r;
      v1 = s.cy + geom::eye_dy + geom::lens_r;
      break;
    case brow_thickness:
      u0 = s.cx - geom::eye_dx - geom::brow_hw;
      u1 = s.cx + geom::eye_dx + geom::brow_hw;
      v0 = s.cy + geom::brow_dy - geom::brow_hh_min - geom::brow_hh_span;
      v1 = s.cy + geom::brow_dy + geom::brow_hh_min + geom::brow_hh_span;
      break;
    case mouth_open: {
      // The ellipse edge width scales with the short radius, so the tail reaches
      // q = 1 + c / ry: wide horizontally when the mouth is nearly closed.
      const double c = 2.0 * kEdgeSoftness * std::log(2.0 * 255.0);
      const double ry_max = geom::mouth_ry_min + geom::mouth_ry_span;
      const double ext_x = geom::mouth_rx * std::sqrt(1.0 + c / geom::mouth_ry_min);
      const double ext_y = std::sqrt(ry_max * ry_max + c * ry_max);
      u0 = s.cx - ext_x;
      u1 = s.cx + ext_x;
      v0 = s.cy + geom::mouth_dy - ext_y;
      v1 = s.cy + geom::mouth_dy + ext_y;
      break;
    }
    case hair_tone:
      u0 = s.cx - geom::hair_rx;
      u1 = s.cx + geom::hair_rx;
      v0 = s.cy + geom::hair_dy - geom::hair_ry;
      v1 = s.cy + geom::hair_cut;
      break;
    default:
      fail(ErrorCode::unknown_attribute, "attribute index out of range");
  }
  auto lo = [&](double t) { return std::clamp(static_cast<int>(std::floor((t - margin) * resolution)), 0, resolution); };
  auto hi = [&](double t) { return std::clamp(static_cast<int>(std::ceil((t + margin) * resolution)), 0, resolution); };
  return {lo(u0), lo(v0), hi(u1), hi(v1)};
}

// Binary mask of pixels whose rendered value (unsigned units) changes by more than
// kChangeThreshold when `attribute` is shifted by `delta` in latent units.
inline ActivationMask ground_truth_change_mask(const SyntheticScene& scene, int attribute, double delta,
                                               int resolution = kResolution) {
  require(attribute >= 0 && attribute < kNumAttributes, ErrorCode::unknown_attribute, "attribute index out of range");
  SyntheticScene edited = scene;
  edited.code[static_cast<std::size_t>(attribute)] += delta;
  const Image a = render(scene, resolution), b = render(edited, resolution);
  Tensor m({1, resolution, resolution});
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d = std::max(d, 0.5 * std::abs(a(c, y, x) - b(c, y, x)));
      m[static_cast<std::size_t>(y) * resolution + x] = d > kChangeThreshold ? 1.0 : 0.0;
    }
  return ActivationMask(std::move(m));
}

// ---------------------------------------------------------------------------
// Analytic generator: latent code -> scene parameters -> differentiable render.

class ToySceneGenerator final : public Generator {
 public:
  // Palette rows: bg_a, bg_b, skin_a, skin_b, hair_a, hair_b, eye, brow, mouth, lens.
  static constexpr int kPaletteRows = 10;

  static Tensor default_palette() {
    const std::array<Color, kPaletteRows> rows{palette::bg_a,   palette::bg_b, palette::skin_a, palette::skin_b,
                                               palette::hair_a, palette::hair_b, palette::eye,  palette::brow,
                                               palette::mouth,  palette::lens};
    Tensor t({kPaletteRows, 3});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < 3; ++c) t[r * 3 + c] = rows[r][c];
    return t;
  }

  explicit ToySceneGenerator(std::vector<int> taps = {16, 32, 64}, Tensor palette = default_palette())
      : taps_(std::move(taps)), palette_(std::move(palette)) {
    require(palette_.shape() == Shape{kPaletteRows, 3}, ErrorCode::shape_mismatch, "toy generator palette must be [10,3]");
    for (int r : taps_) require(r > 0, ErrorCode::invalid_argument, "tap resolution must be positive");
  }

  const Tensor& palette_tensor() const { return palette_; }

  std::string kind() const override { return "toy_scene_generator"; }
  GeneratorInfo info() const override {
    return {3, kResolution, kLayers, kCodeDims, taps_, 3};
  }

  ag::Var forward(const ag::Var& codes, std::vector<ag::Var>* taps) const override {
    require(codes.value().rank() == 3 && codes.dim(1) == kLayers && codes.dim(2) == kCodeDims, ErrorCode::shape_mismatch,
            "toy generator expects [N," + std::to_string(kLayers) + "," + std::to_string(kCodeDims) + "] codes, got " +
                shape_str(codes.shape()));
    const ag::Var p = ag::sigmoid(ag::mean_layers(codes));
    if (taps) {
      taps->clear();
      for (int r : taps_) taps->push_back(render_at(p, r));
    }
    return render_at(p, kResolution);
  }

  Checkpoint to_checkpoint() const override {
    Checkpoint c;
    c.kind = kind();
    c.meta = {{"taps", taps_}, {"resolution", kResolution}, {"layers", kLayers}, {"dims", kCodeDims},
              {"attributes", kAttributeNames}};
    c.tensors.emplace("palette", palette_);
    return c;
  }

 private:
  enum Row { bg_a, bg_b, skin_a, skin_b, hair_a, hair_b, eye, brow, mouth, lens };

  ag::Var color(Row r) const {
    const double* p = palette_.data() + static_cast<std::size_t>(r) * 3;
    return ag::constant(Tensor({1, 3, 1, 1}, {p[0], p[1], p[2]}));
  }
  ag::Var lerp_color(Row a, Row b, const ag::Var& t) const { return color(a) + t * (color(b) - color(a)); }
  static ag::Var grid(int r, bool vertical) {
    Tensor t({1, 1, r, r});
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) t[static_cast<std::size_t>(y) * r + x] = ((vertical ? y : x) + 0.5) / r;
    return ag::constant(std::move(t));
  }
  static ag::Var ellipse(const ag::Var& u, const ag::Var& v, const ag::Var& cx, const ag::Var& cy, double rx,
                         const ag::Var& ry, const ag::Var& half_min_radius) {
    const ag::Var q = ag::square(ag::scale(u - cx, 1.0 / rx)) + ag::square((v - cy) / ry);
    return ag::sigmoid((1.0 - q) * ag::scale(half_min_radius, 1.0 / kEdgeSoftness));
  }
  static ag::Var ellipse(const ag::Var& u, const ag::Var& v, const ag::Var& cx, const ag::Var& cy, double rx, double ry) {
    const ag::Var q = ag::square(ag::scale(u - cx, 1.0 / rx)) + ag::square(ag::scale(v - cy, 1.0 / ry));
    return ag::sigmoid(ag::scale(1.0 - q, std::min(rx, ry) * 0.5 / kEdgeSoftness));
  }
  static ag::Var rect(const ag::Var& u, const ag::Var& v, const ag::Var& cx, const ag::Var& cy, double hw, const ag::Var& hh) {
    const ag::Var ax = ag::sigmoid(ag::scale(hw - ag::abs(u - cx), 1.0 / kEdgeSoftness));
    const ag::Var ay = ag::sigmoid(ag::scale(hh - ag::abs(v - cy), 1.0 / kEdgeSoftness));
    return ax * ay;
  }
  static ag::Var over(const ag::Var& img, const ag::Var& col, const ag::Var& alpha) { return img + alpha * (col - img); }

  ag::Var render_at(const ag::Var& p, int r) const {
    const ag::Var u = grid(r, false), v = grid(r, true);
    auto param = [&](int j) { return ag::column(p, j); };
    const ag::Var cx = ag::add_scalar(ag::scale(param(face_dx), 2.0 * geom::face_cx_span), geom::face_cx - geom::face_cx_span);
    const ag::Var cy = ag::add_scalar(ag::scale(param(face_dy), 2.0 * geom::face_cy_span), geom::face_cy - geom::face_cy_span);

    ag::Var img = lerp_color(bg_a, bg_b, param(bg_tone));
    const ag::Var hair_cov = ellipse(u, v, cx, cy + ag::constant(Tensor::scalar(geom::hair_dy)), geom::hair_rx, geom::hair_ry) *
                             ag::sigmoid(ag::scale(ag::add_scalar(cy, geom::hair_cut) - v, 1.0 / kEdgeSoftness));
    img = over(img, lerp_color(hair_a, hair_b, param(hair_tone)), hair_cov);
    img = over(img, lerp_color(skin_a, skin_b, param(skin_tone)),
               ellipse(u, v, cx, cy, geom::face_rx, geom::face_ry));

    const ag::Var brow_hh = ag::add_scalar(ag::scale(param(brow_thickness), geom::brow_hh_span), geom::brow_hh_min);
    const ag::Var ey = ag::add_scalar(cy, geom::eye_dy);
    const ag::Var by = ag::add_scalar(cy, geom::brow_dy);
    for (double side : {-1.0, 1.0}) {
      const ag::Var ex = ag::add_scalar(cx, side * geom::eye_dx);
      img = over(img, color(eye), ellipse(u, v, ex, ey, geom::eye_r, geom::eye_r));
      img = over(img, color(brow), rect(u, v, ex, by, geom::brow_hw, brow_hh));
    }
    const ag::Var mouth_ry = ag::add_scalar(ag::scale(param(mouth_open), geom::mouth_ry_span), geom::mouth_ry_min);
    // mouth_ry < mouth_rx always, so it is the smaller radius.
    img = over(img, color(mouth),
               ellipse(u, v, cx, ag::add_scalar(cy, geom::mouth_dy), geom::mouth_rx, mouth_ry, ag::scale(mouth_ry, 0.5)));
    const ag::Var lens_a = ag::scale(param(glasses), geom::lens_opacity);
    for (double side : {-1.0, 1.0}) {
      const ag::Var ex = ag::add_scalar(cx, side * geom::eye_dx);
      img = over(img, color(lens), lens_a * ellipse(u, v, ex, ey, geom::lens_r, geom::lens_r));
    }
    return img;
  }

  std::vector<int> taps_;
  Tensor palette_;
};

// ---------------------------------------------------------------------------
// Convolutional inversion encoder: 64x64 RGB -> [L, D] (one code replicated over layers).

class ToyConvEncoder final : public InversionEncoder {
 public:
  explicit ToyConvEncoder(std::uint64_t seed = 1) {
    nn::Rng rng(seed);
    conv1_ = nn::Conv2d(3, 16, 3, 2, 1, rng);
    conv2_ = nn::Conv2d(16, 32, 3, 2, 1, rng);
    conv3_ = nn::Conv2d(32, 32, 3, 2, 1, rng);
    conv4_ = nn::Conv2d(32, 32, 3, 2, 1, rng);
    head_ = nn::Linear(32 * 4 * 4, kCodeDims, rng);
  }

  std::string kind() const override { return "toy_conv_encoder"; }
  EncoderInfo info() const override { return {3, kResolution, kLayers, kCodeDims}; }

  ag::Var forward(const ag::Var& images) const override { return ag::tile_layers(code_head(images), kLayers); }

  // [N, 3, 64, 64] -> [N, D]
  ag::Var code_head(const ag::Var& images) const {
    ag::Var h = ag::leaky_relu(conv1_(images));
    h = ag::leaky_relu(conv2_(h));
    h = ag::leaky_relu(conv3_(h));
    h = ag::leaky_relu(conv4_(h));
    return head_(ag::reshape(h, {h.dim(0), 32 * 4 * 4}));
  }

  nn::NamedParams parameters() {
    nn::NamedParams out;
    conv1_.collect(out, "conv1");
    conv2_.collect(out, "conv2");
    conv3_.collect(out, "conv3");
    conv4_.collect(out, "conv4");
    head_.collect(out, "head");
    return out;
  }

  Checkpoint to_checkpoint() const override {
    Checkpoint c;
    c.kind = kind();
    c.meta = {{"resolution", kResolution}, {"layers", kLayers}, {"dims", kCodeDims}};
    c.tensors = nn::export_params(const_cast<ToyConvEncoder*>(this)->parameters());
    return c;
  }

  static std::shared_ptr<ToyConvEncoder> from_checkpoint(const Checkpoint& c) {
    require(c.kind == "toy_conv_encoder", ErrorCode::invalid_argument, "checkpoint kind is '" + c.kind + "'");
    auto enc = std::make_shared<ToyConvEncoder>();
    nn::import_params(enc->parameters(), c.tensors);
    return enc;
  }

 private:
  nn::Conv2d conv1_, conv2_, conv3_, conv4_;
  nn::Linear head_;
};

// ---------------------------------------------------------------------------
// Scene sampling and the dataset manifest.

struct SceneSampling {
  double attribute_range = 2.0;  // attribute codes ~ U(-r, r)
  double base_range = 2.0;
  double overlay_probability = 0.0;
};

inline Overlay sample_overlay(nn::Rng& rng) {
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  Overlay o;
  o.cx += jitter(rng);
  o.cy += jitter(rng);
  return o;
}

inline SyntheticScene sample_scene(nn::Rng& rng, const SceneSampling& cfg = {}) {
  SyntheticScene s;
  std::uniform_real_distribution<double> attr(-cfg.attribute_range, cfg.attribute_range);
  std::uniform_real_distribution<double> base(-cfg.base_range, cfg.base_range);
  for (int i = 0; i < kCodeDims; ++i) s.code[static_cast<std::size_t>(i)] = i < kNumAttributes ? attr(rng) : base(rng);
  std::bernoulli_distribution has_overlay(cfg.overlay_probability);
  if (has_overlay(rng)) s.overlay = sample_overlay(rng);
  return s;
}

inline LatentCode scene_code(const SyntheticScene& s) {
  Tensor t({kLayers, kCodeDims});
  for (int l = 0; l < kLayers; ++l)
    for (int d = 0; d < kCodeDims; ++d) t[static_cast<std::size_t>(l) * kCodeDims + d] = s.code[static_cast<std::size_t>(d)];
  return LatentCode(std::move(t));
}

// Scene whose code is the layer-mean of a latent code (no overlay).
inline SyntheticScene scene_from_code(const LatentCode& code) {
  SyntheticScene s;
  for (int d = 0; d < kCodeDims; ++d) {
    double acc = 0.0;
    for (int l = 0; l < code.layers(); ++l) acc += code(l, d);
    s.code[static_cast<std::size_t>(d)] = acc / code.layers();
  }
  return s;
}

inline nlohmann::json scene_to_json(const SyntheticScene& s) {
  nlohmann::json j;
  j["code"] = s.code;
  if (s.overlay)
    j["overlay"] = {{"cx", s.overlay->cx}, {"cy", s.overlay->cy}, {"half_w", s.overlay->half_w},
                    {"half_h", s.overlay->half_h}, {"stripe_period", s.overlay->stripe_period}};
  else
    j["overlay"] = nullptr;
  return j;
}

inline SyntheticScene scene_from_json(const nlohmann::json& j) {
  SyntheticScene s;
  s.code = j.at("code").get<std::array<double, kCodeDims>>();
  if (j.contains("overlay") && !j.at("overlay").is_null()) {
    const auto& o = j.at("overlay");
    s.overlay = Overlay{o.at("cx").get<double>(), o.at("cy").get<double>(), o.at("half_w").get<double>(),
                        o.at("half_h").get<double>(), o.at("stripe_period").get<double>()};
  }
  return s;
}

struct DatasetEntry {
  std::string id;
  std::uint64_t seed = 0;
  SyntheticScene scene;
  std::string image;  // file name relative to the manifest
};

struct DatasetManifest {
  int resolution = kResolution;
  std::vector<DatasetEntry> entries;
};

// Renders `count` scenes into `dir` as PNG files plus `manifest.json`.
inline DatasetManifest write_dataset(const std::filesystem::path& dir, int count, std::uint64_t seed,
                                     const SceneSampling& sampling) {
  DatasetManifest m;
  nlohmann::json j;
  j["resolution"] = m.resolution;
  j["attributes"] = kAttributeNames;
  j["seed"] = seed;
  j["scenes"] = nlohmann::json::array();
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seed * 1000003ULL + static_cast<std::uint64_t>(i);
    nn::Rng rng(s);
    DatasetEntry e{"scene_" + std::to_string(i), s, sample_scene(rng, sampling), "scene_" + std::to_string(i) + ".png"};
    write_png(dir / e.image, render(e.scene, m.resolution));
    j["scenes"].push_back({{"id", e.id}, {"seed", e.seed}, {"scene", scene_to_json(e.scene)}, {"image", e.image}});
    m.entries.push_back(std::move(e));
  }
  std::ofstream(dir / "manifest.json") << j.dump(2) << '\n';
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  require(static_cast<bool>(in), ErrorCode::not_found, "cannot open manifest " + manifest_path.string());
  const auto j = nlohmann::json::parse(in);
  DatasetManifest m;
  m.resolution = j.at("resolution").get<int>();
  for (const auto& e : j.at("scenes"))
    m.entries.push_back({e.at("id").get<std::string>(), e.at("seed").get<std::uint64_t>(), scene_from_json(e.at("scene")),
                         e.at("image").get<std::string>()});
  return m;
}

// ---------------------------------------------------------------------------
// Toy pipeline construction.

struct ToyPipelineConfig {
  int encoder_steps = 3000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double overlay_probability = 0.3;
  double alpha_limit = 3.0;
  double default_alpha = 2.0;
  std::function<void(int, double)> on_step;  // (step, loss)
};

struct ToyPipeline {
  EncoderHandle encoder;
  GeneratorHandle generator;
  DirectionCatalog directions;
  std::vector<double> encoder_loss;
};

// One unit direction per attribute latent dim, broadcast across layers.
inline DirectionCatalog toy_directions(double alpha_limit = 3.0, double default_alpha = 2.0) {
  DirectionCatalog cat;
  for (int a = 0; a < kNumAttributes; ++a) {
    Tensor v({kCodeDims}, 0.0);
    v[static_cast<std::size_t>(a)] = 1.0;
    cat.add({kAttributeNames[static_cast<std::size_t>(a)], std::move(v), default_alpha, -alpha_limit, alpha_limit});
  }
  return cat;
}

// Trains the inversion encoder against the analytic generator. Deterministic given seed.
inline ToyPipeline build_toy_pipeline(std::uint64_t seed, const ToyPipelineConfig& cfg = {}) {
  require(cfg.encoder_steps >= 0 && cfg.batch_size > 0, ErrorCode::invalid_argument, "invalid toy pipeline config");
  auto encoder = std::make_shared<ToyConvEncoder>(seed);
  auto params = encoder->parameters();
  nn::Adam opt(nn::param_ptrs(params), {cfg.learning_rate, 0.9, 0.99, 1e-8});
  nn::Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
  SceneSampling sampling;
  sampling.overlay_probability = cfg.overlay_probability;

  ToyPipeline out;
  for (int step = 0; step < cfg.encoder_steps; ++step) {
    std::vector<Image> images;
    Tensor target({cfg.batch_size, kCodeDims});
    for (int i = 0; i < cfg.batch_size; ++i) {
      const SyntheticScene s = sample_scene(rng, sampling);
      images.push_back(render(s));
      for (int d = 0; d < kCodeDims; ++d) target[static_cast<std::size_t>(i) * kCodeDims + d] = s.code[static_cast<std::size_t>(d)];
    }
    opt.zero_grad();
    const ag::Var pred = encoder->code_head(ag::constant(stack_images(images)));
    const ag::Var loss = ag::mean(ag::square(pred - ag::constant(target)));
    const double value = loss.value()[0];
    require(std::isfinite(value), ErrorCode::non_finite, "toy encoder training diverged at step " + std::to_string(step));
    ag::backward(loss);
    opt.step();
    out.encoder_loss.push_back(value);
    if (cfg.on_step) cfg.on_step(step, value);
  }
  out.encoder = encoder;
  out.generator = std::make_shared<ToySceneGenerator>();
  out.directions = toy_directions(cfg.alpha_limit, cfg.default_alpha);
  return out;
}

inline void register_toy_models(ModelRegistry& reg) {
  reg.add_encoder("toy_conv_encoder", [](const Checkpoint& c) -> EncoderHandle { return ToyConvEncoder::from_checkpoint(c); });
  reg.add_encoder("channel_mean_encoder", [](const Checkpoint& c) -> EncoderHandle {
    return std::make_shared<ChannelMeanEncoder>(EncoderInfo{c.meta.at("channels").get<int>(), c.meta.at("resolution").get<int>(),
                                                            c.meta.at("layers").get<int>(), c.meta.at("dims").get<int>()});
  });
  reg.add_generator("toy_scene_generator", [](const Checkpoint& c) -> GeneratorHandle {
    auto it = c.tensors.find("palette");
    return std::make_shared<ToySceneGenerator>(c.meta.value("taps", std::vector<int>{16, 32, 64}),
                                               it != c.tensors.end() ? it->second : ToySceneGenerator::default_palette());
  });
}

inline const ModelRegistry& default_registry() {
  static const ModelRegistry reg = [] {
    ModelRegistry r;
    register_toy_models(r);
    return r;
  }();
  return reg;
}

}  // namespace dcedit::toy
