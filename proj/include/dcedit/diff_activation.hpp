#pragma once

// Differential activation: a trainable pair encoder featurizes the inversion and
// the edited inversion, their difference feeds an attribute classifier, and the
// class-specific gradient-weighted activation of the classifier's last
// convolutional layer becomes the edit mask (Diff-CAM).

#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcedit/checkpoint.hpp"
#include "dcedit/image.hpp"
#include "dcedit/latent_editing.hpp"
#include "dcedit/nn.hpp"

namespace dcedit::da {

inline constexpr double kMaskEpsilon = 1e-8;

class AttributeCatalog {
 public:
  AttributeCatalog() = default;
  explicit AttributeCatalog(std::vector<std::string> names) : names_(std::move(names)) {
    require(names_.size() >= 2, ErrorCode::invalid_argument, "attribute catalog needs at least two attributes");
    require(std::set<std::string>(names_.begin(), names_.end()).size() == names_.size(), ErrorCode::invalid_argument,
            "attribute names must be unique");
  }
  const std::vector<std::string>& names() const noexcept { return names_; }
  int size() const noexcept { return static_cast<int>(names_.size()); }
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int>(i);
    fail(ErrorCode::unknown_attribute, "unknown attribute '" + name + "'");
  }

 private:
  std::vector<std::string> names_;
};

struct AttributeLabel {
  Tensor one_hot;  // [N]

  static AttributeLabel of(int index, int count) {
    require(index >= 0 && index < count, ErrorCode::invalid_argument, "label index out of range");
    Tensor t({count}, 0.0);
    t[static_cast<std::size_t>(index)] = 1.0;
    return {std::move(t)};
  }
  int index() const {
    int idx = -1;
    for (std::size_t i = 0; i < one_hot.size(); ++i) {
      if (one_hot[i] == 1.0) {
        require(idx < 0, ErrorCode::invalid_argument, "label is not one-hot");
        idx = static_cast<int>(i);
      } else {
        require(one_hot[i] == 0.0, ErrorCode::invalid_argument, "label is not one-hot");
      }
    }
    require(idx >= 0, ErrorCode::invalid_argument, "label is not one-hot");
    return idx;
  }
};

struct DifferentialFeatures {
  Tensor data;  // [K0, h0, w0]
};

struct AttributeLogits {
  Tensor scores;  // [N]
};

struct ClassifierFeatureMap {
  Tensor data;  // [K, h, w]
  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

struct ChannelWeights {
  Tensor beta;  // [K]
  int class_index = 0;
  int z = 0;    // spatial positions pooled (h * w)
};

// ---------------------------------------------------------------------------
// Networks

struct PairEncoderConfig {
  int in_channels = 3;
  std::vector<int> widths{8, 16};
  std::vector<int> strides{1, 1};
};

class PairEncoder {
 public:
  PairEncoder() = default;
  PairEncoder(const PairEncoderConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    require(cfg.widths.size() == cfg.strides.size() && !cfg.widths.empty(), ErrorCode::invalid_argument,
            "pair encoder widths/strides mismatch");
    int in = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      convs_.emplace_back(in, cfg.widths[i], 3, cfg.strides[i], 1, rng);
      in = cfg.widths[i];
    }
  }

  ag::Var operator()(const ag::Var& x) const {
    ag::Var h = x;
    for (const auto& c : convs_) h = ag::leaky_relu(c(h));
    return h;
  }

  const PairEncoderConfig& config() const { return cfg_; }
  int out_channels() const { return cfg_.widths.back(); }
  int downsampling() const {
    return std::accumulate(cfg_.strides.begin(), cfg_.strides.end(), 1, std::multiplies<>());
  }

  void collect(nn::NamedParams& out, const std::string& prefix) {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i));
  }

 private:
  PairEncoderConfig cfg_;
  std::vector<nn::Conv2d> convs_;
};

struct ClassifierConfig {
  int in_channels = 16;
  std::vector<int> widths{16, 16};
  int head_hidden = 0;  // 0: global pooling followed by a single fully connected layer
  bool bias_free = true;
  int num_attributes = 2;
};

class AttributeClassifier {
 public:
  AttributeClassifier() = default;
  AttributeClassifier(const ClassifierConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    require(!cfg.widths.empty() && cfg.num_attributes >= 2, ErrorCode::invalid_argument, "invalid classifier config");
    int in = cfg.in_channels;
    for (int w : cfg.widths) {
      convs_.emplace_back(in, w, 3, 1, 1, rng, !cfg.bias_free);
      in = w;
    }
    if (cfg.head_hidden > 0) {
      hidden_ = nn::Linear(in, cfg.head_hidden, rng, !cfg.bias_free);
      in = cfg.head_hidden;
    }
    out_ = nn::Linear(in, cfg.num_attributes, rng, !cfg.bias_free);
  }

  // Output of the last convolutional block: H, [N, K, h, w].
  ag::Var features(const ag::Var& delta) const {
    ag::Var h = delta;
    for (const auto& c : convs_) h = ag::leaky_relu(c(h));
    return h;
  }

  // Logits from H: global average pooling, optional hidden layer, linear output.
  ag::Var head(const ag::Var& h) const {
    ag::Var z = ag::spatial_mean(h);
    if (cfg_.head_hidden > 0) z = ag::tanh(hidden_(z));
    return out_(z);
  }

  const ClassifierConfig& config() const { return cfg_; }

  void collect(nn::NamedParams& out, const std::string& prefix) {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i));
    if (cfg_.head_hidden > 0) hidden_.collect(out, prefix + ".hidden");
    out_.collect(out, prefix + ".fc");
  }

 private:
  ClassifierConfig cfg_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear hidden_;
  nn::Linear out_;
};

struct DAConfig {
  PairEncoderConfig encoder;
  ClassifierConfig classifier;
  int image_resolution = 64;
  int working_resolution = 16;
};

class DAModel {
 public:
  DAModel(AttributeCatalog catalog, DAConfig cfg, std::uint64_t seed = 7) : catalog_(std::move(catalog)), cfg_(std::move(cfg)) {
    require(cfg_.image_resolution % cfg_.working_resolution == 0, ErrorCode::invalid_argument,
            "image resolution must be a multiple of the DA working resolution");
    cfg_.classifier.in_channels = cfg_.encoder.widths.back();
    cfg_.classifier.num_attributes = catalog_.size();
    nn::Rng rng(seed);
    encoder_ = PairEncoder(cfg_.encoder, rng);
    classifier_ = AttributeClassifier(cfg_.classifier, rng);
  }

  const AttributeCatalog& catalog() const { return catalog_; }
  const DAConfig& config() const { return cfg_; }
  const PairEncoder& pair_encoder() const { return encoder_; }
  const AttributeClassifier& classifier() const { return classifier_; }
  int feature_resolution() const { return cfg_.working_resolution / encoder_.downsampling(); }

  nn::NamedParams parameters() {
    nn::NamedParams out;
    encoder_.collect(out, "pair_encoder");
    classifier_.collect(out, "classifier");
    return out;
  }

  // Brings an image to the DA working resolution (box filter for integer ratios).
  Tensor to_working(const Image& img) const {
    const Image s = img.to_signed();
    if (s.height() == cfg_.working_resolution && s.width() == cfg_.working_resolution) return s.tensor();
    require(s.height() == cfg_.image_resolution && s.width() == cfg_.image_resolution, ErrorCode::shape_mismatch,
            "DA expects " + std::to_string(cfg_.image_resolution) + "px or " + std::to_string(cfg_.working_resolution) +
                "px images, got " + shape_str(s.tensor().shape()));
    return downsample_area(s.tensor(), cfg_.image_resolution / cfg_.working_resolution);
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.kind = "da_model";
    c.meta = {{"attributes", catalog_.names()},
              {"image_resolution", cfg_.image_resolution},
              {"working_resolution", cfg_.working_resolution},
              {"encoder_widths", cfg_.encoder.widths},
              {"encoder_strides", cfg_.encoder.strides},
              {"in_channels", cfg_.encoder.in_channels},
              {"classifier_widths", cfg_.classifier.widths},
              {"head_hidden", cfg_.classifier.head_hidden},
              {"bias_free", cfg_.classifier.bias_free}};
    c.tensors = nn::export_params(const_cast<DAModel*>(this)->parameters());
    return c;
  }

  static std::shared_ptr<DAModel> from_checkpoint(const Checkpoint& c) {
    require(c.kind == "da_model", ErrorCode::invalid_argument, "checkpoint kind is '" + c.kind + "', expected da_model");
    DAConfig cfg;
    cfg.image_resolution = c.meta.at("image_resolution").get<int>();
    cfg.working_resolution = c.meta.at("working_resolution").get<int>();
    cfg.encoder.widths = c.meta.at("encoder_widths").get<std::vector<int>>();
    cfg.encoder.strides = c.meta.at("encoder_strides").get<std::vector<int>>();
    cfg.encoder.in_channels = c.meta.at("in_channels").get<int>();
    cfg.classifier.widths = c.meta.at("classifier_widths").get<std::vector<int>>();
    cfg.classifier.head_hidden = c.meta.at("head_hidden").get<int>();
    cfg.classifier.bias_free = c.meta.at("bias_free").get<bool>();
    auto model = std::make_shared<DAModel>(AttributeCatalog(c.meta.at("attributes").get<std::vector<std::string>>()), cfg);
    nn::import_params(model->parameters(), c.tensors);
    return model;
  }

  static std::shared_ptr<DAModel> load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

 private:
  AttributeCatalog catalog_;
  DAConfig cfg_;
  PairEncoder encoder_;
  AttributeClassifier classifier_;
};

// ---------------------------------------------------------------------------
// Operations

inline Tensor as_batch(const Tensor& chw) { return chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)}); }

// Delta = E(inverted) - E(edited) at the DA working resolution.
inline DifferentialFeatures differential_features(const Image& inverted, const Image& edited, const DAModel& model) {
  require(inverted.same_shape(edited), ErrorCode::shape_mismatch,
          "differential_features: " + shape_str(inverted.tensor().shape()) + " vs " + shape_str(edited.tensor().shape()));
  ag::NoGradGuard no_grad;
  const Tensor a = model.pair_encoder()(ag::constant(as_batch(model.to_working(inverted)))).value();
  const Tensor b = model.pair_encoder()(ag::constant(as_batch(model.to_working(edited)))).value();
  Tensor d({a.dim(1), a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
  return {std::move(d)};
}

inline std::pair<AttributeLogits, ClassifierFeatureMap> classify(const DifferentialFeatures& delta,
                                                                 const AttributeClassifier& classifier) {
  const auto& cfg = classifier.config();
  require(delta.data.rank() == 3 && delta.data.dim(0) == cfg.in_channels, ErrorCode::shape_mismatch,
          "classifier expects " + std::to_string(cfg.in_channels) + " input channels, got " + shape_str(delta.data.shape()));
  ag::NoGradGuard no_grad;
  const ag::Var h = classifier.features(ag::constant(as_batch(delta.data)));
  const ag::Var s = classifier.head(h);
  return {AttributeLogits{s.value().reshaped({s.dim(1)})},
          ClassifierFeatureMap{h.value().reshaped({h.dim(1), h.dim(2), h.dim(3)})}};
}

// -sum_c y_c log softmax(s)_c, stabilized by max subtraction.
inline double cross_entropy(const AttributeLogits& logits, const AttributeLabel& label) {
  require(logits.scores.size() == label.one_hot.size() && logits.scores.size() > 0, ErrorCode::shape_mismatch,
          "cross_entropy: logits and label differ in length");
  const double m = logits.scores.max();
  double z = 0.0;
  for (double s : logits.scores.values()) z += std::exp(s - m);
  const double log_z = m + std::log(z);
  double loss = 0.0;
  for (std::size_t c = 0; c < logits.scores.size(); ++c)
    if (label.one_hot[c] != 0.0) loss -= label.one_hot[c] * (logits.scores[c] - log_z);
  return loss;
}

using LogitHead = std::function<ag::Var(const ag::Var&)>;

// beta_c^k = (1/Z) sum_ij d s_c / d H^k_ij, by reverse-mode differentiation of `head`.
inline ChannelWeights channel_weights(const LogitHead& head, const ClassifierFeatureMap& feature_map, int class_index) {
  ag::Var h = ag::parameter(as_batch(feature_map.data));
  const ag::Var s = head(h);
  require(class_index >= 0 && class_index < s.dim(1), ErrorCode::invalid_argument,
          "class index " + std::to_string(class_index) + " out of range");
  ag::backward(ag::element(s, static_cast<std::size_t>(class_index)));
  const int k = feature_map.channels();
  const int z = feature_map.height() * feature_map.width();
  require(z > 0, ErrorCode::invalid_argument, "empty feature map");
  ChannelWeights out{Tensor({k}, 0.0), class_index, z};
  const Tensor& g = h.grad();
  if (g.empty()) return out;
  for (int ch = 0; ch < k; ++ch) {
    double acc = 0.0;
    for (int i = 0; i < z; ++i) acc += g[static_cast<std::size_t>(ch) * z + i];
    out.beta[static_cast<std::size_t>(ch)] = acc / z;
  }
  return out;
}

inline ChannelWeights channel_weights(const AttributeClassifier& classifier, const ClassifierFeatureMap& feature_map,
                                      int class_index) {
  return channel_weights([&classifier](const ag::Var& h) { return classifier.head(h); }, feature_map, class_index);
}

// ReLU(sum_k beta_k H^k), then divided by its maximum; all zeros when the max is <= epsilon.
inline ActivationMask diff_cam_mask(const ClassifierFeatureMap& feature_map, const ChannelWeights& weights,
                                    double epsilon = kMaskEpsilon) {
  require(static_cast<int>(weights.beta.size()) == feature_map.channels(), ErrorCode::shape_mismatch,
          "channel weights do not match feature map channels");
  const int h = feature_map.height(), w = feature_map.width();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor m({1, h, w}, 0.0);
  for (int k = 0; k < feature_map.channels(); ++k) {
    const double b = weights.beta[static_cast<std::size_t>(k)];
    const double* hk = feature_map.data.data() + k * hw;
    for (std::size_t i = 0; i < hw; ++i) m[i] += b * hk[i];
  }
  double peak = 0.0;
  for (double& v : m.values()) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > epsilon) {
    for (double& v : m.values()) v /= peak;
  } else {
    m.fill(0.0);
  }
  return ActivationMask(std::move(m));
}

inline ActivationMask upsample_mask(const ActivationMask& mask, int height, int width) {
  require(height >= mask.height() && width >= mask.width(), ErrorCode::invalid_argument,
          "upsample target " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than the mask");
  if (height == mask.height() && width == mask.width()) return mask;
  Tensor t = resize_bilinear(mask.tensor(), height, width);
  for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
  return ActivationMask(std::move(t));
}

struct MaskComputation {
  AttributeLogits logits;
  ClassifierFeatureMap feature_map;
  ChannelWeights weights;
  ActivationMask mask;  // at the classifier feature resolution
};

// Full Diff-CAM path for one (unedited, edited) pair and the requested attribute index.
inline MaskComputation compute_mask(const DAModel& model, const Image& unedited, const Image& edited, int class_index) {
  const DifferentialFeatures delta = differential_features(unedited, edited, model);
  auto [logits, fmap] = classify(delta, model.classifier());
  ChannelWeights weights = channel_weights(model.classifier(), fmap, class_index);
  ActivationMask mask = diff_cam_mask(fmap, weights);
  return {std::move(logits), std::move(fmap), std::move(weights), std::move(mask)};
}

// Diff-CAM mask upsampled to the edited image's resolution.
inline ActivationMask edit_mask(const DAModel& model, const Image& unedited, const Image& edited, int class_index) {
  return upsample_mask(compute_mask(model, unedited, edited, class_index).mask, edited.height(), edited.width());
}

// ---------------------------------------------------------------------------
// Training

struct DATrainSample {
  Image inverted;
  Image edited;
  int label = 0;
};

struct DATrainConfig {
  int steps = 2000;
  int batch_size = 16;
  nn::AdamConfig adam{};  // lr 1e-4, betas (0.9, 0.99)
  std::uint64_t seed = 11;
  std::function<void(int, double)> on_step;  // (step, loss)
};

struct DATrainResult {
  std::vector<double> loss;
};

// Builds (I', T, label) pairs: random attribute, alpha ~ U[alpha_min, alpha_max].
// Images are stored at the DA working resolution.
inline std::vector<DATrainSample> make_da_dataset(std::span<const LatentCode> codes, const Generator& generator,
                                                  const DirectionCatalog& directions, const DAModel& model, int count,
                                                  nn::Rng& rng, std::vector<double>* alphas = nullptr) {
  require(!codes.empty() && count > 0, ErrorCode::invalid_argument, "make_da_dataset needs codes and a positive count");
  std::uniform_int_distribution<std::size_t> pick_code(0, codes.size() - 1);
  std::uniform_int_distribution<int> pick_attr(0, model.catalog().size() - 1);
  std::vector<DATrainSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const LatentCode& w = codes[pick_code(rng)];
    const int attr = pick_attr(rng);
    const EditDirection& dir = directions.at(model.catalog().names()[static_cast<std::size_t>(attr)]);
    const double alpha = std::uniform_real_distribution<double>(dir.alpha_min, dir.alpha_max)(rng);
    const std::vector<LatentCode> pair{w, apply_direction(w, dir, alpha)};
    const auto imgs = generate_batch(pair, generator);
    out.push_back({Image(model.to_working(imgs[0])), Image(model.to_working(imgs[1])), attr});
    if (alphas) alphas->push_back(alpha);
  }
  return out;
}

// Joint cross-entropy training of pair encoder and classifier with Adam.
inline DATrainResult train_da(DAModel& model, const std::vector<DATrainSample>& dataset, const DATrainConfig& cfg) {
  require(!dataset.empty(), ErrorCode::invalid_argument, "train_da: empty dataset");
  require(cfg.steps >= 0 && cfg.batch_size > 0, ErrorCode::invalid_argument, "train_da: invalid config");
  for (const auto& s : dataset)
    require(s.label >= 0 && s.label < model.catalog().size(), ErrorCode::invalid_argument, "train_da: label out of range");

  std::vector<Tensor> inv, edt;
  inv.reserve(dataset.size());
  edt.reserve(dataset.size());
  for (const auto& s : dataset) {
    inv.push_back(model.to_working(s.inverted));
    edt.push_back(model.to_working(s.edited));
  }
  const Shape one = inv.front().shape();
  const std::size_t per = inv.front().size();

  auto params = model.parameters();
  nn::Adam opt(nn::param_ptrs(params), cfg.adam);
  nn::Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  DATrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const int b = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), dataset.size()));
    Tensor xa({b, one[0], one[1], one[2]}), xb({b, one[0], one[1], one[2]});
    std::vector<int> labels;
    for (int i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      std::copy_n(inv[idx].data(), per, xa.data() + i * per);
      std::copy_n(edt[idx].data(), per, xb.data() + i * per);
      labels.push_back(dataset[idx].label);
    }
    opt.zero_grad();
    const ag::Var delta = model.pair_encoder()(ag::constant(std::move(xa))) - model.pair_encoder()(ag::constant(std::move(xb)));
    const ag::Var logits = model.classifier().head(model.classifier().features(delta));
    const ag::Var loss = ag::cross_entropy(logits, labels);
    const double value = loss.value()[0];
    if (!std::isfinite(value))
      fail(ErrorCode::non_finite, "train_da: non-finite loss at step " + std::to_string(step) +
                                      (result.loss.empty() ? std::string() : ", last finite loss " + std::to_string(result.loss.back())));
    ag::backward(loss);
    opt.step();
    result.loss.push_back(value);
    if (cfg.on_step) cfg.on_step(step, value);
  }
  return result;
}

inline int predict(const DAModel& model, const Image& inverted, const Image& edited) {
  const auto [logits, _] = classify(differential_features(inverted, edited, model), model.classifier());
  return static_cast<int>(std::max_element(logits.scores.values().begin(), logits.scores.values().end()) -
                          logits.scores.values().begin());
}

inline double accuracy(const DAModel& model, const std::vector<DATrainSample>& samples) {
  require(!samples.empty(), ErrorCode::invalid_argument, "accuracy: empty sample set");
  int hits = 0;
  for (const auto& s : samples) hits += predict(model, s.inverted, s.edited) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace dcedit::da
