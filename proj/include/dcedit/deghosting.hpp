#pragma once

// Deghosting: an encoder-decoder whose decoder is fed, scale by scale, with
// features of the fixed generator evaluated at the encoder's predicted code.
// Trained on synthetic (F_train, I) pairs built with folded Diff-CAM masks under
// a weighted sum of a norm loss, a perceptual loss and an adversarial loss.

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcedit/checkpoint.hpp"
#include "dcedit/composition.hpp"
#include "dcedit/latent_editing.hpp"
#include "dcedit/nn.hpp"

namespace dcedit::deghost {

// ---------------------------------------------------------------------------
// Training-pair synthesis

// m if m <= 0.5 else 1 - m, so the original image dominates the blend.
inline ActivationMask fold_mask(const ActivationMask& mask) {
  Tensor t = mask.tensor();
  for (double& m : t.values()) m = m <= 0.5 ? m : 1.0 - m;
  return ActivationMask(std::move(t));
}

struct DeghostTrainPair {
  Image f_train;
  Image target;
};

inline DeghostTrainPair synth_train_pair(const Image& original, const Image& edited, const ActivationMask& mask) {
  require(original.same_shape(edited), ErrorCode::shape_mismatch, "synth_train_pair: original and edited differ in shape");
  const ActivationMask m = (mask.height() == original.height() && mask.width() == original.width())
                               ? mask
                               : da::upsample_mask(mask, original.height(), original.width());
  return {compose(edited, original, fold_mask(m)), original.to_signed()};
}

// ---------------------------------------------------------------------------
// Fixed feature extractors (perceptual loss and perceptual similarity)

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  // All tap outputs for a batch [N, C, H, W], shallow to deep.
  virtual std::vector<ag::Var> taps(const ag::Var& images) const = 0;
  // Tap used by the perceptual loss.
  virtual ag::Var perceptual_tap(const ag::Var& images) const { return taps(images).back(); }
};

class IdentityExtractor final : public FeatureExtractor {
 public:
  std::string id() const override { return "identity"; }
  std::vector<ag::Var> taps(const ag::Var& images) const override { return {images}; }
};

struct ConvExtractorConfig {
  std::vector<int> widths{8, 16};
  std::vector<int> strides{1, 2};
  bool standardize = false;  // ImageNet mean/std on [0,1] input, as VGG expects
};

// Fixed random-weight convolutional stack; the seed fully determines the weights.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 2024, ConvExtractorConfig cfg = {}) : seed_(seed), cfg_(std::move(cfg)) {
    require(cfg_.widths.size() == cfg_.strides.size() && !cfg_.widths.empty(), ErrorCode::invalid_argument,
            "extractor widths/strides mismatch");
    nn::Rng rng(seed);
    int in = 3;
    for (int w : cfg_.widths) {
      const double bound = std::sqrt(6.0 / (in * 9));
      weights_.push_back(ag::constant(nn::uniform_tensor({w, in, 3, 3}, bound, rng)));
      in = w;
    }
  }
  std::string id() const override { return "random_conv_s" + std::to_string(seed_) + (cfg_.standardize ? "_std" : ""); }
  std::vector<ag::Var> taps(const ag::Var& images) const override {
    std::vector<ag::Var> out;
    ag::Var h = cfg_.standardize ? standardize(images) : images;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      h = ag::relu(ag::conv2d(h, weights_[i], ag::Var(), cfg_.strides[i], 1));
      out.push_back(h);
    }
    return out;
  }
  std::uint64_t seed() const { return seed_; }
  const ConvExtractorConfig& config() const { return cfg_; }

 private:
  // signed_unit -> ((x + 1) / 2 - mean) / std per channel.
  static ag::Var standardize(const ag::Var& x) {
    static const double mean[3] = {0.485, 0.456, 0.406}, stdev[3] = {0.229, 0.224, 0.225};
    Tensor a({1, 3, 1, 1}), b({1, 3, 1, 1});
    for (int c = 0; c < 3; ++c) {
      a[c] = 0.5 / stdev[c];
      b[c] = (0.5 - mean[c]) / stdev[c];
    }
    return x * ag::constant(a) + ag::constant(b);
  }

  std::uint64_t seed_;
  ConvExtractorConfig cfg_;
  std::vector<ag::Var> weights_;
};

// ---------------------------------------------------------------------------
// Losses

struct LossOptions {
  bool conventional_mse = false;  // mean of squares instead of (1/Q) * ||.||_2
};

// Batch form of the norm loss: mean over samples of (1/Q) ||target - pred||_2, Q = H * W.
inline ag::Var norm_loss(const ag::Var& pred, const ag::Var& target, int pixels, const LossOptions& opt = {}) {
  require(pred.shape() == target.shape(), ErrorCode::shape_mismatch,
          "loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const ag::Var diff = target - pred;
  if (opt.conventional_mse) return ag::mean(ag::square(diff));
  return ag::scale(ag::mean(ag::sample_norm2(diff)), 1.0 / pixels);
}

inline ag::Var image_var(const Image& img) {
  const Image s = img.to_signed();
  const Tensor& t = s.tensor();
  return ag::constant(t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}));
}

inline int pixel_count(const Image& img) { return img.height() * img.width(); }

inline double mse_loss(const Image& pred, const Image& target, const LossOptions& opt = {}) {
  require(pred.same_shape(target), ErrorCode::shape_mismatch, "mse_loss: shape mismatch");
  ag::NoGradGuard no_grad;
  return norm_loss(image_var(pred), image_var(target), pixel_count(target), opt).value()[0];
}

inline ag::Var perceptual_loss(const ag::Var& pred, const ag::Var& target, const FeatureExtractor& v, int pixels,
                               const LossOptions& opt = {}) {
  require(pred.shape() == target.shape(), ErrorCode::shape_mismatch, "perceptual_loss: shape mismatch");
  return norm_loss(v.perceptual_tap(pred), v.perceptual_tap(target), pixels, opt);
}

inline double perceptual_loss(const Image& pred, const Image& target, const FeatureExtractor& v, const LossOptions& opt = {}) {
  require(pred.same_shape(target), ErrorCode::shape_mismatch, "perceptual_loss: shape mismatch");
  ag::NoGradGuard no_grad;
  return perceptual_loss(image_var(pred), image_var(target), v, pixel_count(target), opt).value()[0];
}

struct AdversarialLosses {
  ag::Var gen;   // non-saturating: -E[log D(fake)]
  ag::Var disc;  // -E[log D(real)] - E[log(1 - D(fake))]
};

// Logit-space evaluation: -log(sigmoid(z)) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z).
inline AdversarialLosses adversarial_losses(const ag::Var& real_logits, const ag::Var& fake_logits) {
  require(real_logits.value().size() > 0 && fake_logits.value().size() > 0, ErrorCode::invalid_argument,
          "adversarial_losses: empty batch");
  return {ag::mean(ag::softplus(-fake_logits)), ag::mean(ag::softplus(-real_logits)) + ag::mean(ag::softplus(fake_logits))};
}

struct DeghostHyperparams {
  double lambda_m = 1.0;
  double lambda_p = 0.8;
  double lambda_a = 0.01;
  nn::AdamConfig adam{};  // lr 1e-4, betas (0.9, 0.99)
  int steps = 2000;
  int batch_size = 8;
  LossOptions loss{};
  std::uint64_t seed = 5;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;  // newline-delimited JSON records
  int queue_capacity = 4;

  void validate() const {
    require(lambda_m >= 0 && lambda_p >= 0 && lambda_a >= 0, ErrorCode::invalid_argument, "loss weights must be >= 0");
    require(steps >= 0 && batch_size > 0, ErrorCode::invalid_argument, "invalid step budget or batch size");
  }
};

struct LossTerms {
  ag::Var mse, percep, adv, total;
};

using DiscriminatorFn = std::function<ag::Var(const ag::Var&)>;

// lambda_m L_mse + lambda_p L_percep + lambda_a L_adv(generator side, non-saturating).
// The discriminator is not evaluated when lambda_a == 0.
inline LossTerms total_deghost_loss(const ag::Var& pred, const ag::Var& target, const FeatureExtractor& v,
                                    const DiscriminatorFn& d, const DeghostHyperparams& hp) {
  const int pixels = pred.dim(2) * pred.dim(3);
  LossTerms t;
  t.mse = norm_loss(pred, target, pixels, hp.loss);
  t.percep = perceptual_loss(pred, target, v, pixels, hp.loss);
  t.total = ag::scale(t.mse, hp.lambda_m) + ag::scale(t.percep, hp.lambda_p);
  if (hp.lambda_a != 0.0) {
    t.adv = ag::mean(ag::softplus(-d(pred)));
    t.total = t.total + ag::scale(t.adv, hp.lambda_a);
  } else {
    t.adv = ag::constant(Tensor::scalar(0.0));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Networks

class Discriminator {
 public:
  explicit Discriminator(std::uint64_t seed = 3, std::vector<int> widths = {8, 16, 32, 32}, int resolution = 64)
      : widths_(widths), resolution_(resolution) {
    nn::Rng rng(seed);
    int in = 3;
    for (int w : widths) {
      convs_.emplace_back(in, w, 3, 2, 1, rng);
      in = w;
    }
    const int r = resolution >> widths.size();
    require(r >= 1, ErrorCode::invalid_argument, "discriminator too deep for resolution");
    head_ = nn::Linear(in * r * r, 1, rng);
  }

  // Real/fake logits, one per image: [N, C, H, W] -> [N].
  ag::Var operator()(const ag::Var& x) const {
    require(x.dim(2) == resolution_ && x.dim(3) == resolution_, ErrorCode::shape_mismatch, "discriminator resolution mismatch");
    ag::Var h = x;
    for (const auto& c : convs_) h = ag::leaky_relu(c(h));
    const int n = h.dim(0);
    return ag::reshape(head_(ag::reshape(h, {n, h.dim(1) * h.dim(2) * h.dim(3)})), {n});
  }

  nn::NamedParams parameters() {
    nn::NamedParams out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv" + std::to_string(i));
    head_.collect(out, "head");
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.kind = "discriminator";
    c.meta = {{"widths", widths_}, {"resolution", resolution_}};
    c.tensors = nn::export_params(const_cast<Discriminator*>(this)->parameters());
    return c;
  }
  static std::shared_ptr<Discriminator> from_checkpoint(const Checkpoint& c) {
    require(c.kind == "discriminator", ErrorCode::invalid_argument, "checkpoint kind is '" + c.kind + "'");
    auto d = std::make_shared<Discriminator>(0, c.meta.at("widths").get<std::vector<int>>(), c.meta.at("resolution").get<int>());
    nn::import_params(d->parameters(), c.tensors);
    return d;
  }

 private:
  std::vector<int> widths_;
  int resolution_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear head_;
};

struct DeghostNetConfig {
  std::vector<int> widths{16, 32, 32};  // encoder widths at 1/2, 1/4, 1/8 resolution
  bool residual = true;                 // output = input + decoded correction
  bool zero_init_output = false;        // start as the identity map (needs residual)
};

class DeghostNet {
 public:
  DeghostNet(GeneratorHandle generator, DeghostNetConfig cfg = {}, std::uint64_t seed = 9)
      : generator_(std::move(generator)), cfg_(std::move(cfg)) {
    require(generator_ != nullptr, ErrorCode::invalid_argument, "deghost net needs a generator");
    require(cfg_.widths.size() == 3, ErrorCode::invalid_argument, "deghost net uses three encoder scales");
    const GeneratorInfo g = generator_->info();
    resolution_ = g.resolution;
    require(resolution_ % 8 == 0, ErrorCode::invalid_argument, "deghost resolution must be divisible by 8");
    require(g.tap_resolutions == std::vector<int>({resolution_ / 4, resolution_ / 2, resolution_}), ErrorCode::invalid_argument,
            "deghost net needs generator taps at 1/4, 1/2 and full resolution");
    const auto& w = cfg_.widths;
    const int bottleneck = resolution_ / 8;
    nn::Rng rng(seed);
    enc_[0] = nn::Conv2d(g.channels, w[0], 3, 2, 1, rng);
    enc_[1] = nn::Conv2d(w[0], w[1], 3, 2, 1, rng);
    enc_[2] = nn::Conv2d(w[1], w[2], 3, 2, 1, rng);
    latent_ = nn::Linear(w[2] * bottleneck * bottleneck, g.dims, rng);
    dec_[0] = nn::Conv2d(w[2], w[1], 3, 1, 1, rng);
    dec_[1] = nn::Conv2d(w[1], w[0], 3, 1, 1, rng);
    dec_[2] = nn::Conv2d(w[0], g.channels, 3, 1, 1, rng);
    skip_[0] = nn::Conv2d(w[1], w[1], 1, 1, 0, rng, false);
    skip_[1] = nn::Conv2d(w[0], w[0], 1, 1, 0, rng, false);
    agg_[0] = nn::Conv2d(g.tap_channels, w[1], 1, 1, 0, rng, false);
    agg_[1] = nn::Conv2d(g.tap_channels, w[0], 1, 1, 0, rng, false);
    agg_[2] = nn::Conv2d(g.tap_channels, g.channels, 1, 1, 0, rng, false);
    if (cfg_.zero_init_output)
      for (ag::Var* v : {&dec_[2].weight, &dec_[2].bias, &agg_[2].weight})
        for (double& x : v->mutable_value().values()) x = 0.0;
  }

  const GeneratorHandle& generator() const { return generator_; }
  const DeghostNetConfig& config() const { return cfg_; }
  int resolution() const { return resolution_; }

  // Encoder -> latent code -> generator features per scale -> decoder with encoder
  // skips and projected generator features added at 1/4, 1/2 and full resolution.
  // with_prior = false is the plain encoder-decoder path (no generator features).
  ag::Var forward(const ag::Var& fused, bool with_prior = true) const {
    require(fused.value().rank() == 4 && fused.dim(2) == resolution_ && fused.dim(3) == resolution_, ErrorCode::shape_mismatch,
            "deghost net expects [N,C," + std::to_string(resolution_) + "," + std::to_string(resolution_) + "] input, got " +
                shape_str(fused.shape()));
    const int n = fused.dim(0);
    const ag::Var e1 = ag::leaky_relu(enc_[0](fused));
    const ag::Var e2 = ag::leaky_relu(enc_[1](e1));
    const ag::Var e3 = ag::leaky_relu(enc_[2](e2));
    std::vector<ag::Var> prior;
    if (with_prior) {
      const GeneratorInfo g = generator_->info();
      const ag::Var code = ag::tile_layers(latent_(ag::reshape(e3, {n, e3.dim(1) * e3.dim(2) * e3.dim(3)})), g.layers);
      generator_->forward(code, &prior);
    }
    auto inject = [&](ag::Var x, int scale) { return with_prior ? x + agg_[scale](prior[static_cast<std::size_t>(scale)]) : x; };

    ag::Var d = ag::leaky_relu(inject(dec_[0](ag::upsample_nearest(e3, 2)) + skip_[0](e2), 0));
    d = ag::leaky_relu(inject(dec_[1](ag::upsample_nearest(d, 2)) + skip_[1](e1), 1));
    const ag::Var out = inject(dec_[2](ag::upsample_nearest(d, 2)), 2);
    return cfg_.residual ? fused + out : out;
  }

  nn::NamedParams parameters() {
    nn::NamedParams out;
    for (int i = 0; i < 3; ++i) enc_[i].collect(out, "enc" + std::to_string(i));
    latent_.collect(out, "latent");
    for (int i = 0; i < 3; ++i) dec_[i].collect(out, "dec" + std::to_string(i));
    for (int i = 0; i < 2; ++i) skip_[i].collect(out, "skip" + std::to_string(i));
    for (int i = 0; i < 3; ++i) agg_[i].collect(out, "agg" + std::to_string(i));
    return out;
  }

  nn::NamedParams aggregation_parameters() {
    nn::NamedParams out;
    for (int i = 0; i < 3; ++i) agg_[i].collect(out, "agg" + std::to_string(i));
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.kind = "deghost_net";
    c.meta = {{"widths", cfg_.widths}, {"residual", cfg_.residual}, {"zero_init_output", cfg_.zero_init_output},
              {"resolution", resolution_}};
    c.tensors = nn::export_params(const_cast<DeghostNet*>(this)->parameters());
    return c;
  }
  static std::shared_ptr<DeghostNet> from_checkpoint(const Checkpoint& c, GeneratorHandle generator) {
    require(c.kind == "deghost_net", ErrorCode::invalid_argument, "checkpoint kind is '" + c.kind + "', expected deghost_net");
    DeghostNetConfig cfg{c.meta.at("widths").get<std::vector<int>>(), c.meta.at("residual").get<bool>(),
                         c.meta.value("zero_init_output", false)};
    auto net = std::make_shared<DeghostNet>(std::move(generator), cfg);
    nn::import_params(net->parameters(), c.tensors);
    return net;
  }
  static std::shared_ptr<DeghostNet> load(const std::filesystem::path& path, GeneratorHandle generator) {
    return from_checkpoint(load_checkpoint(path), std::move(generator));
  }

 private:
  GeneratorHandle generator_;
  DeghostNetConfig cfg_;
  int resolution_ = 0;
  nn::Conv2d enc_[3];
  nn::Linear latent_;
  nn::Conv2d dec_[3];
  nn::Conv2d skip_[2];
  nn::Conv2d agg_[3];
};

inline Image deghost(const Image& fused, const DeghostNet& net) {
  require(fused.height() == net.resolution() && fused.width() == net.resolution(), ErrorCode::shape_mismatch,
          "deghost: input resolution " + std::to_string(fused.height()) + " does not match network resolution " +
              std::to_string(net.resolution()));
  ag::NoGradGuard no_grad;
  const Tensor out = net.forward(image_var(fused)).value();
  require(out.all_finite(), ErrorCode::non_finite, "deghost: non-finite activations in network output");
  return unstack_image(out, 0);
}

// ---------------------------------------------------------------------------
// Training

// Single-producer / single-consumer queue with a fixed capacity.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
};

// One training source: original I, edited inversion T (same attribute as the mask),
// and the Diff-CAM mask for that edit.
struct DeghostSample {
  Image original;
  Image edited;
  ActivationMask mask;
};

struct StepRecord {
  int step = 0;
  double l_mse = 0, l_percep = 0, l_adv = 0, total = 0, l_disc = 0;

  nlohmann::json to_json() const {
    return {{"step", step}, {"l_mse", l_mse}, {"l_percep", l_percep}, {"l_adv", l_adv}, {"total", total}};
  }
};

struct DeghostTrainResult {
  std::shared_ptr<DeghostNet> net;
  std::shared_ptr<Discriminator> discriminator;
  std::vector<StepRecord> log;
};

struct Batch {
  Tensor inputs;
  Tensor targets;
};

inline Batch make_batch(const std::vector<DeghostTrainPair>& pairs) {
  std::vector<Image> in, tg;
  for (const auto& p : pairs) {
    in.push_back(p.f_train);
    tg.push_back(p.target);
  }
  return {stack_images(in), stack_images(tg)};
}

// Alternating generator-side / discriminator-side Adam updates of the deghost
// objective. Pairs are synthesized by a producer thread feeding a bounded queue;
// the sequence is deterministic given hp.seed.
inline DeghostTrainResult train_deghost(std::shared_ptr<DeghostNet> net, std::shared_ptr<Discriminator> disc,
                                        const std::vector<DeghostSample>& dataset, const FeatureExtractor& v,
                                        const DeghostHyperparams& hp,
                                        const std::function<void(const StepRecord&)>& on_step = {}) {
  hp.validate();
  require(!dataset.empty(), ErrorCode::invalid_argument, "train_deghost: empty dataset");
  require(net && disc, ErrorCode::invalid_argument, "train_deghost: missing networks");

  auto net_params = net->parameters();
  auto disc_params = disc->parameters();
  nn::Adam net_opt(nn::param_ptrs(net_params), hp.adam);
  nn::Adam disc_opt(nn::param_ptrs(disc_params), hp.adam);
  const DiscriminatorFn d = [&disc](const ag::Var& x) { return (*disc)(x); };

  std::optional<std::ofstream> log_file;
  if (!hp.log_path.empty()) {
    if (hp.log_path.has_parent_path()) std::filesystem::create_directories(hp.log_path.parent_path());
    log_file.emplace(hp.log_path);
    require(static_cast<bool>(*log_file), ErrorCode::io, "cannot write training log " + hp.log_path.string());
  }
  auto save = [&](const std::string& tag) {
    if (hp.checkpoint_dir.empty()) return;
    save_checkpoint(hp.checkpoint_dir / ("deghost_" + tag + ".ckpt"), net->to_checkpoint());
    save_checkpoint(hp.checkpoint_dir / ("discriminator_" + tag + ".ckpt"), disc->to_checkpoint());
  };

  BoundedQueue<Batch> queue(static_cast<std::size_t>(std::max(1, hp.queue_capacity)));
  std::jthread producer([&queue, &dataset, &hp](std::stop_token stop) {
    nn::Rng rng(hp.seed);
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    for (int step = 0; step < hp.steps && !stop.stop_requested(); ++step) {
      std::vector<DeghostTrainPair> pairs;
      for (int i = 0; i < hp.batch_size; ++i) {
        const DeghostSample& s = dataset[pick(rng)];
        pairs.push_back(synth_train_pair(s.original, s.edited, s.mask));
      }
      if (!queue.push(make_batch(pairs))) return;
    }
    queue.close();
  });

  DeghostTrainResult result{net, disc, {}};
  Checkpoint last_good = net->to_checkpoint();
  for (int step = 0; step < hp.steps; ++step) {
    std::optional<Batch> batch = queue.pop();
    require(batch.has_value(), ErrorCode::invalid_argument, "train_deghost: data producer stopped early");
    const ag::Var input = ag::constant(std::move(batch->inputs));
    const ag::Var target = ag::constant(std::move(batch->targets));

    net_opt.zero_grad();
    disc_opt.zero_grad();
    const ag::Var pred = net->forward(input);
    const LossTerms terms = total_deghost_loss(pred, target, v, d, hp);
    StepRecord rec{step, terms.mse.value()[0], terms.percep.value()[0], terms.adv.value()[0], terms.total.value()[0], 0.0};
    if (!std::isfinite(rec.total)) {
      queue.close();
      nn::import_params(net_params, last_good.tensors);
      save("last_good");
      fail(ErrorCode::non_finite, "train_deghost: non-finite loss at step " + std::to_string(step) +
                                      "; network restored to the last finite checkpoint");
    }
    ag::backward(terms.total);
    net_opt.step();

    if (hp.lambda_a != 0.0) {
      disc_opt.zero_grad();
      const AdversarialLosses adv = adversarial_losses(d(target), d(pred.detach()));
      rec.l_disc = adv.disc.value()[0];
      ag::backward(adv.disc);
      disc_opt.step();
    }

    if (hp.checkpoint_every > 0 && (step + 1) % hp.checkpoint_every == 0) {
      last_good = net->to_checkpoint();
      save("step" + std::to_string(step + 1));
    }
    if (log_file) *log_file << rec.to_json().dump() << '\n';
    result.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  queue.close();
  save("final");
  return result;
}

// Mean of `values` over [begin, begin + window).
inline double window_mean(const std::vector<StepRecord>& log, std::size_t begin, std::size_t window) {
  require(begin + window <= log.size() && window > 0, ErrorCode::invalid_argument, "window outside the training log");
  double acc = 0.0;
  for (std::size_t i = begin; i < begin + window; ++i) acc += log[i].total;
  return acc / static_cast<double>(window);
}

// Exponential moving average of the total loss, seeded with the step-0 value.
inline double loss_ema(const std::vector<StepRecord>& log, std::size_t end, double decay = 0.98) {
  require(end > 0 && end <= log.size(), ErrorCode::invalid_argument, "loss_ema: range outside the training log");
  double ema = log[0].total;
  for (std::size_t i = 1; i < end; ++i) ema = decay * ema + (1.0 - decay) * log[i].total;
  return ema;
}

}  // namespace dcedit::deghost
