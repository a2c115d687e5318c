#include <gtest/gtest.h>

#include <fstream>

#include "dcedit/deghosting.hpp"
#include "dcedit/toy_training.hpp"
#include "test_support.hpp"

using namespace dcedit;
using namespace dcedit::deghost;
using testing_support::random_image;
using testing_support::random_mask;
using testing_support::random_tensor;

namespace {

std::shared_ptr<toy::ToySceneGenerator> toy_generator() { return std::make_shared<toy::ToySceneGenerator>(); }

// Rendered originals with one attribute moved; the mask is the renderer's change mask.
std::vector<DeghostSample> rendered_samples(int count, std::uint64_t seed) {
  nn::Rng rng(seed);
  toy::SceneSampling sampling;
  sampling.overlay_probability = 0.3;
  std::uniform_int_distribution<int> attr(0, toy::kNumAttributes - 1);
  std::uniform_real_distribution<double> delta(-3.0, 3.0);
  std::vector<DeghostSample> out;
  for (int i = 0; i < count; ++i) {
    const toy::SyntheticScene s = toy::sample_scene(rng, sampling);
    const int a = attr(rng);
    const double d = delta(rng);
    toy::SyntheticScene t = s;
    t.code[a] += d;
    out.push_back({toy::render(s), toy::render(t), toy::ground_truth_change_mask(s, a, d)});
  }
  return out;
}

double loop_norm(const Tensor& a, const Tensor& b, int pixels) {
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (long double)(a[i] - b[i]) * (a[i] - b[i]);
  return static_cast<double>(std::sqrt(acc) / pixels);
}

ag::Var* param(nn::NamedParams& ps, const std::string& name) {
  for (auto& [n, p] : ps)
    if (n == name) return p;
  throw std::runtime_error("no parameter " + name);
}

Tensor sample(const Tensor& batch, int i) {
  const std::size_t n = batch.size() / static_cast<std::size_t>(batch.dim(0));
  Tensor out({batch.dim(1), batch.dim(2), batch.dim(3)});
  for (std::size_t k = 0; k < n; ++k) out[k] = batch[static_cast<std::size_t>(i) * n + k];
  return out;
}

Tensor relu_copy(Tensor t) {
  for (double& v : t.values()) v = std::max(v, 0.0);
  return t;
}

}  // namespace

TEST(FoldMask, MillionValues) {
  std::mt19937_64 rng(1);
  const ActivationMask m = random_mask(1000, 1000, rng);
  const ActivationMask f = fold_mask(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double want = m[i] <= 0.5 ? m[i] : 1.0 - m[i];
    ASSERT_EQ(f[i], want);
    ASSERT_GE(f[i], 0.0);
    ASSERT_LE(f[i], 0.5);
  }
  const ActivationMask hand(Tensor({1, 1, 5}, std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(fold_mask(hand).tensor().storage(), (std::vector<double>{0.0, 0.25, 0.5, 0.25, 0.0}));
}

TEST(SynthTrainPair, ComposesWithFoldedMask) {
  std::mt19937_64 rng(2);
  const Image i = random_image(3, 16, 16, rng), t = random_image(3, 16, 16, rng);
  const ActivationMask m = random_mask(16, 16, rng);
  const DeghostTrainPair p = synth_train_pair(i, t, m);
  EXPECT_EQ(p.target, i);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const double f = m(y, x) <= 0.5 ? m(y, x) : 1.0 - m(y, x);
        EXPECT_NEAR(p.f_train(c, y, x), f * t(c, y, x) + (1.0 - f) * i(c, y, x), 1e-15);
      }
  // Low-resolution masks are upsampled first.
  const ActivationMask small = random_mask(4, 4, rng);
  EXPECT_EQ(synth_train_pair(i, t, small).f_train, compose(t, i, fold_mask(da::upsample_mask(small, 16, 16))));
  EXPECT_THROW(synth_train_pair(i, random_image(3, 8, 8, rng), m), Error);
}

TEST(Losses, NormLossLoopOracle) {
  std::mt19937_64 rng(3);
  const Image a = random_image(3, 9, 7, rng), b = random_image(3, 9, 7, rng);
  EXPECT_NEAR(mse_loss(a, b), loop_norm(a.tensor(), b.tensor(), 63), 1e-12);
  EXPECT_EQ(mse_loss(a, a), 0.0);
  double sq = 0;
  for (std::size_t k = 0; k < a.size(); ++k) sq += (a.tensor()[k] - b.tensor()[k]) * (a.tensor()[k] - b.tensor()[k]);
  EXPECT_NEAR(mse_loss(a, b, {true}), sq / a.size(), 1e-12);

  // Batch form averages per-sample norms.
  const Tensor p = random_tensor({2, 3, 4, 4}, rng), q = random_tensor({2, 3, 4, 4}, rng);
  const double per0 = loop_norm(sample(p, 0), sample(q, 0), 16), per1 = loop_norm(sample(p, 1), sample(q, 1), 16);
  EXPECT_NEAR(norm_loss(ag::constant(p), ag::constant(q), 16).value()[0], 0.5 * (per0 + per1), 1e-12);
  EXPECT_THROW(mse_loss(a, random_image(3, 7, 9, rng)), Error);
}

TEST(Losses, PerceptualIdentityAndConvOracle) {
  std::mt19937_64 rng(4);
  const Image a = random_image(3, 12, 12, rng), b = random_image(3, 12, 12, rng);
  const IdentityExtractor id;
  EXPECT_NEAR(perceptual_loss(a, b, id), mse_loss(a, b), 1e-15);

  const RandomConvExtractor conv(31);
  nn::Rng wrng(31);
  const Tensor w1 = nn::uniform_tensor({8, 3, 3, 3}, std::sqrt(6.0 / 27.0), wrng);
  const Tensor w2 = nn::uniform_tensor({16, 8, 3, 3}, std::sqrt(6.0 / 72.0), wrng);
  auto feats = [&](const Image& img) {
    return relu_copy(testing_support::loop_conv3x3(relu_copy(testing_support::loop_conv3x3(img.tensor(), w1, nullptr, 1)), w2,
                                                   nullptr, 2));
  };
  EXPECT_NEAR(perceptual_loss(a, b, conv), loop_norm(feats(a), feats(b), 144), 1e-10);
}

TEST(Losses, AdversarialClosedForms) {
  // D = 0.5 everywhere (zero logits): generator side ln 2, discriminator side 2 ln 2.
  const ag::Var zeros = ag::constant(Tensor({5}));
  const AdversarialLosses half = adversarial_losses(zeros, zeros);
  EXPECT_NEAR(half.gen.value()[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(half.disc.value()[0], 2.0 * std::log(2.0), 1e-15);

  std::mt19937_64 rng(5);
  const Tensor real = random_tensor({7}, rng, -30.0, 30.0), fake = random_tensor({7}, rng, -30.0, 30.0);
  const AdversarialLosses l = adversarial_losses(ag::constant(real), ag::constant(fake));
  long double gen = 0, disc = 0;
  for (int k = 0; k < 7; ++k) {
    const long double dr = 1.0L / (1.0L + std::exp(-(long double)real[k]));
    const long double df = 1.0L / (1.0L + std::exp(-(long double)fake[k]));
    gen -= std::log(df);
    disc -= std::log(dr) + std::log(1.0L - df);
  }
  EXPECT_NEAR(l.gen.value()[0], static_cast<double>(gen / 7), 1e-6);
  EXPECT_NEAR(l.disc.value()[0], static_cast<double>(disc / 7), 1e-6);
  EXPECT_THROW(adversarial_losses(ag::constant(Tensor({0})), zeros), Error);
}

TEST(Losses, TotalIsWeightedSumAndZeroAdversarialSkipsD) {
  std::mt19937_64 rng(6);
  const ag::Var pred = ag::constant(random_tensor({2, 3, 8, 8}, rng)), target = ag::constant(random_tensor({2, 3, 8, 8}, rng));
  const RandomConvExtractor v(8);
  int calls = 0;
  const DiscriminatorFn d = [&](const ag::Var& x) {
    ++calls;
    return ag::constant(Tensor({x.dim(0)}, std::vector<double>{0.3, -1.2}));
  };
  DeghostHyperparams hp;
  hp.lambda_m = 1.3;
  hp.lambda_p = 0.7;
  hp.lambda_a = 0.05;
  const LossTerms t = total_deghost_loss(pred, target, v, d, hp);
  EXPECT_EQ(calls, 1);
  EXPECT_NEAR(t.mse.value()[0], norm_loss(pred, target, 64).value()[0], 1e-15);
  EXPECT_NEAR(t.percep.value()[0], perceptual_loss(pred, target, v, 64).value()[0], 1e-15);
  const double adv = 0.5 * (std::log1p(std::exp(-0.3)) + std::log1p(std::exp(1.2)));
  EXPECT_NEAR(t.adv.value()[0], adv, 1e-12);
  EXPECT_NEAR(t.total.value()[0], 1.3 * t.mse.value()[0] + 0.7 * t.percep.value()[0] + 0.05 * adv, 1e-12);

  hp.lambda_a = 0.0;
  const LossTerms z = total_deghost_loss(pred, target, v, d, hp);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(z.adv.value()[0], 0.0);
  EXPECT_NEAR(z.total.value()[0], 1.3 * z.mse.value()[0] + 0.7 * z.percep.value()[0], 1e-15);

  DeghostHyperparams bad;
  bad.lambda_p = -1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(DeghostNet, ShapesAndErrors) {
  const DeghostNet net(toy_generator());
  std::mt19937_64 rng(7);
  const Image out = deghost::deghost(random_image(3, 64, 64, rng), net);
  EXPECT_EQ(out.tensor().shape(), (Shape{3, 64, 64}));
  try {
    deghost::deghost(random_image(3, 32, 32, rng), net);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
  }
  EXPECT_THROW(DeghostNet(nullptr), Error);
  DeghostNetConfig two;
  two.widths = {4, 4};
  EXPECT_THROW(DeghostNet(toy_generator(), two), Error);
}

TEST(DeghostNet, ZeroInitIsIdentity) {
  DeghostNetConfig cfg;
  cfg.zero_init_output = true;
  const DeghostNet net(toy_generator(), cfg);
  std::mt19937_64 rng(8);
  const Image x = random_image(3, 64, 64, rng);
  EXPECT_EQ(deghost::deghost(x, net), x);
}

TEST(DeghostNet, ZeroAggregationEqualsPlainEncoderDecoder) {
  DeghostNet net(toy_generator());
  std::mt19937_64 rng(9);
  const ag::Var x = ag::constant(random_tensor({2, 3, 64, 64}, rng));
  const Tensor with = net.forward(x).value(), without = net.forward(x, false).value();
  EXPECT_GT(max_abs_diff(with, without), 1e-6);
  for (auto& [name, p] : net.aggregation_parameters())
    for (double& v : p->mutable_value().values()) v = 0.0;
  EXPECT_EQ(net.forward(x).value(), net.forward(x, false).value());
}

TEST(DeghostNet, GradientMatchesFiniteDifferences) {
  DeghostNet net(toy_generator(), {}, 12);
  const Discriminator disc(4);
  const RandomConvExtractor v(5);
  std::mt19937_64 rng(10);
  const ag::Var x = ag::constant(random_tensor({1, 3, 64, 64}, rng)), target = ag::constant(random_tensor({1, 3, 64, 64}, rng));
  const DiscriminatorFn d = [&disc](const ag::Var& in) { return disc(in); };
  const DeghostHyperparams hp;
  auto params = net.parameters();
  auto loss = [&] { return total_deghost_loss(net.forward(x), target, v, d, hp).total; };
  for (auto& [name, p] : params) p->zero_grad();
  ag::backward(loss());
  for (const char* name : {"enc0.weight", "latent.weight", "dec1.weight", "skip0.weight", "agg1.weight", "dec2.bias"}) {
    ag::Var* p = param(params, name);
    const Tensor g = p->grad();
    for (std::size_t k : {std::size_t{0}, p->value().size() / 2, p->value().size() - 1}) {
      double& w = p->mutable_value()[k];
      const double orig = w, h = 1e-5;
      ag::NoGradGuard no_grad;
      w = orig + h;
      const double up = loss().value()[0];
      w = orig - h;
      const double down = loss().value()[0];
      w = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(g[k], fd, 1e-6 + 1e-4 * std::abs(fd)) << name << "[" << k << "]";
    }
  }
}

TEST(DeghostNet, CheckpointRoundTrip) {
  const auto dir = testing_support::temp_dir("deghost_ckpt");
  const auto gen = toy_generator();
  const DeghostNet net(gen, {}, 21);
  const Discriminator disc(22);
  save_checkpoint(dir / "net.ckpt", net.to_checkpoint());
  save_checkpoint(dir / "disc.ckpt", disc.to_checkpoint());
  const auto net2 = DeghostNet::load(dir / "net.ckpt", gen);
  const auto disc2 = Discriminator::from_checkpoint(load_checkpoint(dir / "disc.ckpt"));
  std::mt19937_64 rng(11);
  const Image x = random_image(3, 64, 64, rng);
  EXPECT_EQ(deghost::deghost(x, *net2), deghost::deghost(x, net));
  const ag::Var xb = image_var(x);
  EXPECT_EQ((*disc2)(xb).value(), disc(xb).value());
  EXPECT_THROW(DeghostNet::load(dir / "disc.ckpt", gen), Error);
  std::filesystem::remove_all(dir);
}

TEST(BoundedQueue, OrderBackpressureAndClose) {
  BoundedQueue<int> q(2);
  std::vector<int> got;
  std::thread consumer([&] {
    while (auto v = q.pop()) got.push_back(*v);
  });
  for (int i = 0; i < 1000; ++i) ASSERT_TRUE(q.push(i));
  q.close();
  consumer.join();
  ASSERT_EQ(got.size(), 1000u);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(got[static_cast<std::size_t>(i)], i);
  EXPECT_FALSE(q.push(1));
  EXPECT_FALSE(q.pop().has_value());
}

TEST(TrainDeghost, LogCheckpointsDeterminismAndFrozenGenerator) {
  const auto dir = testing_support::temp_dir("deghost_train");
  const auto gen = toy_generator();
  const Checkpoint gen_before = gen->to_checkpoint();
  const auto data = rendered_samples(6, 3);
  const RandomConvExtractor v(2024);
  DeghostHyperparams hp;
  hp.steps = 4;
  hp.batch_size = 2;
  hp.checkpoint_every = 2;
  hp.checkpoint_dir = dir / "ckpt";
  hp.log_path = dir / "train.ndjson";
  std::filesystem::create_directories(hp.checkpoint_dir);
  const DeghostTrainResult a =
      train_deghost(std::make_shared<DeghostNet>(gen), std::make_shared<Discriminator>(), data, v, hp);
  ASSERT_EQ(a.log.size(), 4u);

  std::ifstream log(hp.log_path);
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<int>(), n);
    for (const char* k : {"l_mse", "l_percep", "l_adv", "total"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_DOUBLE_EQ(j.at("total").get<double>(), a.log[static_cast<std::size_t>(n)].total);
    ++n;
  }
  EXPECT_EQ(n, 4);
  for (const char* f : {"deghost_step2.ckpt", "deghost_step4.ckpt", "deghost_final.ckpt", "discriminator_final.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(hp.checkpoint_dir / f)) << f;

  hp.checkpoint_every = 0;
  hp.checkpoint_dir.clear();
  hp.log_path.clear();
  const DeghostTrainResult b =
      train_deghost(std::make_shared<DeghostNet>(gen), std::make_shared<Discriminator>(), data, v, hp);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);

  const Checkpoint gen_after = gen->to_checkpoint();
  for (const auto& [name, t] : gen_before.tensors) EXPECT_EQ(gen_after.tensors.at(name), t) << name;
  EXPECT_THROW(train_deghost(std::make_shared<DeghostNet>(gen), std::make_shared<Discriminator>(), {}, v, hp), Error);
  std::filesystem::remove_all(dir);
}

TEST(TrainDeghost, NonFiniteLossAborts) {
  const auto dir = testing_support::temp_dir("deghost_nan");
  auto net = std::make_shared<DeghostNet>(toy_generator());
  auto ps = net->parameters();
  param(ps, "dec2.bias")->mutable_value()[0] = std::nan("");
  DeghostHyperparams hp;
  hp.steps = 3;
  hp.batch_size = 2;
  hp.checkpoint_dir = dir;
  try {
    train_deghost(net, std::make_shared<Discriminator>(), rendered_samples(2, 4), RandomConvExtractor(), hp);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "deghost_last_good.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST(LossEma, SeededWithFirstValue) {
  std::vector<StepRecord> log(3);
  log[0].total = 1.0;
  log[1].total = 0.0;
  log[2].total = 0.5;
  EXPECT_EQ(loss_ema(log, 1), 1.0);
  EXPECT_NEAR(loss_ema(log, 3, 0.5), 0.5 * (0.5 * 1.0) + 0.25, 1e-15);
  EXPECT_THROW(loss_ema(log, 4), Error);
  EXPECT_NEAR(window_mean(log, 0, 3), 0.5, 1e-15);
}

// Toy run with the shipped recipe: the moving average of the total loss after 500
// steps is under half its step-0 value.
TEST(TrainDeghost, ToyRunHalvesTheLoss) {
  const toy::DeghostRecipe recipe;
  DeghostHyperparams hp = recipe.hp;
  hp.steps = 500;
  const auto gen = toy_generator();
  const DeghostTrainResult r = train_deghost(std::make_shared<DeghostNet>(gen, recipe.net, recipe.net_seed),
                                             std::make_shared<Discriminator>(), rendered_samples(64, 5), toy::toy_extractor(recipe), hp);
  const double start = r.log[0].total, end = loss_ema(r.log, r.log.size());
  EXPECT_LT(end, 0.5 * start) << "step0 " << start << " ema " << end;
}
