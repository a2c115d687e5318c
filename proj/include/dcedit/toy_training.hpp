#pragma once

// Toy-scale recipes: edit sampling, DA and deghost training data, and the
// measurements recorded alongside the fixture checkpoints.

#include <array>
#include <memory>
#include <vector>

#include "dcedit/composition.hpp"
#include "dcedit/deghosting.hpp"
#include "dcedit/diff_activation.hpp"
#include "dcedit/evaluation.hpp"
#include "dcedit/toy_models.hpp"

namespace dcedit::toy {

struct ToyEdit {
  SyntheticScene scene;  // as rendered, possibly with an overlay
  Image original;
  LatentCode code;  // E(original)
  int attribute = 0;
  double alpha = 0.0;
};

// Scenes from `seed`; attribute uniform over the catalog, alpha ~ U[alpha_min, alpha_max].
inline std::vector<ToyEdit> sample_edits(const InversionEncoder& encoder, const DirectionCatalog& directions, int count,
                                         std::uint64_t seed, double overlay_probability = 0.0) {
  require(count > 0, ErrorCode::invalid_argument, "sample_edits: count must be positive");
  nn::Rng rng(seed);
  SceneSampling sampling;
  sampling.overlay_probability = overlay_probability;
  const auto names = directions.names();
  std::uniform_int_distribution<int> pick(0, static_cast<int>(names.size()) - 1);
  std::vector<ToyEdit> out;
  for (int i = 0; i < count; ++i) {
    ToyEdit e;
    e.scene = sample_scene(rng, sampling);
    e.original = render(e.scene);
    e.code = invert(e.original, encoder);
    e.attribute = pick(rng);
    const EditDirection& d = directions.at(names[static_cast<std::size_t>(e.attribute)]);
    e.alpha = std::uniform_real_distribution<double>(d.alpha_min, d.alpha_max)(rng);
    out.push_back(std::move(e));
  }
  return out;
}

inline da::DAModel new_toy_da(std::uint64_t seed = 7) {
  return da::DAModel(da::AttributeCatalog(std::vector<std::string>(kAttributeNames.begin(), kAttributeNames.end())), da::DAConfig{},
                     seed);
}

struct DARecipe {
  int scenes = 400;
  int samples = 2000;
  std::uint64_t seed = 21;
  da::DATrainConfig train = [] {
    da::DATrainConfig c;
    c.adam.lr = 1e-3;
    return c;
  }();
};

inline std::vector<LatentCode> inverted_codes(const InversionEncoder& encoder, int count, nn::Rng& rng) {
  std::vector<LatentCode> codes;
  for (int i = 0; i < count; ++i) codes.push_back(invert(render(sample_scene(rng)), encoder));
  return codes;
}

struct TrainedDA {
  std::shared_ptr<da::DAModel> model;
  da::DATrainResult result;
};

inline TrainedDA train_toy_da(const InversionEncoder& encoder, const Generator& generator, const DirectionCatalog& directions,
                              const DARecipe& recipe = {}) {
  auto model = std::make_shared<da::DAModel>(new_toy_da());
  nn::Rng rng(recipe.seed);
  const auto codes = inverted_codes(encoder, recipe.scenes, rng);
  const auto data = da::make_da_dataset(codes, generator, directions, *model, recipe.samples, rng);
  TrainedDA out{model, da::train_da(*model, data, recipe.train)};
  return out;
}

// (I, T, M) triples for deghost training: T edits the inversion of I along a uniformly
// chosen attribute and M is that attribute's Diff-CAM mask for {I', T}.
inline std::vector<deghost::DeghostSample> deghost_dataset(const EditPipeline& p, int count, std::uint64_t seed,
                                                           double overlay_probability = 0.3) {
  const auto names = p.directions.names();
  std::vector<deghost::DeghostSample> out;
  for (const ToyEdit& e : sample_edits(*p.encoder, p.directions, count, seed, overlay_probability)) {
    const std::string& name = names[static_cast<std::size_t>(e.attribute)];
    const std::vector<LatentCode> codes{e.code, apply_direction(e.code, p.directions.at(name), e.alpha)};
    const auto imgs = generate_batch(codes, *p.generator);
    out.push_back({e.original, imgs[1], da::edit_mask(*p.da, imgs[0], imgs[1], p.da->catalog().index_of(name))});
  }
  return out;
}

struct DeghostRecipe {
  int samples = 400;
  std::uint64_t seed = 1;
  double overlay_probability = 0.3;
  deghost::DeghostHyperparams hp = [] {
    deghost::DeghostHyperparams h;
    h.adam.lr = 1e-3;
    return h;
  }();
  deghost::DeghostNetConfig net;
  std::uint64_t net_seed = 9;
  deghost::ConvExtractorConfig extractor{{16, 32, 32}, {1, 2, 1}, true};
  std::uint64_t extractor_seed = 2024;
};

inline deghost::RandomConvExtractor toy_extractor(const DeghostRecipe& r = {}) {
  return deghost::RandomConvExtractor(r.extractor_seed, r.extractor);
}

// ---------------------------------------------------------------------------
// Measurements

struct LocalizationStats {
  double mean_iou = 0.0;
  std::array<double, kNumAttributes> per_attribute_iou{};
  std::array<int, kNumAttributes> per_attribute_count{};
  int count = 0;
};

// Diff-CAM mask (requested attribute) vs the renderer's change mask for the same latent shift.
inline LocalizationStats localization(const EditPipeline& p, const std::vector<ToyEdit>& edits, double threshold = 0.5) {
  LocalizationStats s;
  const auto names = p.directions.names();
  for (const ToyEdit& e : edits) {
    const std::string& name = names[static_cast<std::size_t>(e.attribute)];
    const std::vector<LatentCode> codes{e.code, apply_direction(e.code, p.directions.at(name), e.alpha)};
    const auto imgs = generate_batch(codes, *p.generator);
    const ActivationMask m = da::edit_mask(*p.da, imgs[0], imgs[1], p.da->catalog().index_of(name));
    const double iou = eval::mask_iou(m, ground_truth_change_mask(scene_from_code(e.code), e.attribute, e.alpha), threshold);
    s.mean_iou += iou;
    s.per_attribute_iou[static_cast<std::size_t>(e.attribute)] += iou;
    s.per_attribute_count[static_cast<std::size_t>(e.attribute)] += 1;
    ++s.count;
  }
  require(s.count > 0, ErrorCode::invalid_argument, "localization: no edits");
  s.mean_iou /= s.count;
  for (int a = 0; a < kNumAttributes; ++a)
    if (s.per_attribute_count[a] > 0) s.per_attribute_iou[a] /= s.per_attribute_count[a];
  return s;
}

// Held-out DA accuracy on freshly sampled pairs.
inline double da_accuracy(const EditPipeline& p, int count, std::uint64_t seed) {
  nn::Rng rng(seed);
  const auto codes = inverted_codes(*p.encoder, count, rng);
  return da::accuracy(*p.da, da::make_da_dataset(codes, *p.generator, p.directions, *p.da, count, rng));
}

}  // namespace dcedit::toy
