#pragma once

// Toy-scale measurements shared by build-fixtures (which freezes them as
// baselines) and the acceptance run (which recomputes and checks them).

#include <cmath>
#include <vector>

#include "json.hpp"

#include "dcedit/service.hpp"
#include "dcedit/toy_training.hpp"

namespace dcedit::toy {

inline constexpr std::uint64_t kHeldOutEditSeed = 901;
inline constexpr std::uint64_t kHeldOutDASeed = 902;
inline constexpr std::uint64_t kHeldOutDeghostSeed = 903;
inline constexpr std::uint64_t kOverlaySceneSeed = 904;

struct DeghostEfficacy {
  double mse_deghosted = 0.0;  // mean over pairs of mean-squared error vs I
  double mse_fused = 0.0;
  int count = 0;
};

// Held-out (F_train, I) pairs synthesized exactly as in training.
inline DeghostEfficacy deghost_efficacy(const EditPipeline& p, const deghost::DeghostNet& net, int count,
                                        std::uint64_t seed = kHeldOutDeghostSeed) {
  DeghostEfficacy e;
  const deghost::LossOptions mse{true};
  for (const auto& s : deghost_dataset(p, count, seed)) {
    const deghost::DeghostTrainPair pair = deghost::synth_train_pair(s.original, s.edited, s.mask);
    e.mse_deghosted += deghost::mse_loss(deghost::deghost(pair.f_train, net), pair.target, mse);
    e.mse_fused += deghost::mse_loss(pair.f_train, pair.target, mse);
    ++e.count;
  }
  e.mse_deghosted /= e.count;
  e.mse_fused /= e.count;
  return e;
}

struct OverlayPreservation {
  double output_overlay_mse = 0.0;     // final output vs input, overlay box
  double inversion_overlay_mse = 0.0;  // G(E(I)) vs input, overlay box
  double output_change = 0.0;          // mean |output - I| on the attribute's change mask
  double direct_change = 0.0;          // mean |G(w + alpha n) - G(w)| on the same pixels
  int count = 0;
};

// Scenes carrying the out-of-domain overlay, one attribute per scene in turn at
// +/- its default alpha. The attribute's pixels are the renderer's change mask for
// the same code shift, minus the overlay box.
inline OverlayPreservation overlay_preservation(const Models& models, int count, std::uint64_t seed = kOverlaySceneSeed) {
  OverlayPreservation r;
  nn::Rng rng(seed);
  SceneSampling sampling;
  sampling.overlay_probability = 1.0;
  const auto names = models.pipeline.directions.names();
  double overlay_px = 0, region_px = 0;
  for (int i = 0; i < count; ++i) {
    const SyntheticScene scene = sample_scene(rng, sampling);
    const int a = i % kNumAttributes;
    const EditDirection& dir = models.pipeline.directions.at(names[static_cast<std::size_t>(a)]);
    const double alpha = (i / kNumAttributes) % 2 == 0 ? dir.default_alpha : -dir.default_alpha;
    const Image input = render(scene);
    const EditOutcome o = run_edit(models, input, {{dir.name, alpha}}, false);
    const Image& inv = o.edit.inversion;
    const Image& direct = o.edit.edited_chain.front();

    const PixelBox box = overlay_box(*scene.overlay);
    for (int y = box.y0; y < box.y1; ++y)
      for (int x = box.x0; x < box.x1; ++x) {
        for (int c = 0; c < 3; ++c) {
          r.output_overlay_mse += std::pow(o.image(c, y, x) - input(c, y, x), 2);
          r.inversion_overlay_mse += std::pow(inv(c, y, x) - input(c, y, x), 2);
        }
        overlay_px += 3;
      }
    const ActivationMask changed = ground_truth_change_mask(scene, a, alpha);
    for (int y = 0; y < kResolution; ++y)
      for (int x = 0; x < kResolution; ++x) {
        if (changed(y, x) == 0.0 || box.contains(x, y)) continue;
        for (int c = 0; c < 3; ++c) {
          r.output_change += std::abs(o.image(c, y, x) - input(c, y, x));
          r.direct_change += std::abs(direct(c, y, x) - inv(c, y, x));
        }
        region_px += 3;
      }
    ++r.count;
  }
  require(overlay_px > 0 && region_px > 0, ErrorCode::invalid_argument, "overlay_preservation: empty regions");
  r.output_overlay_mse /= overlay_px;
  r.inversion_overlay_mse /= overlay_px;
  r.output_change /= region_px;
  r.direct_change /= region_px;
  return r;
}

// Values frozen next to the fixture checkpoints.
struct Baselines {
  double da_accuracy = 0, diffcam_iou = 0, da_seconds = 0;
  int da_steps = 0, deghost_steps = 0;
  std::array<double, kNumAttributes> per_attribute_iou{};
  DeghostEfficacy deghost;
  double deghost_loss_step0 = 0, deghost_loss_ema = 0;
  OverlayPreservation overlay;

  nlohmann::json to_json() const {
    return {{"da_accuracy", da_accuracy},
            {"diffcam_iou", diffcam_iou},
            {"per_attribute_iou", per_attribute_iou},
            {"da_seconds", da_seconds},
            {"da_steps", da_steps},
            {"deghost_steps", deghost_steps},
            {"deghost_mse_deghosted", deghost.mse_deghosted},
            {"deghost_mse_fused", deghost.mse_fused},
            {"deghost_pairs", deghost.count},
            {"deghost_loss_step0", deghost_loss_step0},
            {"deghost_loss_ema", deghost_loss_ema},
            {"overlay_output_mse", overlay.output_overlay_mse},
            {"overlay_inversion_mse", overlay.inversion_overlay_mse},
            {"overlay_output_change", overlay.output_change},
            {"overlay_direct_change", overlay.direct_change},
            {"overlay_scenes", overlay.count}};
  }
  static Baselines from_json(const nlohmann::json& j) {
    Baselines b;
    b.da_accuracy = j.at("da_accuracy");
    b.diffcam_iou = j.at("diffcam_iou");
    b.per_attribute_iou = j.at("per_attribute_iou").get<std::array<double, kNumAttributes>>();
    b.da_seconds = j.at("da_seconds");
    b.da_steps = j.at("da_steps");
    b.deghost_steps = j.at("deghost_steps");
    b.deghost = {j.at("deghost_mse_deghosted"), j.at("deghost_mse_fused"), j.at("deghost_pairs")};
    b.deghost_loss_step0 = j.at("deghost_loss_step0");
    b.deghost_loss_ema = j.at("deghost_loss_ema");
    b.overlay = {j.at("overlay_output_mse"), j.at("overlay_inversion_mse"), j.at("overlay_output_change"),
                 j.at("overlay_direct_change"), j.at("overlay_scenes")};
    return b;
  }
};

inline constexpr int kLocalizationEdits = 100;
inline constexpr int kDAHeldOut = 300;
inline constexpr int kDeghostHeldOut = 50;
inline constexpr int kOverlayScenes = 40;

// Everything but the training-time numbers (seconds, steps, loss curve).
inline void measure(const Models& models, Baselines& b) {
  const auto edits = sample_edits(*models.pipeline.encoder, models.pipeline.directions, kLocalizationEdits, kHeldOutEditSeed);
  const LocalizationStats loc = localization(models.pipeline, edits);
  b.diffcam_iou = loc.mean_iou;
  b.per_attribute_iou = loc.per_attribute_iou;
  b.da_accuracy = da_accuracy(models.pipeline, kDAHeldOut, kHeldOutDASeed);
  require(models.deghost != nullptr, ErrorCode::invalid_argument, "measure: no deghost network loaded");
  b.deghost = deghost_efficacy(models.pipeline, *models.deghost, kDeghostHeldOut);
  b.overlay = overlay_preservation(models, kOverlayScenes);
}

}  // namespace dcedit::toy
