#pragma once

// Mask-weighted blending of an edited inversion with the original image, and
// multi-attribute editing as a chain of single-attribute steps.

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "dcedit/diff_activation.hpp"
#include "dcedit/image.hpp"
#include "dcedit/latent_editing.hpp"

namespace dcedit {

struct EditRequest {
  std::string attribute;
  double alpha = 0.0;
};

struct EditResult {
  Image fused;
  ActivationMask final_mask;
  std::vector<ActivationMask> per_step_masks;  // upsampled to image resolution
  std::vector<Image> edited_chain;             // T_1 .. T_r
  Image inversion;                             // I' = G(w)
  LatentCode code;                             // w
};

// Bundle of immutable model handles shared by the CLI, service and tests.
struct EditPipeline {
  EncoderHandle encoder;
  GeneratorHandle generator;
  DirectionCatalog directions;
  std::shared_ptr<const da::DAModel> da;
};

// T * M + I * (1 - M), mask broadcast over channels. Each output value is kept
// inside [min(T, I), max(T, I)] so the blend stays convex under rounding.
inline Image compose(const Image& edited, const Image& original, const ActivationMask& mask) {
  require(edited.same_shape(original), ErrorCode::shape_mismatch,
          "compose: edited " + shape_str(edited.tensor().shape()) + " vs original " + shape_str(original.tensor().shape()));
  require(mask.height() == original.height() && mask.width() == original.width(), ErrorCode::shape_mismatch,
          "compose: mask " + shape_str(mask.tensor().shape()) + " does not match image resolution");
  const Image t = edited.to_signed(), i = original.to_signed();
  const std::size_t hw = static_cast<std::size_t>(original.height()) * original.width();
  Tensor out(t.tensor().shape());
  for (int c = 0; c < original.channels(); ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      const double a = t.tensor()[c * hw + p], b = i.tensor()[c * hw + p], m = mask[p];
      out[c * hw + p] = std::clamp(a * m + b * (1.0 - m), std::min(a, b), std::max(a, b));
    }
  return Image(std::move(out));
}

inline ActivationMask combine_masks(const std::vector<ActivationMask>& masks) {
  require(!masks.empty(), ErrorCode::invalid_argument, "combine_masks: empty mask list");
  Tensor out = masks.front().tensor();
  for (std::size_t k = 1; k < masks.size(); ++k) {
    require(masks[k].tensor().shape() == out.shape(), ErrorCode::shape_mismatch, "combine_masks: masks differ in shape");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], masks[k][i]);
  }
  return ActivationMask(std::move(out));
}

namespace detail {

inline void check_pipeline(const EditPipeline& p) {
  require(p.encoder && p.generator && p.da, ErrorCode::invalid_argument, "edit pipeline is missing a model handle");
}

inline int da_class_of(const EditPipeline& p, const std::string& attribute) {
  p.directions.at(attribute);
  return p.da->catalog().index_of(attribute);
}

}  // namespace detail

// Single attribute: w = E(I), I' = G(w), T = G(w + alpha n), M from {I', T}, F = compose(T, I, M).
inline EditResult single_attribute_edit(const Image& original, const EditRequest& request, const EditPipeline& p) {
  detail::check_pipeline(p);
  const EditDirection& dir = p.directions.at(request.attribute);
  const int cls = detail::da_class_of(p, request.attribute);
  const Image input = original.to_signed();
  EditResult r;
  r.code = invert(input, *p.encoder);
  const std::vector<LatentCode> codes{r.code, apply_direction(r.code, dir, request.alpha)};
  auto imgs = generate_batch(codes, *p.generator);
  r.inversion = imgs[0];
  r.edited_chain.push_back(imgs[1]);
  r.final_mask = da::edit_mask(*p.da, r.inversion, imgs[1], cls);
  r.per_step_masks.push_back(r.final_mask);
  r.fused = compose(imgs[1], input, r.final_mask);
  return r;
}

// Chain of r requests with cumulative latent w_i = w + sum_{j<=i} alpha_j n_j.
// Step 1 compares {I', T_1}; step i > 1 compares {T_(i-1), T_i} under attribute i.
// Each step mask is upsampled before the elementwise maximum. A cached code for
// `original` skips the inversion.
inline EditResult multi_attribute_edit(const Image& original, const std::vector<EditRequest>& requests, const EditPipeline& p,
                                       const LatentCode* cached_code = nullptr) {
  detail::check_pipeline(p);
  require(!requests.empty(), ErrorCode::invalid_argument, "multi_attribute_edit needs at least one request");
  std::vector<const EditDirection*> dirs;
  std::vector<int> classes;
  for (const auto& req : requests) {
    dirs.push_back(&p.directions.at(req.attribute));
    classes.push_back(detail::da_class_of(p, req.attribute));
  }
  const Image input = original.to_signed();
  EditResult r;
  r.code = cached_code ? *cached_code : invert(input, *p.encoder);
  std::vector<LatentCode> codes{r.code};
  for (std::size_t i = 0; i < requests.size(); ++i) codes.push_back(apply_direction(codes.back(), *dirs[i], requests[i].alpha));
  auto imgs = generate_batch(codes, *p.generator);
  r.inversion = imgs[0];
  for (std::size_t i = 0; i < requests.size(); ++i) {
    r.per_step_masks.push_back(da::edit_mask(*p.da, imgs[i], imgs[i + 1], classes[i]));
    r.edited_chain.push_back(imgs[i + 1]);
  }
  r.final_mask = combine_masks(r.per_step_masks);
  r.fused = compose(r.edited_chain.back(), input, r.final_mask);
  return r;
}

}  // namespace dcedit
