#pragma once

// Pluggable inversion encoder / generator interfaces and latent-space editing.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcedit/autograd.hpp"
#include "dcedit/checkpoint.hpp"
#include "dcedit/image.hpp"

namespace dcedit {

// Per-layer latent matrix [L, D] in the generator's extended latent space.
class LatentCode {
 public:
  LatentCode() = default;
  explicit LatentCode(Tensor values) : values_(std::move(values)) {
    require(values_.rank() == 2, ErrorCode::shape_mismatch, "latent code must be [L,D], got " + shape_str(values_.shape()));
    require(values_.all_finite(), ErrorCode::non_finite, "latent code contains non-finite values");
  }
  LatentCode(int layers, int dims, double fill = 0.0) : LatentCode(Tensor({layers, dims}, fill)) {}

  const Tensor& values() const noexcept { return values_; }
  int layers() const { return values_.dim(0); }
  int dims() const { return values_.dim(1); }
  double operator()(int l, int d) const { return values_[static_cast<std::size_t>(l) * dims() + d]; }

  friend bool operator==(const LatentCode& a, const LatentCode& b) { return a.values_ == b.values_; }

 private:
  Tensor values_;
};

struct EditDirection {
  std::string name;
  Tensor vector;  // [L, D] or [D] (broadcast across layers)
  double default_alpha = 1.0;
  double alpha_min = -1.0;
  double alpha_max = 1.0;
};

class DirectionCatalog {
 public:
  DirectionCatalog() = default;
  explicit DirectionCatalog(std::vector<EditDirection> dirs) {
    for (auto& d : dirs) add(std::move(d));
  }

  void add(EditDirection dir) {
    require(!dir.name.empty(), ErrorCode::invalid_argument, "direction needs a name");
    require(find(dir.name) == nullptr, ErrorCode::invalid_argument, "duplicate direction '" + dir.name + "'");
    require(dir.vector.rank() == 1 || dir.vector.rank() == 2, ErrorCode::shape_mismatch,
            "direction vector must be [D] or [L,D]");
    require(dir.vector.all_finite(), ErrorCode::non_finite, "direction '" + dir.name + "' is not finite");
    require(dir.alpha_min <= dir.alpha_max, ErrorCode::invalid_argument, "direction alpha range is inverted");
    dirs_.push_back(std::move(dir));
  }

  const EditDirection* find(const std::string& name) const {
    for (const auto& d : dirs_)
      if (d.name == name) return &d;
    return nullptr;
  }
  const EditDirection& at(const std::string& name) const {
    const EditDirection* d = find(name);
    if (d == nullptr) fail(ErrorCode::unknown_attribute, "unknown attribute '" + name + "'");
    return *d;
  }
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < dirs_.size(); ++i)
      if (dirs_[i].name == name) return static_cast<int>(i);
    fail(ErrorCode::unknown_attribute, "unknown attribute '" + name + "'");
  }

  const std::vector<EditDirection>& directions() const noexcept { return dirs_; }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& d : dirs_) out.push_back(d.name);
    return out;
  }
  std::size_t size() const noexcept { return dirs_.size(); }

  // Writes `<stem>.json` (index) and `<stem>.bin` (concatenated float64 vectors).
  void save(const std::filesystem::path& index_path) const {
    auto bin_path = index_path;
    bin_path.replace_extension(".bin");
    nlohmann::json index;
    index["binary"] = bin_path.filename().string();
    index["dtype"] = "float64-le";
    index["directions"] = nlohmann::json::array();
    if (index_path.has_parent_path()) std::filesystem::create_directories(index_path.parent_path());
    std::ofstream bin(bin_path, std::ios::binary);
    require(static_cast<bool>(bin), ErrorCode::io, "cannot write " + bin_path.string());
    std::uint64_t offset = 0;
    for (const auto& d : dirs_) {
      index["directions"].push_back({{"name", d.name},
                                     {"alpha_min", d.alpha_min},
                                     {"alpha_max", d.alpha_max},
                                     {"default_alpha", d.default_alpha},
                                     {"shape", d.vector.shape()},
                                     {"offset", offset}});
      bin.write(reinterpret_cast<const char*>(d.vector.data()), static_cast<std::streamsize>(d.vector.size() * sizeof(double)));
      offset += d.vector.size();
    }
    std::ofstream(index_path) << index.dump(2) << '\n';
  }

  static DirectionCatalog load(const std::filesystem::path& index_path) {
    std::ifstream in(index_path);
    require(static_cast<bool>(in), ErrorCode::not_found, "cannot open direction index " + index_path.string());
    const auto index = nlohmann::json::parse(in);
    const auto bin_path = index_path.parent_path() / index.at("binary").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    require(static_cast<bool>(bin), ErrorCode::not_found, "cannot open direction array " + bin_path.string());
    DirectionCatalog cat;
    for (const auto& e : index.at("directions")) {
      EditDirection d;
      d.name = e.at("name").get<std::string>();
      d.alpha_min = e.at("alpha_min").get<double>();
      d.alpha_max = e.at("alpha_max").get<double>();
      d.default_alpha = e.at("default_alpha").get<double>();
      d.vector = Tensor(e.at("shape").get<Shape>());
      bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>() * sizeof(double)));
      bin.read(reinterpret_cast<char*>(d.vector.data()), static_cast<std::streamsize>(d.vector.size() * sizeof(double)));
      require(static_cast<bool>(bin), ErrorCode::io, "truncated direction array " + bin_path.string());
      cat.add(std::move(d));
    }
    return cat;
  }

 private:
  std::vector<EditDirection> dirs_;
};

// ---------------------------------------------------------------------------
// Model handles

struct EncoderInfo {
  int channels = 3;
  int resolution = 64;
  int layers = 1;
  int dims = 1;
};

struct GeneratorInfo {
  int channels = 3;
  int resolution = 64;
  int layers = 1;
  int dims = 1;
  std::vector<int> tap_resolutions;  // square feature maps exposed to the deghosting decoder
  int tap_channels = 3;
};

class InversionEncoder {
 public:
  virtual ~InversionEncoder() = default;
  virtual std::string kind() const = 0;
  virtual EncoderInfo info() const = 0;
  // [N, C, H, W] -> [N, L, D]
  virtual ag::Var forward(const ag::Var& images) const = 0;
  virtual Checkpoint to_checkpoint() const = 0;
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string kind() const = 0;
  virtual GeneratorInfo info() const = 0;
  // [N, L, D] -> [N, C, H, W] (unclamped). When taps is non-null it receives one
  // feature map per entry of info().tap_resolutions, coarse to fine.
  virtual ag::Var forward(const ag::Var& codes, std::vector<ag::Var>* taps = nullptr) const = 0;
  virtual Checkpoint to_checkpoint() const = 0;
};

using EncoderHandle = std::shared_ptr<const InversionEncoder>;
using GeneratorHandle = std::shared_ptr<const Generator>;

// Spatial mean of each channel, replicated over [L, D] (channel d mod C feeds dim d).
class ChannelMeanEncoder final : public InversionEncoder {
 public:
  ChannelMeanEncoder(EncoderInfo info) : info_(info) {}
  std::string kind() const override { return "channel_mean_encoder"; }
  EncoderInfo info() const override { return info_; }
  ag::Var forward(const ag::Var& images) const override {
    const Tensor& x = images.value();
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor out({n, info_.layers, info_.dims});
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < info_.dims; ++d) {
        const double* p = x.data() + (static_cast<std::size_t>(i) * c + d % c) * hw;
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += p[j];
        for (int l = 0; l < info_.layers; ++l)
          out[(static_cast<std::size_t>(i) * info_.layers + l) * info_.dims + d] = acc / static_cast<double>(hw);
      }
    return ag::constant(std::move(out));
  }
  Checkpoint to_checkpoint() const override {
    Checkpoint c;
    c.kind = kind();
    c.meta = {{"channels", info_.channels}, {"resolution", info_.resolution}, {"layers", info_.layers}, {"dims", info_.dims}};
    return c;
  }

 private:
  EncoderInfo info_;
};

// ---------------------------------------------------------------------------
// Checkpoint registry: kind name -> loader.

class ModelRegistry {
 public:
  using EncoderLoader = std::function<EncoderHandle(const Checkpoint&)>;
  using GeneratorLoader = std::function<GeneratorHandle(const Checkpoint&)>;

  void add_encoder(const std::string& kind, EncoderLoader loader) { encoders_[kind] = std::move(loader); }
  void add_generator(const std::string& kind, GeneratorLoader loader) { generators_[kind] = std::move(loader); }

  EncoderHandle encoder(const Checkpoint& ckpt) const {
    auto it = encoders_.find(ckpt.kind);
    require(it != encoders_.end(), ErrorCode::invalid_argument, "no encoder registered for kind '" + ckpt.kind + "'");
    return it->second(ckpt);
  }
  GeneratorHandle generator(const Checkpoint& ckpt) const {
    auto it = generators_.find(ckpt.kind);
    require(it != generators_.end(), ErrorCode::invalid_argument, "no generator registered for kind '" + ckpt.kind + "'");
    return it->second(ckpt);
  }
  EncoderHandle load_encoder(const std::filesystem::path& path) const { return encoder(load_checkpoint(path)); }
  GeneratorHandle load_generator(const std::filesystem::path& path) const { return generator(load_checkpoint(path)); }

 private:
  std::map<std::string, EncoderLoader> encoders_;
  std::map<std::string, GeneratorLoader> generators_;
};

// ---------------------------------------------------------------------------
// Operations

inline LatentCode invert(const Image& image, const InversionEncoder& encoder) {
  const EncoderInfo info = encoder.info();
  require(image.channels() == info.channels && image.height() == info.resolution && image.width() == info.resolution,
          ErrorCode::shape_mismatch,
          "encoder expects " + std::to_string(info.channels) + "x" + std::to_string(info.resolution) + "x" +
              std::to_string(info.resolution) + " input, got " + shape_str(image.tensor().shape()));
  ag::NoGradGuard no_grad;
  const Image s = image.to_signed();
  const Tensor& t = s.tensor();
  Tensor out = encoder.forward(ag::constant(t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}))).value();
  return LatentCode(out.reshaped({info.layers, info.dims}));
}

inline Tensor codes_batch(std::span<const LatentCode> codes) {
  require(!codes.empty(), ErrorCode::invalid_argument, "empty code batch");
  const int l = codes.front().layers(), d = codes.front().dims();
  Tensor out({static_cast<int>(codes.size()), l, d});
  for (std::size_t i = 0; i < codes.size(); ++i) {
    require(codes[i].layers() == l && codes[i].dims() == d, ErrorCode::shape_mismatch, "codes differ in shape");
    std::copy_n(codes[i].values().data(), codes[i].values().size(), out.data() + i * codes[i].values().size());
  }
  return out;
}

inline std::vector<Image> generate_batch(std::span<const LatentCode> codes, const Generator& generator) {
  const GeneratorInfo info = generator.info();
  for (const auto& c : codes)
    require(c.layers() == info.layers && c.dims() == info.dims, ErrorCode::shape_mismatch,
            "generator expects [" + std::to_string(info.layers) + "," + std::to_string(info.dims) + "] codes, got " +
                shape_str(c.values().shape()));
  ag::NoGradGuard no_grad;
  const Tensor out = generator.forward(ag::constant(codes_batch(codes))).value();
  std::vector<Image> images;
  for (int i = 0; i < out.dim(0); ++i) images.push_back(unstack_image(out, i));
  return images;
}

// Out-of-range outputs are clamped to [-1, 1].
inline Image generate(const LatentCode& code, const Generator& generator) {
  return generate_batch(std::span<const LatentCode>(&code, 1), generator).front();
}

// w + alpha * n, with an [D] direction broadcast across layers.
inline LatentCode apply_direction(const LatentCode& code, const EditDirection& dir, double alpha) {
  require(std::isfinite(alpha), ErrorCode::non_finite, "alpha must be finite");
  const int l = code.layers(), d = code.dims();
  const bool per_layer = dir.vector.rank() == 2;
  require(per_layer ? (dir.vector.dim(0) == l && dir.vector.dim(1) == d) : dir.vector.dim(0) == d,
          ErrorCode::shape_mismatch,
          "direction '" + dir.name + "' " + shape_str(dir.vector.shape()) + " does not broadcast to " +
              shape_str(code.values().shape()));
  Tensor out = code.values();
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < d; ++j) {
      const double n = per_layer ? dir.vector[static_cast<std::size_t>(i) * d + j] : dir.vector[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i) * d + j] += alpha * n;
    }
  return LatentCode(std::move(out));
}

}  // namespace dcedit
