#pragma once

// End-to-end editing runner shared by the CLI and the HTTP service, plus
// persisted editing sessions and the request router.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcedit/composition.hpp"
#include "dcedit/deghosting.hpp"
#include "dcedit/image_io.hpp"
#include "dcedit/toy_models.hpp"

namespace dcedit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Models

struct ModelPaths {
  std::filesystem::path encoder;
  std::filesystem::path generator;
  std::filesystem::path da;
  std::filesystem::path deghost;     // optional
  std::filesystem::path directions;  // defaults to <generator dir>/directions.json

  // Conventional layout of a checkpoint directory.
  static ModelPaths in_directory(const std::filesystem::path& dir) {
    return {dir / "encoder.ckpt", dir / "generator.ckpt", dir / "da.ckpt", dir / "deghost.ckpt", dir / "directions.json"};
  }
};

struct Models {
  EditPipeline pipeline;
  std::shared_ptr<const deghost::DeghostNet> deghost;
};

inline void require_file(const std::filesystem::path& p, const std::string& what) {
  require(!p.empty(), ErrorCode::not_found, "missing " + what + " checkpoint path");
  require(std::filesystem::is_regular_file(p), ErrorCode::not_found, what + " checkpoint not found: " + p.string());
}

inline Models load_models(const ModelPaths& paths, const ModelRegistry& registry = toy::default_registry()) {
  require_file(paths.encoder, "encoder");
  require_file(paths.generator, "generator");
  require_file(paths.da, "da");
  Models m;
  m.pipeline.encoder = registry.load_encoder(paths.encoder);
  m.pipeline.generator = registry.load_generator(paths.generator);
  m.pipeline.da = da::DAModel::load(paths.da);
  const auto dirs = paths.directions.empty() ? paths.generator.parent_path() / "directions.json" : paths.directions;
  m.pipeline.directions = DirectionCatalog::load(dirs);
  if (!paths.deghost.empty()) {
    require_file(paths.deghost, "deghost");
    m.deghost = deghost::DeghostNet::load(paths.deghost, m.pipeline.generator);
  }
  return m;
}

// ---------------------------------------------------------------------------
// One edit, end to end

struct EditOutcome {
  Image image;  // final output, signed_unit
  EditResult edit;
  bool deghosted = false;
};

inline bool all_zero(const ActivationMask& m) {
  for (std::size_t i = 0; i < m.tensor().size(); ++i)
    if (m[i] != 0.0) return false;
  return true;
}

// invert -> edit chain -> Diff-CAM -> compose -> deghost. Deghosting is skipped
// when no deghost network is loaded, when asked to, or when the mask is empty
// (nothing was blended, so the composite is the input itself).
inline EditOutcome run_edit(const Models& models, const Image& input, const std::vector<EditRequest>& requests, bool skip_deghost,
                            const LatentCode* cached_code = nullptr) {
  EditOutcome out;
  out.edit = multi_attribute_edit(input, requests, models.pipeline, cached_code);
  out.image = out.edit.fused;
  if (!skip_deghost && models.deghost && !all_zero(out.edit.final_mask)) {
    out.image = deghost::deghost(out.edit.fused, *models.deghost);
    out.deghosted = true;
  }
  return out;
}

inline std::vector<std::uint8_t> encode_mask_png(const ActivationMask& m) { return encode_png(mask_as_image(m)); }

// Named intermediate images of an edit, in pipeline order.
inline std::vector<std::pair<std::string, Image>> intermediates(const EditOutcome& o) {
  std::vector<std::pair<std::string, Image>> out{{"inversion", o.edit.inversion}};
  for (std::size_t i = 0; i < o.edit.edited_chain.size(); ++i) out.emplace_back("edited_" + std::to_string(i + 1), o.edit.edited_chain[i]);
  for (std::size_t i = 0; i < o.edit.per_step_masks.size(); ++i)
    out.emplace_back("mask_" + std::to_string(i + 1), mask_as_image(o.edit.per_step_masks[i]));
  out.emplace_back("fused", o.edit.fused);
  out.emplace_back("output", o.image);
  return out;
}

// ---------------------------------------------------------------------------
// Sessions

struct HistoryEntry {
  std::vector<EditRequest> requests;
  bool skip_deghost = false;
  std::string image_hash;
  std::string mask_hash;
  std::string result_file;

  json to_json() const {
    json reqs = json::array();
    for (const auto& r : requests) reqs.push_back({{"attribute", r.attribute}, {"alpha", r.alpha}});
    return {{"requests", reqs}, {"skip_deghost", skip_deghost}, {"image_hash", image_hash}, {"mask_hash", mask_hash},
            {"result", result_file}};
  }
  static HistoryEntry from_json(const json& j) {
    HistoryEntry e;
    for (const auto& r : j.at("requests")) e.requests.push_back({r.at("attribute").get<std::string>(), r.at("alpha").get<double>()});
    e.skip_deghost = j.at("skip_deghost").get<bool>();
    e.image_hash = j.at("image_hash").get<std::string>();
    e.mask_hash = j.at("mask_hash").get<std::string>();
    e.result_file = j.value("result", "");
    return e;
  }
};

struct EditSession {
  std::string id;
  Image original;
  LatentCode code;
  Image inversion;
  std::vector<HistoryEntry> history;
  std::mutex mutex;  // serializes operations on this session
};

// Sessions live under <root>/<id>/: original.png, session.json, result_<n>.png.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path root) : root_(std::move(root)) { std::filesystem::create_directories(root_); }

  const std::filesystem::path& root() const { return root_; }

  std::shared_ptr<EditSession> create(const Image& original, const Models& models) {
    auto s = std::make_shared<EditSession>();
    s->original = quantize(original.to_signed());
    s->code = invert(s->original, *models.pipeline.encoder);
    s->inversion = generate(s->code, *models.pipeline.generator);
    std::lock_guard lock(mu_);
    do s->id = new_id();
    while (sessions_.count(s->id) || std::filesystem::exists(root_ / s->id));
    std::filesystem::create_directories(root_ / s->id);
    write_png(root_ / s->id / "original.png", s->original);
    persist(*s);
    sessions_[s->id] = s;
    return s;
  }

  // In-memory session, or the persisted one re-attached (code recomputed by the bound encoder).
  std::shared_ptr<EditSession> get(const std::string& id, const Models& models) {
    require(valid_id(id), ErrorCode::not_found, "unknown session '" + id + "'");
    std::lock_guard lock(mu_);
    if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
    const auto dir = root_ / id;
    require(std::filesystem::is_regular_file(dir / "session.json"), ErrorCode::not_found, "unknown session '" + id + "'");
    auto s = std::make_shared<EditSession>();
    s->id = id;
    s->original = read_png(dir / "original.png");
    s->code = invert(s->original, *models.pipeline.encoder);
    s->inversion = generate(s->code, *models.pipeline.generator);
    std::ifstream in(dir / "session.json");
    const json stored = json::parse(in);
    for (const auto& e : stored.at("history")) s->history.push_back(HistoryEntry::from_json(e));
    sessions_[id] = s;
    return s;
  }

  // Caller holds the session mutex.
  void record(EditSession& s, HistoryEntry entry, const Image& result) {
    entry.result_file = "result_" + std::to_string(s.history.size()) + ".png";
    write_png(root_ / s.id / entry.result_file, result);
    s.history.push_back(std::move(entry));
    persist(s);
  }

  static bool valid_id(const std::string& id) {
    return !id.empty() && id.size() <= 64 &&
           std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; });
  }

 private:
  void persist(const EditSession& s) const {
    json j;
    j["id"] = s.id;
    j["original_hash"] = image_hash(s.original);
    j["inversion_hash"] = image_hash(s.inversion);
    j["code"] = {{"shape", s.code.values().shape()}, {"values", s.code.values().values()}};
    j["history"] = json::array();
    for (const auto& e : s.history) j["history"].push_back(e.to_json());
    const auto tmp = root_ / s.id / "session.json.tmp";
    std::ofstream(tmp) << j.dump(2) << '\n';
    std::filesystem::rename(tmp, root_ / s.id / "session.json");
  }

  std::string new_id() {
    std::uniform_int_distribution<int> hex(0, 15);
    std::string id;
    for (int i = 0; i < 16; ++i) id += "0123456789abcdef"[hex(rng_)];
    return id;
  }

  std::filesystem::path root_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<EditSession>> sessions_;
  std::mt19937_64 rng_{std::random_device{}()};
};

// Re-executes a session's history; true when every stored hash is reproduced.
inline bool replay_history(EditSession& s, const Models& models) {
  std::lock_guard lock(s.mutex);
  for (const auto& e : s.history) {
    const EditOutcome o = run_edit(models, s.original, e.requests, e.skip_deghost, &s.code);
    if (image_hash(o.image) != e.image_hash || image_hash(mask_as_image(o.edit.final_mask)) != e.mask_hash) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// HTTP API (transport-independent core)

struct Response {
  int status = 200;
  json body;
};

inline int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::unknown_attribute:
    case ErrorCode::invalid_argument:
    case ErrorCode::shape_mismatch:
    case ErrorCode::non_finite:
      return 422;
    case ErrorCode::not_found:
      return 404;
    case ErrorCode::io:
      return 500;
  }
  return 500;
}

inline Response error_response(int status, const std::string& code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

class Service {
 public:
  Service(std::shared_ptr<const Models> models, std::filesystem::path session_root)
      : models_(std::move(models)), store_(std::move(session_root)) {
    require(models_ != nullptr, ErrorCode::invalid_argument, "service needs models");
  }

  SessionStore& sessions() { return store_; }
  const Models& models() const { return *models_; }

  Response handle(const std::string& method, const std::string& path, const std::string& body) {
    static const std::regex edit_re("^/sessions/([^/]+)/edit$");
    static const std::regex history_re("^/sessions/([^/]+)/history$");
    std::smatch m;
    try {
      if (method == "POST" && path == "/sessions") return create_session(parse(body));
      if (method == "GET" && path == "/attributes") return attributes();
      if (method == "POST" && std::regex_match(path, m, edit_re)) return edit(m[1].str(), parse(body));
      if (method == "GET" && std::regex_match(path, m, history_re)) return history(m[1].str());
      return error_response(404, "not_found", "no route for " + method + " " + path);
    } catch (const BadRequest& e) {
      return error_response(400, "bad_request", e.what());
    } catch (const Error& e) {
      return error_response(status_for(e.code()), std::string(to_string(e.code())), e.what());
    } catch (const json::exception& e) {
      return error_response(400, "bad_request", e.what());
    } catch (const std::exception& e) {
      return error_response(500, "internal", e.what());
    }
  }

 private:
  struct BadRequest : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  static json parse(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw BadRequest("request body must be a JSON object");
    return j;
  }

  Response create_session(const json& req) {
    if (!req.contains("image_b64") || !req["image_b64"].is_string()) throw BadRequest("missing image_b64");
    const Image img = decode_png(base64_decode(req["image_b64"].get<std::string>()));
    const GeneratorInfo g = models_->pipeline.generator->info();
    require(img.channels() == g.channels && img.height() == g.resolution && img.width() == g.resolution, ErrorCode::shape_mismatch,
            "image must be " + std::to_string(g.channels) + "x" + std::to_string(g.resolution) + "x" + std::to_string(g.resolution));
    const auto s = store_.create(img, *models_);
    return {201, {{"session_id", s->id}, {"inversion_b64", base64_encode(encode_png(s->inversion))}}};
  }

  Response attributes() const {
    json list = json::array();
    for (const auto& d : models_->pipeline.directions.directions())
      list.push_back({{"name", d.name}, {"alpha_min", d.alpha_min}, {"alpha_max", d.alpha_max}, {"default_alpha", d.default_alpha}});
    return {200, {{"attributes", list}}};
  }

  Response edit(const std::string& id, const json& req) {
    if (!req.contains("requests") || !req["requests"].is_array() || req["requests"].empty())
      throw BadRequest("requests must be a non-empty array");
    std::vector<EditRequest> requests;
    for (const auto& r : req["requests"]) {
      if (!r.is_object() || !r.contains("attribute") || !r["attribute"].is_string() || !r.contains("alpha") ||
          !r["alpha"].is_number())
        throw BadRequest("each request needs a string attribute and a numeric alpha");
      requests.push_back({r["attribute"].get<std::string>(), r["alpha"].get<double>()});
    }
    const bool skip = req.value("skip_deghost", false);
    const bool want_intermediates = req.value("intermediates", false);

    const auto s = store_.get(id, *models_);
    std::lock_guard lock(s->mutex);
    const EditOutcome o = run_edit(*models_, s->original, requests, skip, &s->code);
    const Image mask_img = mask_as_image(o.edit.final_mask);
    json out{{"image_b64", base64_encode(encode_png(o.image))},
             {"mask_b64", base64_encode(encode_png(mask_img))},
             {"image_hash", image_hash(o.image)},
             {"mask_hash", image_hash(mask_img)},
             {"deghosted", o.deghosted}};
    if (want_intermediates) {
      json inter = json::object();
      for (const auto& [name, img] : intermediates(o)) inter[name] = base64_encode(encode_png(img));
      out["intermediates"] = inter;
    }
    store_.record(*s, {requests, skip, out["image_hash"], out["mask_hash"], ""}, o.image);
    return {200, out};
  }

  Response history(const std::string& id) {
    const auto s = store_.get(id, *models_);
    std::lock_guard lock(s->mutex);
    json list = json::array();
    for (const auto& e : s->history) list.push_back(e.to_json());
    return {200, {{"session_id", id}, {"history", list}}};
  }

  std::shared_ptr<const Models> models_;
  SessionStore store_;
};

}  // namespace dcedit
