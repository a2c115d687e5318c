#pragma once

// Command-line front end: edit, train-da, train-deghost, eval, serve, build-fixtures.
// run() never calls exit(), so tests drive it in-process.

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcedit/http_server.hpp"
#include "dcedit/service.hpp"
#include "dcedit/toy_eval.hpp"
#include "dcedit/toy_training.hpp"

namespace dcedit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline fs::path default_directions(const fs::path& generator, const fs::path& given) {
  return given.empty() ? generator.parent_path() / "directions.json" : given;
}

inline void check_paths(std::initializer_list<std::pair<const char*, const fs::path*>> paths) {
  for (const auto& [flag, p] : paths) {
    if (p->empty()) throw UsageError(std::string("missing required checkpoint path ") + flag);
    if (!fs::is_regular_file(*p)) throw UsageError(std::string(flag) + ": no such file " + p->string());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// edit

struct EditArgs {
  fs::path input, out, encoder, generator, da, deghost, directions, mask, dump_dir;
  std::vector<std::string> attributes;
  std::vector<double> alphas;
  bool skip_deghost = false;
};

inline json edit_command(const EditArgs& a) {
  check_paths({{"--encoder", &a.encoder}, {"--generator", &a.generator}, {"--da", &a.da}});
  if (!a.skip_deghost) check_paths({{"--deghost", &a.deghost}});
  if (a.attributes.empty() || a.attributes.size() != a.alphas.size())
    throw UsageError("--attribute and --alpha must be given in pairs (at least one)");
  ModelPaths paths{a.encoder, a.generator, a.da, a.skip_deghost ? fs::path() : a.deghost,
                   default_directions(a.generator, a.directions)};
  const Models models = load_models(paths);
  const Image input = read_png(a.input);
  std::vector<EditRequest> requests;
  for (std::size_t i = 0; i < a.attributes.size(); ++i) requests.push_back({a.attributes[i], a.alphas[i]});
  const EditOutcome o = run_edit(models, input, requests, a.skip_deghost);

  write_png(a.out, o.image);
  fs::path mask_path = a.mask;
  if (mask_path.empty()) mask_path = a.out.parent_path() / (a.out.stem().string() + "_mask.png");
  write_mask_png(mask_path, o.edit.final_mask);
  write_npy(fs::path(mask_path).replace_extension(".npy"), o.edit.final_mask.tensor());
  if (!a.dump_dir.empty()) {
    fs::create_directories(a.dump_dir);
    for (const auto& [name, img] : intermediates(o)) write_png(a.dump_dir / (name + ".png"), img);
  }
  return {{"output", a.out.string()},
          {"mask", mask_path.string()},
          {"image_hash", image_hash(o.image)},
          {"mask_hash", image_hash(mask_as_image(o.edit.final_mask))},
          {"deghosted", o.deghosted}};
}

// ---------------------------------------------------------------------------
// train-da / train-deghost

struct TrainDAArgs {
  fs::path encoder, generator, directions, out, log;
  toy::DARecipe recipe;
};

inline json train_da_command(const TrainDAArgs& a) {
  check_paths({{"--encoder", &a.encoder}, {"--generator", &a.generator}});
  const auto& reg = toy::default_registry();
  const auto enc = reg.load_encoder(a.encoder);
  const auto gen = reg.load_generator(a.generator);
  const auto dirs = DirectionCatalog::load(default_directions(a.generator, a.directions));
  toy::DARecipe recipe = a.recipe;
  std::optional<std::ofstream> log;
  if (!a.log.empty()) {
    if (a.log.has_parent_path()) fs::create_directories(a.log.parent_path());
    log.emplace(a.log);
    recipe.train.on_step = [&log](int step, double loss) { *log << json{{"step", step}, {"loss", loss}}.dump() << '\n'; };
  }
  const auto t0 = std::chrono::steady_clock::now();
  const toy::TrainedDA trained = toy::train_toy_da(*enc, *gen, dirs, recipe);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(a.out, trained.model->to_checkpoint());
  return {{"checkpoint", a.out.string()},
          {"steps", trained.result.loss.size()},
          {"final_loss", trained.result.loss.empty() ? 0.0 : trained.result.loss.back()},
          {"seconds", secs}};
}

struct TrainDeghostArgs {
  fs::path encoder, generator, da, directions, out, discriminator_out;
  toy::DeghostRecipe recipe;
};

struct TrainedDeghost {
  std::shared_ptr<deghost::DeghostNet> net;
  std::shared_ptr<deghost::Discriminator> discriminator;
  std::vector<deghost::StepRecord> log;
};

inline TrainedDeghost train_toy_deghost(const EditPipeline& p, const toy::DeghostRecipe& r) {
  const auto data = toy::deghost_dataset(p, r.samples, r.seed, r.overlay_probability);
  auto net = std::make_shared<deghost::DeghostNet>(p.generator, r.net, r.net_seed);
  auto disc = std::make_shared<deghost::Discriminator>();
  const auto extractor = toy::toy_extractor(r);
  auto result = deghost::train_deghost(net, disc, data, extractor, r.hp);
  return {net, disc, std::move(result.log)};
}

inline json train_deghost_command(const TrainDeghostArgs& a) {
  check_paths({{"--encoder", &a.encoder}, {"--generator", &a.generator}, {"--da", &a.da}});
  const Models models = load_models({a.encoder, a.generator, a.da, {}, default_directions(a.generator, a.directions)});
  const auto t0 = std::chrono::steady_clock::now();
  const TrainedDeghost t = train_toy_deghost(models.pipeline, a.recipe);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(a.out, t.net->to_checkpoint());
  const fs::path disc_path =
      a.discriminator_out.empty() ? a.out.parent_path() / (a.out.stem().string() + "_discriminator.ckpt") : a.discriminator_out;
  save_checkpoint(disc_path, t.discriminator->to_checkpoint());
  return {{"checkpoint", a.out.string()},
          {"discriminator", disc_path.string()},
          {"steps", t.log.size()},
          {"final_total", t.log.empty() ? 0.0 : t.log.back().total},
          {"seconds", secs}};
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  fs::path checkpoints, out;
  int count = 100;
  std::uint64_t seed = 77;
  bool skip_deghost = false;
};

// FID and perceptual distance between originals and edited outputs (each attribute at its
// default alpha, FID averaged over attributes), plus Diff-CAM localization IoU.
inline json eval_command(const EvalArgs& a) {
  ModelPaths paths = ModelPaths::in_directory(a.checkpoints);
  check_paths({{"encoder.ckpt", &paths.encoder}, {"generator.ckpt", &paths.generator}, {"da.ckpt", &paths.da}});
  if (a.skip_deghost || !fs::exists(paths.deghost)) paths.deghost.clear();
  const Models models = load_models(paths);
  const auto extractor = toy::toy_extractor();
  const auto edits = toy::sample_edits(*models.pipeline.encoder, models.pipeline.directions, a.count, a.seed);
  const std::string dataset_id = "toy_scenes_seed" + std::to_string(a.seed) + "_n" + std::to_string(a.count);

  std::vector<Image> originals;
  for (const auto& e : edits) originals.push_back(e.original);
  double fid = 0.0, lpips = 0.0;
  const auto names = models.pipeline.directions.names();
  for (const auto& name : names) {
    const double alpha = models.pipeline.directions.at(name).default_alpha;
    std::vector<Image> outputs;
    for (const auto& e : edits) {
      outputs.push_back(run_edit(models, e.original, {{name, alpha}}, a.skip_deghost, &e.code).image);
      lpips += eval::perceptual_similarity(e.original, outputs.back(), extractor);
    }
    fid += eval::frechet_distance(originals, outputs, extractor);
  }
  fid /= static_cast<double>(names.size());
  lpips /= static_cast<double>(names.size() * edits.size());
  const toy::LocalizationStats loc = toy::localization(models.pipeline, edits);

  json reports = json::array();
  reports.push_back(eval::MetricReport{"fid", fid, {dataset_id, "edited_default_alpha"}, extractor.id()}.to_json());
  reports.push_back(eval::MetricReport{"lpips", lpips, {dataset_id, "edited_default_alpha"}, extractor.id()}.to_json());
  reports.push_back(eval::MetricReport{"diffcam_iou", loc.mean_iou, {dataset_id}, "ground_truth_change_mask"}.to_json());
  if (!a.out.empty()) write_text(a.out, reports.dump(2) + "\n");
  return reports;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  fs::path checkpoints, sessions;
  std::string host = "127.0.0.1";
  int port = 8080;
};

inline HttpServer* g_server = nullptr;

inline int serve_command(const ServeArgs& a, std::ostream& out) {
  ModelPaths paths = ModelPaths::in_directory(a.checkpoints);
  check_paths({{"encoder.ckpt", &paths.encoder}, {"generator.ckpt", &paths.generator}, {"da.ckpt", &paths.da}});
  if (!fs::exists(paths.deghost)) paths.deghost.clear();
  auto models = std::make_shared<const Models>(load_models(paths));
  auto service = std::make_shared<Service>(models, a.sessions.empty() ? fs::path("sessions") : a.sessions);
  HttpServer server(service);
  const int port = server.bind(a.host, a.port);
  require(port > 0, ErrorCode::io, "cannot bind " + a.host + ":" + std::to_string(a.port));
  out << json{{"listening", a.host + ":" + std::to_string(port)}}.dump() << std::endl;
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  server.run();
  g_server = nullptr;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// build-fixtures

struct FixtureArgs {
  fs::path out;
  std::uint64_t seed = 1;
  toy::ToyPipelineConfig encoder;
  toy::DARecipe da;
  toy::DeghostRecipe deghost;
};

// Scene used for the golden-hash check: fixed codes plus an out-of-domain overlay.
inline toy::SyntheticScene fixture_scene() {
  toy::SyntheticScene s;
  s.code = {-1.2, 0.4, -0.6, 0.8, 0.3, -0.2, 0.5, -0.7};
  s.overlay = toy::Overlay{};
  return s;
}

inline void write_ndjson(const fs::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(path, text);
}

inline json build_fixtures_command(const FixtureArgs& a, std::ostream& progress) {
  fs::create_directories(a.out);
  const auto t0 = std::chrono::steady_clock::now();
  auto stamp = [&](const std::string& what) {
    progress << what << " at " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s" << std::endl;
  };

  const toy::ToyPipeline toy = toy::build_toy_pipeline(a.seed, a.encoder);
  save_checkpoint(a.out / "encoder.ckpt", toy.encoder->to_checkpoint());
  save_checkpoint(a.out / "generator.ckpt", toy.generator->to_checkpoint());
  toy.directions.save(a.out / "directions.json");
  std::vector<json> enc_log;
  for (std::size_t i = 0; i < toy.encoder_loss.size(); ++i) enc_log.push_back({{"step", i}, {"loss", toy.encoder_loss[i]}});
  write_ndjson(a.out / "logs" / "encoder.ndjson", enc_log);
  stamp("encoder");

  toy::DARecipe da_recipe = a.da;
  std::vector<json> da_log;
  da_recipe.train.on_step = [&da_log](int step, double loss) { da_log.push_back({{"step", step}, {"loss", loss}}); };
  const auto da_t0 = std::chrono::steady_clock::now();
  const toy::TrainedDA da = toy::train_toy_da(*toy.encoder, *toy.generator, toy.directions, da_recipe);
  toy::Baselines baselines;
  baselines.da_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - da_t0).count();
  baselines.da_steps = static_cast<int>(da.result.loss.size());
  save_checkpoint(a.out / "da.ckpt", da.model->to_checkpoint());
  write_ndjson(a.out / "logs" / "da.ndjson", da_log);
  stamp("da");

  EditPipeline pipeline{toy.encoder, toy.generator, toy.directions, da.model};
  toy::DeghostRecipe dg_recipe = a.deghost;
  dg_recipe.hp.log_path = a.out / "logs" / "deghost.ndjson";
  const TrainedDeghost dg = train_toy_deghost(pipeline, dg_recipe);
  save_checkpoint(a.out / "deghost.ckpt", dg.net->to_checkpoint());
  save_checkpoint(a.out / "discriminator.ckpt", dg.discriminator->to_checkpoint());
  require(!dg.log.empty(), ErrorCode::invalid_argument, "build-fixtures: deghost training needs at least one step");
  baselines.deghost_steps = static_cast<int>(dg.log.size());
  baselines.deghost_loss_step0 = dg.log.front().total;
  baselines.deghost_loss_ema = deghost::loss_ema(dg.log, dg.log.size());
  stamp("deghost");

  toy::measure(load_models(ModelPaths::in_directory(a.out)), baselines);
  write_text(a.out / "baselines.json", baselines.to_json().dump(2) + "\n");
  stamp("baselines");

  write_png(a.out / "input.png", toy::render(fixture_scene()));
  EditArgs golden{a.out / "input.png", a.out / "golden_output.png", a.out / "encoder.ckpt", a.out / "generator.ckpt",
                  a.out / "da.ckpt",   a.out / "deghost.ckpt",      {},                       {},
                  {},                  {"glasses"},                 {2.0},                    false};
  json g = edit_command(golden);
  g.erase("output");
  g.erase("mask");
  g["args"] = {{"attribute", "glasses"}, {"alpha", 2.0}, {"input", "input.png"}};
  write_text(a.out / "golden.json", g.dump(2) + "\n");
  fs::remove(golden.out);
  fs::remove(a.out / "golden_output_mask.png");
  fs::remove(a.out / "golden_output_mask.npy");
  stamp("golden");
  return g;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Composition-decomposition image editing with Diff-CAM masks and deghosting", "dcedit"};
  app.require_subcommand(1);

  EditArgs edit;
  auto* e = app.add_subcommand("edit", "Edit one image along one or more attributes");
  e->add_option("--input", edit.input, "Input PNG")->required();
  e->add_option("--attribute", edit.attributes, "Attribute name (repeatable, paired with --alpha)")->allow_extra_args(false);
  e->add_option("--alpha", edit.alphas, "Edit strength (repeatable)")->allow_extra_args(false);
  e->add_option("--encoder", edit.encoder, "Inversion encoder checkpoint");
  e->add_option("--generator", edit.generator, "Generator checkpoint");
  e->add_option("--da", edit.da, "DA checkpoint");
  e->add_option("--deghost", edit.deghost, "Deghost checkpoint");
  e->add_option("--directions", edit.directions, "Direction index (default: directions.json next to the generator)");
  e->add_option("--out", edit.out, "Output PNG")->required();
  e->add_option("--mask", edit.mask, "Mask PNG (default: <out>_mask.png; a .npy copy is written alongside)");
  e->add_option("--dump-intermediates", edit.dump_dir, "Directory for intermediate images");
  e->add_flag("--skip-deghost", edit.skip_deghost, "Return the composite without deghosting");

  TrainDAArgs tda;
  auto* td = app.add_subcommand("train-da", "Train the DA module on toy edits");
  td->add_option("--encoder", tda.encoder);
  td->add_option("--generator", tda.generator);
  td->add_option("--directions", tda.directions);
  td->add_option("--out", tda.out)->required();
  td->add_option("--log", tda.log, "Per-step loss log (NDJSON)");
  td->add_option("--steps", tda.recipe.train.steps)->capture_default_str();
  td->add_option("--batch", tda.recipe.train.batch_size)->capture_default_str();
  td->add_option("--lr", tda.recipe.train.adam.lr)->capture_default_str();
  td->add_option("--scenes", tda.recipe.scenes)->capture_default_str();
  td->add_option("--samples", tda.recipe.samples)->capture_default_str();
  td->add_option("--seed", tda.recipe.seed)->capture_default_str();

  TrainDeghostArgs tdg;
  auto* tg = app.add_subcommand("train-deghost", "Train the deghosting network on synthesized pairs");
  tg->add_option("--encoder", tdg.encoder);
  tg->add_option("--generator", tdg.generator);
  tg->add_option("--da", tdg.da);
  tg->add_option("--directions", tdg.directions);
  tg->add_option("--out", tdg.out)->required();
  tg->add_option("--discriminator-out", tdg.discriminator_out);
  tg->add_option("--log", tdg.recipe.hp.log_path, "Per-step loss log (NDJSON)");
  tg->add_option("--checkpoint-dir", tdg.recipe.hp.checkpoint_dir);
  tg->add_option("--checkpoint-every", tdg.recipe.hp.checkpoint_every)->capture_default_str();
  tg->add_option("--steps", tdg.recipe.hp.steps)->capture_default_str();
  tg->add_option("--batch", tdg.recipe.hp.batch_size)->capture_default_str();
  tg->add_option("--lr", tdg.recipe.hp.adam.lr)->capture_default_str();
  tg->add_option("--lambda-m", tdg.recipe.hp.lambda_m)->capture_default_str();
  tg->add_option("--lambda-p", tdg.recipe.hp.lambda_p)->capture_default_str();
  tg->add_option("--lambda-a", tdg.recipe.hp.lambda_a)->capture_default_str();
  tg->add_flag("--conventional-mse", tdg.recipe.hp.loss.conventional_mse, "Mean of squares instead of the pixel-normalized norm");
  tg->add_option("--samples", tdg.recipe.samples)->capture_default_str();
  tg->add_option("--seed", tdg.recipe.seed)->capture_default_str();

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "FID, perceptual distance and Diff-CAM IoU on toy scenes");
  evc->add_option("--checkpoints", ev.checkpoints, "Checkpoint directory")->required();
  evc->add_option("--count", ev.count)->capture_default_str();
  evc->add_option("--seed", ev.seed)->capture_default_str();
  evc->add_option("--out", ev.out, "Report path (JSON)");
  evc->add_flag("--skip-deghost", ev.skip_deghost);

  ServeArgs sv;
  auto* svc = app.add_subcommand("serve", "HTTP editing service");
  svc->add_option("--checkpoints", sv.checkpoints, "Checkpoint directory")->required();
  svc->add_option("--port", sv.port)->capture_default_str();
  svc->add_option("--host", sv.host)->capture_default_str();
  svc->add_option("--sessions", sv.sessions, "Session storage directory (default: ./sessions)");

  FixtureArgs fx;
  auto* bf = app.add_subcommand("build-fixtures", "Train the toy models and write fixture checkpoints");
  bf->add_option("--out", fx.out)->required();
  bf->add_option("--seed", fx.seed)->capture_default_str();
  bf->add_option("--encoder-steps", fx.encoder.encoder_steps)->capture_default_str();
  bf->add_option("--da-steps", fx.da.train.steps)->capture_default_str();
  bf->add_option("--deghost-steps", fx.deghost.hp.steps)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n\n" << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitUsage;
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    json result;
    if (cmd == e) result = edit_command(edit);
    else if (cmd == td) result = train_da_command(tda);
    else if (cmd == tg) result = train_deghost_command(tdg);
    else if (cmd == evc) result = eval_command(ev);
    else if (cmd == svc) return serve_command(sv, out);
    else if (cmd == bf) result = build_fixtures_command(fx, err);
    out << result.dump(2) << std::endl;
    return kExitOk;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n\n" << cmd->help();
    return kExitUsage;
  } catch (const Error& ex) {
    err << "error [" << to_string(ex.code()) << "]: " << ex.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace dcedit::cli
