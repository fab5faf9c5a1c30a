#include "cli.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "sifsr/baselines.hpp"
#include "sifsr/datagen.hpp"
#include "sifsr/error.hpp"
#include "sifsr/linops.hpp"
#include "sifsr/objective.hpp"
#include "sifsr/unet.hpp"
#include "sifsr/var_solver.hpp"

namespace sifsr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kMethods{"bicubic", "tsharp",  "atprk",    "sif-var",
                                        "sif-net", "sc-net",  "reference"};

const std::vector<std::string> kPathKeys{"out",   "data",       "scene",          "sr",
                                         "image", "checkpoint", "sif_checkpoint", "sc_checkpoint"};

// Fixed-width formatting keeps CSV bytes independent of locale and stream state.
std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

json section(const json& cfg, const char* key) {
  if (!cfg.contains(key)) return json::object();
  if (!cfg.at(key).is_object()) throw ConfigError(std::string("'") + key + "' must be an object");
  return cfg.at(key);
}

std::string required(const json& cfg, const char* key) {
  if (!cfg.contains(key) || !cfg.at(key).is_string() || cfg.at(key).get<std::string>().empty()) {
    throw ConfigError(std::string("missing required setting '") + key + "'");
  }
  return cfg.at(key).get<std::string>();
}

std::string optional_string(const json& cfg, const char* key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) return {};
  if (!cfg.at(key).is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
  return cfg.at(key).get<std::string>();
}

// out.f32 -> out<suffix>
fs::path sibling(const fs::path& path, const std::string& suffix) {
  fs::path stem = path;
  stem.replace_extension();
  return fs::path(stem.string() + suffix);
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

int scale_of(const Grid2D& lst, const Grid2D& ndvi) {
  const double ratio = lst.pixel_size() / ndvi.pixel_size();
  const long r = std::lround(ratio);
  if (r < 1 || std::abs(ratio - static_cast<double>(r)) > 1e-6 * ratio ||
      ndvi.width() != lst.width() * r || ndvi.height() != lst.height() * r) {
    throw DataError("LST and NDVI rasters do not nest at an integer scale factor");
  }
  return static_cast<int>(r);
}

json stats_json(const NormStats& s) {
  return {{"lst_mean", s.lst_mean},
          {"lst_std", s.lst_std},
          {"ndvi_mean", s.ndvi_mean},
          {"ndvi_std", s.ndvi_std}};
}

NormStats stats_from_json(const json& j) {
  NormStats s;
  s.lst_mean = j.at("lst_mean").get<double>();
  s.lst_std = j.at("lst_std").get<double>();
  s.ndvi_mean = j.at("ndvi_mean").get<double>();
  s.ndvi_std = j.at("ndvi_std").get<double>();
  s.validate();
  return s;
}

objective::SifConfig resolve_sif(const json& cfg, int r) {
  json j = section(cfg, "sif");
  if (!j.contains("scale_factor")) j["scale_factor"] = r;
  return objective::sif_config_from_json(j);
}

struct Net {
  unet::UNet model;
  NormStats stats;
};

Net load_net(const std::string& path, bool want_sc) {
  json extra;
  Net net;
  net.model = unet::UNet::load(path, &extra);
  const std::string mode = extra.value("mode", std::string());
  if (mode.empty() || (mode == "sc") != want_sc) {
    throw ConfigError("checkpoint " + path + " holds a '" + mode + "' network, expected " +
                      (want_sc ? "an sc" : "a sif1/sif2") + " network");
  }
  try {
    net.stats = stats_from_json(extra.at("stats"));
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path + " lacks normalization statistics: " + e.what());
  }
  return net;
}

void check_method(const std::string& m) {
  if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) {
    throw ConfigError("unknown method '" + m + "'");
  }
}

// Per-worker state; networks are loaded once per worker so that no model is
// shared between threads.
struct MethodContext {
  json cfg;
  std::optional<Net> sif_net;
  std::optional<Net> sc_net;
};

MethodContext make_context(const json& cfg, const std::vector<std::string>& methods,
                           const char* sif_key, const char* sc_key) {
  MethodContext ctx;
  ctx.cfg = cfg;
  for (const auto& m : methods) {
    if (m == "sif-net" && !ctx.sif_net) {
      const std::string path = optional_string(cfg, sif_key);
      if (path.empty()) throw ConfigError(std::string("method sif-net needs '") + sif_key + "'");
      ctx.sif_net = load_net(path, false);
    }
    if (m == "sc-net" && !ctx.sc_net) {
      const std::string path = optional_string(cfg, sc_key);
      if (path.empty()) throw ConfigError(std::string("method sc-net needs '") + sc_key + "'");
      ctx.sc_net = load_net(path, true);
    }
  }
  return ctx;
}

Grid2D sharpen_with(const std::string& method, const EvalTriple& t, MethodContext& ctx) {
  const ScenePair& pair = t.pair;
  Grid2D sr;
  if (method == "bicubic") {
    sr = baselines::bicubic_baseline(pair);
  } else if (method == "tsharp") {
    sr = baselines::tsharp_sharpen(pair, baselines::baseline_config_from_json(section(ctx.cfg, "baselines")));
  } else if (method == "atprk") {
    sr = baselines::atprk_sharpen(pair, baselines::baseline_config_from_json(section(ctx.cfg, "baselines")));
  } else if (method == "sif-var") {
    const auto res = varsolve::solve_direct(pair, resolve_sif(ctx.cfg, pair.scale_factor),
                                            varsolve::solve_config_from_json(section(ctx.cfg, "solve")));
    sr = res.sr;
  } else if (method == "sif-net") {
    sr = unet::infer(ctx.sif_net->model, pair, ctx.sif_net->stats);
  } else if (method == "sc-net") {
    sr = unet::infer(ctx.sc_net->model, pair, ctx.sc_net->stats);
  } else if (method == "reference") {
    sr = t.ref_hr;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  sr.set_units("K");
  return sr;
}

struct RunRecord {
  fs::path manifest;  // empty: the command wrote no file
  json inputs = json::array();
  json outputs = json::array();
  json seed;
  json resolved = json::object();
};

// ---- commands ------------------------------------------------------------------

RunRecord cmd_synth(const json& cfg, std::ostream& out) {
  const fs::path dir = required(cfg, "out");
  const int count = cfg.value("count", 20);
  if (count < 1) throw ConfigError("synth: count must be positive");
  const datagen::SynthConfig base = datagen::synth_config_from_json(section(cfg, "synth"));
  RunRecord rec;
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    datagen::SynthConfig c = base;
    c.seed = base.seed + static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03d", i);
    const fs::path scene_dir = dir / name;
    save_triple(datagen::synth_scene(c), scene_dir);
    write_atomic(scene_dir / "scene.json", json{{"synth", datagen::to_json(c)}}.dump(2) + "\n");
    rec.outputs.push_back(scene_dir.string());
  }
  out << "synth: wrote " << count << " scenes to " << dir.string() << "\n";
  rec.manifest = dir / "manifest.json";
  rec.seed = base.seed;
  rec.resolved["synth"] = datagen::to_json(base);
  return rec;
}

RunRecord cmd_train(const json& cfg, std::ostream& out) {
  const std::string mode = cfg.value("mode", std::string("sif1"));
  if (mode != "sif1" && mode != "sif2" && mode != "sc") {
    throw ConfigError("train: mode must be sif1, sif2 or sc");
  }
  const fs::path data = required(cfg, "data");
  const fs::path ckpt = required(cfg, "out");
  const int patch = cfg.value("patch", 0);
  if (patch < 0) throw ConfigError("train: patch must be >= 0");

  std::vector<ScenePair> pairs;
  for (const auto& dir : list_scenes(data)) {
    ScenePair p = load_pair(dir);
    if (patch == 0) {
      pairs.push_back(std::move(p));
    } else {
      for (auto& piece : datagen::slice_patches(p, patch)) pairs.push_back(std::move(piece.triple.pair));
    }
  }
  if (pairs.empty()) throw DataError("train: no usable training images in " + data.string());
  const int r = pairs.front().scale_factor;
  for (const auto& p : pairs) {
    if (p.scale_factor != r) throw DataError("train: scenes mix scale factors");
  }

  const unet::UNetConfig ucfg = unet::unet_config_from_json(section(cfg, "unet"));
  const unet::TrainConfig tcfg = unet::train_config_from_json(section(cfg, "train"));
  const auto report = [&](const unet::EpochLoss& e) {
    if (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == tcfg.epochs) {
      out << "epoch " << e.epoch << " total " << fmt(e.total) << "\n";
    }
  };

  RunRecord rec;
  json extra{{"mode", mode}, {"scale_factor", r}};
  unet::TrainResult res;
  if (mode == "sc") {
    double sigma = cfg.value("mtf_sigma_px", -1.0);
    if (sigma <= 0.0) sigma = linops::default_mtf_sigma(r);
    res = unet::train_sc(pairs, ucfg, tcfg, sigma, report);
    extra["mtf_sigma_px"] = sigma;
  } else {
    json sj = section(cfg, "sif");
    sj["preset"] = mode;
    if (!sj.contains("scale_factor")) sj["scale_factor"] = r;
    const objective::SifConfig sif = objective::sif_config_from_json(sj);
    res = unet::train_sif(pairs, sif, ucfg, tcfg, report);
    extra["sif"] = objective::to_json(sif);
    rec.resolved["sif"] = extra["sif"];
  }
  if (res.diverged) throw NumericError("train: " + res.divergence_message);

  extra["stats"] = stats_json(res.stats);
  extra["best_epoch"] = res.best_epoch;
  extra["images"] = pairs.size();
  ensure_parent(ckpt);
  res.model.save(ckpt, extra);
  const fs::path history = sibling(ckpt, ".history.csv");
  unet::write_history_csv(res.history, history);
  out << "train: best epoch " << res.best_epoch << ", checkpoint " << ckpt.string() << "\n";

  rec.manifest = sibling(ckpt, ".manifest.json");
  rec.inputs.push_back(data.string());
  rec.outputs = {ckpt.string(), sibling(ckpt, ".bin").string(), history.string()};
  rec.seed = tcfg.seed;
  rec.resolved["unet"] = unet::to_json(ucfg);
  rec.resolved["train"] = unet::to_json(tcfg);
  return rec;
}

RunRecord cmd_sharpen(const json& cfg, std::ostream& out) {
  const std::string method = required(cfg, "method");
  check_method(method);
  const fs::path scene = required(cfg, "scene");
  const fs::path target = required(cfg, "out");
  EvalTriple t;
  if (method == "reference") {
    t = load_triple(scene);
  } else {
    t.pair = load_pair(scene);
  }
  MethodContext ctx = make_context(cfg, {method}, "checkpoint", "checkpoint");
  const Grid2D sr = sharpen_with(method, t, ctx);
  ensure_parent(target);
  save_raster(sr, target);
  out << "sharpen: " << method << " -> " << target.string() << "\n";

  RunRecord rec;
  rec.manifest = sibling(target, ".manifest.json");
  rec.inputs.push_back(scene.string());
  const std::string ckpt = optional_string(cfg, "checkpoint");
  if (!ckpt.empty()) rec.inputs.push_back(ckpt);
  rec.outputs = {target.string(), sidecar_path(target).string()};
  return rec;
}

RunRecord cmd_evaluate(const json& cfg, std::ostream& out) {
  const fs::path sr_path = required(cfg, "sr");
  const fs::path scene = required(cfg, "scene");
  const Grid2D sr = load_raster(sr_path);
  const EvalTriple t = load_triple(scene);
  const Grid2D bic = baselines::bicubic_baseline(t.pair);
  json scores = metrics::to_json(metrics::score_scene(sr, t.ref_hr, bic));
  scores["spectral_score_version"] = metrics::kSpectralScoreVersion;
  const std::string text = scores.dump(2) + "\n";
  out << text;

  RunRecord rec;
  rec.inputs = {sr_path.string(), scene.string()};
  const std::string target = optional_string(cfg, "out");
  if (!target.empty()) {
    ensure_parent(target);
    write_atomic(target, text);
    rec.manifest = sibling(target, ".manifest.json");
    rec.outputs.push_back(target);
  }
  return rec;
}

RunRecord cmd_spectra(const json& cfg, std::ostream& out) {
  const fs::path image = required(cfg, "image");
  const fs::path target = required(cfg, "out");
  const bool hann = cfg.value("hann", false);
  const auto spec = metrics::attenuation_spectrum(metrics::center_square(load_raster(image)), hann);
  ensure_parent(target);
  write_atomic(target, spectrum_csv(spec));
  out << "spectra: " << spec.db.size() << " rings -> " << target.string() << "\n";

  RunRecord rec;
  rec.manifest = sibling(target, ".manifest.json");
  rec.inputs.push_back(image.string());
  rec.outputs.push_back(target.string());
  return rec;
}

struct SceneResult {
  std::vector<metrics::Scores> scores;                    // per method
  std::vector<metrics::AttenuationSpectrum> spectra;      // per spectrum name
};

metrics::AttenuationSpectrum mean_spectrum(const std::vector<SceneResult>& results, std::size_t k,
                                           const std::string& name) {
  metrics::AttenuationSpectrum mean = results.front().spectra[k];
  for (const auto& r : results) {
    const auto& s = r.spectra[k];
    if (s.size != mean.size || s.pixel_size != mean.pixel_size) {
      throw DataError("benchmark: scenes differ in size or pixel size; cannot average the " + name +
                      " spectra");
    }
  }
  for (std::size_t i = 0; i < mean.db.size(); ++i) {
    double sum = 0.0;
    for (const auto& r : results) sum += r.spectra[k].db[i];
    mean.db[i] = sum / static_cast<double>(results.size());
  }
  return mean;
}

void append_scores(std::string& csv, const std::string& scene, const std::string& method,
                   const metrics::Scores& s) {
  csv += scene + "," + method + "," + fmt(s.rmse) + "," + fmt(s.rmse_q75) + "," + fmt(s.ssim) + ",," +
         fmt(s.frr) + "," + fmt(s.fro) + "," + fmt(s.rmse_f) + "\n";
}

RunRecord cmd_benchmark(const json& cfg, std::ostream& out) {
  const fs::path data = required(cfg, "data");
  const fs::path dir = required(cfg, "out");
  const auto methods = cfg.value("methods", std::vector<std::string>{});
  if (methods.empty()) throw ConfigError("benchmark: no methods");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    check_method(methods[i]);
    if (std::find(methods.begin(), methods.begin() + static_cast<long>(i), methods[i]) !=
        methods.begin() + static_cast<long>(i)) {
      throw ConfigError("benchmark: method '" + methods[i] + "' listed twice");
    }
  }
  const int jobs_cfg = cfg.value("jobs", 1);
  if (jobs_cfg < 1) throw ConfigError("benchmark: jobs must be >= 1");
  // Fail on missing checkpoints before any scene work.
  make_context(cfg, methods, "sif_checkpoint", "sc_checkpoint");

  const auto scene_dirs = list_scenes(data);
  std::vector<EvalTriple> triples;
  for (const auto& d : scene_dirs) triples.push_back(load_triple(d));

  std::vector<std::string> spectrum_names{"reference", "ndvi", "bicubic"};
  for (const auto& m : methods) {
    if (std::find(spectrum_names.begin(), spectrum_names.end(), m) == spectrum_names.end()) {
      spectrum_names.push_back(m);
    }
  }

  const std::size_t n = triples.size();
  std::vector<SceneResult> results(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::size_t error_scene = n;

  const auto worker = [&] {
    std::size_t i = n;
    try {
      MethodContext ctx = make_context(cfg, methods, "sif_checkpoint", "sc_checkpoint");
      while (!failed.load() && (i = next.fetch_add(1)) < n) {
        const EvalTriple& t = triples[i];
        const Grid2D bic = baselines::bicubic_baseline(t.pair);
        SceneResult res;
        std::vector<Grid2D> images(spectrum_names.size());
        images[0] = t.ref_hr;
        images[1] = t.pair.ndvi_hr;
        images[2] = bic;
        for (const auto& m : methods) {
          const Grid2D sr = m == "bicubic" ? bic : sharpen_with(m, t, ctx);
          res.scores.push_back(metrics::score_scene(sr, t.ref_hr, bic));
          const auto slot = std::find(spectrum_names.begin(), spectrum_names.end(), m) - spectrum_names.begin();
          if (slot > 2) images[static_cast<std::size_t>(slot)] = sr;
        }
        for (const auto& img : images) {
          res.spectra.push_back(metrics::attenuation_spectrum(metrics::center_square(img)));
        }
        results[i] = std::move(res);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      // Report the failure of the earliest scene so the error does not depend on scheduling.
      if (!error || i < error_scene) {
        error = std::current_exception();
        error_scene = i;
      }
      failed.store(true);
    }
  };
  const std::size_t jobs = std::min<std::size_t>(static_cast<std::size_t>(jobs_cfg), n);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);

  std::string csv = std::string("# ") + kBenchmarkSchema + " " + metrics::kSpectralScoreVersion + "\n";
  csv += "scene,method,RMSE,RMSE75-100,SSIM,LPIPS,FRR,FRO,RMSE_F\n";
  out << "method      RMSE      RMSE75    SSIM     FRR      FRO      RMSE_F\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<std::array<double, 6>> rows;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = results[i].scores[m];
      append_scores(csv, scene_dirs[i].filename().string(), methods[m], s);
      rows.push_back({s.rmse, s.rmse_q75, s.ssim, s.frr, s.fro, s.rmse_f});
    }
    std::array<double, 6> mean{}, sd{};
    for (std::size_t c = 0; c < 6; ++c) {
      for (const auto& r : rows) mean[c] += r[c];
      mean[c] /= static_cast<double>(n);
      for (const auto& r : rows) sd[c] += (r[c] - mean[c]) * (r[c] - mean[c]);
      sd[c] = n > 1 ? std::sqrt(sd[c] / static_cast<double>(n - 1)) : 0.0;
    }
    const auto as_scores = [](const std::array<double, 6>& a) {
      return metrics::Scores{a[0], a[1], a[2], a[3], a[4], a[5]};
    };
    append_scores(csv, "mean", methods[m], as_scores(mean));
    append_scores(csv, "std", methods[m], as_scores(sd));
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %8.4f  %8.4f  %7.4f  %7.4f  %7.4f  %8.4f\n",
                  methods[m].c_str(), mean[0], mean[1], mean[2], mean[3], mean[4], mean[5]);
    out << line;
  }

  RunRecord rec;
  fs::create_directories(dir);
  const fs::path table = dir / "benchmark.csv";
  write_atomic(table, csv);
  rec.outputs.push_back(table.string());
  for (std::size_t k = 0; k < spectrum_names.size(); ++k) {
    const fs::path p = dir / ("spectra_" + spectrum_names[k] + ".csv");
    write_atomic(p, spectrum_csv(mean_spectrum(results, k, spectrum_names[k])));
    rec.outputs.push_back(p.string());
  }
  out << "benchmark: " << n << " scenes -> " << table.string() << "\n";

  rec.manifest = dir / "manifest.json";
  rec.inputs.push_back(data.string());
  for (const char* key : {"sif_checkpoint", "sc_checkpoint"}) {
    const std::string p = optional_string(cfg, key);
    if (!p.empty()) rec.inputs.push_back(p);
  }
  return rec;
}

// ---- argument handling ---------------------------------------------------------

json defaults_for(const std::string& command) {
  if (command == "synth") return {{"count", 20}, {"synth", datagen::to_json(datagen::SynthConfig{})}};
  if (command == "train") {
    return {{"mode", "sif1"},
            {"patch", 0},
            {"mtf_sigma_px", -1.0},
            {"sif", json::object()},
            {"unet", unet::to_json(unet::UNetConfig{})},
            {"train", unet::to_json(unet::TrainConfig{})}};
  }
  const json methods_common{{"sif", {{"preset", "sif1"}}},
                            {"solve", varsolve::to_json(varsolve::SolveConfig{})},
                            {"baselines", baselines::to_json(baselines::BaselineConfig{})}};
  if (command == "sharpen") {
    json j = methods_common;
    j["checkpoint"] = "";
    return j;
  }
  if (command == "benchmark") {
    json j = methods_common;
    j["methods"] = {"bicubic", "tsharp", "atprk"};
    j["jobs"] = 1;
    j["sif_checkpoint"] = "";
    j["sc_checkpoint"] = "";
    return j;
  }
  if (command == "spectra") return {{"hann", false}};
  return json::object();
}

void absolutize(json& cfg) {
  for (const auto& key : kPathKeys) {
    if (cfg.contains(key) && cfg.at(key).is_string() && !cfg.at(key).get<std::string>().empty()) {
      cfg[key] = fs::absolute(cfg.at(key).get<std::string>()).lexically_normal().string();
    }
  }
}

template <class T>
void override_option(CLI::App* sub, const std::string& flag, const std::string& pointer, json& ov,
                     const std::string& help) {
  sub->add_option_function<T>(
      flag, [&ov, pointer](const T& v) { ov[json::json_pointer(pointer)] = v; }, help);
}

template <class T>
void override_list(CLI::App* sub, const std::string& flag, const std::string& pointer, json& ov,
                   const std::string& help) {
  sub->add_option_function<std::vector<T>>(
         flag, [&ov, pointer](const std::vector<T>& v) { ov[json::json_pointer(pointer)] = v; }, help)
      ->delimiter(',');
}

}  // namespace

// ---- public helpers ------------------------------------------------------------

void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string spectrum_csv(const metrics::AttenuationSpectrum& spec) {
  std::string csv = "nu_cycles_per_px,nu_per_m,dB\n";
  for (std::size_t k = 0; k < spec.db.size(); ++k) {
    csv += fmt(spec.nu_cycles_per_px(k)) + "," + fmt(spec.nu_per_m(k)) + "," + fmt(spec.db[k]) + "\n";
  }
  return csv;
}

std::vector<fs::path> list_scenes(const fs::path& eval_dir) {
  if (!fs::is_directory(eval_dir)) throw DataError("not a directory: " + eval_dir.string());
  std::vector<fs::path> scenes;
  for (const auto& entry : fs::directory_iterator(eval_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "lst_lr.f32")) scenes.push_back(entry.path());
  }
  if (scenes.empty()) throw DataError("no scene directories in " + eval_dir.string());
  std::sort(scenes.begin(), scenes.end());
  return scenes;
}

ScenePair load_pair(const fs::path& scene_dir) {
  ScenePair p;
  p.lst_lr = load_raster(scene_dir / "lst_lr.f32");
  p.ndvi_hr = load_raster(scene_dir / "ndvi_hr.f32");
  p.scale_factor = scale_of(p.lst_lr, p.ndvi_hr);
  p.validate();
  return p;
}

EvalTriple load_triple(const fs::path& scene_dir) {
  const fs::path ref = scene_dir / "ref_hr.f32";
  if (!fs::exists(ref)) throw DataError("missing reference raster " + ref.string());
  EvalTriple t;
  t.pair = load_pair(scene_dir);
  t.ref_hr = load_raster(ref);
  t.validate();
  return t;
}

void save_triple(const EvalTriple& triple, const fs::path& scene_dir) {
  fs::create_directories(scene_dir);
  save_raster(triple.pair.lst_lr, scene_dir / "lst_lr.f32");
  save_raster(triple.pair.ndvi_hr, scene_dir / "ndvi_hr.f32");
  save_raster(triple.ref_hr, scene_dir / "ref_hr.f32");
}

json execute(const std::string& command, const json& config, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  if (command == "synth") {
    rec = cmd_synth(config, out);
  } else if (command == "train") {
    rec = cmd_train(config, out);
  } else if (command == "sharpen") {
    rec = cmd_sharpen(config, out);
  } else if (command == "evaluate") {
    rec = cmd_evaluate(config, out);
  } else if (command == "benchmark") {
    rec = cmd_benchmark(config, out);
  } else if (command == "spectra") {
    rec = cmd_spectra(config, out);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json manifest{{"format", kManifestFormat},
                {"version", 1},
                {"command", command},
                {"config", config},
                {"resolved", rec.resolved},
                {"inputs", rec.inputs},
                {"outputs", rec.outputs},
                {"seed", rec.seed},
                {"wall_time_s", wall},
                {"library_version", kVersion}};
  if (!rec.manifest.empty()) write_atomic(rec.manifest, manifest.dump(2) + "\n");
  return manifest;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Thermal sharpening of low-resolution LST guided by high-resolution NDVI", "sifsr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path;
  json ov = json::object();
  std::string manifest_path;
  std::string replay_out;

  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON config merged over the command defaults");
  };

  auto* synth = app.add_subcommand("synth", "Generate synthetic evaluation scenes");
  add_config(synth);
  override_option<std::string>(synth, "--out", "/out", ov, "Output directory");
  override_option<int>(synth, "--count", "/count", ov, "Number of scenes");
  override_option<std::uint64_t>(synth, "--seed", "/synth/seed", ov, "Seed of the first scene");
  override_option<int>(synth, "--hr-size", "/synth/hr_size", ov, "Fine-grid size in pixels");
  override_option<int>(synth, "--scale-factor", "/synth/scale_factor", ov, "Scale factor r");
  override_option<double>(synth, "--gamma-true", "/synth/gamma_true", ov, "Fine-scale LST/NDVI coupling");
  override_option<double>(synth, "--noise-std", "/synth/noise_std", ov, "LST noise in K");

  auto* train = app.add_subcommand("train", "Train a U-Net (sif1, sif2 or sc mode)");
  add_config(train);
  override_option<std::string>(train, "--mode", "/mode", ov, "sif1, sif2 or sc");
  override_option<std::string>(train, "--data", "/data", ov, "Scene directory");
  override_option<std::string>(train, "--out", "/out", ov, "Checkpoint path (.json)");
  override_option<int>(train, "--patch", "/patch", ov, "Coarse patch size; 0 trains on whole scenes");
  override_option<int>(train, "--epochs", "/train/epochs", ov, "Epochs");
  override_option<int>(train, "--batch", "/train/batch", ov, "Batch size");
  override_option<double>(train, "--lr", "/train/lr", ov, "Learning rate");
  override_option<std::uint64_t>(train, "--seed", "/train/seed", ov, "Shuffle seed");
  override_option<std::uint64_t>(train, "--init-seed", "/unet/seed", ov, "Weight initialization seed");
  override_list<int>(train, "--widths", "/unet/widths", ov, "Width plan, e.g. 8,16,32,64");
  override_option<double>(train, "--alpha", "/sif/alpha", ov, "Objective weight alpha (sif modes)");
  override_option<double>(train, "--gamma", "/sif/gamma", ov, "Texture scale gamma (sif modes)");

  auto* sharpen = app.add_subcommand("sharpen", "Sharpen one scene");
  add_config(sharpen);
  override_option<std::string>(sharpen, "--method", "/method", ov,
                               "bicubic, tsharp, atprk, sif-var, sif-net, sc-net or reference");
  override_option<std::string>(sharpen, "--scene", "/scene", ov, "Scene directory");
  override_option<std::string>(sharpen, "--out", "/out", ov, "Output raster (.f32)");
  override_option<std::string>(sharpen, "--checkpoint", "/checkpoint", ov, "Network checkpoint");
  override_option<std::string>(sharpen, "--preset", "/sif/preset", ov, "sif1 or sif2 (sif-var)");
  override_option<int>(sharpen, "--max-iters", "/solve/max_iters", ov, "Solver iterations (sif-var)");
  override_option<double>(sharpen, "--gamma", "/sif/gamma", ov, "Texture scale gamma (sif-var)");

  auto* evaluate = app.add_subcommand("evaluate", "Score a sharpened raster against a scene reference");
  add_config(evaluate);
  override_option<std::string>(evaluate, "--sr", "/sr", ov, "Sharpened raster");
  override_option<std::string>(evaluate, "--scene", "/scene", ov, "Scene directory with ref_hr");
  override_option<std::string>(evaluate, "--out", "/out", ov, "Optional JSON output");

  auto* bench = app.add_subcommand("benchmark", "Score methods over an evaluation set");
  add_config(bench);
  override_option<std::string>(bench, "--data", "/data", ov, "Evaluation set directory");
  override_option<std::string>(bench, "--out", "/out", ov, "Output directory");
  override_list<std::string>(bench, "--methods", "/methods", ov, "Comma-separated methods");
  override_option<std::string>(bench, "--sif-checkpoint", "/sif_checkpoint", ov, "sif1/sif2 network");
  override_option<std::string>(bench, "--sc-checkpoint", "/sc_checkpoint", ov, "sc network");
  override_option<std::string>(bench, "--preset", "/sif/preset", ov, "sif1 or sif2 (sif-var)");
  override_option<int>(bench, "--max-iters", "/solve/max_iters", ov, "Solver iterations (sif-var)");
  override_option<double>(bench, "--gamma", "/sif/gamma", ov, "Texture scale gamma (sif-var)");
  override_option<int>(bench, "--jobs", "/jobs", ov, "Scenes processed in parallel");

  auto* spectra = app.add_subcommand("spectra", "Attenuation spectrum of one raster");
  add_config(spectra);
  override_option<std::string>(spectra, "--image", "/image", ov, "Input raster");
  override_option<std::string>(spectra, "--out", "/out", ov, "Output CSV");
  spectra->add_flag_callback("--hann", [&ov] { ov["hann"] = true; }, "Taper with a Hann window");

  auto* replay = app.add_subcommand("replay", "Re-run the config recorded in a run manifest");
  replay->add_option("--manifest", manifest_path, "Run manifest")->required();
  replay->add_option("--out", replay_out, "Redirect the output path");

  std::vector<std::string> argv_store{"sifsr"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    std::string run_command = command;
    json cfg;
    if (command == "replay") {
      json m;
      try {
        m = read_json(manifest_path);
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
      if (m.value("format", std::string()) != kManifestFormat) {
        throw ConfigError(manifest_path + " is not a run manifest");
      }
      run_command = m.at("command").get<std::string>();
      cfg = m.at("config");
      if (!replay_out.empty()) cfg["out"] = replay_out;
    } else {
      cfg = defaults_for(command);
      if (!config_path.empty()) {
        json file;
        try {
          file = read_json(config_path);
        } catch (const DataError& e) {
          throw ConfigError(e.what());
        }
        if (!file.is_object()) throw ConfigError(config_path + " must hold a JSON object");
        cfg.merge_patch(file);
      }
      cfg.merge_patch(ov);
    }
    absolutize(cfg);
    execute(run_command, cfg, out);
    return 0;
  } catch (const ConfigError& e) {
    err << "sifsr: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "sifsr: data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "sifsr: numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const nlohmann::json::exception& e) {
    err << "sifsr: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "sifsr: data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "sifsr: error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sifsr::cli
