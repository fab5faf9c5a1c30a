#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "sifsr/baselines.hpp"
#include "sifsr/metrics.hpp"

using namespace sifsr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("sifsr_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome sifsr_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const fs::path& p) { return json::parse(slurp(p)); }

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

struct Row {
  std::string scene;
  std::string method;
  std::vector<std::string> cells;  // RMSE .. RMSE_F, 7 columns
};

// Skips the schema comment and the header.
std::vector<Row> read_rows(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::string line;
  std::vector<Row> rows;
  int n = 0;
  while (std::getline(in, line)) {
    if (n++ < 2) continue;
    std::vector<std::string> parts;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) parts.push_back(cell);
    if (line.back() == ',') parts.push_back("");
    REQUIRE(parts.size() == 9);
    rows.push_back({parts[0], parts[1], {parts.begin() + 2, parts.end()}});
  }
  return rows;
}

void synth_set(const TempDir& dir, const std::string& name, int count, int hr_size, int seed) {
  const auto o = sifsr_cli({"synth", "--out", dir / name, "--count", std::to_string(count), "--hr-size",
                            std::to_string(hr_size), "--seed", std::to_string(seed)});
  REQUIRE_MESSAGE(o.code == 0, o.err);
}

}  // namespace

TEST_CASE("synth writes scene triples and a complete manifest") {
  TempDir dir("synth");
  synth_set(dir, "a", 3, 32, 40);
  const auto scenes = cli::list_scenes(dir / "a");
  REQUIRE(scenes.size() == 3);
  CHECK(scenes[0].filename() == "scene_000");
  const EvalTriple t = cli::load_triple(scenes[1]);
  CHECK(t.pair.scale_factor == 4);
  CHECK(t.pair.ndvi_hr.width() == 32);
  CHECK(t.pair.lst_lr.width() == 8);
  CHECK(read_json_file(scenes[1] / "scene.json")["synth"]["seed"] == 41);

  const json m = read_json_file(dir / "a/manifest.json");
  CHECK(m["format"] == cli::kManifestFormat);
  CHECK(m["command"] == "synth");
  CHECK(m["config"]["count"] == 3);
  CHECK(m["config"]["synth"]["hr_size"] == 32);
  CHECK(m["seed"] == 40);
  CHECK(m["outputs"].size() == 3);
  CHECK(m["library_version"] == cli::kVersion);
  CHECK(m["wall_time_s"].get<double>() >= 0.0);
  CHECK(fs::path(m["config"]["out"].get<std::string>()).is_absolute());
  CHECK_FALSE(fs::exists(dir / "a/manifest.json.tmp"));

  synth_set(dir, "b", 3, 32, 40);
  for (const char* f : {"lst_lr.f32", "ndvi_hr.f32", "ref_hr.f32", "ref_hr.json"}) {
    CHECK(slurp(dir.path / "a/scene_002" / f) == slurp(dir.path / "b/scene_002" / f));
  }
}

TEST_CASE("config file is merged under command-line overrides") {
  TempDir dir("config");
  write_file(dir.path / "cfg.json", R"({"count": 2, "synth": {"hr_size": 32, "seed": 7}})");
  auto o = sifsr_cli({"synth", "--config", dir / "cfg.json", "--out", dir / "a"});
  REQUIRE(o.code == 0);
  CHECK(cli::list_scenes(dir / "a").size() == 2);
  CHECK(read_json_file(dir / "a/scene_000/scene.json")["synth"]["seed"] == 7);

  o = sifsr_cli({"synth", "--config", dir / "cfg.json", "--out", dir / "b", "--count", "3"});
  REQUIRE(o.code == 0);
  CHECK(cli::list_scenes(dir / "b").size() == 3);
  CHECK(read_json_file(dir / "b/scene_000/scene.json")["synth"]["hr_size"] == 32);
}

TEST_CASE("exit codes follow the error class") {
  TempDir dir("codes");
  synth_set(dir, "eval", 2, 32, 1);

  CHECK(sifsr_cli({}).code == 2);
  CHECK(sifsr_cli({"benchmark", "--bogus-flag"}).code == 2);
  CHECK(sifsr_cli({"benchmark", "-o", dir / "x"}).code == 2);  // long-form flags only
  CHECK(sifsr_cli({"--version"}).code == 0);
  CHECK(sifsr_cli({"synth", "--out", dir / "s", "--count", "0"}).code == 2);
  CHECK(sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "b", "--methods", "magic"}).code == 2);
  CHECK(sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "b", "--methods",
                   "bicubic,bicubic"}).code == 2);

  // network methods need a checkpoint
  auto o = sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "b", "--methods", "sif-net"});
  CHECK(o.code == 2);
  CHECK(o.err.find("sif_checkpoint") != std::string::npos);
  CHECK(sifsr_cli({"sharpen", "--method", "sc-net", "--scene", dir / "eval/scene_000", "--out",
                   dir / "x.f32"}).code == 2);
  write_file(dir.path / "broken.json", "{ not json");
  CHECK(sifsr_cli({"synth", "--config", dir / "broken.json", "--out", dir / "s"}).code == 2);

  CHECK(sifsr_cli({"benchmark", "--data", dir / "missing", "--out", dir / "b"}).code == 3);
  fs::remove(dir.path / "eval/scene_001/ref_hr.f32");
  o = sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "b"});
  CHECK(o.code == 3);
  CHECK(o.err.find("reference") != std::string::npos);
  CHECK(sifsr_cli({"spectra", "--image", dir / "nothing.f32", "--out", dir / "s.csv"}).code == 3);

  // divergent training is a numeric failure
  write_file(dir.path / "diverge.json",
             R"({"unet": {"widths": [4, 8, 8, 16]}, "train": {"optimizer": "sgd", "lr": 1e150, "epochs": 3, "batch": 2}})");
  synth_set(dir, "train", 4, 32, 50);
  o = sifsr_cli({"train", "--config", dir / "diverge.json", "--data", dir / "train", "--out",
                 dir / "net.json"});
  CHECK(o.code == 4);
  CHECK_FALSE(fs::exists(dir.path / "net.json"));
}

TEST_CASE("benchmark: bicubic has zero FRR/FRO, the reference scores perfectly") {
  TempDir dir("bench");
  synth_set(dir, "eval", 4, 64, 300);
  const auto o = sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "b", "--methods",
                            "bicubic,reference,tsharp"});
  REQUIRE_MESSAGE(o.code == 0, o.err);

  const std::string csv = slurp(dir.path / "b/benchmark.csv");
  CHECK(csv.rfind("# sifsr-benchmark-v1 frr-fro-v1\nscene,method,RMSE,RMSE75-100,SSIM,LPIPS,FRR,FRO,RMSE_F\n", 0) == 0);
  const auto rows = read_rows(dir.path / "b/benchmark.csv");
  REQUIRE(rows.size() == 3 * (4 + 2));
  int bicubic = 0, reference = 0;
  for (const auto& r : rows) {
    CHECK(r.cells[3].empty());  // LPIPS is not computed
    if (r.method == "bicubic") {
      ++bicubic;
      CHECK(r.cells[4] == "0");
      CHECK(r.cells[5] == "0");
    }
    if (r.method == "reference") {
      ++reference;
      CHECK(r.cells[0] == "0");  // RMSE
      CHECK(r.cells[1] == "0");  // RMSE75-100
      CHECK(r.cells[2] == (r.scene == "std" ? "0" : "1"));
      CHECK(r.cells[4] == (r.scene == "std" ? "0" : "1"));
      CHECK(r.cells[5] == "0");
      CHECK(r.cells[6] == "0");
    }
  }
  CHECK(bicubic == 6);
  CHECK(reference == 6);
  CHECK(rows[4].scene == "mean");
  CHECK(rows[5].scene == "std");

  // per-scene rows equal the library scores of the stored rasters
  const EvalTriple t = cli::load_triple(dir.path / "eval/scene_002");
  const Grid2D bic = baselines::bicubic_baseline(t.pair);
  const auto s = metrics::score_scene(baselines::tsharp_sharpen(t.pair), t.ref_hr, bic);
  const Row* ts = nullptr;
  for (const auto& r : rows) {
    if (r.method == "tsharp" && r.scene == "scene_002") ts = &r;
  }
  REQUIRE(ts != nullptr);
  CHECK(std::stod(ts->cells[0]) == doctest::Approx(s.rmse).epsilon(1e-8));
  CHECK(std::stod(ts->cells[2]) == doctest::Approx(s.ssim).epsilon(1e-8));
  CHECK(std::stod(ts->cells[4]) == doctest::Approx(s.frr).epsilon(1e-8));
  CHECK(std::stod(ts->cells[6]) == doctest::Approx(s.rmse_f).epsilon(1e-8));

  // mean spectra for every method plus reference and NDVI
  for (const char* name : {"reference", "ndvi", "bicubic", "tsharp"}) {
    const std::string sp = slurp(dir.path / "b" / (std::string("spectra_") + name + ".csv"));
    CHECK(sp.rfind("nu_cycles_per_px,nu_per_m,dB\n0,0,0\n", 0) == 0);
  }
  CHECK(slurp(dir.path / "b/spectra_reference.csv").size() > 200);
}

TEST_CASE("benchmark output is independent of --jobs and reproduced from the manifest") {
  TempDir dir("determinism");
  synth_set(dir, "eval", 5, 32, 600);
  auto o = sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "one", "--methods",
                      "bicubic,tsharp,atprk,sif-var", "--max-iters", "60", "--jobs", "1"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  o = sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "three", "--methods",
                 "bicubic,tsharp,atprk,sif-var", "--max-iters", "60", "--jobs", "3"});
  REQUIRE(o.code == 0);
  o = sifsr_cli({"replay", "--manifest", dir / "one/manifest.json", "--out", dir / "again"});
  REQUIRE_MESSAGE(o.code == 0, o.err);

  const json m = read_json_file(dir / "one/manifest.json");
  CHECK(m["command"] == "benchmark");
  CHECK(m["config"]["solve"]["max_iters"] == 60);
  const json again = read_json_file(dir / "again/manifest.json");
  CHECK(again["config"]["methods"] == m["config"]["methods"]);

  int compared = 0;
  for (const auto& entry : fs::directory_iterator(dir.path / "one")) {
    if (entry.path().extension() != ".csv") continue;
    const auto leaf = entry.path().filename();
    CHECK(slurp(entry.path()) == slurp(dir.path / "three" / leaf));
    CHECK(slurp(entry.path()) == slurp(dir.path / "again" / leaf));
    ++compared;
  }
  CHECK(compared == 1 + 6);  // table + reference, ndvi, bicubic, tsharp, atprk, sif-var
}

TEST_CASE("sharpen, evaluate and spectra agree with the library") {
  TempDir dir("single");
  synth_set(dir, "eval", 1, 64, 77);
  const auto scene = dir / "eval/scene_000";
  REQUIRE(sifsr_cli({"sharpen", "--method", "atprk", "--scene", scene, "--out", dir / "sr.f32"}).code == 0);
  const json m = read_json_file(dir / "sr.manifest.json");
  CHECK(m["command"] == "sharpen");
  CHECK(m["outputs"][0] == dir / "sr.f32");

  const Grid2D sr = load_raster(dir / "sr.f32");
  const EvalTriple t = cli::load_triple(scene);
  const Grid2D expect = baselines::atprk_sharpen(t.pair);
  double worst = 0.0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    worst = std::max(worst, std::abs(sr.values()[i] - static_cast<double>(static_cast<float>(expect.values()[i]))));
  }
  CHECK(worst == 0.0);
  CHECK(sr.units() == "K");

  const auto o = sifsr_cli({"evaluate", "--sr", dir / "sr.f32", "--scene", scene, "--out", dir / "scores.json"});
  REQUIRE(o.code == 0);
  const json scores = read_json_file(dir / "scores.json");
  const auto s = metrics::score_scene(sr, t.ref_hr, baselines::bicubic_baseline(t.pair));
  CHECK(scores["rmse"].get<double>() == doctest::Approx(s.rmse).epsilon(1e-12));
  CHECK(scores["frr"].get<double>() == doctest::Approx(s.frr).epsilon(1e-12));
  CHECK(scores["spectral_score_version"] == metrics::kSpectralScoreVersion);
  CHECK(json::parse(o.out) == scores);

  REQUIRE(sifsr_cli({"spectra", "--image", scene + "/ndvi_hr.f32", "--out", dir / "ndvi.csv"}).code == 0);
  CHECK(slurp(dir.path / "ndvi.csv") ==
        cli::spectrum_csv(metrics::attenuation_spectrum(metrics::center_square(t.pair.ndvi_hr))));
  CHECK(fs::exists(dir.path / "ndvi.manifest.json"));
}

TEST_CASE("trained networks run through sharpen and benchmark; golden table") {
  TempDir dir("nets");
  synth_set(dir, "train", 6, 32, 900);
  synth_set(dir, "eval", 20, 32, 5000);
  write_file(dir.path / "small.json",
             R"({"unet": {"widths": [4, 8, 8, 16]}, "train": {"epochs": 4, "batch": 3, "lr": 0.001}})");
  auto o = sifsr_cli({"train", "--config", dir / "small.json", "--mode", "sif1", "--data", dir / "train",
                      "--out", dir / "sif.json"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  o = sifsr_cli({"train", "--config", dir / "small.json", "--mode", "sc", "--data", dir / "train",
                 "--out", dir / "sc.json"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(fs::exists(dir.path / "sif.bin"));
  CHECK(fs::exists(dir.path / "sif.history.csv"));
  const json tm = read_json_file(dir / "sif.manifest.json");
  CHECK(tm["resolved"]["unet"]["widths"] == json::array({4, 8, 8, 16}));
  CHECK(tm["resolved"]["sif"]["gamma"] == -0.5);

  // a checkpoint of the other mode is rejected
  CHECK(sifsr_cli({"sharpen", "--method", "sc-net", "--checkpoint", dir / "sif.json", "--scene",
                   dir / "eval/scene_000", "--out", dir / "x.f32"}).code == 2);
  o = sifsr_cli({"sharpen", "--method", "sif-net", "--checkpoint", dir / "sif.json", "--scene",
                 dir / "eval/scene_000", "--out", dir / "x.f32"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(load_raster(dir / "x.f32").width() == 32);

  // retraining from the manifest reproduces the checkpoint payload
  REQUIRE(sifsr_cli({"replay", "--manifest", dir / "sif.manifest.json", "--out", dir / "sif2.json"}).code == 0);
  CHECK(slurp(dir.path / "sif.bin") == slurp(dir.path / "sif2.bin"));

  o = sifsr_cli({"benchmark", "--data", dir / "eval", "--out", dir / "b", "--methods",
                 "bicubic,tsharp,atprk,sif-var,sif-net,sc-net", "--sif-checkpoint", dir / "sif.json",
                 "--sc-checkpoint", dir / "sc.json", "--max-iters", "100", "--jobs", "2"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const auto rows = read_rows(dir.path / "b/benchmark.csv");
  CHECK(rows.size() == 6 * 22);

  // Golden table recorded at the first verified run of this configuration.
  const fs::path golden = fs::path(SIFSR_TEST_DATA_DIR) / "benchmark_golden.csv";
  if (!fs::exists(golden)) {
    fs::copy_file(dir.path / "b/benchmark.csv", golden);
    WARN_MESSAGE(false, "golden benchmark table created; rerun to compare");
    return;
  }
  const auto expected = read_rows(golden);
  REQUIRE(expected.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].scene == expected[i].scene);
    CHECK(rows[i].method == expected[i].method);
    for (std::size_t c = 0; c < 7; ++c) {
      if (c == 3) continue;
      const double a = std::stod(rows[i].cells[c]);
      const double b = std::stod(expected[i].cells[c]);
      CHECK_MESSAGE(std::abs(a - b) <= 1e-7 * std::max(1.0, std::abs(b)),
                    rows[i].scene << " " << rows[i].method << " column " << c);
    }
  }
}
