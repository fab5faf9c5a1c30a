#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "sifsr/metrics.hpp"
#include "sifsr/raster.hpp"

// Command-line front end. Every command resolves its flags and config file
// into one JSON config, executes it and records it in a run manifest; replaying
// a manifest executes the same config again.
namespace sifsr::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kBenchmarkSchema = "sifsr-benchmark-v1";
inline constexpr const char* kManifestFormat = "sifsr-run-manifest";

// Parses and runs one invocation; args excludes the program name. Returns the
// process exit code: 0 ok, 2 bad config, 3 data error, 4 numeric failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Executes a resolved command config and writes its manifest. Throws the
// library error types.
nlohmann::json execute(const std::string& command, const nlohmann::json& config,
                       std::ostream& out);

// ---- scene directories -------------------------------------------------------

// A scene directory holds lst_lr.f32, ndvi_hr.f32 and optionally ref_hr.f32,
// each with its JSON sidecar.
std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& eval_dir);
ScenePair load_pair(const std::filesystem::path& scene_dir);
EvalTriple load_triple(const std::filesystem::path& scene_dir);
void save_triple(const EvalTriple& triple, const std::filesystem::path& scene_dir);

// Writes to a sibling temporary file and renames it over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);

std::string spectrum_csv(const metrics::AttenuationSpectrum& spec);

}  // namespace sifsr::cli
