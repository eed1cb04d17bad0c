#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixsga/config.hpp"

namespace mixsga::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kInvalidConfig = 2,
  kMissingCheckpoint = 3,
};

/// Flags shared by every command that builds a RunConfig. Unset fields keep
/// the value from --config (or the defaults).
struct Overrides {
  std::optional<std::size_t> steps, epochs, d_model, heads, n_layers, seq_len, batch_size;
  std::optional<double> alpha, learning_rate, keep_ratio;
  std::optional<std::string> ratios, routing_mode;
  std::optional<std::uint64_t> seed;
  bool no_aux = false;
};

/// "0.3,0.1,0.6" -> {0.3, 0.1, 0.6}.
std::vector<double> parse_ratio_list(const std::string& text);
/// "0,0,1;0.1,0.1,0.8" -> two ratio vectors.
std::vector<std::vector<double>> parse_ratio_sets(const std::string& text);

RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path, const Overrides& o);

/// KV size relative to full-head storage implied by the capacity ratios:
/// sum_e ratio_e / 2^(e-1).
double formula_kv_ratio(const std::vector<double>& ratios);
/// Formula ratio for a routing mode: forced baselines store H or H/2 heads.
double formula_kv_ratio(const RunConfig& cfg);

struct EvalRow {
  std::string config;
  std::string checkpoint;
  std::string routing_mode;
  std::vector<double> ratios;
  std::optional<double> keep_ratio;
  double ppl = 0.0;
  double kv_ratio = 0.0;
  double measured_kv_ratio = 0.0;
  double agreement = 0.0;
  std::size_t tokens = 0;
};
nlohmann::json to_json(const EvalRow& r);
EvalRow eval_row_from_json(const nlohmann::json& j);

/// One sweep row per line: config,ppl,kv_ratio,measured_kv_ratio,agreement,
/// ordered by kv_ratio then ppl.
void write_sweep_csv(const std::filesystem::path& path, std::vector<EvalRow> rows);

int run(int argc, char** argv);

}  // namespace mixsga::cli
