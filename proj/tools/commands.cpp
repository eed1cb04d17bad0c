#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "mixsga/checkpoint.hpp"
#include "mixsga/kv_cache.hpp"
#include "mixsga/model.hpp"
#include "mixsga/router.hpp"
#include "mixsga/train.hpp"

namespace mixsga::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string dump_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

enum class Precision { f32, f64 };

Precision precision_from_env() {
  const char* v = std::getenv("MIXSGA_PRECISION");
  if (!v || std::string(v).empty() || std::string(v) == "f32") return Precision::f32;
  if (std::string(v) == "f64") return Precision::f64;
  throw ConfigError(std::string("MIXSGA_PRECISION must be f32 or f64, got '") + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string ratio_label(const std::vector<double>& r) {
  std::ostringstream os;
  for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "/" : "") << r[i];
  return os.str();
}

std::string point_label(const RunConfig& cfg, std::optional<double> keep) {
  std::string s = std::string(to_string(cfg.routing_mode)) + ":" + ratio_label(cfg.ratios);
  if (keep) {
    std::ostringstream os;
    os << ":keep=" << *keep;
    s += os.str();
  }
  return s;
}

struct Data {
  Corpus train;
  std::vector<int> eval;
};

// The held-out slice is the tail of the corpus unless a separate file is given.
Data load_data(const fs::path& corpus, const std::optional<fs::path>& eval_corpus, double holdout) {
  Data d;
  auto all = Corpus::load(corpus);
  if (eval_corpus) {
    d.train = std::move(all);
    d.eval = Corpus::load(*eval_corpus).tokens;
    return d;
  }
  if (holdout <= 0.0 || holdout >= 1.0) throw ConfigError("holdout fraction must lie in (0, 1)");
  const auto split_at = static_cast<std::size_t>(static_cast<double>(all.size()) * (1.0 - holdout));
  d.train.tokens.assign(all.tokens.begin(), all.tokens.begin() + static_cast<std::ptrdiff_t>(split_at));
  d.eval.assign(all.tokens.begin() + static_cast<std::ptrdiff_t>(split_at), all.tokens.end());
  return d;
}

json metrics_json(const StepMetrics& m) {
  return json{{"step", m.step},
              {"lm_loss", m.lm_loss},
              {"aux_loss", m.aux_loss},
              {"prefill_decode_agreement", m.prefill_decode_agreement},
              {"lr", m.learning_rate},
              {"grad_norm", m.grad_norm}};
}

template <typename T>
fs::path train_to(const RunConfig& cfg, const Corpus& corpus, const fs::path& out, bool quiet) {
  fs::create_directories(out);
  Model<T> model(cfg);
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.jsonl").string());
  const std::size_t total = total_steps(cfg, corpus.size());
  train(model, corpus, [&](const StepMetrics& m) {
    metrics << dump_line(metrics_json(m)) << '\n';
    if (!quiet && (m.step % 100 == 0 || m.step + 1 == total))
      std::cerr << "step " << m.step << "/" << total << " lm_loss " << std::fixed << std::setprecision(4)
                << m.lm_loss << " aux " << m.aux_loss << " agree " << m.prefill_decode_agreement << '\n';
  });
  const auto ckpt = out / "model.ckpt";
  model.save(ckpt);
  return ckpt;
}

std::span<const int> limit_windows(const std::vector<int>& tokens, std::size_t seq_len, std::size_t max_windows) {
  std::span<const int> s(tokens);
  if (max_windows && s.size() > max_windows * seq_len + 1) s = s.first(max_windows * seq_len + 1);
  return s;
}

// Prefill each window and read the caches back: the stored fraction of
// full-head KV, averaged over layers and windows.
template <typename T>
double measured_ratio(const Model<T>& model, std::span<const int> tokens, std::size_t max_windows) {
  const std::size_t len = model.config().seq_len;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s + len <= tokens.size() && (!max_windows || n < max_windows * model.config().n_layers);
       s += len) {
    auto state = model.start_decode();
    model.prefill(state, tokens.subspan(s, len));
    for (const auto& c : state.caches) {
      sum += c.memory_report().ratio;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

template <typename T>
EvalRow evaluate(const Model<T>& model, const std::vector<int>& tokens, std::optional<double> keep,
                 std::size_t max_windows, const std::string& checkpoint) {
  const auto& cfg = model.config();
  EvalRow row;
  row.config = point_label(cfg, keep);
  row.checkpoint = checkpoint;
  row.routing_mode = to_string(cfg.routing_mode);
  row.ratios = cfg.ratios;
  row.keep_ratio = keep;
  auto span = limit_windows(tokens, cfg.seq_len, max_windows);
  row.tokens = span.size();
  if (keep) {
    const EvictionPolicy policy{*keep, cfg.h2o_recent_window};
    row.ppl = streaming_perplexity(model, span, policy, max_windows, cfg.seed);
    auto dec = model.decode_sequence(span.first(std::min(span.size(), cfg.seq_len)), policy, cfg.seed);
    const auto& last = dec.kv_trace.back();
    row.measured_kv_ratio = last.ratio * static_cast<double>(last.live_tokens) /
                            static_cast<double>(dec.logits.size());
  } else {
    row.ppl = perplexity(model, span, cfg.seed);
    row.measured_kv_ratio = measured_ratio(model, span, max_windows);
  }
  row.kv_ratio = formula_kv_ratio(cfg) * keep.value_or(1.0);
  row.agreement = prefill_decode_agreement(model, span, max_windows).agreement;
  return row;
}

template <typename T>
Model<T> load_model(const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw CheckpointError("checkpoint '" + ckpt.string() + "' does not exist");
  return Model<T>::load(ckpt);
}

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--steps", o.steps, "Training steps (overrides epochs)");
  app->add_option("--epochs", o.epochs, "Training epochs");
  app->add_option("--alpha", o.alpha, "Consistency-loss weight");
  app->add_option("--ratios", o.ratios, "Expert capacity ratios, e.g. 0.3,0.1,0.6");
  app->add_option("--routing-mode", o.routing_mode, "learned, random, gqa_baseline or mha_baseline");
  app->add_flag("--no-aux", o.no_aux, "Disable the consistency loss (router stays frozen)");
  app->add_option("--keep-ratio", o.keep_ratio, "Heavy-hitter cache keep ratio in (0, 1]");
  app->add_option("--d-model", o.d_model, "Model width");
  app->add_option("--heads", o.heads, "Attention heads");
  app->add_option("--n-layers", o.n_layers, "Transformer blocks");
  app->add_option("--seq-len", o.seq_len, "Context length");
  app->add_option("--batch-size", o.batch_size, "Sequences per step");
  app->add_option("--lr", o.learning_rate, "Peak learning rate");
  app->add_option("--seed", o.seed, "Random seed");
}

struct Point {
  RunConfig cfg;
  fs::path dir;
};

void write_rows(const fs::path& path, const std::vector<EvalRow>& rows) {
  std::ofstream out(path);
  for (const auto& r : rows) out << dump_line(to_json(r)) << '\n';
}

std::vector<EvalRow> read_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("sweep point produced no results: " + path.string());
  std::vector<EvalRow> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(eval_row_from_json(json::parse(line)));
  return rows;
}

template <typename T>
std::vector<EvalRow> run_point(const RunConfig& cfg, const Data& data, const fs::path& dir,
                               const std::vector<double>& keeps, std::size_t max_windows) {
  const auto ckpt = train_to<T>(cfg, data.train, dir, true);
  auto model = Model<T>::load(ckpt);
  std::vector<EvalRow> rows;
  if (keeps.empty()) {
    rows.push_back(evaluate(model, data.eval, std::nullopt, max_windows, ckpt.string()));
  } else {
    for (double k : keeps) rows.push_back(evaluate(model, data.eval, k, max_windows, ckpt.string()));
  }
  write_rows(dir / "rows.jsonl", rows);
  return rows;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

fs::path self_executable(const char* argv0) {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  return ec ? fs::absolute(argv0) : p;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalidConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace

std::vector<double> parse_ratio_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split(text, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size()) throw ConfigError("cannot parse ratio '" + part + "' in '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty ratio list");
  return out;
}

std::vector<std::vector<double>> parse_ratio_sets(const std::string& text) {
  std::vector<std::vector<double>> out;
  for (const auto& set : split(text, ';')) out.push_back(parse_ratio_list(set));
  return out;
}

RunConfig resolve_config(const std::optional<fs::path>& config_path, const Overrides& o) {
  RunConfig c = config_path ? load_config(*config_path) : RunConfig{};
  if (o.steps) c.steps = *o.steps;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.ratios) {
    c.ratios = parse_ratio_list(*o.ratios);
    c.experts = c.ratios.size();
  }
  if (o.routing_mode) c.routing_mode = parse_routing_mode(*o.routing_mode);
  if (o.no_aux) c.aux_loss_enabled = false;
  if (o.keep_ratio) c.h2o_keep_ratio = *o.keep_ratio;
  if (o.d_model) c.d_model = *o.d_model;
  if (o.heads) c.heads = *o.heads;
  if (o.n_layers) c.n_layers = *o.n_layers;
  if (o.seq_len) c.seq_len = *o.seq_len;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.learning_rate) c.learning_rate = *o.learning_rate;
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

double formula_kv_ratio(const std::vector<double>& ratios) {
  double r = 0.0;
  for (std::size_t e = 0; e < ratios.size(); ++e) r += ratios[e] / static_cast<double>(std::size_t{1} << e);
  return r;
}

double formula_kv_ratio(const RunConfig& cfg) {
  switch (cfg.routing_mode) {
    case RoutingMode::mha_baseline: return 1.0;
    case RoutingMode::gqa_baseline: return 0.5;
    default: return formula_kv_ratio(cfg.ratios);
  }
}

json to_json(const EvalRow& r) {
  return json{{"config", r.config},
              {"checkpoint", r.checkpoint},
              {"routing_mode", r.routing_mode},
              {"ratios", r.ratios},
              {"keep_ratio", r.keep_ratio ? json(*r.keep_ratio) : json(nullptr)},
              {"ppl", r.ppl},
              {"kv_ratio", r.kv_ratio},
              {"measured_kv_ratio", r.measured_kv_ratio},
              {"agreement", r.agreement},
              {"tokens", r.tokens}};
}

EvalRow eval_row_from_json(const json& j) {
  EvalRow r;
  j.at("config").get_to(r.config);
  j.at("checkpoint").get_to(r.checkpoint);
  j.at("routing_mode").get_to(r.routing_mode);
  j.at("ratios").get_to(r.ratios);
  if (!j.at("keep_ratio").is_null()) r.keep_ratio = j.at("keep_ratio").get<double>();
  j.at("ppl").get_to(r.ppl);
  j.at("kv_ratio").get_to(r.kv_ratio);
  j.at("measured_kv_ratio").get_to(r.measured_kv_ratio);
  j.at("agreement").get_to(r.agreement);
  j.at("tokens").get_to(r.tokens);
  return r;
}

void write_sweep_csv(const fs::path& path, std::vector<EvalRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
    if (a.kv_ratio != b.kv_ratio) return a.kv_ratio < b.kv_ratio;
    return a.ppl < b.ppl;
  });
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "config,ppl,kv_ratio,measured_kv_ratio,agreement\n";
  out << std::setprecision(10);
  for (const auto& r : rows)
    out << r.config << ',' << r.ppl << ',' << r.kv_ratio << ',' << r.measured_kv_ratio << ',' << r.agreement
        << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Routed grouped-attention language-model lab"};
  app.require_subcommand(1);

  std::optional<fs::path> config_path;
  fs::path out_dir = "runs/latest";
  Overrides ov;

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics.jsonl and model.ckpt");
  fs::path corpus;
  std::optional<fs::path> eval_corpus;
  double holdout = 0.1;
  train_cmd->add_option("--config", config_path, "RunConfig JSON file");
  train_cmd->add_option("--out", out_dir, "Output directory");
  train_cmd->add_option("--corpus", corpus, "UTF-8 training text")->required();
  add_overrides(train_cmd, ov);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Held-out perplexity, KV ratio and routing agreement");
  std::vector<fs::path> checkpoints;
  std::size_t max_windows = 0;
  std::optional<double> eval_keep;
  eval_cmd->add_option("--checkpoint", checkpoints, "Checkpoint file(s)")->required();
  eval_cmd->add_option("--corpus", corpus, "UTF-8 evaluation text")->required();
  eval_cmd->add_option("--out", out_dir, "Output directory");
  eval_cmd->add_option("--keep-ratio", eval_keep, "Evaluate through the cache with heavy-hitter eviction");
  eval_cmd->add_option("--max-windows", max_windows, "Limit the number of evaluation windows");
  std::optional<std::uint64_t> eval_seed;
  eval_cmd->add_option("--seed", eval_seed, "Unused; accepted for a uniform interface");
  eval_cmd->add_option("--config", config_path, "Unused; the checkpoint sidecar config applies");

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "Greedy generation through the routed KV cache");
  fs::path gen_ckpt;
  std::string prompt;
  std::size_t n_tokens = 32;
  std::optional<double> gen_keep;
  std::uint64_t gen_seed = 0;
  gen_cmd->add_option("--checkpoint", gen_ckpt, "Checkpoint file")->required();
  gen_cmd->add_option("--prompt", prompt, "Prompt text")->required();
  gen_cmd->add_option("--tokens", n_tokens, "Tokens to generate");
  gen_cmd->add_option("--keep-ratio", gen_keep, "Heavy-hitter cache keep ratio in (0, 1]");
  gen_cmd->add_option("--out", out_dir, "Output directory");
  gen_cmd->add_option("--seed", gen_seed, "Routing seed (random routing only)");
  gen_cmd->add_option("--config", config_path, "Unused; the checkpoint sidecar config applies");

  // kvsim
  auto* sim_cmd = app.add_subcommand("kvsim", "Replay a routing trace through the cache accounting");
  fs::path trace;
  std::size_t sim_heads = 4, sim_head_dim = 16, sim_experts = 0, sim_bytes = 4, sim_window = 4;
  std::optional<double> sim_keep;
  std::optional<fs::path> sim_out;
  sim_cmd->add_option("--trace", trace, "position,expert_index CSV")->required();
  sim_cmd->add_option("--heads", sim_heads, "Full head count");
  sim_cmd->add_option("--head-dim", sim_head_dim, "Head width");
  sim_cmd->add_option("--experts", sim_experts, "Expert count (default: from the trace)");
  sim_cmd->add_option("--bytes-per-scalar", sim_bytes, "Bytes per stored scalar");
  sim_cmd->add_option("--keep-ratio", sim_keep, "Heavy-hitter keep ratio (recency only: traces carry no attention)");
  sim_cmd->add_option("--recent-window", sim_window, "Protected recent positions");
  sim_cmd->add_option("--out", sim_out, "Also write kvsim.jsonl here");
  sim_cmd->add_option("--config", config_path, "RunConfig JSON supplying heads and head width");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate a grid of configurations");
  std::optional<std::string> sweep_ratios, sweep_keeps, sweep_modes;
  std::size_t parallel = 0;
  sweep_cmd->add_option("--config", config_path, "Base RunConfig JSON file");
  sweep_cmd->add_option("--out", out_dir, "Output directory");
  sweep_cmd->add_option("--corpus", corpus, "UTF-8 training text")->required();
  sweep_cmd->add_option("--eval-corpus", eval_corpus, "Held-out text (default: tail of --corpus)");
  sweep_cmd->add_option("--holdout", holdout, "Held-out fraction when --eval-corpus is absent");
  sweep_cmd->add_option("--sweep-ratios", sweep_ratios, "Ratio vectors, e.g. '0,0,1;0.3,0.1,0.6'");
  sweep_cmd->add_option("--sweep-keep-ratios", sweep_keeps, "Keep ratios, e.g. '1,0.8,0.5'");
  sweep_cmd->add_option("--sweep-routing-modes", sweep_modes, "Routing modes, e.g. 'learned,random'");
  sweep_cmd->add_option("--max-windows", max_windows, "Limit the number of evaluation windows");
  sweep_cmd->add_option("--parallel", parallel, "Run points in this many child processes");
  add_overrides(sweep_cmd, ov);
  train_cmd->add_option("--eval-corpus", eval_corpus, "Unused by training; accepted for symmetry");

  // One sweep point in a child process.
  auto* point_cmd = app.add_subcommand("sweep-point");
  point_cmd->group("");
  fs::path point_cfg;
  std::string point_keeps;
  point_cmd->add_option("--config", point_cfg)->required();
  point_cmd->add_option("--corpus", corpus)->required();
  point_cmd->add_option("--eval-corpus", eval_corpus);
  point_cmd->add_option("--holdout", holdout);
  point_cmd->add_option("--keep-ratios", point_keeps);
  point_cmd->add_option("--max-windows", max_windows);
  point_cmd->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  return guarded([&]() -> int {
    const Precision prec = precision_from_env();
    auto with_precision = [&](auto&& fn) { return prec == Precision::f64 ? fn(double{}) : fn(float{}); };

    if (app.got_subcommand(train_cmd)) {
      const RunConfig cfg = resolve_config(config_path, ov);
      auto data = Corpus::load(corpus);
      const auto ckpt = with_precision([&](auto tag) {
        using T = decltype(tag);
        return train_to<T>(cfg, data, out_dir, false);
      });
      std::cout << dump_line(json{{"checkpoint", ckpt.string()},
                                  {"metrics", (out_dir / "metrics.jsonl").string()}})
                << '\n';
      return kOk;
    }

    if (app.got_subcommand(eval_cmd)) {
      auto tokens = Corpus::load(corpus).tokens;
      if (eval_keep && !(*eval_keep > 0.0 && *eval_keep <= 1.0))
        throw ConfigError("--keep-ratio must lie in (0, 1]");
      std::vector<EvalRow> rows;
      for (const auto& ck : checkpoints) {
        rows.push_back(with_precision([&](auto tag) {
          using T = decltype(tag);
          auto model = load_model<T>(ck);
          auto keep = eval_keep ? eval_keep : model.config().h2o_keep_ratio;
          return evaluate(model, tokens, keep, max_windows, ck.string());
        }));
        std::cout << dump_line(to_json(rows.back())) << '\n';
      }
      fs::create_directories(out_dir);
      write_rows(out_dir / "eval.jsonl", rows);
      return kOk;
    }

    if (app.got_subcommand(gen_cmd)) {
      return with_precision([&](auto tag) {
        using T = decltype(tag);
        auto model = load_model<T>(gen_ckpt);
        const auto& cfg = model.config();
        std::vector<int> ids(prompt.begin(), prompt.end());
        for (auto& v : ids) v &= 0xff;
        if (ids.empty()) throw ConfigError("--prompt must be non-empty");
        if (ids.size() > cfg.seq_len) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(cfg.seq_len));
        const std::size_t room = cfg.seq_len - ids.size() + 1;
        if (n_tokens > room) {
          std::cerr << "note: limiting generation to " << room << " tokens (seq_len " << cfg.seq_len << ")\n";
          n_tokens = room;
        }
        auto keep = gen_keep ? gen_keep : cfg.h2o_keep_ratio;
        std::optional<EvictionPolicy> policy;
        if (keep) policy = EvictionPolicy{*keep, cfg.h2o_recent_window};
        auto g = model.generate(ids, n_tokens, policy, gen_seed);
        std::string text(g.tokens.begin(), g.tokens.end());
        std::cout << text << '\n';

        fs::create_directories(out_dir);
        json trace = json::array();
        for (std::size_t i = 0; i < g.kv_trace.size(); ++i) {
          const auto& r = g.kv_trace[i];
          trace.push_back({{"step", i}, {"live_tokens", r.live_tokens}, {"bytes", r.bytes}, {"ratio", r.ratio}});
        }
        json j{{"prompt", prompt},
               {"text", text},
               {"tokens", g.tokens},
               {"keep_ratio", keep ? json(*keep) : json(nullptr)},
               {"kv_trace", trace}};
        std::ofstream(out_dir / "generation.json") << dump_line(j) << '\n';
        for (std::size_t l = 0; l < g.experts.size(); ++l) {
          std::ofstream csv(out_dir / ("routing_layer" + std::to_string(l) + ".csv"));
          write_assignment_csv(csv, Assignment::from_experts(g.experts[l], cfg.experts));
        }
        return static_cast<int>(kOk);
      });
    }

    if (app.got_subcommand(sim_cmd)) {
      if (config_path) {
        const auto cfg = load_config(*config_path);
        sim_heads = cfg.heads;
        sim_head_dim = cfg.head_dim();
      }
      std::ifstream in(trace);
      if (!in) throw std::runtime_error("cannot open trace '" + trace.string() + "'");
      const auto rows = read_assignment_csv(in);
      int max_expert = 0;
      for (const auto& [pos, e] : rows) max_expert = std::max(max_expert, e);
      const std::size_t experts = sim_experts ? sim_experts : static_cast<std::size_t>(max_expert) + 1;
      if (static_cast<std::size_t>(max_expert) >= experts)
        throw ConfigError("trace uses expert " + std::to_string(max_expert) + " but only " +
                          std::to_string(experts) + " experts are configured");
      if (experts > 16 || sim_heads % (std::size_t{1} << (experts - 1)) != 0)
        throw ConfigError("heads=" + std::to_string(sim_heads) + " is not divisible by 2^(experts-1)");
      if (sim_keep && !(*sim_keep > 0.0 && *sim_keep <= 1.0)) throw ConfigError("--keep-ratio must lie in (0, 1]");

      RaggedKvCache<float> cache(sim_heads, sim_head_dim, experts, sim_bytes);
      std::ofstream file;
      if (sim_out) {
        fs::create_directories(*sim_out);
        file.open(*sim_out / "kvsim.jsonl");
      }
      std::size_t step = 0;
      for (const auto& [pos, e] : rows) {
        const std::vector<float> zeros(cache.heads_for(e) * sim_head_dim, 0.0f);
        cache.append(pos, e, zeros, zeros);
        if (sim_keep) cache.evict_h2o(*sim_keep, sim_window);
        const auto r = cache.memory_report();
        const auto line = dump_line(
            json{{"step", step++}, {"live_tokens", r.live_tokens}, {"bytes", r.bytes}, {"ratio", r.ratio}});
        std::cout << line << '\n';
        if (file) file << line << '\n';
      }
      return kOk;
    }

    if (app.got_subcommand(point_cmd)) {
      const auto cfg = load_config(point_cfg);
      cfg.validate();
      std::vector<double> keeps;
      if (!point_keeps.empty()) keeps = parse_ratio_list(point_keeps);
      auto data = load_data(corpus, eval_corpus, holdout);
      with_precision([&](auto tag) {
        using T = decltype(tag);
        return run_point<T>(cfg, data, out_dir, keeps, max_windows).size();
      });
      return kOk;
    }

    // sweep
    const RunConfig base = resolve_config(config_path, ov);
    std::vector<std::vector<double>> ratio_sets = {base.ratios};
    if (sweep_ratios) ratio_sets = parse_ratio_sets(*sweep_ratios);
    std::vector<RoutingMode> modes = {base.routing_mode};
    if (sweep_modes) {
      modes.clear();
      for (const auto& m : split(*sweep_modes, ',')) modes.push_back(parse_routing_mode(m));
    }
    std::vector<double> keeps;
    if (sweep_keeps) keeps = parse_ratio_list(*sweep_keeps);
    for (double k : keeps)
      if (!(k > 0.0 && k <= 1.0)) throw ConfigError("keep ratio " + std::to_string(k) + " outside (0, 1]");

    // Validate every point before any training starts.
    std::vector<Point> points;
    for (const auto& r : ratio_sets)
      for (auto mode : modes) {
        RunConfig c = base;
        c.ratios = r;
        c.experts = r.size();
        c.routing_mode = mode;
        try {
          c.validate();
        } catch (const ConfigError& e) {
          throw ConfigError("sweep point " + point_label(c, std::nullopt) + ": " + e.what());
        }
        points.push_back({c, out_dir / ("point" + std::to_string(points.size()))});
      }

    std::vector<EvalRow> rows;
    if (parallel > 1) {
      const auto self = self_executable(argv[0]);
      std::vector<int> status(points.size(), 0);
      std::size_t next = 0;
      std::mutex mu;
      auto worker = [&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next == points.size()) return;
            i = next++;
          }
          fs::create_directories(points[i].dir);
          save_config(points[i].dir / "config.json", points[i].cfg);
          std::string cmd = shell_quote(self.string()) + " sweep-point --config " +
                            shell_quote((points[i].dir / "config.json").string()) + " --corpus " +
                            shell_quote(corpus.string()) + " --out " + shell_quote(points[i].dir.string()) +
                            " --holdout " + std::to_string(holdout) + " --max-windows " + std::to_string(max_windows);
          if (eval_corpus) cmd += " --eval-corpus " + shell_quote(eval_corpus->string());
          if (!keeps.empty()) {
            std::ostringstream ks;
            for (std::size_t k = 0; k < keeps.size(); ++k) ks << (k ? "," : "") << keeps[k];
            cmd += " --keep-ratios " + shell_quote(ks.str());
          }
          status[i] = std::system(cmd.c_str());
        }
      };
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < std::min(parallel, points.size()); ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (status[i] != 0) throw std::runtime_error("sweep point " + points[i].dir.string() + " failed");
        auto r = read_rows(points[i].dir / "rows.jsonl");
        rows.insert(rows.end(), r.begin(), r.end());
      }
    } else {
      auto data = load_data(corpus, eval_corpus, holdout);
      for (std::size_t i = 0; i < points.size(); ++i) {
        std::cerr << "sweep point " << i + 1 << "/" << points.size() << ": " << point_label(points[i].cfg, std::nullopt)
                  << '\n';
        fs::create_directories(points[i].dir);
        save_config(points[i].dir / "config.json", points[i].cfg);
        auto r = with_precision([&](auto tag) {
          using T = decltype(tag);
          return run_point<T>(points[i].cfg, data, points[i].dir, keeps, max_windows);
        });
        rows.insert(rows.end(), r.begin(), r.end());
      }
    }
    fs::create_directories(out_dir);
    write_sweep_csv(out_dir / "sweep.csv", rows);
    write_rows(out_dir / "sweep.jsonl", rows);
    std::ifstream table(out_dir / "sweep.csv");
    std::cout << table.rdbuf();
    return kOk;
  });
}

}  // namespace mixsga::cli
