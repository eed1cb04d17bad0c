#include "mixsga/config.hpp"

#include <fstream>
#include <set>

#include "mixsga/router.hpp"

namespace mixsga {

using nlohmann::json;

const char* to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::learned: return "learned";
    case RoutingMode::random: return "random";
    case RoutingMode::gqa_baseline: return "gqa_baseline";
    case RoutingMode::mha_baseline: return "mha_baseline";
  }
  return "?";
}

RoutingMode parse_routing_mode(const std::string& s) {
  if (s == "learned") return RoutingMode::learned;
  if (s == "random") return RoutingMode::random;
  if (s == "gqa_baseline") return RoutingMode::gqa_baseline;
  if (s == "mha_baseline") return RoutingMode::mha_baseline;
  throw ConfigError("unknown routing_mode '" + s +
                    "' (expected learned, random, gqa_baseline or mha_baseline)");
}

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("config: " + what); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (d_model == 0 || heads == 0 || experts == 0 || n_layers == 0)
    fail("d_model, heads, experts and n_layers must be positive");
  if (d_model % heads != 0)
    fail("d_model=" + std::to_string(d_model) + " is not divisible by heads=" + std::to_string(heads));
  if (experts > 16 || heads % (std::size_t{1} << (experts - 1)) != 0)
    fail("heads=" + std::to_string(heads) + " is not divisible by 2^(experts-1) for experts=" +
         std::to_string(experts));
  if (ratios.size() != experts)
    fail(std::to_string(ratios.size()) + " ratios given for " + std::to_string(experts) + " experts");
  validate_ratios(ratios);
  if (seq_len == 0 || batch_size == 0) fail("seq_len and batch_size must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("betas must lie in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) fail("warmup_ratio must lie in [0, 1]");
  if (alpha < 0.0) fail("alpha must be non-negative");
  if (grad_clip <= 0.0) fail("grad_clip must be positive");
  if (routing_mode == RoutingMode::gqa_baseline && experts < 2)
    fail("gqa_baseline routes every token to expert 2 and needs experts >= 2");
  if (h2o_keep_ratio && !(*h2o_keep_ratio > 0.0 && *h2o_keep_ratio <= 1.0))
    fail("h2o_keep_ratio must lie in (0, 1]");
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"vocab_size", c.vocab_size},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"experts", c.experts},
           {"n_layers", c.n_layers},
           {"mlp_ratio", c.mlp_ratio},
           {"ratios", c.ratios},
           {"alpha", c.alpha},
           {"seq_len", c.seq_len},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"weight_decay", c.weight_decay},
           {"warmup_ratio", c.warmup_ratio},
           {"min_lr_ratio", c.min_lr_ratio},
           {"grad_clip", c.grad_clip},
           {"epochs", c.epochs},
           {"steps", c.steps},
           {"seed", c.seed},
           {"routing_mode", to_string(c.routing_mode)},
           {"aux_loss_enabled", c.aux_loss_enabled},
           {"h2o_keep_ratio", c.h2o_keep_ratio ? json(*c.h2o_keep_ratio) : json(nullptr)},
           {"h2o_recent_window", c.h2o_recent_window},
           {"attention_scale_mode",
            c.attention_scale_mode == AttentionScale::head_dim ? "head_dim" : "model_dim"},
           {"consistency_logits_mode",
            c.consistency_logits_mode == ConsistencyLogits::sigmoid_scores ? "sigmoid_scores"
                                                                            : "pre_sigmoid"}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> known = {
      "vocab_size", "d_model", "heads", "experts", "n_layers", "mlp_ratio", "ratios", "alpha",
      "seq_len", "batch_size", "learning_rate", "beta1", "beta2", "weight_decay", "warmup_ratio",
      "min_lr_ratio", "grad_clip", "epochs", "steps", "seed", "routing_mode", "aux_loss_enabled",
      "h2o_keep_ratio", "h2o_recent_window", "attention_scale_mode", "consistency_logits_mode"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");

  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    read("vocab_size", c.vocab_size);
    read("d_model", c.d_model);
    read("heads", c.heads);
    read("experts", c.experts);
    read("n_layers", c.n_layers);
    read("mlp_ratio", c.mlp_ratio);
    read("ratios", c.ratios);
    read("alpha", c.alpha);
    read("seq_len", c.seq_len);
    read("batch_size", c.batch_size);
    read("learning_rate", c.learning_rate);
    read("beta1", c.beta1);
    read("beta2", c.beta2);
    read("weight_decay", c.weight_decay);
    read("warmup_ratio", c.warmup_ratio);
    read("min_lr_ratio", c.min_lr_ratio);
    read("grad_clip", c.grad_clip);
    read("epochs", c.epochs);
    read("steps", c.steps);
    read("seed", c.seed);
    read("aux_loss_enabled", c.aux_loss_enabled);
    read("h2o_recent_window", c.h2o_recent_window);
    if (j.contains("routing_mode")) c.routing_mode = parse_routing_mode(j.at("routing_mode").get<std::string>());
    if (j.contains("h2o_keep_ratio")) {
      const auto& v = j.at("h2o_keep_ratio");
      c.h2o_keep_ratio = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    if (j.contains("attention_scale_mode")) {
      const auto s = j.at("attention_scale_mode").get<std::string>();
      if (s == "head_dim") c.attention_scale_mode = AttentionScale::head_dim;
      else if (s == "model_dim") c.attention_scale_mode = AttentionScale::model_dim;
      else throw ConfigError("config: attention_scale_mode must be head_dim or model_dim");
    }
    if (j.contains("consistency_logits_mode")) {
      const auto s = j.at("consistency_logits_mode").get<std::string>();
      if (s == "sigmoid_scores") c.consistency_logits_mode = ConsistencyLogits::sigmoid_scores;
      else if (s == "pre_sigmoid") c.consistency_logits_mode = ConsistencyLogits::pre_sigmoid;
      else throw ConfigError("config: consistency_logits_mode must be sigmoid_scores or pre_sigmoid");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  return c;
}

void save_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw ConfigError("config: cannot write '" + path.string() + "'");
  out << json(c).dump(2) << '\n';
}

}  // namespace mixsga
