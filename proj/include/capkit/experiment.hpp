#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include "capkit/decoders.hpp"
#include "capkit/encoder.hpp"
#include "json.hpp"

namespace capkit {

enum class DecoderFamily { lstm, transformer };

inline const char* family_name(DecoderFamily f) { return f == DecoderFamily::lstm ? "lstm" : "transformer"; }

inline DecoderFamily parse_family(const std::string& s) {
  if (s == "lstm") return DecoderFamily::lstm;
  if (s == "transformer") return DecoderFamily::transformer;
  throw std::invalid_argument("unknown decoder family: " + s);
}

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One cell of an experiment grid. Field names match the JSON keys.
struct ExperimentConfig {
  DecoderFamily decoder = DecoderFamily::lstm;

  // encoder
  EncoderVariant encoder = EncoderVariant::conv_s;
  std::size_t channels = 64;
  std::size_t grid = 14;
  std::size_t base_width = 16;
  bool finetune = false;
  bool finetune_all = false;

  // lstm
  std::size_t embed_size = 512;
  std::size_t hidden_size = 512;
  std::size_t attention_size = 512;
  bool gate = true;
  double ds_lambda = 1.0;
  double lstm_dropout = 0.5;

  // transformer
  std::size_t layers = 3;
  std::size_t heads = 2;
  std::size_t d_model = 512;
  std::size_t d_ff = 2048;
  double tf_dropout = 0.1;

  // training
  std::optional<double> learning_rate;    // family default when unset
  std::optional<double> label_smoothing;  // family default when unset
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  std::size_t max_steps = 0;  // 0 = unlimited
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  double clip_norm = 5.0;  // <= 0 disables
  std::size_t min_count = 1;
  std::string val_split = "val";

  // decoding
  std::size_t beam = 1;  // 1 = greedy
  std::size_t max_len = 30;

  double lr() const {
    return learning_rate.value_or(decoder == DecoderFamily::lstm ? 1e-4 : 4e-5);
  }
  double smoothing() const { return label_smoothing.value_or(decoder == DecoderFamily::lstm ? 0.0 : 0.1); }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.variant = encoder;
    e.channels = channels;
    e.grid = grid;
    e.base_width = base_width;
    e.finetune = finetune;
    e.finetune_all = finetune_all;
    return e;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(channels, "channels");
    positive(grid, "grid");
    positive(base_width, "base_width");
    positive(batch_size, "batch_size");
    positive(max_epochs, "max_epochs");
    positive(beam, "beam");
    positive(max_len, "max_len");
    positive(min_count, "min_count");
    if (!(lr() > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (smoothing() < 0.0 || smoothing() >= 1.0) throw ConfigError("label_smoothing must be in [0, 1)");
    if (!parse_split(val_split)) throw ConfigError("unknown val_split: " + val_split);
    if (decoder == DecoderFamily::lstm) {
      positive(embed_size, "embed_size");
      positive(hidden_size, "hidden_size");
      positive(attention_size, "attention_size");
      if (lstm_dropout < 0.0 || lstm_dropout >= 1.0) throw ConfigError("lstm_dropout must be in [0, 1)");
      if (ds_lambda < 0.0) throw ConfigError("ds_lambda must be >= 0");
    } else {
      positive(layers, "layers");
      positive(heads, "heads");
      positive(d_ff, "d_ff");
      if (d_model == 0 || d_model % 2 != 0) throw ConfigError("d_model must be even and positive");
      if (d_model % heads != 0) {
        throw ConfigError(std::to_string(heads) + " heads do not divide d_model " + std::to_string(d_model));
      }
      if (tf_dropout < 0.0 || tf_dropout >= 1.0) throw ConfigError("tf_dropout must be in [0, 1)");
    }
  }
};

namespace detail {

inline const std::set<std::string>& lstm_keys() {
  static const std::set<std::string> k{"embed_size", "hidden_size", "attention_size", "gate", "ds_lambda",
                                       "lstm_dropout"};
  return k;
}

inline const std::set<std::string>& transformer_keys() {
  static const std::set<std::string> k{"layers", "heads", "d_model", "d_ff", "tf_dropout"};
  return k;
}

inline const std::set<std::string>& common_keys() {
  static const std::set<std::string> k{"decoder",   "encoder",        "channels",        "grid",
                                       "base_width", "finetune",      "finetune_all",    "learning_rate",
                                       "label_smoothing", "batch_size", "max_epochs",    "max_steps",
                                       "patience",  "seed",           "clip_norm",       "min_count",
                                       "val_split", "beam",           "max_len"};
  return k;
}

}  // namespace detail

/// Every active field with defaults resolved; inactive-family fields omitted.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["decoder"] = family_name(c.decoder);
  j["encoder"] = variant_name(c.encoder);
  j["channels"] = c.channels;
  j["grid"] = c.grid;
  j["base_width"] = c.base_width;
  j["finetune"] = c.finetune;
  j["finetune_all"] = c.finetune_all;
  if (c.decoder == DecoderFamily::lstm) {
    j["embed_size"] = c.embed_size;
    j["hidden_size"] = c.hidden_size;
    j["attention_size"] = c.attention_size;
    j["gate"] = c.gate;
    j["ds_lambda"] = c.ds_lambda;
    j["lstm_dropout"] = c.lstm_dropout;
  } else {
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["d_model"] = c.d_model;
    j["d_ff"] = c.d_ff;
    j["tf_dropout"] = c.tf_dropout;
  }
  j["learning_rate"] = c.lr();
  j["label_smoothing"] = c.smoothing();
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["max_steps"] = c.max_steps;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["clip_norm"] = c.clip_norm;
  j["min_count"] = c.min_count;
  j["val_split"] = c.val_split;
  j["beam"] = c.beam;
  j["max_len"] = c.max_len;
  return j;
}

/// Parses and validates a config. Unknown keys and keys belonging to the
/// other decoder family are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    if (j.contains("decoder")) c.decoder = parse_family(j.at("decoder").get<std::string>());
    const auto& own = c.decoder == DecoderFamily::lstm ? detail::lstm_keys() : detail::transformer_keys();
    const auto& other = c.decoder == DecoderFamily::lstm ? detail::transformer_keys() : detail::lstm_keys();
    for (const auto& [key, value] : j.items()) {
      if (other.count(key)) {
        throw ConfigError("field '" + key + "' does not apply to decoder " + family_name(c.decoder));
      }
      if (!own.count(key) && !detail::common_keys().count(key)) throw ConfigError("unknown config field '" + key + "'");
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    if (j.contains("encoder")) c.encoder = parse_variant(j.at("encoder").get<std::string>());
    get("channels", c.channels);
    get("grid", c.grid);
    get("base_width", c.base_width);
    get("finetune", c.finetune);
    get("finetune_all", c.finetune_all);
    get("embed_size", c.embed_size);
    get("hidden_size", c.hidden_size);
    get("attention_size", c.attention_size);
    get("gate", c.gate);
    get("ds_lambda", c.ds_lambda);
    get("lstm_dropout", c.lstm_dropout);
    get("layers", c.layers);
    get("heads", c.heads);
    get("d_model", c.d_model);
    get("d_ff", c.d_ff);
    get("tf_dropout", c.tf_dropout);
    if (j.contains("learning_rate") && !j.at("learning_rate").is_null()) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("label_smoothing") && !j.at("label_smoothing").is_null()) {
      c.label_smoothing = j.at("label_smoothing").get<double>();
    }
    get("batch_size", c.batch_size);
    get("max_epochs", c.max_epochs);
    get("max_steps", c.max_steps);
    get("patience", c.patience);
    get("seed", c.seed);
    get("clip_norm", c.clip_norm);
    get("min_count", c.min_count);
    get("val_split", c.val_split);
    get("beam", c.beam);
    get("max_len", c.max_len);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Hash of the resolved config without its seed.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("seed");
  return fnv1a(j.dump());
}

inline std::string config_key(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(c)));
  return buf;
}

/// Seed for the cell's private RNG stream.
inline std::uint64_t cell_seed(const ExperimentConfig& c) { return c.seed ^ config_hash(c); }

}  // namespace capkit
