#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "capkit/metrics.hpp"
#include "capkit/model.hpp"

namespace capkit {

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
  std::filesystem::path root;
  Manifest manifest;
  std::vector<Image> images;             // parallel to manifest.samples; empty when absent
  std::vector<AnnotationGrid> features;  // likewise

  const RawSample& sample(std::size_t i) const { return manifest.samples[i]; }
  std::size_t size() const { return manifest.samples.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (manifest.samples[i].split == s) out.push_back(i);
    return out;
  }

  bool has_images() const {
    for (const auto& img : images)
      if (img.values.empty()) return false;
    return !images.empty();
  }

  bool has_features() const {
    for (const auto& f : features)
      if (f.values.empty()) return false;
    return !features.empty();
  }

  /// Vocabulary over the training captions.
  Vocabulary build_vocab(std::size_t min_count) const {
    std::vector<std::vector<std::string>> captions;
    for (std::size_t i : indices(Split::train))
      for (const auto& c : sample(i).caption_tokens) captions.push_back(c);
    return Vocabulary::build(captions, min_count);
  }
};

/// Loads `dir/manifest.jsonl` plus every referenced image and feature file.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t max_tokens = kDefaultMaxCaptionTokens,
                            std::ostream* warn = &std::cerr) {
  Dataset ds;
  ds.root = dir;
  ds.manifest = load_manifest(dir / "manifest.jsonl", max_tokens, warn);
  ds.images.resize(ds.size());
  ds.features.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.sample(i);
    if (!s.image_path.empty()) ds.images[i] = load_image(s.image_path);
    if (!s.feature_path.empty()) ds.features[i] = load_feature_file(s.feature_path);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Annotations

/// Supplies annotation grids for dataset samples, caching them when the
/// encoder is frozen (or absent).
class AnnotationSource {
 public:
  AnnotationSource(const CaptionModel& model, const Dataset& data) : model_(model), data_(data) {
    if (model.encoder()) {
      if (!data.has_images()) throw std::invalid_argument("convolutional encoder needs an image for every sample");
    } else {
      if (!data.has_features()) throw std::invalid_argument("precomputed encoder needs a feature file for every sample");
      for (const auto& f : data.features) {
        if (f.channels != model.channels() || f.positions != data.features.front().positions) {
          throw ShapeError("feature files disagree on P x N");
        }
      }
    }
    cache_.resize(data.size());
  }

  std::size_t positions() const {
    return model_.encoder() ? model_.config().encoder_config().positions() : data_.features.front().positions;
  }

  /// Inference-time grid for one sample.
  const AnnotationGrid& grid(std::size_t i) {
    if (!model_.encoder()) return data_.features[i];
    if (!model_.static_annotations() || cache_[i].values.empty()) cache_[i] = model_.encoder()->encode_grid(data_.images[i]);
    return cache_[i];
  }

  /// (B*P) x N for training; differentiable through the encoder when it is
  /// being fine-tuned.
  Tensor batch(const std::vector<std::size_t>& samples) {
    std::vector<Tensor> parts;
    if (model_.encoder() && !model_.static_annotations()) {
      for (std::size_t i : samples) parts.push_back(model_.encoder()->encode(data_.images[i]));
    } else {
      for (std::size_t i : samples) parts.push_back(grid(i).tensor());
    }
    return parts.size() == 1 ? parts.front() : concat(parts, 0);
  }

 private:
  const CaptionModel& model_;
  const Dataset& data_;
  std::vector<AnnotationGrid> cache_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  MetricReport report;
  std::vector<std::string> image_ids;
  std::vector<std::string> candidates;  // detokenized, parallel to image_ids
};

inline Evaluation evaluate(const CaptionModel& model, const Dataset& data, AnnotationSource& source,
                           const std::vector<std::size_t>& samples, std::size_t beam) {
  if (samples.empty()) throw std::invalid_argument("evaluation split is empty");
  Evaluation ev;
  EvalSet set;
  for (std::size_t i : samples) {
    auto out = model.decode(source.grid(i), beam);
    auto words = model.vocab().decode(out.tokens);
    ev.image_ids.push_back(data.sample(i).image_id);
    ev.candidates.push_back(join(words));
    set.push_back({std::move(words), data.sample(i).caption_tokens});
  }
  ev.report = score_all(set);
  return ev;
}

inline Evaluation evaluate(const CaptionModel& model, const Dataset& data, Split split, std::size_t beam) {
  AnnotationSource source(model, data);
  return evaluate(model, data, source, data.indices(split), beam);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double loss = 0.0;
  double val_bleu4 = 0.0;
  bool best = false;
};

struct TrainResult {
  std::unique_ptr<CaptionModel> model;
  std::vector<EpochLog> log;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_bleu4 = -1.0;
  std::size_t steps = 0;
};

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

inline std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,steps,loss,val_BLEU-4,best\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << e.steps << ',' << format_fixed(e.loss, 6) << ',' << format_fixed(e.val_bleu4, 4) << ','
        << (e.best ? 1 : 0) << '\n';
  }
  return out.str();
}

/// Teacher-forced Adam training with early stopping on validation BLEU-4.
/// The returned model holds the parameters of the best epoch.
inline TrainResult train(const ExperimentConfig& config, const Dataset& data, std::ostream* progress = nullptr) {
  config.validate();
  const auto train_idx = data.indices(Split::train);
  const auto val_idx = data.indices(*parse_split(config.val_split));
  if (train_idx.empty()) throw std::invalid_argument("training split is empty");
  if (val_idx.empty()) throw std::invalid_argument(config.val_split + " split is empty");

  Rng root(cell_seed(config));
  Rng init_rng = root.split(), order_rng = root.split(), drop_rng = root.split();
  const std::size_t channels = data.has_features() ? data.features.front().channels : 0;
  TrainResult result;
  result.model = std::make_unique<CaptionModel>(config, data.build_vocab(config.min_count), channels, init_rng);
  auto& model = *result.model;
  AnnotationSource source(model, data);

  std::vector<CaptionPair> pairs;
  for (std::size_t i : train_idx)
    for (const auto& c : data.sample(i).caption_tokens) pairs.push_back({i, model.vocab().encode_caption(c)});

  auto params = model.trainable();
  AdamState adam;
  adam.lr = config.lr();
  std::vector<std::vector<double>> best_values;
  std::size_t stale = 0;
  const std::size_t patience = std::max<std::size_t>(config.patience, 1);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& batch : make_batches(pairs, config.batch_size, order_rng)) {
      auto annotations = source.batch(batch.samples);
      model.params().zero_grad();
      auto loss = model.loss(batch, annotations, source.positions(), &drop_rng);
      if (!std::isfinite(loss.item())) {
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(result.steps + 1));
      }
      loss.backward();
      if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
      adam_step(params, adam);
      loss_sum += loss.item();
      ++batches;
      ++result.steps;
      if (config.max_steps && result.steps >= config.max_steps) break;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.steps = result.steps;
    entry.loss = loss_sum / static_cast<double>(batches);
    entry.val_bleu4 = evaluate(model, data, source, val_idx, config.beam).report.bleu[3];
    if (entry.val_bleu4 > result.best_bleu4) {
      result.best_bleu4 = entry.val_bleu4;
      result.best_epoch = epoch;
      entry.best = true;
      stale = 0;
      best_values.clear();
      for (const auto& p : model.params().items()) best_values.push_back(p.tensor.values());
    } else {
      ++stale;
    }
    result.log.push_back(entry);
    result.epochs = epoch;
    if (progress) {
      *progress << "epoch " << epoch << " steps " << result.steps << " loss " << format_fixed(entry.loss, 4)
                << " val BLEU-4 " << format_fixed(entry.val_bleu4, 2) << (entry.best ? " *" : "") << '\n';
    }
    if (stale >= patience) break;
    if (config.max_steps && result.steps >= config.max_steps) break;
  }
  auto& items = model.params().items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto dst = items[i].tensor.mutable_data();
    std::copy(best_values[i].begin(), best_values[i].end(), dst.begin());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Result rows

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> c{"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE_L", "CIDEr"};
  return c;
}

inline std::vector<double> metric_values(const MetricReport& r) {
  return {r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.meteor, r.rouge_l, r.cider};
}

struct ResultRow {
  std::size_t cell = 0;
  std::string key;
  std::string decoder, encoder;
  bool finetune = false;
  std::string hidden_size, layers, heads, learning_rate;  // empty when not applicable
  std::vector<double> metrics;                            // metric_columns() order; empty on error
  std::size_t epochs = 0, best_epoch = 0;
  std::string status = "ok";

  /// Config columns other than the fine-tune flag.
  std::vector<std::string> pairing_key() const { return {decoder, encoder, hidden_size, layers, heads, learning_rate}; }
};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline ResultRow make_row(std::size_t cell, const ExperimentConfig& c) {
  ResultRow r;
  r.cell = cell;
  r.key = config_key(c);
  r.decoder = family_name(c.decoder);
  r.encoder = variant_name(c.encoder);
  r.finetune = c.finetune;
  if (c.decoder == DecoderFamily::lstm) {
    r.hidden_size = std::to_string(c.hidden_size);
  } else {
    r.layers = std::to_string(c.layers);
    r.heads = std::to_string(c.heads);
  }
  r.learning_rate = format_number(c.lr());
  return r;
}

inline const std::vector<std::string>& row_columns() {
  static const std::vector<std::string> c = [] {
    std::vector<std::string> v{"cell", "key", "decoder", "encoder", "finetune", "hidden_size", "layers", "heads",
                               "learning_rate"};
    v.insert(v.end(), metric_columns().begin(), metric_columns().end());
    v.insert(v.end(), {"epochs", "best_epoch", "status"});
    return v;
  }();
  return c;
}

inline std::string csv_header(const std::vector<std::string>& cols) {
  std::string s;
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
  return s + "\n";
}

inline std::string sanitize_field(std::string s) {
  for (auto& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ch == '"' ? '\'' : (ch == ',' ? ';' : ' ');
  return s;
}

inline std::string row_csv(const ResultRow& r) {
  std::ostringstream out;
  out << r.cell << ',' << r.key << ',' << r.decoder << ',' << r.encoder << ',' << (r.finetune ? "true" : "false")
      << ',' << r.hidden_size << ',' << r.layers << ',' << r.heads << ',' << r.learning_rate;
  for (std::size_t i = 0; i < metric_columns().size(); ++i)
    out << ',' << (r.metrics.empty() ? std::string() : format_fixed(r.metrics[i], 2));
  out << ',' << r.epochs << ',' << r.best_epoch << ',' << sanitize_field(r.status) << '\n';
  return out.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<ResultRow> parse_rows(std::istream& in, const std::string& where = "rows") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(where + ": missing header");
  if (split_csv_line(line) != row_columns()) throw FormatError(where + ": unexpected header");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    const std::string at = where + ":" + std::to_string(lineno);
    if (f.size() != row_columns().size()) throw FormatError(at + ": expected " + std::to_string(row_columns().size()) + " fields");
    try {
      ResultRow r;
      r.cell = std::stoul(f[0]);
      r.key = f[1];
      r.decoder = f[2];
      r.encoder = f[3];
      if (f[4] != "true" && f[4] != "false") throw FormatError(at + ": finetune must be true or false");
      r.finetune = f[4] == "true";
      r.hidden_size = f[5];
      r.layers = f[6];
      r.heads = f[7];
      r.learning_rate = f[8];
      const std::size_t m = metric_columns().size();
      if (!f[9].empty()) {
        for (std::size_t i = 0; i < m; ++i) r.metrics.push_back(std::stod(f[9 + i]));
      }
      r.epochs = std::stoul(f[9 + m]);
      r.best_epoch = std::stoul(f[10 + m]);
      r.status = f[11 + m];
      rows.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const FormatError*>(&e)) throw;
      throw FormatError(at + ": bad number");
    }
  }
  return rows;
}

inline std::vector<ResultRow> read_rows(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_rows(in, path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
  std::vector<ExperimentConfig> cells;
};

/// {"base": {...}, "grid": {"field": [values], ...}, "cells": [{...}, ...]}.
/// Grid cells are the cartesian product over `base` (first field outermost),
/// followed by explicit cells, each also layered over `base`.
inline SweepSpec parse_sweep_spec(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ConfigError("sweep spec must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "base" && k != "grid" && k != "cells") throw ConfigError("unknown sweep field '" + k + "'");
  nlohmann::json base = j.contains("base") ? nlohmann::json::parse(j.at("base").dump()) : nlohmann::json::object();
  std::vector<nlohmann::json> raw;
  if (j.contains("grid")) {
    raw.push_back(base);
    for (const auto& [field, values] : j.at("grid").items()) {
      if (!values.is_array() || values.empty()) throw ConfigError("grid field '" + field + "' needs a non-empty list");
      std::vector<nlohmann::json> next;
      for (const auto& partial : raw)
        for (const auto& v : values) {
          auto c = partial;
          c[field] = nlohmann::json::parse(v.dump());
          next.push_back(std::move(c));
        }
      raw = std::move(next);
    }
  }
  if (j.contains("cells")) {
    for (const auto& cell : j.at("cells")) {
      auto c = base;
      c.update(nlohmann::json::parse(cell.dump()));
      raw.push_back(std::move(c));
    }
  }
  SweepSpec spec;
  std::set<std::string> keys;
  for (const auto& r : raw) {
    spec.cells.push_back(config_from_json(r));
    if (!keys.insert(config_key(spec.cells.back())).second) {
      throw ConfigError("duplicate sweep cell: " + to_json(spec.cells.back()).dump());
    }
  }
  return spec;
}

inline SweepSpec load_sweep_spec(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open sweep spec " + path.string());
  try {
    return parse_sweep_spec(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline ResultRow run_cell(std::size_t index, const ExperimentConfig& config, const Dataset& data) {
  ResultRow row = make_row(index, config);
  try {
    auto trained = train(config, data);
    auto ev = evaluate(*trained.model, data, Split::test, config.beam);
    row.metrics = metric_values(ev.report);
    row.epochs = trained.epochs;
    row.best_epoch = trained.best_epoch;
  } catch (const std::exception& e) {
    row.metrics.clear();
    row.status = std::string("error: ") + e.what();
  }
  return row;
}

/// Trains and evaluates every cell on the test split. `out/results.csv` is
/// rewritten after each finished cell with all finished rows in spec order;
/// `out/cells/<key>.csv` holds each successful cell and lets a rerun skip it.
inline std::vector<ResultRow> run_sweep(const SweepSpec& spec, const Dataset& data, const std::filesystem::path& out,
                                        std::size_t jobs = 1, std::ostream* progress = nullptr) {
  std::filesystem::create_directories(out / "cells");
  const std::size_t n = spec.cells.size();
  std::vector<std::optional<ResultRow>> rows(n);
  std::mutex mu;
  auto flush = [&] {
    std::string text = csv_header(row_columns());
    for (const auto& r : rows)
      if (r) text += row_csv(*r);
    write_text(out / "results.csv", text);
  };
  {
    std::lock_guard lock(mu);
    flush();
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& cfg = spec.cells[i];
      const auto cached = out / "cells" / (config_key(cfg) + ".csv");
      std::optional<ResultRow> row;
      if (std::filesystem::exists(cached)) {
        try {
          auto r = read_rows(cached);
          if (r.size() == 1 && r[0].status == "ok") {
            row = r[0];
            row->cell = i;
          }
        } catch (const std::exception&) {
        }
      }
      const bool resumed = row.has_value();
      if (!row) row = run_cell(i, cfg, data);
      std::lock_guard lock(mu);
      if (!resumed && row->status == "ok") write_text(cached, csv_header(row_columns()) + row_csv(*row));
      rows[i] = row;
      flush();
      if (progress) {
        *progress << "cell " << i + 1 << "/" << n << " " << row->key << (resumed ? " (cached)" : "") << ": "
                  << row->status << '\n';
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<ResultRow> result;
  for (auto& r : rows) result.push_back(std::move(*r));
  return result;
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportMode { absolute, finetune_diff };

inline ReportMode parse_report_mode(const std::string& s) {
  if (s == "absolute") return ReportMode::absolute;
  if (s == "finetune-diff") return ReportMode::finetune_diff;
  throw std::invalid_argument("unknown report mode: " + s);
}

struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> labels;         // one per row, for charts
  std::vector<std::vector<double>> values; // metric values per row

  std::string csv() const {
    std::string s = csv_header(columns);
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
      s += "\n";
    }
    return s;
  }

  std::string markdown() const {
    std::string s = "|";
    for (const auto& c : columns) s += " " + c + " |";
    s += "\n|";
    for (std::size_t i = 0; i < columns.size(); ++i) s += "---|";
    s += "\n";
    for (const auto& r : rows) {
      s += "|";
      for (const auto& v : r) s += " " + v + " |";
      s += "\n";
    }
    return s;
  }
};

namespace detail {

inline std::string row_label(const ResultRow& r) {
  std::string s = r.decoder + " " + r.encoder;
  if (!r.hidden_size.empty()) s += " D=" + r.hidden_size;
  if (!r.layers.empty()) s += " L=" + r.layers + " h=" + r.heads;
  return s;
}

}  // namespace detail

/// Absolute: config columns then the seven metrics. Error rows are skipped.
inline ReportTable absolute_report(const std::vector<ResultRow>& rows) {
  ReportTable t;
  t.columns = {"decoder", "encoder", "finetune", "hidden_size", "layers", "heads", "learning_rate"};
  t.columns.insert(t.columns.end(), metric_columns().begin(), metric_columns().end());
  for (const auto& r : rows) {
    if (r.metrics.empty()) continue;
    std::vector<std::string> line{r.decoder, r.encoder, r.finetune ? "true" : "false", r.hidden_size, r.layers,
                                  r.heads, r.learning_rate};
    for (double v : r.metrics) line.push_back(format_fixed(v, 2));
    t.rows.push_back(std::move(line));
    t.labels.push_back(detail::row_label(r) + (r.finetune ? " ft" : ""));
    t.values.push_back(r.metrics);
  }
  return t;
}

/// Delta table per metric. With `base` empty, rows pair up inside `rows` as
/// finetune=true minus finetune=false. Otherwise each row of `rows` is
/// compared with the `base` row of identical config, finetune included.
inline ReportTable finetune_diff_report(const std::vector<ResultRow>& rows, const std::vector<ResultRow>* base = nullptr) {
  ReportTable t;
  t.columns = {"decoder", "encoder", "hidden_size", "layers", "heads", "learning_rate"};
  for (const auto& m : metric_columns()) t.columns.push_back("Δ " + m);
  auto usable = [](const ResultRow& r) { return !r.metrics.empty(); };
  auto emit = [&](const ResultRow& tuned, const ResultRow& ref) {
    auto line = tuned.pairing_key();
    std::vector<double> d;
    for (std::size_t i = 0; i < tuned.metrics.size(); ++i) {
      d.push_back(tuned.metrics[i] - ref.metrics[i]);
      line.push_back(format_fixed(d.back(), 2));
    }
    t.rows.push_back(std::move(line));
    t.labels.push_back(detail::row_label(tuned));
    t.values.push_back(std::move(d));
  };
  auto find_unique = [&](const std::vector<ResultRow>& pool, const ResultRow& like, bool flag) {
    const ResultRow* hit = nullptr;
    for (const auto& r : pool) {
      if (!usable(r) || r.pairing_key() != like.pairing_key() || r.finetune != flag) continue;
      if (hit) throw std::invalid_argument("ambiguous pairing for " + detail::row_label(like));
      hit = &r;
    }
    if (!hit) throw std::invalid_argument("unpaired row: " + detail::row_label(like));
    return hit;
  };
  if (base) {
    for (const auto& r : rows)
      if (usable(r)) emit(r, *find_unique(*base, r, r.finetune));
    return t;
  }
  for (const auto& r : rows) {
    if (!usable(r)) continue;
    if (r.finetune) {
      emit(r, *find_unique(rows, r, false));
    } else {
      find_unique(rows, r, true);
    }
  }
  return t;
}

/// Grouped bar chart (one group per metric, one bar per row) as SVG.
inline std::string render_chart(const ReportTable& t, const std::string& title) {
  static const char* palette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee",
                                  "#aa3377", "#bbbbbb", "#332288", "#117733", "#882255"};
  const auto& metrics = metric_columns();
  const double bar = 10.0, gap = 18.0, left = 50.0, top = 40.0, height = 240.0;
  const std::size_t nrows = std::max<std::size_t>(t.values.size(), 1);
  const double group = bar * static_cast<double>(nrows) + gap;
  const double width = left + group * static_cast<double>(metrics.size()) + 20.0;
  double lo = 0.0, hi = 0.0;
  for (const auto& v : t.values)
    for (double x : v) lo = std::min(lo, x), hi = std::max(hi, x);
  if (hi - lo < 1e-9) hi = lo + 1.0;
  auto y = [&](double v) { return top + (hi - v) / (hi - lo) * height; };
  const double legend = 16.0 * static_cast<double>(t.labels.size());
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
    << top + height + 40.0 + legend << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y(0.0) << "\" y2=\"" << y(0.0)
    << "\" stroke=\"#000\"/>\n";
  s << "<text x=\"4\" y=\"" << y(hi) + 4 << "\">" << format_fixed(hi, 1) << "</text>\n";
  s << "<text x=\"4\" y=\"" << y(lo) + 4 << "\">" << format_fixed(lo, 1) << "</text>\n";
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    const double x0 = left + group * static_cast<double>(m);
    for (std::size_t r = 0; r < t.values.size(); ++r) {
      const double v = t.values[r][m];
      const double y0 = y(std::max(v, 0.0)), y1 = y(std::min(v, 0.0));
      s << "<rect x=\"" << x0 + bar * static_cast<double>(r) << "\" y=\"" << y0 << "\" width=\"" << bar - 1
        << "\" height=\"" << y1 - y0 << "\" fill=\"" << palette[r % 10] << "\"/>\n";
    }
    s << "<text x=\"" << x0 << "\" y=\"" << top + height + 18 << "\">" << metrics[m] << "</text>\n";
  }
  for (std::size_t r = 0; r < t.labels.size(); ++r) {
    const double ly = top + height + 36 + 16.0 * static_cast<double>(r);
    s << "<rect x=\"" << left << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << palette[r % 10]
      << "\"/>\n";
    s << "<text x=\"" << left + 16 << "\" y=\"" << ly << "\">" << t.labels[r] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Scoring caption files

/// JSON Lines of {"image_id", "caption"}; repeated ids accumulate.
inline std::vector<std::pair<std::string, std::vector<Words>>> read_caption_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::pair<std::string, std::vector<Words>>> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("image_id") || !j["image_id"].is_string() || !j.contains("caption") ||
        !j["caption"].is_string()) {
      throw FormatError(where + ": expected string fields image_id, caption");
    }
    const auto id = j["image_id"].get<std::string>();
    auto [it, fresh] = index.emplace(id, out.size());
    if (fresh) out.push_back({id, {}});
    out[it->second].second.push_back(tokenize(j["caption"].get<std::string>()));
  }
  return out;
}

inline EvalSet eval_set_from_files(const std::filesystem::path& candidates, const std::filesystem::path& references) {
  auto cands = read_caption_file(candidates);
  auto refs = read_caption_file(references);
  std::map<std::string, const std::vector<Words>*> by_id;
  for (const auto& [id, caps] : refs) by_id[id] = &caps;
  EvalSet set;
  for (const auto& [id, caps] : cands) {
    if (caps.size() != 1) throw FormatError(candidates.string() + ": image " + id + " has several candidates");
    auto it = by_id.find(id);
    if (it == by_id.end()) throw FormatError(references.string() + ": no references for image " + id);
    set.push_back({caps.front(), *it->second});
  }
  if (set.empty()) throw FormatError(candidates.string() + ": no candidates");
  return set;
}

inline std::string metrics_csv(const MetricReport& r) {
  std::string s = csv_header(metric_columns());
  const auto v = metric_values(r);
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_fixed(v[i], 2);
  return s + "\n";
}

inline nlohmann::json metrics_json(const MetricReport& r) {
  nlohmann::json j = nlohmann::json::object();
  const auto v = metric_values(r);
  for (std::size_t i = 0; i < v.size(); ++i) j[metric_columns()[i]] = v[i];
  return j;
}

inline void write_candidates(const std::filesystem::path& path, const Evaluation& ev) {
  std::string text;
  for (std::size_t i = 0; i < ev.image_ids.size(); ++i)
    text += nlohmann::json{{"image_id", ev.image_ids[i]}, {"caption", ev.candidates[i]}}.dump() + "\n";
  write_text(path, text);
}

}  // namespace capkit
