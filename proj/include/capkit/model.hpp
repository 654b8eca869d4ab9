#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>

#include "capkit/checkpoint.hpp"
#include "capkit/experiment.hpp"

namespace capkit {

/// Encoder (absent for precomputed features) plus one decoder family, all
/// parameters registered in a single store.
class CaptionModel {
 public:
  /// `channels` is the annotation width; ignored unless the encoder is
  /// precomputed, in which case it must match the feature files.
  CaptionModel(const ExperimentConfig& config, Vocabulary vocab, std::size_t channels, Rng& rng)
      : config_(config), vocab_(std::move(vocab)) {
    config_.validate();
    if (config_.encoder != EncoderVariant::precomputed) {
      encoder_.emplace(config_.encoder_config(), store_, rng);
      channels_ = config_.channels;
    } else {
      if (channels == 0) throw ConfigError("precomputed features need a positive channel count");
      channels_ = channels;
    }
    if (config_.decoder == DecoderFamily::lstm) {
      LstmConfig c;
      c.vocab = vocab_.size();
      c.embed = config_.embed_size;
      c.channels = channels_;
      c.hidden = config_.hidden_size;
      c.attention = config_.attention_size;
      c.gate = config_.gate;
      c.dropout = config_.lstm_dropout;
      lstm_ = std::make_unique<LstmDecoder>(c, store_, rng);
    } else {
      TransformerConfig c;
      c.vocab = vocab_.size();
      c.channels = channels_;
      c.d_model = config_.d_model;
      c.heads = config_.heads;
      c.layers = config_.layers;
      c.d_ff = config_.d_ff;
      c.max_len = config_.max_len + 1;
      c.dropout = config_.tf_dropout;
      transformer_ = std::make_unique<TransformerDecoder>(c, store_, rng);
    }
  }

  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;

  const ExperimentConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::size_t channels() const { return channels_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const ConvEncoder* encoder() const { return encoder_ ? &*encoder_ : nullptr; }
  const LstmDecoder* lstm() const { return lstm_.get(); }
  const TransformerDecoder* transformer() const { return transformer_.get(); }

  /// True when annotations can be computed once and reused.
  bool static_annotations() const { return !encoder_ || encoder_->frozen(); }

  /// Parameters the optimizer updates.
  std::vector<NamedParameter*> trainable() {
    std::vector<NamedParameter*> out;
    for (auto& p : store_.items())
      if (p.tensor.requires_grad()) out.push_back(&p);
    return out;
  }

  /// Teacher-forced loss; `annotations` is (B*P) x N. Dropout is active
  /// when `rng` is given.
  Tensor loss(const Batch& batch, const Tensor& annotations, std::size_t positions, Rng* rng = nullptr) const {
    auto tf = teacher_forcing(batch);
    if (lstm_) {
      return lstm_->loss(tf, lstm_->prepare(annotations, tf.batch, positions), config_.smoothing(),
                         config_.ds_lambda, rng);
    }
    return transformer_->loss(tf, annotations, positions, config_.smoothing(), rng);
  }

  std::unique_ptr<StepModel> step_model(const AnnotationGrid& grid) const {
    if (lstm_) return std::make_unique<LstmStepModel>(*lstm_, grid);
    return std::make_unique<TransformerStepModel>(*transformer_, grid);
  }

  /// Greedy for beam <= 1, otherwise the best beam hypothesis.
  DecodeOutput decode(const AnnotationGrid& grid, std::size_t beam) const {
    auto m = step_model(grid);
    if (beam <= 1) return greedy_decode(*m, config_.max_len);
    auto hyps = beam_decode(*m, {beam, config_.max_len, false});
    return hyps.empty() ? DecodeOutput{} : hyps.front();
  }

  DecodeOutput decode(const AnnotationGrid& grid) const { return decode(grid, config_.beam); }

  nlohmann::json metadata() const {
    return {{"config", to_json(config_)}, {"vocab", vocab_.tokens()}, {"channels", channels_}};
  }

  /// Writes `path` (parameters) and `path.json` (config and vocabulary).
  void save(const std::filesystem::path& path) const {
    save_checkpoint(path, store_);
    std::ofstream meta(sidecar(path), std::ios::binary);
    if (!meta) throw std::runtime_error("cannot write " + sidecar(path).string());
    meta << metadata().dump(2) << '\n';
  }

  static std::unique_ptr<CaptionModel> load(const std::filesystem::path& path) {
    std::ifstream meta(sidecar(path), std::ios::binary);
    if (!meta) throw std::runtime_error("cannot open model metadata " + sidecar(path).string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(sidecar(path).string() + ": " + e.what());
    }
    auto config = config_from_json(j.at("config"));
    auto vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    Rng rng(0);
    auto model = std::make_unique<CaptionModel>(config, std::move(vocab), j.at("channels").get<std::size_t>(), rng);
    load_checkpoint(path, model->params());
    return model;
  }

  static std::filesystem::path sidecar(const std::filesystem::path& path) {
    return std::filesystem::path(path.string() + ".json");
  }

 private:
  ExperimentConfig config_;
  Vocabulary vocab_;
  std::size_t channels_ = 0;
  ParameterStore store_;
  std::optional<ConvEncoder> encoder_;
  std::unique_ptr<LstmDecoder> lstm_;
  std::unique_ptr<TransformerDecoder> transformer_;
};

}  // namespace capkit
