#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "capkit/harness.hpp"

namespace fs = std::filesystem;
using namespace capkit;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void print_metrics(const MetricReport& r, const std::string& format) {
  if (format == "json") {
    std::cout << metrics_json(r).dump(2) << '\n';
  } else {
    std::cout << metrics_csv(r);
  }
}

struct GenerateArgs {
  std::uint64_t seed = 0;
  std::size_t count = 8;
  std::string out;
};

int run_generate(const GenerateArgs& a) {
  Rng rng(a.seed);
  auto ds = generate_synthetic_dataset(rng, a.count);
  write_dataset(a.out, ds);
  std::cerr << "wrote " << a.count << " images to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out;
  std::optional<std::uint64_t> seed;
  bool finetune_all = false;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  auto j = read_json_file(a.config);
  if (a.seed) j["seed"] = *a.seed;
  if (a.finetune_all) j["finetune_all"] = true;
  const auto config = config_from_json(j);
  const auto data = load_dataset(a.data);
  auto result = train(config, data, a.quiet ? nullptr : &std::cerr);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  result.model->save(out / "model.capm");
  write_text(out / "train_log.csv", train_log_csv(result.log));
  std::cerr << "best epoch " << result.best_epoch << " of " << result.epochs << ", val BLEU-4 "
            << format_fixed(result.best_bleu4, 2) << "; model written to " << (out / "model.capm").string() << '\n';
  return 0;
}

struct EvaluateArgs {
  std::string model, data, split = "test", format = "csv", candidates;
  std::optional<std::size_t> beam;
};

int run_evaluate(const EvaluateArgs& a) {
  auto model = CaptionModel::load(a.model);
  const auto data = load_dataset(a.data);
  const std::size_t beam = a.beam.value_or(model->config().beam);
  if (beam == 0) throw std::invalid_argument("--beam must be positive");
  auto ev = evaluate(*model, data, *parse_split(a.split), beam);
  if (!a.candidates.empty()) write_candidates(a.candidates, ev);
  print_metrics(ev.report, a.format);
  return 0;
}

struct ScoreArgs {
  std::string candidates, references, format = "csv";
};

int run_score(const ScoreArgs& a) {
  print_metrics(score_all(eval_set_from_files(a.candidates, a.references)), a.format);
  return 0;
}

struct SweepArgs {
  std::string spec, data, out;
  std::size_t jobs = 1;
  bool quiet = false;
};

int run_sweep_cmd(const SweepArgs& a) {
  const auto spec = load_sweep_spec(a.spec);
  const auto data = load_dataset(a.data);
  auto rows = run_sweep(spec, data, a.out, a.jobs, a.quiet ? nullptr : &std::cerr);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.status != "ok";
  std::cerr << rows.size() << " cells, " << failed << " failed; results in " << (fs::path(a.out) / "results.csv").string()
            << '\n';
  return 0;
}

struct ReportArgs {
  std::string rows, mode = "absolute", chart, base, format = "csv", out, title;
};

int run_report(const ReportArgs& a) {
  const auto rows = read_rows(a.rows);
  const auto mode = parse_report_mode(a.mode);
  ReportTable table;
  if (mode == ReportMode::absolute) {
    if (!a.base.empty()) throw std::invalid_argument("--base applies to finetune-diff only");
    table = absolute_report(rows);
  } else if (a.base.empty()) {
    table = finetune_diff_report(rows);
  } else {
    const auto base = read_rows(a.base);
    table = finetune_diff_report(rows, &base);
  }
  const std::string text = a.format == "markdown" ? table.markdown() : table.csv();
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
  }
  if (!a.chart.empty()) {
    const std::string title = !a.title.empty() ? a.title : (mode == ReportMode::absolute ? "Scores" : "Fine-tuning delta");
    write_text(a.chart, render_chart(table, title));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capkit: image captioning experiments on a from-scratch tensor engine"};
  app.require_subcommand(1);
  const auto formats = CLI::IsMember({"csv", "json"});

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Write a synthetic shapes dataset");
  g->add_option("--seed", gen.seed, "RNG seed")->required();
  g->add_option("--count", gen.count, "Number of images")->required()->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one configuration with early stopping");
  t->add_option("--config", tr.config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed, "Override the config seed");
  t->add_flag("--finetune-all", tr.finetune_all, "Unfreeze every encoder block when fine-tuning");
  t->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Decode a split and score it");
  e->add_option("--model", ev.model, "Checkpoint (model.capm)")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--split", ev.split, "Split to decode")->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--beam", ev.beam, "Beam size (1 = greedy); defaults to the config");
  e->add_option("--format", ev.format, "Output format")->check(formats);
  e->add_option("--candidates", ev.candidates, "Also write decoded captions as JSON Lines");

  ScoreArgs sc;
  auto* s = app.add_subcommand("score", "Score candidate captions against references");
  s->add_option("--candidates", sc.candidates, "Candidate JSON Lines")->required()->check(CLI::ExistingFile);
  s->add_option("--references", sc.references, "Reference JSON Lines")->required()->check(CLI::ExistingFile);
  s->add_option("--format", sc.format, "Output format")->check(formats);

  SweepArgs sw;
  auto* w = app.add_subcommand("sweep", "Train and test every cell of a sweep spec");
  w->add_option("--spec", sw.spec, "Sweep spec JSON")->required()->check(CLI::ExistingFile);
  w->add_option("--data", sw.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  w->add_option("--out", sw.out, "Output directory")->required();
  w->add_option("--jobs", sw.jobs, "Cells trained concurrently")->check(CLI::PositiveNumber);
  w->add_flag("--quiet", sw.quiet, "No per-cell progress");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Tabulate sweep results");
  r->add_option("--rows", rp.rows, "results.csv from a sweep")->required()->check(CLI::ExistingFile);
  r->add_option("--mode", rp.mode, "Table kind")->check(CLI::IsMember({"absolute", "finetune-diff"}));
  r->add_option("--base", rp.base, "Diff against this results file instead of pairing fine-tune rows")
      ->check(CLI::ExistingFile);
  r->add_option("--chart", rp.chart, "Write a grouped bar chart (SVG)");
  r->add_option("--title", rp.title, "Chart title");
  r->add_option("--format", rp.format, "Table format")->check(CLI::IsMember({"csv", "markdown"}));
  r->add_option("--out", rp.out, "Write the table here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*e) return run_evaluate(ev);
    if (*s) return run_score(sc);
    if (*w) return run_sweep_cmd(sw);
    if (*r) return run_report(rp);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
