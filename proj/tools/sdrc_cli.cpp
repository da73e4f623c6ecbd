// Command-line front end: dataset generation, source training, target
// finetuning + evaluation, CKA/MI analysis and heatmap exports. Every run
// writes one results.json embedding the effective config and seed, so any
// artifact can be regenerated from that file alone.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sdrc/analysis.hpp"
#include "sdrc/config.hpp"
#include "sdrc/episodes.hpp"
#include "sdrc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Config file (key = value lines)");
  cmd->add_option("--set", args.sets, "Override one key, KEY=VALUE (repeatable)");
  cmd->add_option("--seed", args.seed, "Override the master seed");
  cmd->add_option("--out", args.out_dir, "Output directory (default: out)");
}

struct ResolvedConfig {
  sdrc::ExperimentConfig config;
  std::vector<std::string> warnings;
};

// Precedence: defaults < config file < --set < --seed.
ResolvedConfig resolve_config(const CommonArgs& args) {
  ResolvedConfig out;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw sdrc::IoError("cannot open config file " + args.config_path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    sdrc::ParsedConfig parsed = sdrc::parse_config(text);
    out.config = parsed.config;
    out.warnings = parsed.warnings;
  }
  for (const std::string& kv : args.sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw sdrc::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    sdrc::apply_config_entry(out.config, sdrc::detail::trim(kv.substr(0, eq)),
                             sdrc::detail::trim(kv.substr(eq + 1)), "--set");
  }
  if (args.seed) out.config.seed = *args.seed;
  return out;
}

std::string resolve_path(const CommonArgs& args, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p.string();
  return (fs::path(args.out_dir) / p).string();
}

json config_json(const sdrc::ExperimentConfig& config) {
  json j = json::object();
  for (const auto& [key, value] : sdrc::config_entries(config)) j[key] = value;
  return j;
}

void write_results_json(const CommonArgs& args, const ResolvedConfig& rc,
                        const std::string& command, const json& outputs) {
  json j;
  j["command"] = command;
  j["seed"] = rc.config.seed;
  j["artifact"] = {{"version", sdrc::kVersionString},
                   {"epds_version", sdrc::kEpdsVersion},
                   {"sdrc_version", sdrc::kCheckpointVersion}};
  j["config"] = config_json(rc.config);
  j["warnings"] = rc.warnings;
  j["outputs"] = outputs;
  std::ofstream out(fs::path(args.out_dir) / "results.json");
  if (!out) throw sdrc::IoError("cannot write results.json");
  out << j.dump(2) << "\n";
}

void ensure_out_dir(const CommonArgs& args) {
  std::error_code ec;
  fs::create_directories(args.out_dir, ec);
  if (ec) throw sdrc::IoError("cannot create output directory " + args.out_dir);
}

std::vector<sdrc::Episode> eval_episodes(const sdrc::Dataset& ds,
                                         const sdrc::ExperimentConfig& cfg) {
  std::vector<sdrc::Episode> eps;
  eps.reserve(static_cast<std::size_t>(cfg.eval_episodes));
  for (int i = 0; i < cfg.eval_episodes; ++i)
    eps.push_back(sdrc::sample_episode(ds, cfg.train_k, sdrc::eval_episode_seed(cfg.seed, i)));
  return eps;
}

// Deterministic pick of m images from a dataset for analysis.
std::vector<int> analysis_pick(const sdrc::Dataset& ds, int m, std::uint64_t seed) {
  std::vector<int> idx(ds.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  sdrc::Rng rng(sdrc::derive_seed(seed, 0x616E616CULL));
  for (int i = 0; i < m && i < static_cast<int>(idx.size()); ++i) {
    const int j = i + static_cast<int>(rng.below(idx.size() - static_cast<std::size_t>(i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(m))));
  return idx;
}

int cmd_gen_data(const CommonArgs& args) {
  ResolvedConfig rc = resolve_config(args);
  ensure_out_dir(args);
  const sdrc::ExperimentConfig& cfg = rc.config;
  sdrc::Dataset source =
      sdrc::generate_domain(cfg.source_spec(), cfg.data_classes, cfg.data_samples_per_class);
  sdrc::Dataset target =
      sdrc::generate_domain(cfg.target_spec(), cfg.data_classes, cfg.data_samples_per_class);
  const std::string source_path = resolve_path(args, cfg.paths_source_data);
  const std::string target_path = resolve_path(args, cfg.paths_target_data);
  sdrc::write_dataset(source, source_path);
  sdrc::write_dataset(target, target_path);
  write_results_json(args, rc, "gen-data",
                     {{"source_data", source_path},
                      {"source_records", source.samples.size()},
                      {"target_data", target_path},
                      {"target_records", target.samples.size()}});
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_flag) {
  ResolvedConfig rc = resolve_config(args);
  ensure_out_dir(args);
  const sdrc::ExperimentConfig& cfg = rc.config;
  const std::string data_path =
      data_flag.empty() ? resolve_path(args, cfg.paths_source_data) : data_flag;
  sdrc::Dataset ds = sdrc::read_dataset(data_path);
  sdrc::TrainResult result = sdrc::train_source(cfg.vit_config(), cfg.train_config(), ds);
  const std::string ckpt_path = resolve_path(args, cfg.paths_checkpoint);
  sdrc::save_checkpoint(result.ckpt, ckpt_path);

  auto mean_of = [](const std::vector<double>& v, std::size_t from, std::size_t to) {
    if (from >= to || to > v.size()) return 0.0;
    double acc = 0;
    for (std::size_t i = from; i < to; ++i) acc += v[i];
    return acc / static_cast<double>(to - from);
  };
  const std::size_t n = result.bce_history.size();
  json outputs = {{"checkpoint", ckpt_path},
                  {"episodes_run", n},
                  {"episodes_skipped", result.skipped_episodes},
                  {"bce_first10_avg", mean_of(result.bce_history, 0, std::min<std::size_t>(10, n))},
                  {"bce_last10_avg",
                   mean_of(result.bce_history, n >= 10 ? n - 10 : 0, n)}};
  write_results_json(args, rc, "train", outputs);
  return 0;
}

int cmd_finetune_eval(const CommonArgs& args, const std::string& ckpt_flag,
                      const std::string& data_flag) {
  ResolvedConfig rc = resolve_config(args);
  ensure_out_dir(args);
  const sdrc::ExperimentConfig& cfg = rc.config;
  const std::string ckpt_path =
      ckpt_flag.empty() ? resolve_path(args, cfg.paths_checkpoint) : ckpt_flag;
  const std::string data_path =
      data_flag.empty() ? resolve_path(args, cfg.paths_target_data) : data_flag;
  sdrc::Checkpoint ckpt = sdrc::load_checkpoint(ckpt_path);
  // Evaluation knobs follow the invoking config, not the training run.
  ckpt.train.finetune_steps = cfg.train_finetune_steps;
  ckpt.train.finetune_lr = cfg.train_finetune_lr;
  ckpt.train.afw = cfg.train_afw;
  sdrc::Dataset ds = sdrc::read_dataset(data_path);
  sdrc::EvalResult result = sdrc::evaluate(ckpt, eval_episodes(ds, cfg));

  json metrics;
  metrics["config"] = config_json(cfg);
  metrics["mean_iou"] = result.mean_iou;
  metrics["evaluated"] = result.evaluated;
  metrics["skipped"] = result.skipped;
  json per = json::array();
  for (const sdrc::EvalEpisodeRecord& r : result.per_episode)
    per.push_back({{"index", r.index},
                   {"mean_iou", r.mean_iou},
                   {"iou_fg", r.iou_fg},
                   {"iou_bg", r.iou_bg},
                   {"skipped", r.skipped},
                   {"reason", r.reason}});
  metrics["per_episode"] = per;
  const std::string metrics_path = (fs::path(args.out_dir) / "metrics.json").string();
  {
    std::ofstream out(metrics_path);
    if (!out) throw sdrc::IoError("cannot write metrics.json");
    out << metrics.dump(2) << "\n";
  }
  const std::string csv_path = (fs::path(args.out_dir) / "episodes.csv").string();
  {
    std::ofstream out(csv_path);
    if (!out) throw sdrc::IoError("cannot write episodes.csv");
    out << "index,iou_fg,iou_bg,mean_iou,skipped,reason\n";
    for (const sdrc::EvalEpisodeRecord& r : result.per_episode)
      out << r.index << "," << r.iou_fg << "," << r.iou_bg << "," << r.mean_iou << ","
          << (r.skipped ? 1 : 0) << "," << r.reason << "\n";
  }
  write_results_json(args, rc, "finetune-eval",
                     {{"metrics", metrics_path},
                      {"episodes_csv", csv_path},
                      {"mean_iou", result.mean_iou},
                      {"evaluated", result.evaluated},
                      {"skipped", result.skipped}});
  return 0;
}

int cmd_analyze_cka(const CommonArgs& args, const std::string& ckpt_flag,
                    const std::string& source_flag, const std::string& target_flag) {
  ResolvedConfig rc = resolve_config(args);
  ensure_out_dir(args);
  const sdrc::ExperimentConfig& cfg = rc.config;
  const std::string ckpt_path =
      ckpt_flag.empty() ? resolve_path(args, cfg.paths_checkpoint) : ckpt_flag;
  sdrc::Checkpoint ckpt = sdrc::load_checkpoint(ckpt_path);
  sdrc::Dataset source = sdrc::read_dataset(
      source_flag.empty() ? resolve_path(args, cfg.paths_source_data) : source_flag);
  sdrc::Dataset target = sdrc::read_dataset(
      target_flag.empty() ? resolve_path(args, cfg.paths_target_data) : target_flag);

  const int m = std::min({cfg.analysis_samples, static_cast<int>(source.samples.size()),
                          static_cast<int>(target.samples.size())});
  if (m < 2) throw sdrc::ContractError("analyze-cka: needs at least two samples per domain");

  auto streams_of = [&](const sdrc::Dataset& ds, std::uint64_t salt) {
    std::vector<sdrc::ResidualStreamT<float>> streams;
    for (int idx : analysis_pick(ds, m, sdrc::derive_seed(cfg.seed, salt))) {
      const sdrc::Tensor& img = ds.samples[static_cast<std::size_t>(idx)].image;
      sdrc::Tensor z0 = sdrc::patch_embed(img, ckpt.model.vit, ckpt.model.vit_cfg);
      streams.push_back(sdrc::forward_recorded(z0, ckpt.model.vit, ckpt.model.vit_cfg));
    }
    return streams;
  };
  auto source_streams = streams_of(source, 1);
  auto target_streams = streams_of(target, 2);

  sdrc::CkaMatrix matrix = sdrc::layer_pair_cka(source_streams, target_streams);
  // Final-output similarity for the aggregate table.
  auto final_features = [&](const std::vector<sdrc::ResidualStreamT<float>>& streams) {
    const int d = streams[0].final.rows(), n = streams[0].final.cols();
    sdrc::Tensor f({static_cast<int>(streams.size()), d});
    for (std::size_t i = 0; i < streams.size(); ++i)
      for (int r = 0; r < d; ++r) {
        double acc = 0;
        for (int c = 0; c < n; ++c) acc += streams[i].final.at2(r, c);
        f.at2(static_cast<int>(i), r) = static_cast<float>(acc / n);
      }
    return f;
  };
  const double final_cka = sdrc::cka(final_features(source_streams), final_features(target_streams));
  const int k = std::min(cfg.analysis_topk, matrix.size * matrix.size);
  sdrc::CkaAggregates agg = sdrc::cka_aggregates(matrix, final_cka, k);

  // Component MI on the features the model compares (post-OSD when on).
  auto component_sets = [&](const sdrc::Dataset& ds, std::uint64_t salt) {
    std::vector<std::vector<sdrc::Tensor>> sets;
    for (int idx : analysis_pick(ds, m, sdrc::derive_seed(cfg.seed, salt))) {
      auto comps = sdrc::encoder_components(ckpt.model,
                                            ds.samples[static_cast<std::size_t>(idx)].image,
                                            ckpt.train.cpc);
      sets.push_back(sdrc::apply_osd(comps, ckpt.model.osd).components);
    }
    return sets;
  };
  json mi = json::object();
  mi["bins"] = cfg.analysis_bins;
  if (sdrc::effective_components(ckpt.model.vit_cfg, ckpt.train.cpc) >= 2) {
    mi["source"] = sdrc::component_mutual_information(component_sets(source, 1), cfg.analysis_bins);
    mi["target"] = sdrc::component_mutual_information(component_sets(target, 2), cfg.analysis_bins);
  }

  const std::string csv_path = (fs::path(args.out_dir) / "cka.csv").string();
  {
    std::ofstream out(csv_path);
    if (!out) throw sdrc::IoError("cannot write cka.csv");
    sdrc::write_cka_csv(matrix, out);
  }
  json jm;
  jm["dims"] = {matrix.size, matrix.size};
  jm["row_domain"] = matrix.row_domain;
  jm["col_domain"] = matrix.col_domain;
  jm["values"] = matrix.values;
  jm["aggregates"] = {{"final_output", agg.final_output},
                      {"layerwise_avg", agg.layerwise_avg},
                      {"topk_avg", agg.topk_avg},
                      {"bottomk_avg", agg.bottomk_avg},
                      {"k", agg.k}};
  jm["mi"] = mi;
  jm["samples"] = m;
  const std::string json_path = (fs::path(args.out_dir) / "cka.json").string();
  {
    std::ofstream out(json_path);
    if (!out) throw sdrc::IoError("cannot write cka.json");
    out << jm.dump(2) << "\n";
  }
  write_results_json(args, rc, "analyze-cka",
                     {{"cka_csv", csv_path},
                      {"cka_json", json_path},
                      {"layerwise_avg", agg.layerwise_avg},
                      {"final_output", agg.final_output}});
  return 0;
}

int cmd_decompose(const CommonArgs& args, const std::string& ckpt_flag,
                  const std::string& data_flag, int index) {
  ResolvedConfig rc = resolve_config(args);
  ensure_out_dir(args);
  const sdrc::ExperimentConfig& cfg = rc.config;
  sdrc::Checkpoint ckpt = sdrc::load_checkpoint(
      ckpt_flag.empty() ? resolve_path(args, cfg.paths_checkpoint) : ckpt_flag);
  sdrc::Dataset ds = sdrc::read_dataset(
      data_flag.empty() ? resolve_path(args, cfg.paths_target_data) : data_flag);
  if (index < 0 || index >= static_cast<int>(ds.samples.size()))
    throw sdrc::ContractError("decompose: image index out of range");
  const sdrc::Tensor& img = ds.samples[static_cast<std::size_t>(index)].image;
  sdrc::Tensor z0 = sdrc::patch_embed(img, ckpt.model.vit, ckpt.model.vit_cfg);
  auto stream = sdrc::forward_recorded(z0, ckpt.model.vit, ckpt.model.vit_cfg);
  auto comps = sdrc::decompose(stream);

  double total = 0;
  std::vector<double> norms;
  for (const sdrc::Tensor& c : comps) {
    norms.push_back(sdrc::frobenius_norm(c));
    total += norms.back();
  }
  const std::string csv_path = (fs::path(args.out_dir) / "decompose.csv").string();
  {
    std::ofstream out(csv_path);
    if (!out) throw sdrc::IoError("cannot write decompose.csv");
    out << "component,label,frobenius_norm,share\n";
    for (std::size_t i = 0; i < comps.size(); ++i) {
      const std::string label = i == 0 ? "z0" : "layer" + std::to_string(i);
      out << i << "," << label << "," << norms[i] << "," << (total > 0 ? norms[i] / total : 0)
          << "\n";
    }
  }
  write_results_json(args, rc, "decompose",
                     {{"decompose_csv", csv_path},
                      {"image_index", index},
                      {"components", comps.size()}});
  return 0;
}

int cmd_export_heatmap(const CommonArgs& args, const std::string& ckpt_flag,
                       const std::string& data_flag) {
  ResolvedConfig rc = resolve_config(args);
  ensure_out_dir(args);
  const sdrc::ExperimentConfig& cfg = rc.config;
  sdrc::Checkpoint ckpt = sdrc::load_checkpoint(
      ckpt_flag.empty() ? resolve_path(args, cfg.paths_checkpoint) : ckpt_flag);
  ckpt.train.finetune_steps = cfg.train_finetune_steps;
  ckpt.train.finetune_lr = cfg.train_finetune_lr;
  ckpt.train.afw = cfg.train_afw;
  sdrc::Dataset ds = sdrc::read_dataset(
      data_flag.empty() ? resolve_path(args, cfg.paths_target_data) : data_flag);
  sdrc::Episode ep =
      sdrc::sample_episode(ds, cfg.train_k, sdrc::derive_seed(cfg.seed, 0x68656174ULL));
  sdrc::Checkpoint adapted =
      sdrc::finetune_target(ckpt, ep.supports, ckpt.train.finetune_steps, ckpt.train.finetune_lr);
  sdrc::EpisodePrediction p =
      sdrc::predict_episode(adapted.model, ep.supports, ep.query.first, adapted.train);

  const std::string stack_path = (fs::path(args.out_dir) / "score_stack.csv").string();
  {
    std::ofstream out(stack_path);
    if (!out) throw sdrc::IoError("cannot write score_stack.csv");
    sdrc::write_score_stack_csv(p.stack, out);
  }
  json outputs = {{"score_stack_csv", stack_path}, {"episode_class", ep.class_id}};
  if (adapted.model.afw) {
    const std::string afw_path = (fs::path(args.out_dir) / "afw.csv").string();
    std::ofstream out(afw_path);
    if (!out) throw sdrc::IoError("cannot write afw.csv");
    sdrc::write_fusion_weights_csv(*adapted.model.afw, out);
    outputs["afw_csv"] = afw_path;
  }
  write_results_json(args, rc, "export-heatmap", outputs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-disentangling segmentation workbench"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, cka_args, dec_args, heat_args;
  std::string train_data, eval_ckpt, eval_data, cka_ckpt, cka_source, cka_target;
  std::string dec_ckpt, dec_data, heat_ckpt, heat_data;
  int dec_index = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate source and target datasets");
  add_common_options(gen, gen_args);

  CLI::App* train = app.add_subcommand("train", "Source-domain episodic training");
  add_common_options(train, train_args);
  train->add_option("--data", train_data, "Source EPDS file (default from config)");

  CLI::App* ev = app.add_subcommand("finetune-eval", "Finetune on supports and evaluate mIoU");
  add_common_options(ev, eval_args);
  ev->add_option("--ckpt", eval_ckpt, "Checkpoint file (default from config)");
  ev->add_option("--data", eval_data, "Target EPDS file (default from config)");

  CLI::App* cka = app.add_subcommand("analyze-cka", "Layer-pair CKA grid and MI diagnostics");
  add_common_options(cka, cka_args);
  cka->add_option("--ckpt", cka_ckpt, "Checkpoint file (default from config)");
  cka->add_option("--source", cka_source, "Source EPDS file (default from config)");
  cka->add_option("--target", cka_target, "Target EPDS file (default from config)");

  CLI::App* dec = app.add_subcommand("decompose", "Per-component contribution norms for one image");
  add_common_options(dec, dec_args);
  dec->add_option("--ckpt", dec_ckpt, "Checkpoint file (default from config)");
  dec->add_option("--data", dec_data, "EPDS file (default: target data)");
  dec->add_option("--index", dec_index, "Image index (default 0)");

  CLI::App* heat = app.add_subcommand("export-heatmap", "Score-map and fusion-weight CSV export");
  add_common_options(heat, heat_args);
  heat->add_option("--ckpt", heat_ckpt, "Checkpoint file (default from config)");
  heat->add_option("--data", heat_data, "Target EPDS file (default from config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (train->parsed()) return cmd_train(train_args, train_data);
    if (ev->parsed()) return cmd_finetune_eval(eval_args, eval_ckpt, eval_data);
    if (cka->parsed()) return cmd_analyze_cka(cka_args, cka_ckpt, cka_source, cka_target);
    if (dec->parsed()) return cmd_decompose(dec_args, dec_ckpt, dec_data, dec_index);
    if (heat->parsed()) return cmd_export_heatmap(heat_args, heat_ckpt, heat_data);
  } catch (const sdrc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const sdrc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
