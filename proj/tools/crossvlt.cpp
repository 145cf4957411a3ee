// Command-line front end: dataset generation, training, evaluation,
// ablation grids and exports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crossvlt/crossvlt.hpp"

namespace fs = std::filesystem;
using namespace crossvlt;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

/// Config flags shared by the model-facing subcommands. Each maps to one
/// key of the key-value config format; explicit flags override --config.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app, bool with_train) {
    app->add_option("--config", config_file, "key-value config file")->check(CLI::ExistingFile);
    const std::vector<std::pair<std::string, std::string>> model_keys{
        {"image_size", "image side in pixels"},
        {"patch_size", "patch side in pixels"},
        {"num_stages", "number of encoder stages"},
        {"vision_depths", "self-attention blocks per vision stage, e.g. 1,1,1,1"},
        {"vision_channels", "channels per vision stage"},
        {"vision_heads", "attention heads per vision stage"},
        {"lang_depths", "layers per language stage"},
        {"lang_dim", "language width"},
        {"lang_heads", "language attention heads"},
        {"vocab_size", "vocabulary size"},
        {"max_tokens", "tokens per expression including [CLS]"},
        {"align_dim", "shared alignment dimension"},
        {"ffn_ratio", "FFN hidden width multiple"},
        {"decoder_channels", "decoder block widths"},
        {"lambda_align", "alignment loss weight"},
        {"fusion_stages", "stages with early fusion, e.g. 1,2,3,4 or \"\""},
        {"align_stages", "stages with alignment loss"},
        {"fusion_direction", "bi|uni (bidirectional|vision_only)"},
        {"align_norm", "per_stage_mean|global_pixel_mean"},
        {"stage_loss", "alignment|auxiliary"},
        {"attention_window", "reserved, must be 0"},
        {"seed", "model seed"},
    };
    const std::vector<std::pair<std::string, std::string>> train_keys{
        {"epochs", "training epochs"},
        {"batch_size", "batch size"},
        {"base_lr", "initial learning rate"},
        {"lr_power", "polynomial decay power"},
        {"weight_decay", "decoupled weight decay"},
        {"bn_momentum", "batch-norm running-stat momentum"},
        {"init_seed", "parameter init seed"},
        {"shuffle_seed", "batch order and augmentation seed"},
        {"augment_mirror", "random left-right mirror (0/1)"},
        {"augment_recolor", "random colour permutation (0/1)"},
    };
    for (const auto& [key, help] : model_keys) add(app, key, help);
    if (with_train) {
      for (const auto& [key, help] : train_keys) add(app, key, help);
    }
  }

  void add(CLI::App* app, const std::string& key, const std::string& help) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    options[key] = app->add_option(flag, values[key], help);
  }

  KeyValues explicit_values() const {
    KeyValues kv;
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) kv[key] = detail::trim(values.at(key));
    }
    return kv;
  }

  void resolve(ModelConfig& model, TrainConfig& train) const {
    if (!config_file.empty()) apply_config_file(read_key_value_file(config_file), model, train);
    apply_config_file(explicit_values(), model, train);
    require_valid(model);
    require_valid(train);
  }

  /// True when any model-shaping flag was given.
  bool any_model_flag() const {
    ModelConfig probe;
    return !config_file.empty() || apply_key_values(probe, explicit_values()).size() != explicit_values().size();
  }
};

struct DataFlags {
  std::string dir;
  std::string split = "all";
  double val_fraction = 0.2;
  std::uint64_t split_seed = 0;

  void attach(CLI::App* app, const std::string& default_split) {
    split = default_split;
    app->add_option("--data", dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    app->add_option("--split", split, "which scenes: all|train|val")
        ->check(CLI::IsMember({"all", "train", "val"}))
        ->capture_default_str();
    app->add_option("--val-fraction", val_fraction, "validation share for --split")->capture_default_str();
    app->add_option("--split-seed", split_seed, "shuffle seed of the split")->capture_default_str();
  }

  std::vector<Scene> load() const {
    auto scenes = read_dataset(dir);
    if (split == "all") return scenes;
    auto s = split_dataset(scenes, val_fraction, split_seed);
    return split == "train" ? s.train : s.val;
  }
};

Vocab dataset_vocab(const std::string& dir) {
  const fs::path p = fs::path(dir) / "vocab.txt";
  return fs::exists(p) ? read_vocab(p.string()) : Vocab{};
}

void write_file(const std::string& path, const std::function<void(std::ostream&)>& body) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  body(os);
  if (!os) throw IoError("write failure on " + path);
}

/// Loads a checkpoint; when config flags were given they must describe the
/// same parameter set.
Checkpoint load_for_inference(const std::string& path, const ConfigFlags& flags) {
  if (!flags.any_model_flag()) return load_checkpoint(path);
  ModelConfig expected;
  TrainConfig unused;
  flags.resolve(expected, unused);
  return load_checkpoint(path, &expected);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-aware early-fusion referring segmentation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help of all subcommands");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic referring-expression dataset");
  int gen_count = 320;
  std::uint64_t gen_seed = 0;
  int gen_size = 64;
  std::string gen_out;
  gen->add_option("--count", gen_count, "number of scenes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--image-size", gen_size, "image side in pixels")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  ConfigFlags tr_cfg;
  tr_cfg.attach(tr, true);
  DataFlags tr_data;
  tr_data.attach(tr, "train");
  std::string tr_out, tr_log, tr_dump;
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--log", tr_log, "epoch log CSV (default: <out>.log.csv)");
  tr->add_option("--dump", tr_dump, "diagnostic file for a non-finite abort");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint and write report files");
  ConfigFlags ev_cfg;
  ev_cfg.attach(ev, false);
  DataFlags ev_data;
  ev_data.attach(ev, "all");
  std::string ev_ckpt, ev_report_dir;
  bool ev_typos = false;
  std::uint64_t ev_typo_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--report-dir", ev_report_dir, "directory for report.txt, report.kv, pr_curve.csv");
  ev->add_flag("--typos", ev_typos, "replace one word of every expression");
  ev->add_option("--typo-seed", ev_typo_seed, "seed for --typos")->capture_default_str();

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and compare an ablation grid");
  ConfigFlags ab_cfg;
  ab_cfg.attach(ab, true);
  std::string ab_data, ab_preset = "directional", ab_csv, ab_text;
  std::vector<std::uint64_t> ab_seeds{0, 1, 2};
  double ab_val_fraction = 0.2;
  std::uint64_t ab_split_seed = 0;
  ab->add_option("--data", ab_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--preset", ab_preset, "grid name")
      ->check(CLI::IsMember(ablation_presets()))
      ->capture_default_str();
  ab->add_option("--seeds", ab_seeds, "seeds per cell")->delimiter(',')->capture_default_str();
  ab->add_option("--val-fraction", ab_val_fraction, "validation share")->capture_default_str();
  ab->add_option("--split-seed", ab_split_seed, "shuffle seed of the split")->capture_default_str();
  ab->add_option("--csv", ab_csv, "table as CSV");
  ab->add_option("--text", ab_text, "table as aligned text");

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "dump per-stage alignment embeddings as TSV");
  ConfigFlags ex_cfg;
  ex_cfg.attach(ex, false);
  DataFlags ex_data;
  ex_data.attach(ex, "all");
  std::string ex_ckpt, ex_out;
  int ex_limit = 0;
  ex->add_option("--checkpoint", ex_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", ex_out, "output TSV")->required();
  ex->add_option("--limit", ex_limit, "first N scenes only (0 = all)");

  // render-masks
  auto* rm = app.add_subcommand("render-masks", "write predicted masks and probability maps as PNG");
  ConfigFlags rm_cfg;
  rm_cfg.attach(rm, false);
  DataFlags rm_data;
  rm_data.attach(rm, "all");
  std::string rm_ckpt, rm_out;
  rm->add_option("--checkpoint", rm_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  rm->add_option("--out", rm_out, "output directory")->required();

  // pr-curve
  auto* pr = app.add_subcommand("pr-curve", "pixel-level precision/recall curve as CSV");
  ConfigFlags pr_cfg;
  pr_cfg.attach(pr, false);
  DataFlags pr_data;
  pr_data.attach(pr, "all");
  std::string pr_ckpt, pr_out;
  int pr_thresholds = 101;
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  pr->add_option("--out", pr_out, "output CSV")->required();
  pr->add_option("--thresholds", pr_thresholds, "number of evenly spaced thresholds")->capture_default_str();

  // Unknown arguments are collected and reported ahead of missing required
  // options, so a misspelt flag is named in the error.
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->allow_extras();
  auto unexpected = [&]() -> std::optional<CLI::ExtrasError> {
    for (auto* sub : app.get_subcommands()) {
      if (!sub->remaining().empty()) return CLI::ExtrasError(sub->get_name(), sub->remaining());
    }
    return std::nullopt;
  };
  try {
    app.parse(argc, argv);
    if (auto e = unexpected()) throw *e;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (auto extra = unexpected()) {
      app.exit(*extra);
    } else {
      app.exit(e);
    }
    std::cerr << '\n' << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      const auto scenes = generate_dataset(gen_count, gen_seed, gen_size);
      write_dataset(gen_out, scenes);
      std::cout << "wrote " << scenes.size() << " scenes to " << gen_out << '\n';
    } else if (tr->parsed()) {
      ModelConfig mc;
      TrainConfig tc;
      tr_cfg.resolve(mc, tc);
      const Vocab vocab = dataset_vocab(tr_data.dir);
      const auto scenes = tr_data.load();
      TrainOptions opt;
      opt.log_path = tr_log.empty() ? tr_out + ".log.csv" : tr_log;
      opt.dump_path = tr_dump;
      opt.on_epoch = [](const EpochLog& e, const Checkpoint&) {
        std::cout << "epoch " << e.epoch << "  step " << e.step << "  lr " << e.lr << "  L_task " << e.task
                  << "  L_align " << e.align << "  L_total " << e.total << "  train mIoU " << e.train_miou
                  << std::endl;
      };
      const auto result = train(mc, tc, scenes, vocab, opt);
      save_checkpoint(tr_out, result.checkpoint);
      std::cout << "checkpoint " << tr_out << '\n';
    } else if (ev->parsed()) {
      const auto ck = load_for_inference(ev_ckpt, ev_cfg);
      const Vocab vocab = dataset_vocab(ev_data.dir);
      EvalOptions eo;
      eo.inject_typos = ev_typos;
      eo.typo_seed = ev_typo_seed;
      const auto report = evaluate_model(ck.params, ck.model, ev_data.load(), vocab, eo);
      write_report_text(std::cout, report);
      const std::string dir = ev_report_dir.empty() ? (fs::path(ev_ckpt).parent_path() / "report").string()
                                                    : ev_report_dir;
      write_file((fs::path(dir) / "report.txt").string(), [&](std::ostream& os) { write_report_text(os, report); });
      write_file((fs::path(dir) / "report.kv").string(), [&](std::ostream& os) { write_report_kv(os, report); });
      write_file((fs::path(dir) / "pr_curve.csv").string(),
                 [&](std::ostream& os) { write_pr_csv(os, report.pr_curve); });
      std::cout << "reports in " << dir << '\n';
    } else if (ab->parsed()) {
      ModelConfig base;
      TrainConfig tc;
      ab_cfg.resolve(base, tc);
      const Vocab vocab = dataset_vocab(ab_data);
      const auto split = split_dataset(read_dataset(ab_data), ab_val_fraction, ab_split_seed);
      const auto cells = ablation_grid(ab_preset, base);
      const auto rows = run_ablation_suite(
          cells, ab_seeds, tc, split.train, split.val, vocab,
          [](const AblationCell& c, std::uint64_t seed, const EvalReport* r, const std::string& err) {
            std::cout << c.group << " / " << c.name << "  seed " << seed << ": ";
            if (r) std::cout << "val mIoU " << 100 * r->miou << "  oIoU " << 100 * r->oiou << std::endl;
            else std::cout << "FAILED " << err << std::endl;
          });
      write_ablation_text(std::cout, rows);
      if (!ab_csv.empty()) write_file(ab_csv, [&](std::ostream& os) { write_ablation_csv(os, rows); });
      if (!ab_text.empty()) write_file(ab_text, [&](std::ostream& os) { write_ablation_text(os, rows); });
    } else if (ex->parsed()) {
      const auto ck = load_for_inference(ex_ckpt, ex_cfg);
      auto scenes = ex_data.load();
      if (ex_limit > 0 && static_cast<std::size_t>(ex_limit) < scenes.size()) scenes.resize(static_cast<std::size_t>(ex_limit));
      const auto records = collect_embeddings(ck.params, ck.model, scenes, dataset_vocab(ex_data.dir));
      write_file(ex_out, [&](std::ostream& os) { write_embeddings(os, records, ck.model.align_dim); });
      std::cout << "wrote " << records.size() << " stage records to " << ex_out << '\n';
    } else if (rm->parsed()) {
      const auto ck = load_for_inference(rm_ckpt, rm_cfg);
      const auto scenes = rm_data.load();
      EvalOutputs out;
      const auto report = evaluate_model(ck.params, ck.model, scenes, dataset_vocab(rm_data.dir), {}, &out);
      fs::create_directories(fs::path(rm_out) / "pred");
      fs::create_directories(fs::path(rm_out) / "prob");
      const int S = ck.model.image_size;
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        const std::string stem = scene_stem(scenes[i].id) + ".png";
        write_png_mask((fs::path(rm_out) / "pred" / stem).string(), out.predictions[i]);
        write_png_gray((fs::path(rm_out) / "prob" / stem).string(), S, S, out.probabilities[i]);
      }
      std::cout << "wrote " << scenes.size() << " masks to " << rm_out << "  (mIoU " << 100 * report.miou << ")\n";
    } else if (pr->parsed()) {
      const auto ck = load_for_inference(pr_ckpt, pr_cfg);
      EvalOptions eo;
      eo.pr_thresholds = pr_thresholds;
      const auto report = evaluate_model(ck.params, ck.model, pr_data.load(), dataset_vocab(pr_data.dir), eo);
      write_file(pr_out, [&](std::ostream& os) { write_pr_csv(os, report.pr_curve); });
      std::cout << "pixel-level PR curve (counts pooled over all samples), AUC " << pr_auc(report.pr_curve)
                << ", written to " << pr_out << '\n';
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
