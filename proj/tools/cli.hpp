#pragma once

// Command-line driver: gen-synthetic, train, evaluate, ablate, grid-search.
//
// Every subcommand writes config.json into its output directory before doing
// any work. The output directory defaults to $GPLDAN_OUTPUT_DIR, then ".".

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gpldan/gpldan.hpp"

namespace gpldan::cli {

inline constexpr const char* kOutputDirEnv = "GPLDAN_OUTPUT_DIR";

inline std::filesystem::path default_output_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return (env && *env) ? std::filesystem::path(env) : std::filesystem::path(".");
}

namespace detail {

struct TrainFlags {
  TrainConfig config;
  bool no_udp = false, no_mdp = false, no_mc = false, no_da = false;

  void add_to(CLI::App& app) {
    app.add_option("--alpha", config.alpha, "weight of the unpaired distance term")->capture_default_str();
    app.add_option("--beta", config.beta, "weight of the mutual distance term")->capture_default_str();
    app.add_option("--lambda", config.lambda, "weight of the modality confusion term")->capture_default_str();
    app.add_option("--k", config.k, "number of sub-representations")->capture_default_str();
    app.add_option("--common-width", config.common_width, "abstract feature width L")->capture_default_str();
    app.add_option("--entry-width", config.entry_width, "modality-specific layer width E")->capture_default_str();
    app.add_option("--lr-g", config.lr_g, "Adam learning rate of the projector")->capture_default_str();
    app.add_option("--lr-d", config.lr_d, "RMSprop learning rate of the classifier")->capture_default_str();
    app.add_option("--weight-decay-g", config.weight_decay_g, "projector weight decay")->capture_default_str();
    app.add_option("--batch-size", config.batch_size)->capture_default_str();
    app.add_option("--epochs", config.epochs)->capture_default_str();
    app.add_option("--denoise-rate", config.denoise_rate)->capture_default_str();
    app.add_option("--seed", config.seed)->capture_default_str();
    app.add_flag("--no-udp", no_udp, "drop the unpaired distance term");
    app.add_flag("--no-mdp", no_mdp, "drop the mutual distance term");
    app.add_flag("--no-mc", no_mc, "drop the modality classifier");
    app.add_flag("--no-da", no_da, "replace attention maps by uniform 1/k maps");
    app.add_flag("--udp-signed", config.udp_signed, "signed instead of absolute unpaired differences");
    app.add_flag("--symmetric-udp", config.symmetric_udp, "also compare the transposed cross-modal distances");
    app.add_flag("--global-d-mean", config.global_d_mean, "normalize reference distances over the whole training set");
  }

  TrainConfig resolve() const {
    TrainConfig c = config;
    c.use_udp = !no_udp;
    c.use_mdp = !no_mdp;
    c.use_mc = !no_mc;
    c.use_da = !no_da;
    c.validate();
    return c;
  }
};

struct EvalFlags {
  std::size_t map_k = 50;
  std::string ap_norm = "min-r-k";

  void add_to(CLI::App& app) {
    app.add_option("--map-k", map_k, "cutoff of MAP@k")->capture_default_str();
    app.add_option("--ap-norm", ap_norm, "AP normalization")
        ->check(CLI::IsMember({"min-r-k", "rel-at-k"}))
        ->capture_default_str();
  }

  EvalOptions resolve() const {
    if (map_k < 1) throw ConfigError("cli", "--map-k must be at least 1");
    return {map_k, parse_ap_normalization(ap_norm)};
  }
};

inline nlohmann::json eval_json(const EvalOptions& e) {
  return {{"map_k", e.map_k}, {"ap_norm", to_string(e.norm)}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  gpldan::detail::write_all(path, text);
}

inline std::filesystem::path prepare_output(const std::filesystem::path& dir, const nlohmann::json& echo) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw LoadError(LoadError::Kind::io, "cannot create output directory " + dir.string() + ": " + ec.message());
  write_text(dir / "config.json", echo.dump(2) + "\n");
  return dir;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code:
/// 0 on success, 1 for typed library errors, CLI11's code for usage errors.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Graph pattern loss cross-modal retrieval"};
  app.require_subcommand(1);
  std::string out_dir = default_output_dir().string();
  app.add_option("--out", out_dir, "output directory (defaults to $GPLDAN_OUTPUT_DIR or .)");

  SyntheticSpec synth;
  synth.test_per_cluster = 20;
  auto* gen = app.add_subcommand("gen-synthetic", "write a clustered synthetic paired dataset");
  gen->add_option("--clusters", synth.n_clusters)->capture_default_str();
  gen->add_option("--per-cluster", synth.n_per_cluster, "training pairs per cluster")->capture_default_str();
  gen->add_option("--test-per-cluster", synth.test_per_cluster, "test pairs per cluster")->capture_default_str();
  gen->add_option("--dim-image", synth.dim_image)->capture_default_str();
  gen->add_option("--dim-text", synth.dim_text)->capture_default_str();
  gen->add_option("--noise-sigma", synth.noise_sigma)->capture_default_str();
  gen->add_option("--seed", synth.seed)->capture_default_str();
  gen->add_option("--out", out_dir, "output directory");

  std::string manifest, checkpoint;
  detail::TrainFlags train_flags;
  detail::EvalFlags eval_flags;

  auto* train_cmd = app.add_subcommand("train", "train a projector; writes model.gpld and train_log.csv");
  train_cmd->add_option("--manifest", manifest)->required();
  train_cmd->add_option("--out", out_dir, "output directory");
  train_flags.add_to(*train_cmd);

  bool per_query = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "MAP@k of a checkpoint on the test split; writes results.csv");
  eval_cmd->add_option("--manifest", manifest)->required();
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--out", out_dir, "output directory");
  eval_cmd->add_flag("--per-query", per_query, "also write per_query_ap.csv");
  eval_flags.add_to(*eval_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate the six ablation rows; writes ablation.csv");
  ablate_cmd->add_option("--manifest", manifest)->required();
  ablate_cmd->add_option("--out", out_dir, "output directory");
  train_flags.add_to(*ablate_cmd);
  eval_flags.add_to(*ablate_cmd);

  std::vector<double> alphas, betas;
  auto* grid_cmd = app.add_subcommand("grid-search", "sweep alpha x beta; writes grid.csv");
  grid_cmd->add_option("--manifest", manifest)->required();
  grid_cmd->add_option("--out", out_dir, "output directory");
  grid_cmd->add_option("--alphas", alphas, "alpha values")->delimiter(',')->required();
  grid_cmd->add_option("--betas", betas, "beta values")->delimiter(',')->required();
  train_flags.add_to(*grid_cmd);
  eval_flags.add_to(*grid_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    const std::filesystem::path dir = out_dir;
    nlohmann::json echo = {{"command", app.get_subcommands().front()->get_name()}};

    if (gen->parsed()) {
      echo["synthetic"] = {{"clusters", synth.n_clusters},       {"per_cluster", synth.n_per_cluster},
                           {"test_per_cluster", synth.test_per_cluster}, {"dim_image", synth.dim_image},
                           {"dim_text", synth.dim_text},         {"noise_sigma", synth.noise_sigma},
                           {"seed", synth.seed}};
      detail::prepare_output(dir, echo);
      const std::filesystem::path m = save(dir, generate_synthetic(synth));
      out << "wrote " << m.string() << "\n";
      return 0;
    }

    echo["manifest"] = manifest;

    if (train_cmd->parsed()) {
      const TrainConfig config = train_flags.resolve();
      echo["train"] = to_json(config);
      detail::prepare_output(dir, echo);
      const PairedDataset data = load(manifest);
      const TrainResult r = train(data, config);
      save_checkpoint(dir / "model.gpld", r.model);
      detail::write_text(dir / "train_log.csv", training_log_csv(r.log));
      for (const auto& w : r.warnings) err << "warning [trainer]: " << w << "\n";
      out << "trained " << r.log.size() << " steps, skipped " << r.skipped_batches << " batches\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      const EvalOptions eval = eval_flags.resolve();
      echo["checkpoint"] = checkpoint;
      echo["eval"] = detail::eval_json(eval);
      detail::prepare_output(dir, echo);
      const PairedDataset data = load(manifest);
      const Model model = load_checkpoint(checkpoint);
      const EvaluationReport report = evaluate(model, data, eval);
      const std::string csv = results_csv(report);
      detail::write_text(dir / "results.csv", csv);
      if (per_query) detail::write_text(dir / "per_query_ap.csv", per_query_csv(report));
      out << csv;
      return 0;
    }

    const TrainConfig config = train_flags.resolve();
    const EvalOptions eval = eval_flags.resolve();
    echo["train"] = to_json(config);
    echo["eval"] = detail::eval_json(eval);

    if (ablate_cmd->parsed()) {
      detail::prepare_output(dir, echo);
      const std::string csv = ablation_csv(ablate(load(manifest), config, eval));
      detail::write_text(dir / "ablation.csv", csv);
      out << csv;
      return 0;
    }

    echo["alphas"] = alphas;
    echo["betas"] = betas;
    detail::prepare_output(dir, echo);
    const std::string csv = grid_csv(grid_search(load(manifest), alphas, betas, config, eval));
    detail::write_text(dir / "grid.csv", csv);
    out << csv;
    return 0;
  } catch (const Error& e) {
    err << "error [" << e.module() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace gpldan::cli
