#pragma once

// Alternating adversarial training of the projector (G) and the modality
// classifier (D), ablation runs and the alpha/beta sweep.
//
// Per mini-batch: forward the projector, take one RMSprop step on L_D, then
// one Adam step on L_G (graph pattern loss plus the lambda-weighted confusion
// term). Batch order, denoising masks and initialization are all derived from
// the master seed, so a run is reproducible bit for bit.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpldan/adversary.hpp"
#include "gpldan/data_io.hpp"
#include "gpldan/graph_loss.hpp"
#include "gpldan/optim.hpp"
#include "gpldan/projector.hpp"
#include "gpldan/retrieval_eval.hpp"

namespace gpldan {

struct TrainConfig {
  Eigen::Index k = 4;
  Eigen::Index common_width = 1024;  // L
  Eigen::Index entry_width = 1024;   // E
  double alpha = 1.0;
  double beta = 0.1;
  double lambda = 0.01;
  double lr_g = 1e-4;
  double weight_decay_g = 1e-4;
  double lr_d = 5e-5;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  double denoise_rate = 0.1;
  std::uint64_t seed = 0;
  bool use_udp = true;
  bool use_mdp = true;
  bool use_mc = true;
  bool use_da = true;
  bool udp_signed = false;
  bool symmetric_udp = false;
  bool global_d_mean = false;

  void validate() const {
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
    if (!positive(lr_g) || !positive(lr_d)) throw ConfigError("trainer", "learning rates must be positive");
    if (!(weight_decay_g >= 0.0) || !std::isfinite(weight_decay_g))
      throw ConfigError("trainer", "weight decay must be finite and >= 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("trainer", "lambda must be finite and >= 0");
    GraphLossWeights{alpha, beta}.validate();
    if (!(denoise_rate >= 0.0 && denoise_rate < 1.0)) throw ConfigError("trainer", "denoise rate must lie in [0, 1)");
    if (batch_size < 2) throw ConfigError("trainer", "batch size must be at least 2");
    if (epochs < 1) throw ConfigError("trainer", "epochs must be at least 1");
    if (k <= 0 || common_width <= 0 || common_width % k != 0)
      throw ConfigError("trainer", "k=" + std::to_string(k) + " must divide L=" + std::to_string(common_width));
    if (entry_width <= 0) throw ConfigError("trainer", "entry width must be positive");
  }

  GraphLossWeights effective_weights() const { return {use_udp ? alpha : 0.0, use_mdp ? beta : 0.0}; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"k", c.k},
          {"common_width", c.common_width},
          {"entry_width", c.entry_width},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"lambda", c.lambda},
          {"lr_g", c.lr_g},
          {"weight_decay_g", c.weight_decay_g},
          {"lr_d", c.lr_d},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"denoise_rate", c.denoise_rate},
          {"seed", c.seed},
          {"use_udp", c.use_udp},
          {"use_mdp", c.use_mdp},
          {"use_mc", c.use_mc},
          {"use_da", c.use_da},
          {"udp_signed", c.udp_signed},
          {"symmetric_udp", c.symmetric_udp},
          {"global_d_mean", c.global_d_mean}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.k = j.at("k").get<Eigen::Index>();
    c.common_width = j.at("common_width").get<Eigen::Index>();
    c.entry_width = j.at("entry_width").get<Eigen::Index>();
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.lr_g = j.at("lr_g").get<double>();
    c.weight_decay_g = j.at("weight_decay_g").get<double>();
    c.lr_d = j.at("lr_d").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.denoise_rate = j.at("denoise_rate").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.use_udp = j.at("use_udp").get<bool>();
    c.use_mdp = j.at("use_mdp").get<bool>();
    c.use_mc = j.at("use_mc").get<bool>();
    c.use_da = j.at("use_da").get<bool>();
    c.udp_signed = j.at("udp_signed").get<bool>();
    c.symmetric_udp = j.at("symmetric_udp").get<bool>();
    c.global_d_mean = j.at("global_d_mean").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("trainer", std::string("bad config echo: ") + e.what());
  }
  return c;
}

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double l_pdl = 0, l_udp = 0, l_mdp = 0, l_gpl = 0, l_D = 0, l_G = 0;
};

struct Model {
  TrainConfig config;
  Projector projector;
  ModalityClassifier classifier;
};

struct TrainResult {
  Model model;
  std::vector<TrainLogRow> log;
  std::size_t skipped_batches = 0;
  std::vector<std::string> warnings;
};

/// Called after every optimizer step with the current model and its log row.
using StepObserver = std::function<void(const Model&, const TrainLogRow&)>;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(master ^ splitmix64(stream));
}

enum SeedStream : std::uint64_t { projector_init = 1, classifier_init = 2, shuffle = 1ull << 32, noise = 1ull << 48 };

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(Eigen::Index(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(Eigen::Index(r)) = m.row(Eigen::Index(idx[r]));
  return out;
}

}  // namespace detail

inline Model make_model(const TrainConfig& config, Eigen::Index image_dim, Eigen::Index text_dim) {
  config.validate();
  ProjectorShape shape{image_dim, text_dim, config.entry_width, config.common_width, config.k};
  Model m{config, Projector(shape, detail::derive_seed(config.seed, detail::projector_init)),
          ModalityClassifier(config.common_width, detail::derive_seed(config.seed, detail::classifier_init))};
  m.projector.set_diversified_attention(config.use_da);
  return m;
}

/// Trains on paired image/text rows. Labels are never consulted.
inline TrainResult train(const Matrix& image, const Matrix& text, const TrainConfig& config,
                         const StepObserver& observer = {}) {
  config.validate();
  if (image.rows() != text.rows()) throw DimensionError("trainer", "image and text row counts differ");
  const auto n = std::size_t(image.rows());
  if (n < 2) throw ContractError("trainer", "training needs at least two paired instances");

  TrainResult result{make_model(config, image.cols(), text.cols()), {}, 0, {}};
  Model& model = result.model;

  std::vector<Tensor> g_params = {model.projector.params().w_image, model.projector.params().w_text,
                                  model.projector.params().w_shared};
  if (config.use_da) {
    g_params.push_back(model.projector.params().w_att1);
    g_params.push_back(model.projector.params().w_att2);
  }
  numgrad::Adam g_opt(g_params, {.lr = config.lr_g, .weight_decay = config.weight_decay_g});
  numgrad::Rmsprop d_opt(model.classifier.params(), {.lr = config.lr_d});

  GraphLossOptions loss_options{config.udp_signed, config.symmetric_udp, std::nullopt};
  if (config.global_d_mean) {
    const double dm = mean_original_distance(original_distances(image, text));
    if (!(dm > kMinMeanDistance)) throw DegenerateBatchError("trainer", "training set has zero mean original distance");
    loss_options.global_d_mean = dm;
  }
  const GraphLossWeights weights = config.effective_weights();

  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(detail::derive_seed(config.seed, detail::shuffle + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t begin = 0; begin < n;) {
      std::size_t end = std::min(n, begin + config.batch_size);
      if (n - end == 1) end = n;  // never leave a single-instance batch
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      begin = end;
      ++step;

      Matrix u = denoise(detail::gather_rows(image, idx), config.denoise_rate,
                         detail::derive_seed(config.seed, detail::noise + 2 * step));
      Matrix c = denoise(detail::gather_rows(text, idx), config.denoise_rate,
                         detail::derive_seed(config.seed, detail::noise + 2 * step + 1));
      try {
        BatchContext ctx = make_batch_context(model.projector, std::move(u), std::move(c));
        GraphLossReport report = graph_pattern_loss(ctx, weights, loss_options);

        TrainLogRow row{epoch, step};
        if (config.use_mc) {
          Tensor l_d = classifier_loss(model.classifier, ctx.image, ctx.text);
          d_opt.zero_grad();
          numgrad::backward(l_d);
          d_opt.step();
          row.l_D = l_d.item();
        }
        Tensor l_g = config.use_mc
                         ? generator_loss(report.l_gpl, model.classifier, ctx.image, ctx.text, config.lambda)
                         : report.l_gpl;
        g_opt.zero_grad();
        numgrad::backward(l_g);
        g_opt.step();

        row.l_pdl = report.l_pdl.item();
        row.l_udp = report.l_udp.item();
        row.l_mdp = report.l_mdp.item();
        row.l_gpl = report.l_gpl.item();
        row.l_G = l_g.item();
        result.log.push_back(row);
        if (observer) observer(model, row);
      } catch (const DegenerateBatchError& e) {
        ++result.skipped_batches;
        result.warnings.push_back("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                  ": skipped degenerate batch (" + e.what() + ")");
      } catch (const NumericDomainError& e) {
        ++result.skipped_batches;
        result.warnings.push_back("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                  ": skipped batch (" + e.what() + ")");
      }
    }
  }
  return result;
}

inline TrainResult train(const PairedDataset& data, const TrainConfig& config, const StepObserver& observer = {}) {
  return train(data.train_image(), data.train_text(), config, observer);
}

inline std::string training_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "epoch,step,l_pdl,l_udp,l_mdp,l_gpl,l_D,l_G\n";
  char buf[256];
  for (const TrainLogRow& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step, r.l_pdl, r.l_udp,
                  r.l_mdp, r.l_gpl, r.l_D, r.l_G);
    out += buf;
  }
  return out;
}

// Checkpoint (little-endian):
//   "GPLD", u32 version, u32 config length, config JSON,
//   u32 matrix count, then per matrix: u32 name length, name, u32 rows,
//   u32 cols, rows*cols f64 row-major.
inline constexpr char kCheckpointMagic[4] = {'G', 'P', 'L', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Model& m) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  nlohmann::json echo = to_json(m.config);
  echo["image_dim"] = m.projector.shape().image_dim;
  echo["text_dim"] = m.projector.shape().text_dim;
  const std::string cfg = echo.dump();
  detail::put_u32(out, std::uint32_t(cfg.size()));
  out += cfg;
  const auto& p = m.projector.params();
  const std::vector<std::pair<std::string, const Tensor*>> mats = {
      {"w_image", &p.w_image}, {"w_text", &p.w_text},     {"w_shared", &p.w_shared},
      {"w_att1", &p.w_att1},   {"w_att2", &p.w_att2},     {"d_hidden", &m.classifier.w_hidden()},
      {"d_out", &m.classifier.w_out()}};
  detail::put_u32(out, std::uint32_t(mats.size()));
  for (const auto& [name, t] : mats) {
    detail::put_u32(out, std::uint32_t(name.size()));
    out += name;
    detail::put_u32(out, std::uint32_t(t->rows()));
    detail::put_u32(out, std::uint32_t(t->cols()));
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(t->value().data()[i]);
      detail::put_u32(out, std::uint32_t(bits & 0xffffffffu));
      detail::put_u32(out, std::uint32_t(bits >> 32));
    }
  }
  return out;
}

inline Model decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
  using K = LoadError::Kind;
  std::size_t pos = 0;
  auto need = [&](std::size_t count) {
    if (bytes.size() - pos < count)
      throw LoadError(K::truncated, origin + ": checkpoint truncated at byte " + std::to_string(pos));
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  need(4);
  if (bytes.compare(0, 4, kCheckpointMagic, 4) != 0) throw LoadError(K::bad_magic, origin + ": magic is not GPLD");
  pos = 4;
  if (const auto v = u32(); v != kCheckpointVersion)
    throw LoadError(K::bad_version, origin + ": unsupported checkpoint version " + std::to_string(v));
  const auto cfg_len = u32();
  need(cfg_len);
  nlohmann::json echo;
  try {
    echo = nlohmann::json::parse(bytes.substr(pos, cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(K::parse, origin + ": config echo is not JSON: " + e.what());
  }
  pos += cfg_len;
  const TrainConfig config = train_config_from_json(echo);
  std::map<std::string, Tensor> mats;
  const auto count = u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = u32();
    need(name_len);
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rows = u32(), cols = u32();
    need(std::size_t(rows) * cols * 8);
    Matrix m(rows, cols);
    for (Eigen::Index e = 0; e < m.size(); ++e) {
      const std::uint64_t lo = u32(), hi = u32();
      m.data()[e] = std::bit_cast<double>(lo | (hi << 32));
    }
    mats.emplace(std::move(name), Tensor::parameter(std::move(m)));
  }
  if (pos != bytes.size()) throw LoadError(K::count_mismatch, origin + ": trailing bytes after checkpoint payload");
  auto get = [&](const char* name) {
    auto it = mats.find(name);
    if (it == mats.end()) throw LoadError(K::parse, origin + ": checkpoint lacks matrix " + name);
    return it->second;
  };
  ProjectorShape shape{echo.value("image_dim", Eigen::Index(0)), echo.value("text_dim", Eigen::Index(0)),
                       config.entry_width, config.common_width, config.k};
  Model m{config,
          Projector(shape, ProjectorParams{get("w_image"), get("w_text"), get("w_shared"), get("w_att1"), get("w_att2")}),
          ModalityClassifier(get("d_hidden"), get("d_out"))};
  m.projector.set_diversified_attention(config.use_da);
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  detail::write_all(path, encode_checkpoint(m));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_all(path), path.string());
}

struct EvalOptions {
  std::size_t map_k = 50;
  ApNormalization norm = ApNormalization::min_relevant_k;
};

inline EvaluationReport evaluate(const Model& m, const PairedDataset& data, const EvalOptions& eval = {}) {
  if (data.test_count == 0) throw ContractError("trainer", "dataset has an empty test split");
  return evaluate(m.projector, data.test_image(), data.test_text(), data.test_labels(), eval.map_k, eval.norm);
}

struct AblationRow {
  std::string method;
  double img2txt = 0;
  double txt2img = 0;
  double avg = 0;
};

/// Baseline (pairwise loss only), then components added in the order
/// +mdp, +udp, +mdp+udp, +mdp+udp+MC, and the full model with attention.
inline std::vector<TrainConfig> ablation_configs(const TrainConfig& base) {
  auto with = [&](bool udp, bool mdp, bool mc, bool da) {
    TrainConfig c = base;
    c.use_udp = udp;
    c.use_mdp = mdp;
    c.use_mc = mc;
    c.use_da = da;
    return c;
  };
  return {with(false, false, false, false), with(false, true, false, false), with(true, false, false, false),
          with(true, true, false, false),   with(true, true, true, false),   with(true, true, true, true)};
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"Baseline", "+mdp", "+udp", "+mdp+udp", "+mdp+udp+MC", "Full"};
  return names;
}

inline std::vector<AblationRow> ablate(const PairedDataset& data, const TrainConfig& config,
                                       const EvalOptions& eval = {}) {
  std::vector<AblationRow> rows;
  const auto configs = ablation_configs(config);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const TrainResult r = train(data, configs[i]);
    const EvaluationReport e = evaluate(r.model, data, eval);
    rows.push_back({ablation_names()[i], e.img2txt.map, e.txt2img.map, e.average()});
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "method,img2txt,txt2img,avg\n";
  for (const auto& r : rows)
    out += r.method + "," + format_metric(r.img2txt) + "," + format_metric(r.txt2img) + "," + format_metric(r.avg) + "\n";
  return out;
}

struct GridRow {
  double alpha = 0;
  double beta = 0;
  double img2txt = 0;
  double txt2img = 0;
  double avg = 0;
};

/// One training run per (alpha, beta) in alphas x betas, alpha-major. A
/// single-element list fixes that axis while the other is swept.
inline std::vector<GridRow> grid_search(const PairedDataset& data, const std::vector<double>& alphas,
                                        const std::vector<double>& betas, const TrainConfig& config,
                                        const EvalOptions& eval = {}) {
  if (alphas.empty() || betas.empty()) throw ConfigError("trainer", "grid search needs non-empty alpha and beta lists");
  std::vector<GridRow> rows;
  for (double a : alphas) {
    for (double b : betas) {
      TrainConfig c = config;
      c.alpha = a;
      c.beta = b;
      const TrainResult r = train(data, c);
      const EvaluationReport e = evaluate(r.model, data, eval);
      rows.push_back({a, b, e.img2txt.map, e.txt2img.map, e.average()});
    }
  }
  return rows;
}

inline std::string grid_csv(const std::vector<GridRow>& rows) {
  std::string out = "alpha,beta,img2txt,txt2img,avg\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%g,%g,", r.alpha, r.beta);
    out += buf + format_metric(r.img2txt) + "," + format_metric(r.txt2img) + "," + format_metric(r.avg) + "\n";
  }
  return out;
}

}  // namespace gpldan
