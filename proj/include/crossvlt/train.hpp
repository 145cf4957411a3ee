#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crossvlt/checkpoint.hpp"
#include "crossvlt/metrics.hpp"
#include "crossvlt/model.hpp"
#include "crossvlt/synthdata.hpp"

namespace crossvlt {

/// Model inputs for a list of scenes. Images and masks are borrowed.
inline ModelInputs make_inputs(const std::vector<const Scene*>& scenes, const Vocab& vocab, int max_tokens,
                               bool with_masks, const std::vector<std::string>* expressions = nullptr) {
  ModelInputs in;
  in.tokens.batch = static_cast<int>(scenes.size());
  in.tokens.length = max_tokens;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene* s = scenes[i];
    in.images.push_back(&s->image);
    if (with_masks) in.masks.push_back(&s->gt_mask);
    const auto t = tokenize(vocab, expressions ? (*expressions)[i] : s->expression, max_tokens);
    in.tokens.ids.insert(in.tokens.ids.end(), t.ids.begin(), t.ids.end());
    in.tokens.padding.insert(in.tokens.padding.end(), t.padding.begin(), t.padding.end());
  }
  return in;
}

/// Inputs must match the model: image size and vocabulary.
inline void check_dataset(const std::vector<Scene>& scenes, const ModelConfig& c, const Vocab& vocab) {
  if (scenes.empty()) throw DataError("dataset is empty");
  if (vocab.size() != c.vocab_size) {
    throw ConfigError("vocab_size " + std::to_string(c.vocab_size) + " does not match the vocabulary (" +
                      std::to_string(vocab.size()) + " words)");
  }
  for (const auto& s : scenes) {
    if (s.image.height != c.image_size || s.image.width != c.image_size || s.gt_mask.height != c.image_size ||
        s.gt_mask.width != c.image_size) {
      throw ShapeError("scene " + std::to_string(s.id) + " is not " + std::to_string(c.image_size) + "px");
    }
  }
}

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double lr = 0;
  double task = 0;
  double align = 0;
  double total = 0;
  double train_miou = 0;
};

inline const char* kEpochLogHeader = "epoch,step,lr,L_task,L_align,L_total,train_mIoU";

inline std::string format_epoch_log(const EpochLog& e) {
  std::ostringstream os;
  os << std::setprecision(9) << e.epoch << ',' << e.step << ',' << e.lr << ',' << e.task << ',' << e.align << ','
     << e.total << ',' << e.train_miou;
  return os.str();
}

struct TrainOptions {
  /// Epoch CSV, appended to; header written when the file is new or empty.
  std::string log_path;
  /// Where a diagnostic file goes when a non-finite loss aborts training.
  std::string dump_path;
  std::function<void(const EpochLog&, const Checkpoint&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

namespace detail {

inline std::string batch_diagnostic(const std::vector<const Scene*>& batch, long step, int epoch,
                                    const std::string& what) {
  std::ostringstream os;
  os << "non-finite value at epoch " << epoch << " step " << step << ": " << what << '\n';
  for (const Scene* s : batch) os << "  scene " << s->id << " \"" << s->expression << "\"\n";
  return os.str();
}

template <class T>
void update_running_stats(ModelParams<T>& params, const std::map<std::string, ops::BatchStats<T>>& stats,
                          double momentum) {
  const T m = static_cast<T>(momentum);
  for (const auto& [bn, s] : stats) {
    auto& rm = params.at(bn + ".running_mean");
    auto& rv = params.at(bn + ".running_var");
    rm = (T(1) - m) * rm + m * s.mean;
    rv = (T(1) - m) * rv + m * s.variance;
  }
}

inline Scene augment(const Scene& src, const TrainConfig& cfg, std::mt19937_64& rng) {
  Scene s = src;
  if (cfg.augment_mirror && std::uniform_int_distribution<int>(0, 1)(rng) == 1) s = mirror_scene(s);
  if (cfg.augment_recolor) {
    std::array<Color, 4> perm = kColors;
    std::shuffle(perm.begin(), perm.end(), rng);
    s = recolor_scene(s, perm);
  }
  return s;
}

}  // namespace detail

/// Mini-batch AdamW training with per-step polynomial learning-rate decay.
/// Batches follow a seeded shuffle each epoch; the last partial batch is kept.
inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const std::vector<Scene>& scenes,
                         const Vocab& vocab = {}, const TrainOptions& options = {}) {
  require_valid(model_cfg);
  require_valid(train_cfg);
  check_dataset(scenes, model_cfg, vocab);
  using T = TrainScalar;

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.model = model_cfg;
  ck.train = train_cfg;
  ck.params = init_params<T>(model_cfg, train_cfg.init_seed);
  ck.optimizer = AdamW(ck.params.manifest(), AdamWConfig{0.9, 0.999, 1e-8, train_cfg.weight_decay});
  std::mt19937_64 shuffle_rng(train_cfg.shuffle_seed);
  std::mt19937_64 augment_rng(train_cfg.shuffle_seed ^ 0x9e3779b97f4a7c15ULL);

  const long n = static_cast<long>(scenes.size());
  const long batches_per_epoch = (n + train_cfg.batch_size - 1) / train_cfg.batch_size;
  const long total_steps = batches_per_epoch * train_cfg.epochs;

  std::ofstream log;
  if (!options.log_path.empty()) {
    std::ifstream probe(options.log_path);
    const bool fresh = !probe || probe.peek() == std::ifstream::traits_type::eof();
    log.open(options.log_path, std::ios::app);
    if (!log) throw IoError("cannot open epoch log " + options.log_path);
    if (fresh) log << kEpochLogHeader << '\n';
  }

  std::vector<std::size_t> order(scenes.size());
  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochLog e;
    e.epoch = epoch;
    double iou_sum = 0;
    double lr = 0;
    for (long b = 0; b < batches_per_epoch; ++b) {
      std::vector<Scene> augmented;
      std::vector<const Scene*> batch;
      for (long k = b * train_cfg.batch_size; k < std::min(n, (b + 1) * train_cfg.batch_size); ++k) {
        augmented.push_back(detail::augment(scenes[order[static_cast<std::size_t>(k)]], train_cfg, augment_rng));
      }
      for (const auto& s : augmented) batch.push_back(&s);
      const int bs = static_cast<int>(batch.size());
      const ModelInputs in = make_inputs(batch, vocab, model_cfg.max_tokens, true);

      Tape<T> tape;
      std::map<std::string, ops::BatchStats<T>> stats;
      const ForwardContext<T> ctx{Scope<T>{&tape, &ck.params}, &model_cfg, bs, true, &stats};
      ForwardOutput<T> out;
      try {
        out = forward_pipeline(ctx, in);
        const double total = out.total.value()(0, 0);
        if (!std::isfinite(total)) throw NumericError("loss is " + std::to_string(total));
        tape.backward(out.total);
      } catch (const NumericError& err) {
        std::string diag = detail::batch_diagnostic(batch, ck.step, epoch, err.what());
        if (out.has_losses) {
          diag += "  L_task " + std::to_string(out.task.value()(0, 0)) + "  L_align " +
                  std::to_string(out.align.value()(0, 0)) + "\n";
        }
        if (!options.dump_path.empty()) std::ofstream(options.dump_path) << diag;
        throw NumericError(diag);
      }
      auto grads = tape.parameter_gradients();
      lr = poly_lr(train_cfg.base_lr, ck.step, total_steps, train_cfg.lr_power);
      ck.optimizer.step(ck.params, grads, lr);
      detail::update_running_stats(ck.params, stats, train_cfg.bn_momentum);
      ++ck.step;

      e.task += out.task.value()(0, 0);
      e.align += out.align.value()(0, 0);
      e.total += out.total.value()(0, 0);
      const auto& logits = out.logits.value();
      const Eigen::Index pixels = static_cast<Eigen::Index>(model_cfg.image_size) * model_cfg.image_size;
      for (int i = 0; i < bs; ++i) {
        iou_sum += iou(predict_mask(logits.middleRows(i * pixels, pixels), model_cfg.image_size,
                                    model_cfg.image_size),
                       batch[static_cast<std::size_t>(i)]->gt_mask);
      }
    }
    e.step = ck.step;
    e.lr = lr;
    e.task /= static_cast<double>(batches_per_epoch);
    e.align /= static_cast<double>(batches_per_epoch);
    e.total /= static_cast<double>(batches_per_epoch);
    e.train_miou = iou_sum / static_cast<double>(n);
    ck.epoch = epoch;
    result.log.push_back(e);
    if (log) log << format_epoch_log(e) << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(e, ck);
  }
  std::ostringstream rng;
  rng << shuffle_rng << '\n' << augment_rng;
  ck.rng_state = rng.str();
  return result;
}

struct EvalOptions {
  int batch_size = 16;
  int pr_thresholds = 101;
  /// Replace one word of every expression before inference.
  bool inject_typos = false;
  std::uint64_t typo_seed = 0;
};

/// Per-sample inference results kept for export.
struct EvalOutputs {
  std::vector<Mask> predictions;
  std::vector<ProbabilityMap> probabilities;
  std::vector<std::string> expressions;
};

/// Inference in eval mode (batch norm uses running statistics).
template <class T>
EvalReport evaluate_model(const ModelParams<T>& params, const ModelConfig& cfg, const std::vector<Scene>& scenes,
                          const Vocab& vocab = {}, const EvalOptions& opt = {}, EvalOutputs* outputs = nullptr) {
  require_valid(cfg);
  check_dataset(scenes, cfg, vocab);
  EvalOutputs local;
  EvalOutputs& o = outputs ? *outputs : local;
  o = {};
  std::mt19937_64 typo_rng(opt.typo_seed);
  std::vector<Mask> gts;
  const int S = cfg.image_size;
  for (std::size_t start = 0; start < scenes.size(); start += static_cast<std::size_t>(opt.batch_size)) {
    std::vector<const Scene*> batch;
    std::vector<std::string> exprs;
    for (std::size_t k = start; k < std::min(scenes.size(), start + static_cast<std::size_t>(opt.batch_size)); ++k) {
      batch.push_back(&scenes[k]);
      exprs.push_back(opt.inject_typos ? inject_typo(vocab, scenes[k].expression, typo_rng) : scenes[k].expression);
    }
    const int bs = static_cast<int>(batch.size());
    const ModelInputs in = make_inputs(batch, vocab, cfg.max_tokens, false, &exprs);
    Tape<T> tape(false);
    const ForwardContext<T> ctx{Scope<T>{&tape, &params}, &cfg, bs, false, nullptr};
    const auto out = forward_pipeline(ctx, in);
    const auto& logits = out.logits.value();
    const Eigen::Index pixels = static_cast<Eigen::Index>(S) * S;
    for (int i = 0; i < bs; ++i) {
      const auto block = logits.middleRows(i * pixels, pixels);
      o.predictions.push_back(predict_mask(block, S, S));
      ProbabilityMap p(static_cast<std::size_t>(pixels));
      for (Eigen::Index k = 0; k < pixels; ++k) p[static_cast<std::size_t>(k)] = sigmoid(static_cast<double>(block(k)));
      o.probabilities.push_back(std::move(p));
      o.expressions.push_back(exprs[static_cast<std::size_t>(i)]);
      gts.push_back(batch[static_cast<std::size_t>(i)]->gt_mask);
    }
  }
  EvalReport r = evaluate(o.predictions, gts);
  r.pr_curve = pr_curve(o.probabilities, gts, opt.pr_thresholds);
  return r;
}

/// Per-stage projected pixel and [CLS] embeddings with relevance labels,
/// from an eval-mode forward pass. Needs alignment heads.
template <class T>
std::vector<EmbeddingRecord> collect_embeddings(const ModelParams<T>& params, const ModelConfig& cfg,
                                                const std::vector<Scene>& scenes, const Vocab& vocab = {},
                                                int batch_size = 16) {
  require_valid(cfg);
  check_dataset(scenes, cfg, vocab);
  if (cfg.stage_loss != StageLoss::alignment || cfg.align_stages.empty()) {
    throw UsageError("embedding export needs a model with alignment heads");
  }
  std::vector<EmbeddingRecord> out;
  for (std::size_t start = 0; start < scenes.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<const Scene*> batch;
    for (std::size_t k = start; k < std::min(scenes.size(), start + static_cast<std::size_t>(batch_size)); ++k) {
      batch.push_back(&scenes[k]);
    }
    const int bs = static_cast<int>(batch.size());
    const ModelInputs in = make_inputs(batch, vocab, cfg.max_tokens, true);
    Tape<T> tape(false);
    const ForwardContext<T> ctx{Scope<T>{&tape, &params}, &cfg, bs, false, nullptr};
    const auto fwd = forward_pipeline(ctx, in);
    for (int b = 0; b < bs; ++b) {
      for (const auto& st : fwd.alignment) {
        const Eigen::Index pixels = static_cast<Eigen::Index>(cfg.stage_tokens(st.stage));
        EmbeddingRecord r;
        r.sample_id = std::to_string(batch[static_cast<std::size_t>(b)]->id);
        r.stage = st.stage;
        r.vision = st.projection.vision.value().middleRows(b * pixels, pixels).template cast<double>();
        r.language = st.projection.language.value().row(b).template cast<double>();
        const auto& lab = fwd.labels[static_cast<std::size_t>(b)][static_cast<std::size_t>(st.stage - 1)].bits;
        r.labels.assign(lab.begin(), lab.end());
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

}  // namespace crossvlt
