#pragma once

#include <iostream>

#include "sma/data.hpp"
#include "sma/metrics.hpp"
#include "sma/model.hpp"

namespace sma {

struct TrainConfig {
  double momentum = 0.98;
  double weight_decay = 1e-6;
  double lr_initial = 1e-2;
  double lr_min = 6e-6;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 4;
  std::size_t eval_every = 50;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const {
    if (momentum < 0.0 || momentum >= 1.0)
      throw config_error("train config: momentum must be in [0,1)");
    if (lr_min > lr_initial) throw config_error("train config: lr_min must be <= lr_initial");
    if (total_steps < 1) throw config_error("train config: total_steps must be >= 1");
    if (batch_size < 1) throw config_error("train config: batch_size must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"momentum", c.momentum},       {"weight_decay", c.weight_decay},
                     {"lr_initial", c.lr_initial},   {"lr_min", c.lr_min},
                     {"total_steps", c.total_steps}, {"batch_size", c.batch_size},
                     {"eval_every", c.eval_every},   {"seed", c.seed},
                     {"augment", c.augment}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("momentum").get_to(c.momentum);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("lr_initial").get_to(c.lr_initial);
  j.at("lr_min").get_to(c.lr_min);
  j.at("total_steps").get_to(c.total_steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("eval_every").get_to(c.eval_every);
  j.at("seed").get_to(c.seed);
  j.at("augment").get_to(c.augment);
}

// lr(t) = lr_min + (lr_initial - lr_min)/2 * (1 + cos(pi t / T)), per step
inline double cosine_lr(std::size_t t, const TrainConfig& cfg) {
  if (t > cfg.total_steps) {
    std::cerr << "warning: cosine_lr queried at step " << t << " past total_steps "
              << cfg.total_steps << "; clamping to lr_min\n";
    return cfg.lr_min;
  }
  double phase = 3.14159265358979323846 * double(t) / double(cfg.total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1.0 + std::cos(phase));
}

// heavy-ball update on one parameter: g' = g + wd*w; v = m*v + g'; w -= lr*v
template <class S>
void sgd_update(std::vector<S>& w, const std::vector<S>& g, std::vector<S>& v, double lr,
                double momentum, double weight_decay, const std::string& name) {
  double norm2 = 0.0;
  for (S gv : g) {
    if (!std::isfinite(double(gv))) {
      for (S x : g) norm2 += double(x) * double(x);
      throw value_error("sgd step: non-finite gradient in '" + name +
                        "' (squared norm so far " + std::to_string(norm2) + ")");
    }
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    S gp = g[i] + static_cast<S>(weight_decay) * w[i];
    v[i] = static_cast<S>(momentum) * v[i] + gp;
    w[i] -= static_cast<S>(lr) * v[i];
  }
}

template <class S>
struct TrainState {
  std::size_t step = 0;
  double best_val_dsc = -1.0;
  std::vector<std::vector<S>> velocity;  // parameter-registry order

  static TrainState init_like(Model<S>& model) {
    TrainState st;
    model.for_each_param([&](const std::string&, Tensor<S>& t) {
      st.velocity.emplace_back(t.size(), S(0));
    });
    return st;
  }
};

// one optimizer step over the whole registry; validates every gradient
// before mutating anything so a NaN aborts with parameters untouched
template <class S>
void sgd_momentum_step(Model<S>& model, TrainState<S>& st, double lr, const TrainConfig& cfg) {
  std::size_t i = 0;
  model.for_each_param([&](const std::string& name, Tensor<S>& t) {
    for (S gv : t.grad_buffer())
      if (!std::isfinite(double(gv)))
        throw value_error("sgd step: non-finite gradient in '" + name + "'");
    ++i;
  });
  if (i != st.velocity.size())
    throw value_error("sgd step: optimizer state does not match parameter registry");
  i = 0;
  model.for_each_param([&](const std::string& name, Tensor<S>& t) {
    sgd_update(t.data(), t.grad_buffer(), st.velocity[i++], lr, cfg.momentum,
               cfg.weight_decay, name);
  });
}

// ---------------------------------------------------------------------------
// evaluation: argmax logits -> per-sample, per-foreground-class DSC/IoU
// ---------------------------------------------------------------------------
struct EvalResult {
  std::vector<MetricRow> rows;  // per sample per foreground class, then `avg`
  double avg_dsc = 0.0;
  double avg_miou = 0.0;
};

template <class Predictor>
EvalResult evaluate_with(Predictor&& predict, std::size_t classes,
                         const std::vector<SamplePair>& samples) {
  if (samples.empty()) throw value_error("evaluate: empty sample list");
  EvalResult r;
  double acc_dsc = 0.0, acc_iou = 0.0;
  std::size_t terms = 0;
  for (const auto& s : samples) {
    Tensor32 logits = predict(s);
    if (logits.dim(0) != classes)
      throw shape_error("evaluate: predictor emits " + std::to_string(logits.dim(0)) +
                        " classes, dataset expects " + std::to_string(classes));
    std::size_t n = s.mask.size();
    std::vector<float> pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (logits.data()[c * n + i] > logits.data()[best * n + i]) best = c;
      pred[i] = float(best);
    }
    double s_dsc = 0.0, s_iou = 0.0;
    for (std::size_t c = 1; c < classes; ++c) {  // foreground classes only
      std::vector<float> P(n), G(n);
      for (std::size_t i = 0; i < n; ++i) {
        P[i] = pred[i] == float(c) ? 1.0f : 0.0f;
        G[i] = s.mask.data()[i] == float(c) ? 1.0f : 0.0f;
      }
      double d = dsc(P, G), j = iou(P, G);
      r.rows.push_back({s.sample_id, std::to_string(c), d, j});
      acc_dsc += d;
      acc_iou += j;
      ++terms;
    }
  }
  r.avg_dsc = acc_dsc / double(terms);
  r.avg_miou = acc_iou / double(terms);
  r.rows.push_back({"all", "avg", r.avg_dsc, r.avg_miou});
  return r;
}

inline EvalResult evaluate(Model<float>& model, const std::vector<SamplePair>& samples) {
  return evaluate_with([&](const SamplePair& s) { return model.forward(s.image); },
                       model.cfg.num_classes, samples);
}

// ---------------------------------------------------------------------------
// checkpointing: model dir + optimizer state; byte-deterministic
// ---------------------------------------------------------------------------
template <class S>
void checkpoint_save(Model<S>& model, const TrainState<S>& st,
                     const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  model.save(dir);
  fs::create_directories(dir / "optim");
  for (std::size_t i = 0; i < st.velocity.size(); ++i) {
    auto t = Tensor<S>::from({st.velocity[i].size()}, st.velocity[i]);
    smt_write(t, dir / "optim" / ("v" + std::to_string(i) + ".smt"));
  }
  nlohmann::json j{{"step", st.step},
                   {"best_val_dsc", st.best_val_dsc},
                   {"velocities", st.velocity.size()}};
  std::ofstream f(dir / "train_state.json", std::ios::trunc);
  f << j.dump(2) << "\n";
}

template <class S>
TrainState<S> checkpoint_load_state(Model<S>& model, const std::filesystem::path& dir) {
  std::ifstream f(dir / "train_state.json");
  if (!f) throw format_error("checkpoint: missing train_state.json in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(f);
  auto st = TrainState<S>::init_like(model);
  if (j.at("velocities").get<std::size_t>() != st.velocity.size())
    throw format_error("checkpoint: optimizer state does not match the model");
  st.step = j.at("step").get<std::size_t>();
  st.best_val_dsc = j.at("best_val_dsc").get<double>();
  for (std::size_t i = 0; i < st.velocity.size(); ++i) {
    auto t = smt_read<S>(dir / "optim" / ("v" + std::to_string(i) + ".smt"));
    if (t.size() != st.velocity[i].size())
      throw format_error("checkpoint: velocity " + std::to_string(i) + " has wrong length");
    st.velocity[i] = t.data();
  }
  return st;
}

// ---------------------------------------------------------------------------
// training loop. Sample order and augmentations are derived from
// (seed, step) alone, so resuming from a checkpoint replays the identical
// trajectory with no hidden RNG state to persist.
// ---------------------------------------------------------------------------
struct HistoryRow {
  std::size_t step;  // 0-based; the lr/loss of the step taken at this index
  double lr, loss;
  double val_dsc = -1.0, val_miou = -1.0;  // -1 when no eval at this step
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream out;
  out << "step,lr,loss,val_dsc,val_miou\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.step << "," << r.lr << "," << r.loss << ",";
    if (r.val_dsc >= 0.0)
      out << r.val_dsc << "," << r.val_miou;
    else
      out << ",";
    out << "\n";
  }
  return out.str();
}

struct TrainResult {
  std::vector<HistoryRow> history;
  bool diverged = false;
  double best_val_dsc = -1.0;
  std::filesystem::path best_checkpoint, last_checkpoint;
};

// runs until cfg.total_steps, or for at most run_steps steps when nonzero
// (the schedule always spans total_steps, so partial runs resume seamlessly)
inline TrainResult train_loop(Model<float>& model, const DatasetManifest& manifest,
                              const std::vector<SamplePair>& samples, const TrainConfig& cfg,
                              TrainState<float>& st, const std::filesystem::path& out_dir = {},
                              std::size_t run_steps = 0) {
  cfg.validate();
  // the loss is the NaN watchdog here; per-op finite asserts would turn a
  // divergent step into an exception deep inside the graph instead
  struct FiniteGuard {
    bool saved = finite_checks();
    FiniteGuard() { finite_checks() = false; }
    ~FiniteGuard() { finite_checks() = saved; }
  } guard;
  const std::size_t stop = run_steps == 0
                               ? cfg.total_steps
                               : std::min(cfg.total_steps, st.step + run_steps);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (manifest.splits[i] == "train") train_idx.push_back(i);
    if (manifest.splits[i] == "val") val_idx.push_back(i);
  }
  if (train_idx.empty()) throw value_error("train_loop: no training samples");

  TrainResult result;
  const std::size_t n_train = train_idx.size();
  std::size_t perm_epoch = std::size_t(-1);
  std::vector<std::size_t> perm(train_idx);

  auto run_eval = [&](HistoryRow& row) {
    if (val_idx.empty()) return;
    std::vector<SamplePair> val;
    for (auto i : val_idx) val.push_back(samples[i]);
    auto ev = evaluate(model, val);
    row.val_dsc = ev.avg_dsc;
    row.val_miou = ev.avg_miou;
    if (ev.avg_dsc > st.best_val_dsc) {
      st.best_val_dsc = ev.avg_dsc;
      if (!out_dir.empty()) {
        checkpoint_save(model, st, out_dir / "best");
        result.best_checkpoint = out_dir / "best";
      }
    }
    result.best_val_dsc = st.best_val_dsc;
  };

  for (; st.step < stop; ++st.step) {
    double lr = cosine_lr(st.step, cfg);
    model.zero_grad();
    Tensor32 total;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      std::size_t k = st.step * cfg.batch_size + b;
      std::size_t epoch = k / n_train;
      if (epoch != perm_epoch) {  // deterministic per-epoch shuffle
        perm = train_idx;
        Rng shuffle_rng(sample_seed(cfg.seed ^ 0x5175ull, epoch));
        shuffle_rng.shuffle(perm.begin(), perm.end());
        perm_epoch = epoch;
      }
      SamplePair s = samples[perm[k % n_train]];
      if (cfg.augment) {
        Rng aug(sample_seed(cfg.seed ^ 0xA46ull, k));
        if (aug.uniform(0.0, 1.0) < 0.5) s = hflip(s);
        s = rotate90(s, int(aug.index(4)));
      }
      auto target = one_hot_mask<float>(s.mask, model.cfg.num_classes);
      auto loss = segmentation_loss(model.forward(s.image), target);
      total = b == 0 ? loss : add(total, loss);
    }
    auto batch_loss = scale(total, 1.0f / float(cfg.batch_size));
    double loss_val = batch_loss.item();

    HistoryRow row{st.step, lr, loss_val};
    if (!std::isfinite(loss_val)) {
      // halt; the checkpoints written so far are the last good state
      result.history.push_back(row);
      result.diverged = true;
      return result;
    }
    backward(batch_loss);

    bool eval_now = cfg.eval_every > 0 && ((st.step + 1) % cfg.eval_every == 0 ||
                                           st.step + 1 == cfg.total_steps);
    try {
      sgd_momentum_step(model, st, lr, cfg);
    } catch (const value_error&) {
      result.history.push_back(row);
      result.diverged = true;
      return result;
    }
    if (eval_now) run_eval(row);
    result.history.push_back(row);
    if (!out_dir.empty() && eval_now) {
      auto saved = st.step;  // checkpoint resumes from the next step
      ++st.step;
      checkpoint_save(model, st, out_dir / "last");
      result.last_checkpoint = out_dir / "last";
      st.step = saved;
    }
  }
  return result;
}

}  // namespace sma
