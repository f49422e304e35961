// Acceptance gate: ten numbered release criteria, one pass/fail line each.
// Exits nonzero if any criterion fails. Heavy criteria (7, 8) train real
// models and dominate the runtime.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sma/gradcheck.hpp"
#include "sma/train.hpp"

using namespace sma;
namespace fs = std::filesystem;

namespace {

bool g_all_pass = true;

void report(int n, bool pass, const std::string& detail) {
  std::printf("CRITERION %2d: %s  %s\n", n, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  g_all_pass = g_all_pass && pass;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// the shared small-task setup used by criteria 7-9
ModelConfig small_task_model() {
  ModelConfig mc;
  mc.base_channels = 16;
  mc.stages = 4;
  mc.blocks_per_stage = {1, 1, 1, 1};
  mc.heads = 4;
  mc.patch_size = 4;
  mc.input_height = mc.input_width = 64;
  return mc;
}

// ---------------------------------------------------------------------------
// 1. gradient correctness
// ---------------------------------------------------------------------------
void criterion_1() {
  auto t0 = std::chrono::steady_clock::now();
  double worst_op = 0.0;
  std::string worst_name = "-";
  for (const auto& [name, err] : op_gradcheck_suite())
    if (err > worst_op) {
      worst_op = err;
      worst_name = name;
    }
  double worst_model = model_gradcheck();
  double secs = elapsed_s(t0);
  bool pass = worst_op < 1e-6 && worst_model < 1e-4 && secs < 300.0;
  report(1, pass,
         fmt("gradients: worst op %.2e (%s) < 1e-6, model %.2e < 1e-4, %.0fs < 300s",
             worst_op, worst_name.c_str(), worst_model, secs));
}

// ---------------------------------------------------------------------------
// 2. encoder/decoder shape law, exact
// ---------------------------------------------------------------------------
void criterion_2() {
  bool pass = true;
  for (std::size_t hw : {16u, 32u, 64u}) {
    for (std::size_t C : {4u, 16u}) {
      ModelConfig cfg;
      cfg.base_channels = C;
      cfg.stages = 4;
      cfg.blocks_per_stage = {1, 1, 1, 1};
      cfg.heads = 2;
      cfg.patch_size = 1;
      cfg.input_height = cfg.input_width = hw;
      Model<float> model(cfg, 2);
      Rng rng(3);
      auto x = Tensor32::randn({3, hw, hw}, rng);
      auto img = x;
      auto h = relu(conv2d(img, model.init_proj.w, model.init_proj.b, 1, 1));
      for (std::size_t i = 0; i < cfg.stages; ++i) {
        for (auto& blk : model.enc_blocks[i]) h = sma_block_forward(h, blk);
        pass = pass && h.shape() == StageShape::at(cfg, i).as_shape();
        h = downsample_block(h, model.down[i]);
        h = apply_modulator(h, model.modulators[i]);
        pass = pass && h.shape() == StageShape::at(cfg, i + 1).as_shape();
      }
      auto out = model.forward(img);
      pass = pass && out.shape() == Shape{cfg.num_classes, hw, hw};
    }
  }
  report(2, pass, "stage shapes 2^i*C x H/2^i x W/2^i exact for H=W in {16,32,64}, C in {4,16}");
}

// ---------------------------------------------------------------------------
// 3. residual identity with zeroed projections, bitwise
// ---------------------------------------------------------------------------
void criterion_3() {
  bool pass = true;
  for (std::size_t C : {4u, 8u}) {
    Rng rng(7);
    auto p = SmaBlockParams<double>::init(C, 2, 4, 2, 1, 1, rng);
    std::fill(p.fuse.w.data().begin(), p.fuse.w.data().end(), 0.0);
    std::fill(p.fuse.b.data().begin(), p.fuse.b.data().end(), 0.0);
    std::fill(p.emlp.down.w.data().begin(), p.emlp.down.w.data().end(), 0.0);
    std::fill(p.emlp.down.b.data().begin(), p.emlp.down.b.data().end(), 0.0);
    auto x = Tensor64::randn({C, 6, 6}, rng);
    auto y = sma_block_forward(x, p);
    pass = pass && y.data() == x.data();
  }
  report(3, pass, "block output with zeroed fuse and feed-forward down projections == input, bitwise");
}

// ---------------------------------------------------------------------------
// 4. metric oracle equivalence
// ---------------------------------------------------------------------------
struct Counts {
  double tp = 0, fp = 0, fn = 0;
};

Counts confusion_counts_oracle(const std::vector<float>& p, const std::vector<float>& g) {
  Counts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1.0f && g[i] == 1.0f) c.tp += 1;
    if (p[i] == 1.0f && g[i] == 0.0f) c.fp += 1;
    if (p[i] == 0.0f && g[i] == 1.0f) c.fn += 1;
  }
  return c;
}

void criterion_4() {
  bool pass = true;
  Rng rng(99);
  for (int t = 0; t < 1000; ++t) {
    std::size_t n = 16 + rng.index(49);
    std::vector<float> p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(0.0, 1.0) < 0.5 ? 1.0f : 0.0f;
      g[i] = rng.uniform(0.0, 1.0) < 0.5 ? 1.0f : 0.0f;
    }
    auto c = confusion_counts_oracle(p, g);
    double od = (c.tp + c.fp + c.fn) == 0 ? 1.0 : 2 * c.tp / (2 * c.tp + c.fp + c.fn);
    double oj = (c.tp + c.fp + c.fn) == 0 ? 1.0 : c.tp / (c.tp + c.fp + c.fn);
    pass = pass && std::abs(dsc(p, g) - od) <= 1e-15 && std::abs(iou(p, g) - oj) <= 1e-15;
  }
  // exhaustive over all 3x3 binary mask pairs
  for (unsigned a = 0; a < 512 && pass; ++a) {
    for (unsigned b = 0; b < 512; ++b) {
      std::vector<float> p(9), g(9);
      for (int i = 0; i < 9; ++i) {
        p[i] = (a >> i) & 1 ? 1.0f : 0.0f;
        g[i] = (b >> i) & 1 ? 1.0f : 0.0f;
      }
      double d = dsc(p, g), j = iou(p, g);
      pass = pass && d >= 0.0 && d <= 1.0 && j >= 0.0 && j <= 1.0;
      auto c = confusion_counts_oracle(p, g);
      if (c.tp + c.fp + c.fn > 0)  // Dice-Jaccard identity on nonempty unions
        pass = pass && std::abs(d - 2.0 * j / (1.0 + j)) <= 1e-15;
      if (!pass) break;
    }
  }
  report(4, pass, "dsc/iou match the confusion-count oracle to 1e-15 (1000 random + all 3x3 pairs)");
}

// ---------------------------------------------------------------------------
// 5. loss sanity
// ---------------------------------------------------------------------------
void criterion_5() {
  auto ones = Tensor64::full({4, 4}, 1.0);
  double perfect = bce_dice_loss(ones, ones).item();

  auto y = Tensor64::full({2, 2}, 1.0);
  auto p = Tensor64::full({2, 2}, 0.5);
  double hand = bce_dice_loss(y, p).item();

  Rng rng(17);
  std::vector<double> yd(18), pd(18);
  for (auto& v : yd) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0 : 0.0;
  for (auto& v : pd) v = rng.uniform(0.05, 0.95);
  auto yy = Tensor64::from({2, 3, 3}, yd);
  double gerr = grad_check([&](Tensor64& q) { return bce_dice_loss(yy, q); },
                           Tensor64::from({2, 3, 3}, pd));

  bool pass = perfect <= 2e-7 && std::abs(hand - 1.0265) <= 1e-3 && gerr < 1e-6;
  report(5, pass,
         fmt("loss: perfect %.2e <= 2e-7, hand case %.4f ~ 1.0265, grad err %.2e < 1e-6",
             perfect, hand, gerr));
}

// ---------------------------------------------------------------------------
// 6. schedule endpoints
// ---------------------------------------------------------------------------
void criterion_6() {
  TrainConfig cfg;
  cfg.total_steps = 2000;
  bool pass = cosine_lr(0, cfg) == 1e-2 && cosine_lr(cfg.total_steps, cfg) == 6e-6;
  double prev = cosine_lr(0, cfg);
  for (std::size_t t = 1; t <= cfg.total_steps; ++t) {
    double lr = cosine_lr(t, cfg);
    pass = pass && lr <= prev;
    prev = lr;
  }
  report(6, pass, "lr(0) == 1e-2 and lr(T) == 6e-6 exactly; monotone non-increasing");
}

// ---------------------------------------------------------------------------
// 7. learnability at desk scale + bitwise determinism
// ---------------------------------------------------------------------------
constexpr std::size_t kSmallTaskSteps = 350;

TrainResult run_small_task(const DatasetManifest& m, const std::vector<SamplePair>& samples,
                           const ModelConfig& mc, std::uint64_t seed, std::size_t steps,
                           Model<float>* out_model = nullptr) {
  TrainConfig tc;
  tc.total_steps = steps;
  tc.batch_size = 4;
  tc.eval_every = steps;  // evaluate at the final step only
  tc.seed = seed;
  Model<float> model(mc, seed);
  auto st = TrainState<float>::init_like(model);
  auto r = train_loop(model, m, samples, tc, st);
  if (out_model) *out_model = std::move(model);
  return r;
}

void criterion_7(const DatasetManifest& m, const std::vector<SamplePair>& samples) {
  auto mc = small_task_model();
  auto t0 = std::chrono::steady_clock::now();
  Model<float> model(mc, 0);
  auto r1 = run_small_task(m, samples, mc, 1, kSmallTaskSteps, &model);
  double secs = elapsed_s(t0);

  std::vector<SamplePair> train_split;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (m.splits[i] == "train") train_split.push_back(samples[i]);
  double train_dsc = evaluate(model, train_split).avg_dsc;
  double loss0 = r1.history.front().loss, lossT = r1.history.back().loss;

  auto r2 = run_small_task(m, samples, mc, 1, kSmallTaskSteps);
  bool identical = r1.history.size() == r2.history.size();
  for (std::size_t i = 0; identical && i < r1.history.size(); ++i)
    identical = r1.history[i].loss == r2.history[i].loss;

  bool pass = !r1.diverged && train_dsc > 0.95 && lossT < 0.1 * loss0 && secs < 1800.0 &&
              identical;
  report(7, pass,
         fmt("%zu steps: train DSC %.4f > 0.95, loss %.4f -> %.4f (<10%%), %.0fs < 1800s, "
             "same-seed rerun bitwise %s",
             kSmallTaskSteps, train_dsc, loss0, lossT, secs,
             identical ? "identical" : "DIFFERENT"));
}

// ---------------------------------------------------------------------------
// 8. ablation direction: full model non-harmful vs single-component removal
// ---------------------------------------------------------------------------
constexpr std::size_t kAblationSteps = 120;

void criterion_8(const DatasetManifest& m, const std::vector<SamplePair>& samples) {
  const char* names[4] = {"full", "-sma", "-ffn", "-mod"};
  double avg[4] = {0, 0, 0, 0};
  for (int v = 0; v < 4; ++v) {
    ModelConfig mc = small_task_model();
    if (v == 1) mc.enable_sma = false;
    if (v == 2) mc.enable_emlp = false;
    if (v == 3) mc.enable_modulator = false;
    for (std::uint64_t seed : {1u, 2u, 3u})
      avg[v] += run_small_task(m, samples, mc, seed, kAblationSteps).history.back().val_dsc / 3.0;
  }
  bool pass = avg[0] >= avg[1] - 0.01 && avg[0] >= avg[2] - 0.01 && avg[0] >= avg[3] - 0.01;
  report(8, pass,
         fmt("3-seed val DSC @%zu steps: %s %.4f vs %s %.4f, %s %.4f, %s %.4f (full >= each - 0.01)",
             kAblationSteps, names[0], avg[0], names[1], avg[1], names[2], avg[2], names[3],
             avg[3]));
}

// ---------------------------------------------------------------------------
// 9. modulator: identity at init, live gradients during training
// ---------------------------------------------------------------------------
void criterion_9(const DatasetManifest& m, const std::vector<SamplePair>& samples) {
  auto mc = small_task_model();
  Model<float> with_mod(mc, 5);
  ModelConfig mc_off = mc;
  mc_off.enable_modulator = false;
  Model<float> without_mod(mc_off, 5);
  auto logits_a = with_mod.forward(samples[0].image);
  auto logits_b = without_mod.forward(samples[0].image);
  bool identical = logits_a.data() == logits_b.data();

  // short training run; count steps where the modulator gradient norm is nonzero
  std::vector<SamplePair> train_split;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (m.splits[i] == "train") train_split.push_back(samples[i]);
  TrainConfig tc;
  tc.total_steps = 40;
  tc.batch_size = 4;
  tc.seed = 5;
  Model<float> model(mc, 5);
  auto st = TrainState<float>::init_like(model);
  bool saved = finite_checks();
  finite_checks() = false;
  std::size_t live = 0, steps = 40;
  for (std::size_t step = 0; step < steps; ++step) {
    model.zero_grad();
    std::optional<Tensor32> batch_loss;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      const auto& s = train_split[(step * tc.batch_size + b) % train_split.size()];
      auto target = one_hot_mask<float>(s.mask, 3);
      auto l = segmentation_loss(model.forward(s.image), target);
      batch_loss = batch_loss ? add(*batch_loss, l) : l;
    }
    backward(scale(*batch_loss, 1.0f / float(tc.batch_size)));
    double norm2 = 0.0;
    model.for_each_param([&](const std::string& name, Tensor32& t) {
      if (name.rfind("modulator", 0) != 0 || !t.has_grad()) return;
      for (float g : t.grad()) norm2 += double(g) * g;
    });
    live += norm2 > 0.0;
    sgd_momentum_step(model, st, cosine_lr(step, tc), tc);
    st.step++;
  }
  finite_checks() = saved;

  bool pass = identical && live >= std::size_t(0.9 * double(steps));
  report(9, pass,
         fmt("modulator off/on logits bitwise %s at init; gradient live at %zu/%zu steps (>= 90%%)",
             identical ? "identical" : "DIFFERENT", live, steps));
}

// ---------------------------------------------------------------------------
// 10. format stability: tensor files and checkpoint resume
// ---------------------------------------------------------------------------
std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void criterion_10() {
  fs::path dir = fs::temp_directory_path() / "sma_acceptance_fmt";
  fs::remove_all(dir);
  fs::create_directories(dir);

  Rng rng(23);
  auto t = Tensor64::randn({3, 5, 7}, rng);
  smt_write(t, dir / "a.smt");
  auto back = smt_read<double>(dir / "a.smt");
  smt_write(back, dir / "b.smt");
  bool bytes_ok = slurp(dir / "a.smt") == slurp(dir / "b.smt") && back.data() == t.data();

  // resume: 3 + 3 steps through a checkpoint equals 6 uninterrupted steps
  ModelConfig mc;
  mc.base_channels = 4;
  mc.stages = 2;
  mc.blocks_per_stage = {1, 1};
  mc.heads = 2;
  mc.patch_size = 2;
  mc.input_height = mc.input_width = 32;
  auto [m, samples] = make_dataset(31, 5, 32, 32);
  TrainConfig tc;
  tc.total_steps = 6;
  tc.batch_size = 2;
  tc.eval_every = 100;
  tc.seed = 3;

  Model<float> straight(mc, 4);
  auto st_s = TrainState<float>::init_like(straight);
  auto full = train_loop(straight, m, samples, tc, st_s);

  Model<float> first(mc, 4);
  auto st_f = TrainState<float>::init_like(first);
  auto part1 = train_loop(first, m, samples, tc, st_f, {}, 3);
  checkpoint_save(first, st_f, dir / "ck");
  Model<float> second(mc, 0);
  second.load(dir / "ck");
  auto st_r = checkpoint_load_state(second, dir / "ck");
  auto part2 = train_loop(second, m, samples, tc, st_r);

  bool resume_ok = part1.history.size() + part2.history.size() == full.history.size();
  for (std::size_t i = 0; resume_ok && i < full.history.size(); ++i) {
    double got = i < 3 ? part1.history[i].loss : part2.history[i - 3].loss;
    resume_ok = got == full.history[i].loss;
  }
  fs::remove_all(dir);
  report(10, bytes_ok && resume_ok,
         fmt("tensor file write->read->write byte-identical: %s; checkpoint resume bitwise: %s",
             bytes_ok ? "yes" : "NO", resume_ok ? "yes" : "NO"));
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();

  // criteria 7-9 share one 8-sample 64x64 dataset
  auto [manifest, samples] = make_dataset(7, 8, 64, 64);
  criterion_7(manifest, samples);
  criterion_8(manifest, samples);
  criterion_9(manifest, samples);
  criterion_10();

  std::printf("ACCEPTANCE: %s\n", g_all_pass ? "ALL PASS" : "FAILURES PRESENT");
  return g_all_pass ? 0 : 1;
}
