// smaformer: batch CLI for the synthetic-segmentation artifact.
// Commands: synth, gradcheck, train, eval, predict.
// Exit codes: 0 ok, 1 verification failure, 2 usage/IO error, 3 numerical failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "sma/gradcheck.hpp"
#include "sma/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sma;

namespace {

constexpr int kOk = 0, kVerifyFail = 1, kUsage = 2, kNumerical = 3;

struct DataConfig {
  std::size_t count = 100;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
};

void to_json(json& j, const DataConfig& c) {
  j = json{{"count", c.count}, {"height", c.height}, {"width", c.width}, {"seed", c.seed}};
}
void from_json(const json& j, DataConfig& c) {
  j.at("count").get_to(c.count);
  j.at("height").get_to(c.height);
  j.at("width").get_to(c.width);
  j.at("seed").get_to(c.seed);
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model}, {"train", c.train}, {"data", c.data}};
}
void from_json(const json& j, RunConfig& c) {
  j.at("model").get_to(c.model);
  j.at("train").get_to(c.train);
  j.at("data").get_to(c.data);
}

// every key in j must exist in the reference (defaults) document
void reject_unknown_keys(const json& j, const json& ref, const std::string& prefix) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!ref.contains(it.key())) throw config_error("unknown config key '" + path + "'");
    if (it->is_object()) reject_unknown_keys(*it, ref.at(it.key()), path);
  }
}

// set a dotted key ("train.total_steps") to a value parsed as JSON when
// possible, falling back to a plain string
void apply_override(json& doc, const std::string& key, const std::string& value) {
  json* node = &doc;
  std::size_t start = 0;
  std::string leaf = key;
  for (std::size_t dot = key.find('.'); dot != std::string::npos;
       start = dot + 1, dot = key.find('.', start)) {
    std::string part = key.substr(start, dot - start);
    if (!node->contains(part)) throw config_error("unknown config key '" + key + "'");
    node = &(*node)[part];
    leaf = key.substr(dot + 1);
  }
  if (!node->contains(leaf)) throw config_error("unknown config key '" + key + "'");
  json parsed = json::parse(value, nullptr, false);
  (*node)[leaf] = parsed.is_discarded() ? json(value) : parsed;
}

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides,
                      bool seed_given, std::uint64_t seed) {
  json doc = json(RunConfig{});
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw config_error("cannot open config file " + config_path);
    json user = json::parse(f);
    reject_unknown_keys(user, doc, "");
    doc.merge_patch(user);
  }
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw config_error("override '" + ov + "' is not of the form key=value");
    std::string key = ov.substr(0, eq);
    if (key.rfind("--", 0) == 0) key = key.substr(2);
    apply_override(doc, key, ov.substr(eq + 1));
  }
  if (seed_given) {
    doc["data"]["seed"] = seed;
    doc["train"]["seed"] = seed;
  }
  return doc.get<RunConfig>();
}

// refuse to clobber a non-empty output directory unless --overwrite
void prepare_out_dir(const fs::path& out, bool overwrite) {
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!overwrite)
      throw config_error("output directory " + out.string() +
                         " is not empty (pass --overwrite to replace it)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

void echo_run_json(const RunConfig& cfg, const std::string& command, const fs::path& out) {
  json j;
  j["command"] = command;
  j["config"] = cfg;
  std::ofstream f(out / "run.json", std::ios::trunc);
  f << j.dump(2) << "\n";
}

// binary P5 graymap; class ids are spread across the 8-bit range
void write_pgm(const std::vector<float>& plane, std::size_t H, std::size_t W, float max_value,
               const fs::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw format_error("cannot open " + path.string());
  f << "P5\n" << W << " " << H << "\n255\n";
  for (float v : plane) {
    double scaled = max_value > 0.0f ? double(v) / double(max_value) : 0.0;
    unsigned char byte = static_cast<unsigned char>(std::clamp(scaled, 0.0, 1.0) * 255.0 + 0.5);
    f.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

int worker_cap() {  // SMAFORMER_THREADS caps workers; compute is sequential
  const char* env = std::getenv("SMAFORMER_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  if (n < 1) throw config_error("SMAFORMER_THREADS must be a positive integer");
  return 1;  // a cap, not a demand: the single-threaded engine uses one
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------
int cmd_synth(const RunConfig& cfg, const fs::path& out, bool overwrite) {
  prepare_out_dir(out, overwrite);
  auto [manifest, samples] = make_dataset(cfg.data.seed, cfg.data.count, cfg.data.height,
                                          cfg.data.width);
  write_dataset(manifest, samples, out);
  echo_run_json(cfg, "synth", out);
  std::size_t train = 0, val = 0, test = 0;
  for (const auto& s : manifest.splits) {
    train += s == "train";
    val += s == "val";
    test += s == "test";
  }
  std::cout << "wrote " << manifest.count << " samples (" << manifest.height << "x"
            << manifest.width << ", " << manifest.classes << " classes) to " << out.string()
            << "\nsplits: train=" << train << " val=" << val << " test=" << test << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck: finite-difference verification of every differentiable op
// ---------------------------------------------------------------------------
int cmd_gradcheck(double op_threshold, double model_threshold) {
  bool ok = true;
  double worst_op = 0.0;
  for (const auto& [name, err] : op_gradcheck_suite()) {
    worst_op = std::max(worst_op, err);
    bool pass = err < op_threshold;
    ok = ok && pass;
    std::cout << "op " << name << ": max rel err " << err << (pass ? "" : "  FAIL") << "\n";
  }
  double worst_model = model_gradcheck();
  bool model_pass = worst_model < model_threshold;
  ok = ok && model_pass;
  std::cout << "model: max rel err " << worst_model << (model_pass ? "" : "  FAIL") << "\n";
  std::cout << (ok ? "gradcheck PASS" : "gradcheck FAIL") << " (ops worst " << worst_op
            << " < " << op_threshold << ", model worst " << worst_model << " < "
            << model_threshold << ")\n";
  return ok ? kOk : kVerifyFail;
}

// ---------------------------------------------------------------------------
// train / eval / predict
// ---------------------------------------------------------------------------
std::vector<SamplePair> split_samples(const DatasetManifest& m,
                                      const std::vector<SamplePair>& samples,
                                      const std::string& split) {
  std::vector<SamplePair> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (m.splits[i] == split) out.push_back(samples[i]);
  return out;
}

int cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out,
              bool overwrite) {
  if (!fs::exists(data_dir / "manifest.json"))
    throw config_error("missing dataset at " + data_dir.string() + " (run synth first)");
  prepare_out_dir(out, overwrite);
  auto [manifest, samples] = read_dataset(data_dir);
  RunConfig effective = cfg;
  effective.data.count = manifest.count;
  effective.data.height = manifest.height;
  effective.data.width = manifest.width;
  effective.data.seed = manifest.seed;
  echo_run_json(effective, "train", out);

  ModelConfig mc = cfg.model;
  mc.input_height = manifest.height;
  mc.input_width = manifest.width;
  Model<float> model(mc, cfg.train.seed);
  std::cout << "model parameters: " << model.parameter_count() << "\n";
  auto st = TrainState<float>::init_like(model);
  auto result = train_loop(model, manifest, samples, cfg.train, st, out);

  std::ofstream hist(out / "history.csv", std::ios::trunc);
  hist << history_csv(result.history);
  if (result.diverged) {
    std::cerr << "training diverged (non-finite loss) at step " << result.history.back().step
              << "; last good checkpoint: "
              << (result.last_checkpoint.empty() ? "(none)" : result.last_checkpoint.string())
              << "\n";
    return kNumerical;
  }
  checkpoint_save(model, st, out / "final");
  std::cout << "trained " << result.history.size() << " steps; final loss "
            << result.history.back().loss << "; best val DSC " << result.best_val_dsc
            << "\ncheckpoint: " << (out / "final").string() << "\n";
  return kOk;
}

int cmd_eval(const fs::path& data_dir, const fs::path& ckpt, const std::string& split,
             const fs::path& out_csv) {
  if (!fs::exists(data_dir / "manifest.json"))
    throw config_error("missing dataset at " + data_dir.string());
  if (!fs::exists(ckpt / "manifest.json"))
    throw config_error("missing checkpoint at " + ckpt.string());
  auto [manifest, samples] = read_dataset(data_dir);
  auto model = Model<float>::load_from(ckpt);
  auto subset = split_samples(manifest, samples, split);
  if (subset.empty()) throw config_error("split '" + split + "' has no samples");
  auto r = evaluate(model, subset);

  // Table-shaped report: per-foreground-class averages plus the overall mean
  const char* class_names[] = {"background", "bladder-like organ", "tumor"};
  std::size_t classes = model.cfg.num_classes;
  std::cout << "split: " << split << " (" << subset.size() << " samples)\n";
  std::cout << "class                 DSC      IoU\n";
  for (std::size_t c = 1; c < classes; ++c) {
    double d = 0, j = 0;
    std::size_t n = 0;
    for (const auto& row : r.rows)
      if (row.class_id == std::to_string(c)) {
        d += row.dsc;
        j += row.iou;
        ++n;
      }
    const char* name = c < 3 ? class_names[c] : "class";
    std::printf("%-20s %7.4f  %7.4f\n", name, d / n, j / n);
  }
  std::printf("%-20s %7.4f  %7.4f\n", "avg", r.avg_dsc, r.avg_miou);
  if (!out_csv.empty()) write_metrics_csv(r.rows, out_csv);
  return kOk;
}

int cmd_predict(const fs::path& ckpt, const fs::path& image_path, const fs::path& out,
                bool overwrite) {
  if (!fs::exists(ckpt / "manifest.json"))
    throw config_error("missing checkpoint at " + ckpt.string());
  if (!fs::exists(image_path)) throw config_error("missing image " + image_path.string());
  prepare_out_dir(out, overwrite);
  auto model = Model<float>::load_from(ckpt);
  auto image = smt_read<float>(image_path);
  auto logits = model.forward(image);
  std::size_t classes = logits.dim(0), H = logits.dim(1), W = logits.dim(2);
  std::vector<float> mask(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (logits.data()[c * H * W + i] > logits.data()[best * H * W + i]) best = c;
    mask[i] = float(best);
  }
  auto mask_t = Tensor32::from({H, W}, mask);
  smt_write(mask_t, out / "mask.smt");
  write_pgm(mask, H, W, float(classes - 1), out / "mask.pgm");
  std::vector<float> gray(image.data().begin(), image.data().begin() + H * W);
  write_pgm(gray, H, W, 1.0f, out / "image.pgm");
  std::cout << "wrote " << (out / "mask.smt").string() << " and PGM previews\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smaformer: synthetic organ/tumor segmentation at desk scale"};
  app.require_subcommand(1);

  std::string config_path, data_dir, checkpoint, split = "test", image_path, metrics_csv_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool overwrite = false;
  double op_threshold = 1e-6, model_threshold = 1e-4;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "seed override for data and training");
    cmd->add_flag("--overwrite", overwrite, "replace an existing output directory");
    cmd->allow_extras();  // dotted --key=value config overrides
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck_cmd->add_option("--op-threshold", op_threshold, "per-op max relative error");
  gradcheck_cmd->add_option("--model-threshold", model_threshold, "full-model max relative error");
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_common(train);
  train->add_option("--data", data_dir, "dataset directory")->required();
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--split", split, "train|val|test");
  eval_cmd->add_option("--metrics-csv", metrics_csv_path, "write per-sample metrics CSV here");
  auto* predict = app.add_subcommand("predict", "segment one SMT1 image");
  add_common(predict);
  predict->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  predict->add_option("--image", image_path, "input image (.smt, 3xHxW)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    (void)worker_cap();
    CLI::App* cmd = app.get_subcommands().front();
    std::vector<std::string> extras = cmd->remaining();
    const CLI::Option* seed_opt = cmd->get_option_no_throw("--seed");
    RunConfig cfg = load_config(config_path, extras, seed_opt && seed_opt->count() > 0, seed);

    if (cmd == synth) {
      if (out_dir.empty()) throw config_error("synth requires --out");
      return cmd_synth(cfg, out_dir, overwrite);
    }
    if (cmd == gradcheck_cmd) return cmd_gradcheck(op_threshold, model_threshold);
    if (cmd == train) {
      if (out_dir.empty()) throw config_error("train requires --out");
      return cmd_train(cfg, data_dir, out_dir, overwrite);
    }
    if (cmd == eval_cmd) return cmd_eval(data_dir, checkpoint, split, metrics_csv_path);
    if (cmd == predict) {
      if (out_dir.empty()) throw config_error("predict requires --out");
      return cmd_predict(checkpoint, image_path, out_dir, overwrite);
    }
    return kUsage;
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const format_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const shape_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const value_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kNumerical;
  }
}
