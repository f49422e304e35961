#pragma once

#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "sma/blocks.hpp"
#include "sma/serialize.hpp"

namespace sma {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t base_channels = 16;
  std::size_t stages = 4;
  std::vector<std::size_t> blocks_per_stage = {2, 2, 2, 2};
  std::size_t heads = 4;
  std::size_t num_classes = 3;
  std::size_t patch_size = 1;  // stage-0 MHSA patch; halves per stage, floor 1
  std::size_t emlp_expansion = 2;
  std::size_t channel_ratio = 4;
  std::size_t emlp_pixel_kernel = 1;
  std::size_t decoder_blocks = 1;
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  bool enable_sma = true;
  bool enable_emlp = true;
  bool enable_modulator = true;

  void validate() const {
    if (stages < 1) throw config_error("model config: stages must be >= 1");
    if (blocks_per_stage.size() != stages)
      throw config_error("model config: blocks_per_stage must list one entry per stage");
    std::size_t mult = std::size_t(1) << stages;
    if (input_height % mult != 0 || input_width % mult != 0)
      throw config_error("model config: input " + std::to_string(input_height) + "x" +
                         std::to_string(input_width) + " must be divisible by " +
                         std::to_string(mult));
    if (heads == 0 || base_channels % heads != 0)
      throw config_error("model config: heads must divide base_channels");
    if (channel_ratio == 0 || base_channels % channel_ratio != 0)
      throw config_error("model config: channel_ratio must divide base_channels");
    if (num_classes < 1) throw config_error("model config: num_classes must be >= 1");
    if (patch_size == 0 || (input_height % patch_size) || (input_width % patch_size))
      throw config_error("model config: patch_size must divide the input dimensions");
  }

  // per-stage MHSA patch: halves with each downsampling, floor 1
  std::size_t stage_patch(std::size_t depth) const {
    std::size_t p = patch_size >> depth;
    return p ? p : 1;
  }
};

// (channels, height, width) of the feature map entering encoder stage i:
// 2^i * C channels at H/2^i x W/2^i.
struct StageShape {
  std::size_t channels, height, width;

  static StageShape at(const ModelConfig& cfg, std::size_t i) {
    return {cfg.base_channels << i, cfg.input_height >> i, cfg.input_width >> i};
  }

  Shape as_shape() const { return {channels, height, width}; }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"base_channels", c.base_channels},
                     {"stages", c.stages},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"heads", c.heads},
                     {"num_classes", c.num_classes},
                     {"patch_size", c.patch_size},
                     {"emlp_expansion", c.emlp_expansion},
                     {"channel_ratio", c.channel_ratio},
                     {"emlp_pixel_kernel", c.emlp_pixel_kernel},
                     {"decoder_blocks", c.decoder_blocks},
                     {"input_height", c.input_height},
                     {"input_width", c.input_width},
                     {"enable_sma", c.enable_sma},
                     {"enable_emlp", c.enable_emlp},
                     {"enable_modulator", c.enable_modulator}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("base_channels").get_to(c.base_channels);
  j.at("stages").get_to(c.stages);
  j.at("blocks_per_stage").get_to(c.blocks_per_stage);
  j.at("heads").get_to(c.heads);
  j.at("num_classes").get_to(c.num_classes);
  j.at("patch_size").get_to(c.patch_size);
  j.at("emlp_expansion").get_to(c.emlp_expansion);
  j.at("channel_ratio").get_to(c.channel_ratio);
  j.at("emlp_pixel_kernel").get_to(c.emlp_pixel_kernel);
  j.at("decoder_blocks").get_to(c.decoder_blocks);
  j.at("input_height").get_to(c.input_height);
  j.at("input_width").get_to(c.input_width);
  j.at("enable_sma").get_to(c.enable_sma);
  j.at("enable_emlp").get_to(c.enable_emlp);
  j.at("enable_modulator").get_to(c.enable_modulator);
}

// learnable per-stage position embedding + channel gate; identity at init
template <class S>
struct ModulatorParams {
  Tensor<S> pos;   // same shape as the stage feature map, zero init
  Tensor<S> gate;  // per-channel, ones init

  static ModulatorParams init(const StageShape& s) {
    return {Tensor<S>::zeros(s.as_shape()), Tensor<S>::full({s.channels}, S(1))};
  }
};

template <class S>
Tensor<S> apply_modulator(Tensor<S> x, ModulatorParams<S>& m) {
  if (x.shape() != m.pos.shape())
    throw shape_error("modulator: input " + shape_str(x.shape()) +
                      " does not match stage shape " + shape_str(m.pos.shape()));
  return mul_channel_gate(add(x, m.pos), m.gate);
}

// residual downsampling block: stride-2 3x3 conv then two stride-1 3x3 convs
// on the main path, 1x1 stride-2 conv on the residual path, outputs summed
template <class S>
struct DownsampleParams {
  ConvParams<S> conv1, conv2, conv3, residual;

  static DownsampleParams init(std::size_t c, Rng& rng) {
    DownsampleParams p;
    p.conv1 = ConvParams<S>::init(2 * c, c, 3, rng);
    p.conv2 = ConvParams<S>::init(2 * c, 2 * c, 3, rng);
    p.conv3 = ConvParams<S>::init(2 * c, 2 * c, 3, rng);
    p.residual = ConvParams<S>::init(2 * c, c, 1, rng);
    return p;
  }
};

template <class S>
Tensor<S> downsample_block(Tensor<S> x, DownsampleParams<S>& p) {
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
    throw shape_error("downsample_block: spatial dims must be even, got " +
                      shape_str(x.shape()));
  auto main = relu(conv2d(x, p.conv1.w, p.conv1.b, 2, 1));
  main = relu(conv2d(main, p.conv2.w, p.conv2.b, 1, 1));
  main = conv2d(main, p.conv3.w, p.conv3.b, 1, 1);
  auto res = conv2d(x, p.residual.w, p.residual.b, 2, 0);
  return add(main, res);
}

template <class S>
struct DecoderStageParams {
  Tensor<S> up_w;  // (2c, c, 2, 2) transposed-conv weights
  ConvParams<S> fuse;  // 3x3 conv 2c -> c after skip concatenation
  std::vector<SmaBlockParams<S>> blocks;
};

template <class S>
class Model {
 public:
  ModelConfig cfg;
  ConvParams<S> init_proj;
  std::vector<std::vector<SmaBlockParams<S>>> enc_blocks;  // [stage][block]
  std::vector<DownsampleParams<S>> down;                   // [stage]
  std::vector<ModulatorParams<S>> modulators;              // [stage]
  std::vector<DecoderStageParams<S>> dec;                  // [stage]
  ConvParams<S> head;

  explicit Model(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    std::size_t C = cfg.base_channels;
    init_proj = ConvParams<S>::init(C, cfg.in_channels, 3, rng);
    for (std::size_t i = 0; i < cfg.stages; ++i) {
      std::size_t c = C << i;
      std::vector<SmaBlockParams<S>> blocks;
      for (std::size_t j = 0; j < cfg.blocks_per_stage[i]; ++j)
        blocks.push_back(SmaBlockParams<S>::init(c, cfg.heads, cfg.channel_ratio,
                                                 cfg.emlp_expansion, cfg.stage_patch(i),
                                                 cfg.emlp_pixel_kernel, rng));
      enc_blocks.push_back(std::move(blocks));
      down.push_back(DownsampleParams<S>::init(c, rng));
      modulators.push_back(ModulatorParams<S>::init(StageShape::at(cfg, i + 1)));
    }
    for (std::size_t j = 0; j < cfg.stages; ++j) {
      std::size_t depth = cfg.stages - 1 - j;  // resolution level of the stage output
      std::size_t c = C << depth;
      DecoderStageParams<S> d;
      d.up_w = Tensor<S>::fan_in_uniform({2 * c, c, 2, 2}, 2 * c * 4, rng);
      d.fuse = ConvParams<S>::init(c, 2 * c, 3, rng);
      for (std::size_t k = 0; k < cfg.decoder_blocks; ++k)
        d.blocks.push_back(SmaBlockParams<S>::init(c, cfg.heads, cfg.channel_ratio,
                                                   cfg.emlp_expansion, cfg.stage_patch(depth),
                                                   cfg.emlp_pixel_kernel, rng));
      dec.push_back(std::move(d));
    }
    head = ConvParams<S>::init(cfg.num_classes, C, 1, rng);
    for_each_param([](const std::string&, Tensor<S>& t) { t.set_requires_grad(true); });
  }

  template <class Fn>
  void for_each_param(Fn&& fn) {
    visit_params(init_proj, "init_proj", fn);
    for (std::size_t i = 0; i < cfg.stages; ++i) {
      for (std::size_t j = 0; j < enc_blocks[i].size(); ++j)
        visit_params(enc_blocks[i][j], "stage" + std::to_string(i) + ".block" + std::to_string(j),
                     fn);
      std::string dp = "down" + std::to_string(i);
      visit_params(down[i].conv1, dp + ".conv1", fn);
      visit_params(down[i].conv2, dp + ".conv2", fn);
      visit_params(down[i].conv3, dp + ".conv3", fn);
      visit_params(down[i].residual, dp + ".residual", fn);
      fn("modulator" + std::to_string(i) + ".pos", modulators[i].pos);
      fn("modulator" + std::to_string(i) + ".gate", modulators[i].gate);
    }
    for (std::size_t j = 0; j < cfg.stages; ++j) {
      std::string dp = "dec" + std::to_string(j);
      fn(dp + ".up.weight", dec[j].up_w);
      visit_params(dec[j].fuse, dp + ".fuse", fn);
      for (std::size_t k = 0; k < dec[j].blocks.size(); ++k)
        visit_params(dec[j].blocks[k], dp + ".block" + std::to_string(k), fn);
    }
    visit_params(head, "head", fn);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each_param([&n](const std::string&, Tensor<S>& t) { n += t.size(); });
    return n;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }

  Tensor<S> decoder_stage(Tensor<S> x, Tensor<S> skip, std::size_t j) {
    auto up = conv_transpose2d(x, dec[j].up_w);
    if (skip.shape() != up.shape())
      throw shape_error("decoder stage " + std::to_string(j) + ": skip " +
                        shape_str(skip.shape()) + " does not match upsampled " +
                        shape_str(up.shape()));
    auto cat = concat_channels(up, skip);
    auto out = relu(conv2d(cat, dec[j].fuse.w, dec[j].fuse.b, 1, 1));
    for (auto& blk : dec[j].blocks)
      out = sma_block_forward(out, blk, cfg.enable_sma, cfg.enable_emlp);
    return out;
  }

  Tensor<S> forward(Tensor<S> img) {
    if (img.ndim() != 3 || img.dim(0) != cfg.in_channels || img.dim(1) != cfg.input_height ||
        img.dim(2) != cfg.input_width)
      throw shape_error("model forward: input " + shape_str(img.shape()) +
                        " does not match configured " +
                        shape_str({cfg.in_channels, cfg.input_height, cfg.input_width}));
    auto x = relu(conv2d(img, init_proj.w, init_proj.b, 1, 1));
    std::vector<Tensor<S>> skips;
    for (std::size_t i = 0; i < cfg.stages; ++i) {
      try {
        for (auto& blk : enc_blocks[i])
          x = sma_block_forward(x, blk, cfg.enable_sma, cfg.enable_emlp);
        skips.push_back(x);
        x = downsample_block(x, down[i]);
        if (cfg.enable_modulator) x = apply_modulator(x, modulators[i]);
      } catch (const shape_error& e) {
        throw shape_error("encoder stage " + std::to_string(i) + ": " + e.what());
      }
    }
    for (std::size_t j = 0; j < cfg.stages; ++j)
      x = decoder_stage(x, skips[cfg.stages - 1 - j], j);
    return conv2d(x, head.w, head.b, 1, 0);
  }

  // checkpoint directory: config.json + manifest.json + params/*.smt
  void save(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    nlohmann::json manifest;
    std::size_t idx = 0;
    for_each_param([&](const std::string& name, Tensor<S>& t) {
      std::string file = "params/p" + std::to_string(idx++) + ".smt";
      smt_write(t, dir / file);
      manifest[name] = {{"file", file}, {"shape", t.shape()}};
    });
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    nlohmann::json cj = cfg;
    std::ofstream cf(dir / "config.json", std::ios::trunc);
    cf << cj.dump(2) << "\n";
  }

  void load(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw format_error("checkpoint: missing manifest at " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(mf);
    for_each_param([&](const std::string& name, Tensor<S>& t) {
      if (!manifest.contains(name))
        throw format_error("checkpoint: manifest lacks parameter '" + name + "'");
      auto loaded = smt_read<S>(dir / manifest[name]["file"].get<std::string>());
      if (loaded.shape() != t.shape())
        throw format_error("checkpoint: parameter '" + name + "' has shape " +
                           shape_str(loaded.shape()) + ", expected " + shape_str(t.shape()));
      t.data() = loaded.data();
    });
  }

  static Model load_from(const std::filesystem::path& dir) {
    std::ifstream cf(dir / "config.json");
    if (!cf) throw format_error("checkpoint: missing config at " + dir.string());
    ModelConfig cfg = nlohmann::json::parse(cf).get<ModelConfig>();
    Model m(cfg, 0);
    m.load(dir);
    return m;
  }
};

// closed-form parameter count for a config, kept in sync with the registry
// (the registry enumeration is the oracle in tests)
inline std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  auto conv = [](std::size_t co, std::size_t ci, std::size_t k) { return co * ci * k * k + co; };
  auto lin = [](std::size_t di, std::size_t dout) { return di * dout + dout; };
  auto block = [&](std::size_t c, std::size_t p) {
    std::size_t d = c * p * p;
    std::size_t e = c * cfg.emlp_expansion;
    std::size_t n = 4 * c;  // two layer norms
    n += lin(c, c / cfg.channel_ratio) + lin(c / cfg.channel_ratio, c);  // channel gate
    n += conv(c, c, 1);                                                  // pixel gate
    n += conv(1, 2, 7);                                                  // spatial gate
    n += 4 * lin(d, d);                                                  // mhsa q,k,v,o
    n += lin(d, d);                                                      // fuse
    n += lin(c, e) + conv(e, e, cfg.emlp_pixel_kernel) + (e * 9 + e) + lin(e, c);  // e-mlp
    return n;
  };
  std::size_t C = cfg.base_channels;
  std::size_t n = conv(C, cfg.in_channels, 3);
  for (std::size_t i = 0; i < cfg.stages; ++i) {
    std::size_t c = C << i;
    n += cfg.blocks_per_stage[i] * block(c, cfg.stage_patch(i));
    n += conv(2 * c, c, 3) + 2 * conv(2 * c, 2 * c, 3) + conv(2 * c, c, 1);  // downsample
    StageShape s = StageShape::at(cfg, i + 1);
    n += s.channels * s.height * s.width + s.channels;  // modulator
  }
  for (std::size_t j = 0; j < cfg.stages; ++j) {
    std::size_t depth = cfg.stages - 1 - j;
    std::size_t c = C << depth;
    n += 2 * c * c * 4;          // transposed conv, no bias
    n += conv(c, 2 * c, 3);      // skip fusion
    n += cfg.decoder_blocks * block(c, cfg.stage_patch(depth));
  }
  n += conv(cfg.num_classes, C, 1);
  return n;
}

}  // namespace sma
