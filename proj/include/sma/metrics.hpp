#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sma/tensor.hpp"

namespace sma {

inline constexpr double kDiceEps = 1e-6;
inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// BCE-Dice training loss
//
// Input y is a binary mask, p a probability map of the same shape. A 3D input
// is treated as a batch along the first dimension; 2D input is one sample.
// Dice term: batch mean over samples of 1 - 2*sum(y*p)/(sum(y)+sum(p)+eps).
// BCE term: mean over all entries of -(y*log p' + (1-y)*log(1-p')) with p
// clamped to [1e-7, 1-1e-7]. Differentiable w.r.t. p; y is treated as data.
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> bce_dice_loss(Tensor<S> y, Tensor<S> p) {
  detail::check_same_shape(y, p, "bce_dice_loss");
  if (y.ndim() != 2 && y.ndim() != 3)
    throw shape_error("bce_dice_loss: expected (H,W) or (N,H,W), got " + shape_str(y.shape()));
  for (S v : y.data())
    if (v != S(0) && v != S(1))
      throw value_error("bce_dice_loss: ground truth must be binary, got " + std::to_string(v));

  const std::size_t batch = y.ndim() == 3 ? y.dim(0) : 1;
  const std::size_t per = y.size() / batch;
  const std::size_t total = y.size();
  const auto& yd = y.data();
  const auto& pd = p.data();

  const S lo = static_cast<S>(kProbClamp), hi = static_cast<S>(1.0 - kProbClamp);
  double dice = 0.0, bce = 0.0;
  std::vector<double> s_yp(batch), denom(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    double sy = 0, sp = 0, syp = 0;
    for (std::size_t j = 0; j < per; ++j) {
      double yv = yd[i * per + j], pv = pd[i * per + j];
      sy += yv;
      sp += pv;
      syp += yv * pv;
    }
    s_yp[i] = syp;
    denom[i] = sy + sp + kDiceEps;
    dice += 1.0 - 2.0 * syp / denom[i];
  }
  for (std::size_t k = 0; k < total; ++k) {
    S pc = std::min(hi, std::max(lo, pd[k]));
    bce -= yd[k] * std::log(double(pc)) + (1.0 - yd[k]) * std::log(1.0 - double(pc));
  }
  S value = static_cast<S>(dice / batch + bce / total);

  return Tensor<S>::make_op(
      "bce_dice_loss", {1}, {value}, {y, p},
      [batch, per, total, lo, hi, s_yp, denom](typename Tensor<S>::Node& n) {
        S g = n.grad[0];
        auto& p_t = n.parents[1];
        if (!p_t.requires_grad()) return;
        const auto& yd = n.parents[0].data();
        const auto& pd = p_t.data();
        auto& gp = p_t.grad_buffer();
        for (std::size_t i = 0; i < batch; ++i) {
          double d2 = denom[i] * denom[i];
          for (std::size_t j = 0; j < per; ++j) {
            std::size_t k = i * per + j;
            double yv = yd[k];
            // d/dp of the per-sample Dice term, averaged over the batch
            double ddice = -(2.0 * yv * denom[i] - 2.0 * s_yp[i]) / d2 / batch;
            // d/dp of the mean BCE term; zero where the clamp is active
            double dbce = 0.0;
            if (pd[k] > lo && pd[k] < hi)
              dbce = (-yv / double(pd[k]) + (1.0 - yv) / (1.0 - double(pd[k]))) / total;
            gp[k] += g * static_cast<S>(ddice + dbce);
          }
        }
      });
}

// multi-class segmentation loss: softmax over the class axis, then the mean
// of the per-class one-vs-rest BCE-Dice losses
template <class S>
Tensor<S> segmentation_loss(Tensor<S> logits, Tensor<S> target_one_hot) {
  detail::check_same_shape(logits, target_one_hot, "segmentation_loss");
  if (logits.ndim() != 3)
    throw shape_error("segmentation_loss: expected (C,H,W) logits, got " +
                      shape_str(logits.shape()));
  auto probs = softmax(logits, 0);
  std::size_t classes = logits.dim(0);
  Tensor<S> acc;
  for (std::size_t c = 0; c < classes; ++c) {
    auto term = bce_dice_loss(select_channel(target_one_hot, c), select_channel(probs, c));
    acc = c == 0 ? term : add(acc, term);
  }
  return scale(acc, S(1) / S(classes));
}

// ---------------------------------------------------------------------------
// Evaluation metrics on binary masks (plain doubles, no autodiff)
// ---------------------------------------------------------------------------
namespace detail {
inline void check_binary_mask(const std::vector<float>& m, const char* who) {
  for (float v : m)
    if (v != 0.0f && v != 1.0f)
      throw value_error(std::string(who) + ": mask must be binary, got " + std::to_string(v));
}
}  // namespace detail

// DSC = 2|P∩G| / (|P|+|G|); both masks empty counts as a correct prediction
// of absence and scores 1.0
inline double dsc(const std::vector<float>& P, const std::vector<float>& G) {
  if (P.size() != G.size()) throw shape_error("dsc: mask sizes differ");
  detail::check_binary_mask(P, "dsc");
  detail::check_binary_mask(G, "dsc");
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    np += P[i] == 1.0f;
    ng += G[i] == 1.0f;
    inter += (P[i] == 1.0f && G[i] == 1.0f);
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * double(inter) / double(np + ng);
}

inline double iou(const std::vector<float>& P, const std::vector<float>& G) {
  if (P.size() != G.size()) throw shape_error("iou: mask sizes differ");
  detail::check_binary_mask(P, "iou");
  detail::check_binary_mask(G, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    inter += (P[i] == 1.0f && G[i] == 1.0f);
    uni += (P[i] == 1.0f || G[i] == 1.0f);
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

// unweighted mean of per-class IoU over aligned per-class mask lists
inline double miou(const std::vector<std::vector<float>>& P,
                   const std::vector<std::vector<float>>& G) {
  if (P.size() != G.size())
    throw shape_error("miou: class counts differ (" + std::to_string(P.size()) + " vs " +
                      std::to_string(G.size()) + ")");
  if (P.empty()) throw value_error("miou: at least one class required");
  double acc = 0.0;
  for (std::size_t c = 0; c < P.size(); ++c) acc += iou(P[c], G[c]);
  return acc / double(P.size());
}

// ---------------------------------------------------------------------------
// CSV metric reports: sample_id, class_id, dsc, iou with an `avg` row
// ---------------------------------------------------------------------------
struct MetricRow {
  std::string sample_id;
  std::string class_id;
  double dsc;
  double iou;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "sample_id,class_id,dsc,iou\n";
  out << std::setprecision(10);
  for (const auto& r : rows)
    out << r.sample_id << "," << r.class_id << "," << r.dsc << "," << r.iou << "\n";
  return out.str();
}

inline void write_metrics_csv(const std::vector<MetricRow>& rows,
                              const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw format_error("cannot open metrics file " + path.string());
  f << metrics_csv(rows);
}

}  // namespace sma
