#include "modeseg/objectives.hpp"

#include <cmath>
#include <sstream>

namespace modeseg {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::dice: return "dice";
    case LossKind::focal: return "focal";
    case LossKind::combined: return "combined";
  }
  return "dice";
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "focal") return LossKind::focal;
  if (s == "combined") return LossKind::combined;
  throw ConfigError("unknown loss '" + s + "' (expected dice, focal or combined)");
}

void LossConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("loss.alpha must lie in (0, 1)");
  if (!(focal_gamma >= 0.0)) throw ConfigError("loss.focal_gamma must be >= 0");
  if (!(smooth_eps > 0.0)) throw ConfigError("loss.smooth_eps must be positive");
}

namespace {
constexpr double kFocalClamp = 1e-7;
}

template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  require_same_shape(pred.shape(), target.shape(), "dice_loss");
  const T* p = pred.value().ptr();
  const T* t = target.ptr();
  double inter = 0.0, sum_t = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    inter += static_cast<double>(t[i]) * p[i];
    sum_t += t[i];
    sum_p += p[i];
  }
  const double eps = cfg.smooth_eps;
  const double num = 2.0 * inter + eps;
  const double den = sum_t + sum_p + eps;
  Tensor<T> out(Shape{1}, static_cast<T>(1.0 - num / den));
  return make_result<T>(std::move(out), {pred}, [target, num, den](Node<T>& self) {
    // d/dp_i [1 - num/den] = -(2 t_i den - num) / den^2
    Tensor<T>& dp = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    const double inv = 1.0 / (den * den);
    for (std::size_t i = 0; i < dp.numel(); ++i) {
      dp[i] += static_cast<T>(-g * (2.0 * target[i] * den - num) * inv);
    }
  }, "dice_loss");
}

template <typename T>
Var<T> focal_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  require_same_shape(pred.shape(), target.shape(), "focal_loss");
  const std::size_t n = target.numel();
  const double a = cfg.alpha, gamma = cfg.focal_gamma;
  double acc = 0.0;
  const T* p = pred.value().ptr();
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = target[i] >= T{0.5};
    const double pt = pos ? p[i] : 1.0 - p[i];
    const double at = pos ? a : 1.0 - a;
    acc += -at * std::pow(1.0 - pt, gamma) * std::log(std::max(pt, kFocalClamp));
  }
  Tensor<T> out(Shape{1}, static_cast<T>(acc / static_cast<double>(n)));
  return make_result<T>(std::move(out), {pred}, [target, a, gamma, n](Node<T>& self) {
    Node<T>& pn = *self.inputs[0];
    Tensor<T>& dp = pn.grad_buffer();
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool pos = target[i] >= T{0.5};
      const double pt = pos ? pn.value[i] : 1.0 - pn.value[i];
      const double at = pos ? a : 1.0 - a;
      const double q = 1.0 - pt;
      // d/dpt of -at q^gamma log(pt)
      double d = 0.0;
      const double logpt = std::log(std::max(pt, kFocalClamp));
      if (gamma != 0.0 && q > 0.0) d += at * gamma * std::pow(q, gamma - 1.0) * logpt;
      if (pt > kFocalClamp) d -= at * std::pow(q, gamma) / pt;
      dp[i] += static_cast<T>(g * (pos ? d : -d));
    }
  }, "focal_loss");
}

template <typename T>
Var<T> combined_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  return add(scale(dice_loss(pred, target, cfg), static_cast<T>(cfg.dice_weight)),
             scale(focal_loss(pred, target, cfg), static_cast<T>(cfg.focal_weight)));
}

template <typename T>
Var<T> segmentation_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::dice: return dice_loss(pred, target, cfg);
    case LossKind::focal: return focal_loss(pred, target, cfg);
    case LossKind::combined: return combined_loss(pred, target, cfg);
  }
  return dice_loss(pred, target, cfg);
}

template <typename T>
ConfusionMatrix confusion(std::span<const T> pred, std::span<const T> target, double threshold) {
  if (pred.size() != target.size()) throw DimensionError("confusion: size mismatch");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool t = target[i] >= T{0.5};
    if (p && t) ++cm.tp;
    else if (p) ++cm.fp;
    else if (t) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

MetricReport metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("metrics: empty confusion matrix");
  MetricReport r;
  const auto tp = static_cast<double>(cm.tp), fp = static_cast<double>(cm.fp);
  const auto tn = static_cast<double>(cm.tn), fn = static_cast<double>(cm.fn);
  auto ratio = [&r](double num, double den) {
    if (den == 0.0) {
      r.degenerate = true;
      return 0.0;
    }
    return num / den;
  };
  r.accuracy = (tp + tn) / (tp + tn + fp + fn);
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  r.iou = ratio(tp, tp + fp + fn);
  r.dsc = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN); use the reduced form so F1 == Dsc exactly.
  r.f1 = r.dsc;
  return r;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"Accuracy", "Precision", "Recall",
                                              "F1-Score", "IoU",       "Dsc"};
  return names;
}

std::vector<double> metric_values(const MetricReport& r) {
  return {r.accuracy, r.precision, r.recall, r.f1, r.iou, r.dsc};
}

std::string metrics_csv_header() {
  std::string out;
  for (const auto& n : metric_names()) out += (out.empty() ? "" : ",") + n;
  return out;
}

std::string metrics_csv_row(const MetricReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  bool first = true;
  for (double v : metric_values(r)) {
    os << (first ? "" : ",") << v;
    first = false;
  }
  return os.str();
}

#define MODESEG_INSTANTIATE(T)                                                          \
  template Var<T> dice_loss<T>(const Var<T>&, const Tensor<T>&, const LossConfig&);     \
  template Var<T> focal_loss<T>(const Var<T>&, const Tensor<T>&, const LossConfig&);    \
  template Var<T> combined_loss<T>(const Var<T>&, const Tensor<T>&, const LossConfig&); \
  template Var<T> segmentation_loss<T>(const Var<T>&, const Tensor<T>&, const LossConfig&); \
  template ConfusionMatrix confusion<T>(std::span<const T>, std::span<const T>, double);

MODESEG_INSTANTIATE(float)
MODESEG_INSTANTIATE(double)

#undef MODESEG_INSTANTIATE

}  // namespace modeseg
