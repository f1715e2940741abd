#include "mtkd/metrics.hpp"

#include "mtkd/errors.hpp"

namespace mtkd {

double accuracy(const std::vector<int>& preds, const std::vector<int>& golds) {
  if (preds.size() != golds.size())
    throw ContractError("accuracy: preds/golds length mismatch");
  if (preds.empty()) throw ContractError("accuracy: empty inputs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == golds[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

MetricsReport classification_report(const std::vector<int>& preds,
                                    const std::vector<int>& golds,
                                    std::size_t num_classes) {
  if (preds.size() != golds.size())
    throw ContractError("classification_report: preds/golds length mismatch");
  std::vector<long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], g = golds[i];
    if (p < 0 || g < 0 || static_cast<std::size_t>(p) >= num_classes ||
        static_cast<std::size_t>(g) >= num_classes)
      throw ContractError("classification_report: label out of range");
    if (p == g) ++tp[static_cast<std::size_t>(p)];
    else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(g)];
    }
  }
  MetricsReport r;
  r.accuracy = accuracy(preds, golds);
  r.precision.resize(num_classes);
  r.recall.resize(num_classes);
  r.f1.resize(num_classes);
  double sum_f1 = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double p = tp[c] + fp[c] > 0 ? static_cast<double>(tp[c]) / (tp[c] + fp[c]) : 0.0;
    const double rec = tp[c] + fn[c] > 0 ? static_cast<double>(tp[c]) / (tp[c] + fn[c]) : 0.0;
    r.precision[c] = p;
    r.recall[c] = rec;
    r.f1[c] = p + rec > 0.0 ? 2.0 * p * rec / (p + rec) : 0.0;
    sum_f1 += r.f1[c];
  }
  r.macro_f1 = sum_f1 / static_cast<double>(num_classes);
  return r;
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& golds,
                std::size_t num_classes) {
  return classification_report(preds, golds, num_classes).macro_f1;
}

}  // namespace mtkd
