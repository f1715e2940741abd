#pragma once

#include <cstddef>
#include <vector>

namespace mtkd {

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> precision, recall, f1;  // per class
  double loss_task = 0.0;
  double loss_hidden = 0.0;
  double loss_distill = 0.0;
};

double accuracy(const std::vector<int>& preds, const std::vector<int>& golds);

// Unweighted mean of one-vs-rest F1 over all classes; a class with
// P + R == 0 contributes 0.
double macro_f1(const std::vector<int>& preds, const std::vector<int>& golds,
                std::size_t num_classes);

MetricsReport classification_report(const std::vector<int>& preds,
                                    const std::vector<int>& golds,
                                    std::size_t num_classes);

}  // namespace mtkd
