#pragma once

#include <string>
#include <vector>

#include "tfda/tensor.hpp"

namespace tfda {

struct MetricsReport {
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  int count = 0;
};

// Macro F1: unweighted mean of per-class F1 over all `classes` classes.
// A class with no true and no predicted samples contributes F1 = 0.
inline MetricsReport evaluate_predictions(const std::vector<int>& y_true, const std::vector<int>& y_pred, int classes) {
  if (y_true.size() != y_pred.size()) {
    throw Error("evaluate_predictions: " + std::to_string(y_true.size()) + " labels vs " +
                std::to_string(y_pred.size()) + " predictions");
  }
  if (y_true.empty()) throw Error("evaluate_predictions: empty input");
  if (classes < 2) throw Error("evaluate_predictions: classes must be >= 2");
  MetricsReport rep;
  rep.count = static_cast<int>(y_true.size());
  rep.confusion.assign(static_cast<std::size_t>(classes), std::vector<int>(static_cast<std::size_t>(classes), 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    int yt = y_true[i], yp = y_pred[i];
    if (yt < 0 || yt >= classes) throw Error("evaluate_predictions: true label " + std::to_string(yt) + " out of range");
    if (yp < 0 || yp >= classes) throw Error("evaluate_predictions: predicted label " + std::to_string(yp) + " out of range");
    rep.confusion[static_cast<std::size_t>(yt)][static_cast<std::size_t>(yp)]++;
  }
  rep.per_class_f1.resize(static_cast<std::size_t>(classes), 0.0);
  double sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    int tp = rep.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    int fp = 0, fn = 0;
    for (int o = 0; o < classes; ++o) {
      if (o == c) continue;
      fp += rep.confusion[static_cast<std::size_t>(o)][static_cast<std::size_t>(c)];
      fn += rep.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(o)];
    }
    double denom = 2.0 * tp + fp + fn;
    double f1 = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    rep.per_class_f1[static_cast<std::size_t>(c)] = f1;
    sum += f1;
  }
  rep.macro_f1 = sum / static_cast<double>(classes);
  return rep;
}

inline double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred, int classes) {
  return evaluate_predictions(y_true, y_pred, classes).macro_f1;
}

}  // namespace tfda
