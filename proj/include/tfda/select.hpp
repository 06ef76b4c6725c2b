#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tfda/tensor.hpp"

namespace tfda {

// Population standard deviation of one sample's max-probability across L
// augmented views: low spread means the prediction is stable under
// perturbation.
inline double view_uncertainty(const std::vector<double>& view_confidences) {
  if (view_confidences.empty()) throw Error("view_uncertainty: no views");
  double mean = 0.0;
  for (double c : view_confidences) mean += c;
  mean /= static_cast<double>(view_confidences.size());
  double var = 0.0;
  for (double c : view_confidences) var += (c - mean) * (c - mean);
  var /= static_cast<double>(view_confidences.size());
  return std::sqrt(var);
}

// Batch-mean thresholds: a sample is reliable when its confidence clears the
// mean confidence and its uncertainty stays below the mean uncertainty.
struct Thresholds {
  double tau_c = 0.0;
  double tau_u = 0.0;
};

inline Thresholds batch_thresholds(const std::vector<double>& confidences, const std::vector<double>& uncertainties) {
  if (confidences.empty() || confidences.size() != uncertainties.size()) {
    throw Error("batch_thresholds: confidence/uncertainty lengths " + std::to_string(confidences.size()) + "/" +
                std::to_string(uncertainties.size()));
  }
  Thresholds th;
  for (double c : confidences) th.tau_c += c;
  for (double u : uncertainties) th.tau_u += u;
  th.tau_c /= static_cast<double>(confidences.size());
  th.tau_u /= static_cast<double>(uncertainties.size());
  return th;
}

struct ReliabilityPartition {
  std::vector<char> reliable_flag;      // per batch row
  std::vector<int> reliable;            // row indices, ascending
  std::vector<int> non_reliable;        // row indices, ascending
};

// Splits a batch into reliable / non-reliable rows:
//   reliable iff confidence >= tau_c and uncertainty <= tau_u,
// then promotes the 2 highest-confidence non-reliable rows of each predicted
// class (ties toward the lower row index) into the reliable set, so every
// predicted class present in the batch keeps supervision.
inline ReliabilityPartition partition(const std::vector<double>& confidences,
                                      const std::vector<double>& uncertainties, double tau_c, double tau_u,
                                      const std::vector<int>& predicted_labels, int classes) {
  std::size_t n = confidences.size();
  if (uncertainties.size() != n || predicted_labels.size() != n) {
    throw Error("partition: input lengths disagree");
  }
  if (classes < 1) throw Error("partition: classes must be >= 1");
  ReliabilityPartition part;
  part.reliable_flag.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    int y = predicted_labels[i];
    if (y < 0 || y >= classes) throw Error("partition: predicted label " + std::to_string(y) + " out of range");
    if (confidences[i] >= tau_c && uncertainties[i] <= tau_u) part.reliable_flag[i] = 1;
  }
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < n; ++i) {
    if (!part.reliable_flag[i]) by_class[static_cast<std::size_t>(predicted_labels[i])].push_back(static_cast<int>(i));
  }
  for (auto& rows : by_class) {
    std::sort(rows.begin(), rows.end(), [&](int a, int b) {
      if (confidences[static_cast<std::size_t>(a)] != confidences[static_cast<std::size_t>(b)]) {
        return confidences[static_cast<std::size_t>(a)] > confidences[static_cast<std::size_t>(b)];
      }
      return a < b;
    });
    for (std::size_t i = 0; i < rows.size() && i < 2; ++i) part.reliable_flag[static_cast<std::size_t>(rows[i])] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    (part.reliable_flag[i] ? part.reliable : part.non_reliable).push_back(static_cast<int>(i));
  }
  return part;
}

}  // namespace tfda
