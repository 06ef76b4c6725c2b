#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "tfda/tensor.hpp"

namespace tfda {

namespace pseudodetail {

inline std::vector<double> unit(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  double n = std::sqrt(s);
  std::vector<double> out(v.size());
  if (n > 1e-12) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  }
  return out;
}

}  // namespace pseudodetail

// Fixed-capacity ring of (unit feature, class probability) pairs over the
// target domain; supports cosine-similarity KNN queries and neighborhood
// label refinement.
class MemoryBank {
 public:
  struct Entry {
    std::vector<double> feature;  // unit norm
    std::vector<double> probs;
  };

  MemoryBank(int capacity, int feature_dim, int classes)
      : capacity_(capacity), dim_(feature_dim), classes_(classes) {
    if (capacity < 1) throw Error("MemoryBank: capacity must be >= 1");
    if (feature_dim < 1) throw Error("MemoryBank: feature_dim must be >= 1");
    if (classes < 2) throw Error("MemoryBank: classes must be >= 2");
  }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(entries_.size()); }
  int feature_dim() const { return dim_; }
  int classes() const { return classes_; }
  const Entry& entry(int i) const { return entries_[static_cast<std::size_t>(i)]; }

  // Inserts one batch, oldest-slot-first once full. Features are normalized
  // on the way in.
  void update(const Tensor& features, const Tensor& probs) {
    require_rank(features, 2, "MemoryBank::update");
    require_rank(probs, 2, "MemoryBank::update");
    int B = features.dim(0);
    if (features.dim(1) != dim_) {
      throw Error("MemoryBank::update: feature dim " + std::to_string(features.dim(1)) + " vs bank dim " +
                  std::to_string(dim_));
    }
    if (probs.dim(0) != B || probs.dim(1) != classes_) {
      throw Error("MemoryBank::update: probs shape " + shape_str(probs.shape) + " vs [" + std::to_string(B) + " x " +
                  std::to_string(classes_) + "]");
    }
    for (int i = 0; i < B; ++i) {
      Entry e;
      e.feature.assign(features.values.begin() + static_cast<std::ptrdiff_t>(i) * dim_,
                       features.values.begin() + static_cast<std::ptrdiff_t>(i + 1) * dim_);
      e.feature = pseudodetail::unit(e.feature);
      e.probs.assign(probs.values.begin() + static_cast<std::ptrdiff_t>(i) * classes_,
                     probs.values.begin() + static_cast<std::ptrdiff_t>(i + 1) * classes_);
      if (size() < capacity_) {
        entries_.push_back(std::move(e));
      } else {
        entries_[static_cast<std::size_t>(cursor_ % capacity_)] = std::move(e);
      }
      cursor_ = (cursor_ + 1) % capacity_;
    }
  }

  // Indices of the K most cosine-similar entries, ordered by descending
  // similarity, ties broken toward the lower index.
  std::vector<int> knn(const std::vector<double>& query, int K) const {
    if (static_cast<int>(query.size()) != dim_) {
      throw Error("MemoryBank::knn: query dim " + std::to_string(query.size()) + " vs bank dim " + std::to_string(dim_));
    }
    if (K < 1) throw Error("MemoryBank::knn: K must be >= 1");
    if (K > size()) {
      throw Error("MemoryBank::knn: K = " + std::to_string(K) + " exceeds bank size " + std::to_string(size()));
    }
    std::vector<double> q = pseudodetail::unit(query);
    std::vector<std::pair<double, int>> sims(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      double s = 0.0;
      const auto& f = entries_[i].feature;
      for (int d = 0; d < dim_; ++d) s += q[static_cast<std::size_t>(d)] * f[static_cast<std::size_t>(d)];
      sims[i] = {s, static_cast<int>(i)};
    }
    auto better = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    };
    std::partial_sort(sims.begin(), sims.begin() + K, sims.end(), better);
    std::vector<int> out(static_cast<std::size_t>(K));
    for (int i = 0; i < K; ++i) out[static_cast<std::size_t>(i)] = sims[static_cast<std::size_t>(i)].second;
    return out;
  }

  struct Refined {
    std::vector<double> probs;  // mean of neighbor distributions
    int label = 0;              // argmax, ties to the lowest class
  };

  // Pseudo-label from the mean class distribution of the K nearest entries.
  Refined refine(const std::vector<double>& query, int K) const {
    std::vector<int> nn = knn(query, K);
    Refined r;
    r.probs.assign(static_cast<std::size_t>(classes_), 0.0);
    for (int i : nn) {
      const auto& p = entries_[static_cast<std::size_t>(i)].probs;
      for (int c = 0; c < classes_; ++c) r.probs[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)];
    }
    for (double& v : r.probs) v /= static_cast<double>(K);
    for (int c = 1; c < classes_; ++c) {
      if (r.probs[static_cast<std::size_t>(c)] > r.probs[static_cast<std::size_t>(r.label)]) r.label = c;
    }
    return r;
  }

 private:
  int capacity_, dim_, classes_;
  std::vector<Entry> entries_;
  int cursor_ = 0;
};

// Label assigned to a sample at a given epoch.
struct LabelStamp {
  int epoch = 0;
  int label = 0;
};

// FIFO key queue whose entries remember the last `history_epochs` pseudo-label
// assignments of the sample that produced them. A queue entry is excluded as a
// negative for a query when the two label histories agree at any shared epoch
// (the pair looked like the same class at some point, so it must not be pushed
// apart).
class TemporalQueue {
 public:
  struct Entry {
    std::int64_t sample_id = -1;
    std::vector<double> key;  // unit norm
    std::vector<LabelStamp> history;
  };

  TemporalQueue(int capacity, int history_epochs, int key_dim)
      : capacity_(capacity), history_epochs_(history_epochs), dim_(key_dim) {
    if (capacity < 1) throw Error("TemporalQueue: capacity must be >= 1");
    if (history_epochs < 1) throw Error("TemporalQueue: history_epochs must be >= 1");
    if (key_dim < 1) throw Error("TemporalQueue: key_dim must be >= 1");
  }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(entries_.size()); }
  int history_epochs() const { return history_epochs_; }
  const Entry& entry(int i) const { return entries_[static_cast<std::size_t>(i)]; }

  // Snapshot of all keys as an [n x D] tensor, in queue order.
  Tensor keys_snapshot() const {
    if (entries_.empty()) return Tensor();
    Tensor out({size(), dim_});
    for (int i = 0; i < size(); ++i) {
      const auto& k = entries_[static_cast<std::size_t>(i)].key;
      std::copy(k.begin(), k.end(), out.values.begin() + static_cast<std::ptrdiff_t>(i) * dim_);
    }
    return out;
  }

  // Records one batch of keys with this epoch's labels. A sample already in
  // the queue keeps its position: its key is replaced and the label stamp is
  // appended (trimmed to the last history_epochs entries). New samples are
  // enqueued FIFO, evicting the oldest entry when full.
  void record(const std::vector<std::int64_t>& sample_ids, const Tensor& keys, const std::vector<int>& labels,
              int epoch) {
    require_rank(keys, 2, "TemporalQueue::record");
    int B = keys.dim(0);
    if (keys.dim(1) != dim_) {
      throw Error("TemporalQueue::record: key dim " + std::to_string(keys.dim(1)) + " vs queue dim " + std::to_string(dim_));
    }
    if (static_cast<int>(sample_ids.size()) != B || static_cast<int>(labels.size()) != B) {
      throw Error("TemporalQueue::record: ids/labels/keys row counts disagree");
    }
    for (int i = 0; i < B; ++i) {
      std::vector<double> key(keys.values.begin() + static_cast<std::ptrdiff_t>(i) * dim_,
                              keys.values.begin() + static_cast<std::ptrdiff_t>(i + 1) * dim_);
      key = pseudodetail::unit(key);
      LabelStamp stamp{epoch, labels[static_cast<std::size_t>(i)]};
      auto it = std::find_if(entries_.begin(), entries_.end(),
                             [&](const Entry& e) { return e.sample_id == sample_ids[static_cast<std::size_t>(i)]; });
      if (it != entries_.end()) {
        it->key = std::move(key);
        if (!it->history.empty() && it->history.back().epoch == epoch) {
          it->history.back() = stamp;
        } else {
          it->history.push_back(stamp);
          while (static_cast<int>(it->history.size()) > history_epochs_) it->history.erase(it->history.begin());
        }
      } else {
        if (size() >= capacity_) entries_.pop_front();
        Entry e;
        e.sample_id = sample_ids[static_cast<std::size_t>(i)];
        e.key = std::move(key);
        e.history.push_back(stamp);
        entries_.push_back(std::move(e));
      }
    }
  }

  // Indices (ascending) of entries admissible as negatives for a query with
  // the given label history.
  std::vector<int> exclusion_complement(const std::vector<LabelStamp>& query_history) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      const auto& h = entries_[static_cast<std::size_t>(i)].history;
      bool agree = false;
      for (const auto& qs : query_history) {
        for (const auto& es : h) {
          if (qs.epoch == es.epoch && qs.label == es.label) {
            agree = true;
            break;
          }
        }
        if (agree) break;
      }
      if (!agree) out.push_back(i);
    }
    return out;
  }

 private:
  int capacity_, history_epochs_, dim_;
  std::deque<Entry> entries_;
};

// Per-sample label history kept by the trainer, one ring per target sample,
// shared by all three queues.
class LabelHistoryTable {
 public:
  LabelHistoryTable(int n, int history_epochs) : history_epochs_(history_epochs), table_(static_cast<std::size_t>(n)) {
    if (history_epochs < 1) throw Error("LabelHistoryTable: history_epochs must be >= 1");
  }

  void append(int sample, int epoch, int label) {
    auto& h = table_[static_cast<std::size_t>(sample)];
    if (!h.empty() && h.back().epoch == epoch) {
      h.back().label = label;
      return;
    }
    h.push_back({epoch, label});
    while (static_cast<int>(h.size()) > history_epochs_) h.erase(h.begin());
  }

  const std::vector<LabelStamp>& history(int sample) const { return table_[static_cast<std::size_t>(sample)]; }

 private:
  int history_epochs_;
  std::vector<std::vector<LabelStamp>> table_;
};

}  // namespace tfda
