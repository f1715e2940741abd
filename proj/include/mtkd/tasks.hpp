#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtkd/encoder.hpp"
#include "mtkd/errors.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

enum class TaskKind { Sent2, Nli2, Topic18 };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);
std::size_t task_kind_classes(TaskKind k);

struct TaskSpec {
  TaskKind kind = TaskKind::Sent2;
  std::size_t num_classes = 2;
  std::size_t n_train = 2000;
  std::size_t n_dev = 400;
  std::size_t n_test = 400;
  std::size_t vocab_size = 100;
  std::size_t max_seq_len = 16;
  double noise_rate = 0.0;
  double imbalance = 0.0;  // 0 = uniform topics; >0 skews topic frequencies
  std::uint64_t seed = 0;

  void validate() const;
};

struct Example {
  std::vector<std::size_t> ids;  // includes the leading cls token
  int label = 0;
};

using Dataset = std::vector<Example>;

struct SplitDatasets {
  Dataset train, dev, test;
};

struct Batch {
  std::size_t size = 0;
  std::size_t len = 0;
  std::size_t num_classes = 0;
  std::vector<std::size_t> ids;     // size×len, pad id 0
  std::vector<std::uint8_t> mask;   // 1 on real tokens
  std::vector<int> labels;

  std::vector<std::size_t> row_ids(std::size_t i) const {
    return {ids.begin() + static_cast<long>(i * len), ids.begin() + static_cast<long>((i + 1) * len)};
  }
  std::vector<std::uint8_t> row_mask(std::size_t i) const {
    return {mask.begin() + static_cast<long>(i * len), mask.begin() + static_cast<long>((i + 1) * len)};
  }
  template <typename S>
  std::vector<S> onehot(std::size_t i) const {
    std::vector<S> v(num_classes, S(0));
    v[static_cast<std::size_t>(labels[i])] = S(1);
    return v;
  }
};

// Deterministic synthetic corpora. Labels are recoverable from tokens by
// construction on every noise-free example.
SplitDatasets gen_synthetic(const TaskSpec& spec);

// Independent label-recovery oracle; returns -1 on ambiguous token evidence
// (the generator never emits such examples).
int recover_label(const TaskSpec& spec, const Example& ex);

std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size,
                                std::uint64_t shuffle_seed, std::size_t max_len,
                                std::size_t num_classes);

Batch dataset_to_batch(const Dataset& data, std::size_t max_len, std::size_t num_classes);

void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);
void save_manifest(const std::string& path, const TaskSpec& spec);
TaskSpec load_manifest(const std::string& path);

std::uint64_t dataset_hash(const SplitDatasets& splits);

// Teacher-diversity augmentation: masks out non-cls tokens with the given
// rate (the ids stay in place; only the mask changes).
void token_dropout(Batch& batch, double rate, Rng& rng);

}  // namespace mtkd
