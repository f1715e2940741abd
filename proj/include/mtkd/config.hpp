#pragma once

#include <cstdint>
#include <string>

#include "mtkd/distill.hpp"
#include "mtkd/encoder.hpp"
#include "mtkd/tasks.hpp"

namespace mtkd {

// Full experiment configuration. Serialized as flat "section.key = value"
// lines; every field has a desk-scale default so an empty file is runnable.
struct RunConfig {
  RunConfig() {
    teacher.vocab_size = task.vocab_size;
    teacher.max_seq_len = task.max_seq_len;
    teacher.hidden_dim = 16;
    teacher.num_heads = 2;
    teacher.ffn_dim = 32;
    teacher.num_layers = 4;
    teacher.dropout = 0.1;
  }

  TaskSpec task;
  EncoderConfig teacher;  // depth must equal distill.layer_ratio * student_layers
  DistillSpec distill;
  std::size_t pool_query_dim = 16;

  double teacher_lr = 2e-3;
  double student_lr = 2e-3;
  std::size_t pretrain_epochs = 4;     // per-teacher diversification phase
  std::size_t cofinetune_epochs = 20;
  std::size_t distill_epochs = 30;
  std::size_t patience = 5;  // early stop on dev accuracy
  std::size_t batch_size = 32;
  std::size_t repeats = 5;
  std::uint64_t master_seed = 1;
  std::string out_dir = "out";

  bool cofinetune = true;  // false = private pooler/head per teacher
  // Leading fraction of the train split used in the distillation phase. The
  // teachers always train on the full split, so values < 1 recreate the
  // regime where teachers know more than the student's task data.
  double distill_fraction = 1.0;
  double teacher_shard_fraction = 0.7;
  double teacher_token_dropout = 0.1;
  // When >= 0, that teacher trains on a label-noised copy of its shard.
  long noisy_teacher = -1;
  double noisy_teacher_rate = 0.3;

  // Derived student encoder: same dims as the teacher, K layers.
  EncoderConfig student_config() const {
    EncoderConfig s = teacher;
    s.num_layers = distill.student_layers;
    return s;
  }

  void validate() const;
};

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);
std::string serialize_run_config(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

// Output directory may be overridden by the MTKD_OUT_DIR environment
// variable; no other field is environment-sensitive.
void apply_env_overrides(RunConfig& cfg);

}  // namespace mtkd
