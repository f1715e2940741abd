#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mtkd/checkpoint.hpp"
#include "mtkd/config.hpp"
#include "mtkd/distill.hpp"
#include "mtkd/metrics.hpp"

namespace mtkd {

struct EpochRow {
  std::size_t epoch = 0;
  std::string split;  // dev | test
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double loss_task = 0.0;
  double loss_hid = 0.0;
  double loss_dis = 0.0;
};

struct RunRecord {
  std::string run_id;
  std::string variant;
  std::uint64_t seed = 0;
  std::uint64_t config_digest = 0;
  std::uint64_t data_hash = 0;
  std::vector<EpochRow> rows;
  std::size_t best_epoch = 0;
  double test_accuracy = 0.0;
  double test_macro_f1 = 0.0;
  double wall_clock_s = 0.0;
  bool failed = false;
  std::string fail_phase;
};

// A named experiment variant resolved against the base config.
struct VariantSpec {
  std::string name = "full";
  bool cofinetune = true;
  DistillSpec distill;
  std::vector<std::size_t> active;  // teacher subset used for distillation
};

VariantSpec resolve_variant(const RunConfig& cfg, const std::string& name);

// All non-empty teacher subsets as variant names ("teachers:0", "teachers:0,1", ...).
std::vector<std::string> teacher_combos(std::size_t n);
// Standard ablation list: full, no-cofinetune, uniform, ensemble, the three
// loss-term removals, plus every teacher combination.
std::vector<std::string> ablation_variants(std::size_t n);

struct EvalResult {
  MetricsReport report;
  double loss = 0.0;  // mean task cross-entropy
};

EvalResult evaluate_model(EncoderParams<float>& enc, AttentivePooler<float>& pooler,
                          ClassifierHead<float>& head, const Dataset& data,
                          std::size_t max_len, std::size_t num_classes);

// Orchestrates the full pipeline with in-process caches so ablation variants
// sharing a seed reuse datasets and trained teachers.
class Workbench {
 public:
  explicit Workbench(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }

  // student_out, when given, receives the best student/pooler/head/projection
  // tensors for checkpointing.
  RunRecord run_single(const std::string& variant, std::uint64_t seed,
                       NamedTensors* student_out = nullptr);
  std::vector<RunRecord> run_repeats(const std::string& variant);
  std::vector<RunRecord> run_ablations();

  const SplitDatasets& data(std::uint64_t seed);
  TeacherBundle<float>& teachers(std::uint64_t seed, bool shared);
  std::vector<double> teacher_dev_accuracy(std::uint64_t seed, bool shared);

 private:
  RunConfig cfg_;
  std::map<std::uint64_t, SplitDatasets> data_cache_;
  std::map<std::pair<std::uint64_t, bool>, TeacherBundle<float>> teacher_cache_;

  TeacherBundle<float> train_teachers(std::uint64_t seed, bool shared);
};

// Deterministic CSV (no wall clock), timing CSV, and the mean±std markdown.
std::string metrics_csv(const std::vector<RunRecord>& records);
std::string report_csv(const std::vector<RunRecord>& records);
std::string report_markdown(const std::vector<RunRecord>& records);
// Aggregates an existing metrics/report CSV into the markdown summary.
std::string summarize_metrics_csv(const std::string& csv_text);
void emit_report(const std::vector<RunRecord>& records, const std::string& dir);

std::pair<double, double> mean_std(const std::vector<double>& xs);

// Checkpoint bridging for the float training stack.
NamedTensors encoder_tensors(EncoderParams<float>& p, const std::string& prefix);
NamedTensors bundle_tensors(TeacherBundle<float>& b);
void load_into(std::vector<std::pair<std::string, Tensor*>> targets, const NamedTensors& src);
std::vector<std::pair<std::string, Tensor*>> encoder_slots(EncoderParams<float>& p,
                                                           const std::string& prefix);
std::vector<std::pair<std::string, Tensor*>> bundle_slots(TeacherBundle<float>& b);

}  // namespace mtkd
