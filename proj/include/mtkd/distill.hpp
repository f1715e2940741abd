#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mtkd/adam.hpp"
#include "mtkd/encoder.hpp"
#include "mtkd/errors.hpp"
#include "mtkd/tasks.hpp"

namespace mtkd {

enum class WeightingMode { LossWeighted, Uniform, Single, EnsembleAverage };
enum class StudentInitScheme { FirstK, LastK, Skip };

// Summation bound of the hidden loss's inner sum; StudentLayers covers all
// K student layers, NarrowBound stops at min(T, K) for audit comparisons.
enum class HiddenBound { StudentLayers, NarrowBound };

struct DistillSpec {
  std::size_t num_teachers = 3;    // N
  std::size_t student_layers = 2;  // K
  std::size_t layer_ratio = 2;     // T; teacher depth is T*K
  double temperature = 1.0;
  bool use_hidden = true;
  bool use_distill = true;
  bool use_task = true;
  WeightingMode weighting = WeightingMode::LossWeighted;
  std::size_t single_index = 0;
  StudentInitScheme student_init = StudentInitScheme::FirstK;
  HiddenBound hidden_bound = HiddenBound::StudentLayers;

  std::size_t teacher_layers() const { return layer_ratio * student_layers; }

  void validate() const {
    if (num_teachers < 1) throw ConfigError("distill: need at least one teacher");
    if (student_layers < 1 || layer_ratio < 1)
      throw ConfigError("distill: K and T must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be > 0");
    if (weighting == WeightingMode::Single && single_index >= num_teachers)
      throw ConfigError("distill: single teacher index out of range");
  }
};

// Student layer j (1-based) is supervised by teacher layer T*j; the top
// student layer always aligns with the top teacher layer.
inline std::size_t map_layer(std::size_t j, std::size_t ratio, std::size_t student_layers) {
  if (j < 1 || j > student_layers)
    throw ContractError("map_layer: student layer " + std::to_string(j) + " out of 1.." +
                        std::to_string(student_layers));
  return ratio * j;
}

// One learnable d_teacher×d_student matrix per (teacher, student layer).
template <typename S>
struct ProjectionSet {
  std::size_t num_teachers = 0;
  std::size_t student_layers = 0;
  std::vector<TensorT<S>> mats;  // teacher-major

  // Identity when the dims agree, otherwise scaled Gaussian, so the teacher
  // signal is preserved at step 0.
  static ProjectionSet init(const DistillSpec& spec, std::size_t d_teacher,
                            std::size_t d_student, Rng& rng, double std_dev = 0.02) {
    ProjectionSet p;
    p.num_teachers = spec.num_teachers;
    p.student_layers = spec.student_layers;
    for (std::size_t i = 0; i < spec.num_teachers * spec.student_layers; ++i) {
      if (d_teacher == d_student)
        p.mats.push_back(TensorT<S>::identity(d_teacher));
      else
        p.mats.push_back(TensorT<S>::gaussian({d_teacher, d_student}, rng, std_dev));
    }
    return p;
  }

  TensorT<S>& at(std::size_t teacher, std::size_t student_layer_1based) {
    if (teacher >= num_teachers || student_layer_1based < 1 ||
        student_layer_1based > student_layers)
      throw ContractError("ProjectionSet::at: index out of range");
    return mats[teacher * student_layers + (student_layer_1based - 1)];
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < num_teachers; ++i)
      for (std::size_t j = 1; j <= student_layers; ++j)
        f(prefix + ".w_" + std::to_string(i) + "_" + std::to_string(j), at(i, j));
  }

  void collect(std::vector<TensorT<S>*>& out) {
    for (auto& m : mats) out.push_back(&m);
  }
  void set_requires_grad(bool rg) {
    for (auto& m : mats) m.set_requires_grad(rg);
  }
};

// N teachers with one shared pooling/prediction module. The no-cofinetune
// ablation swaps in per-teacher private poolers and heads instead.
template <typename S>
struct TeacherBundle {
  std::vector<EncoderParams<S>> teachers;
  AttentivePooler<S> pooler;
  ClassifierHead<S> head;
  bool shared = true;
  std::vector<AttentivePooler<S>> private_poolers;
  std::vector<ClassifierHead<S>> private_heads;

  AttentivePooler<S>& pooler_for(std::size_t i) {
    return shared ? pooler : private_poolers.at(i);
  }
  ClassifierHead<S>& head_for(std::size_t i) {
    return shared ? head : private_heads.at(i);
  }

  void collect(std::vector<TensorT<S>*>& out) {
    for (auto& t : teachers) t.collect(out);
    if (shared) {
      pooler.collect(out);
      head.collect(out);
    } else {
      for (auto& p : private_poolers) p.collect(out);
      for (auto& h : private_heads) h.collect(out);
    }
  }

  void set_requires_grad(bool rg) {
    for (auto& t : teachers) t.set_requires_grad(rg);
    pooler.set_requires_grad(rg);
    head.set_requires_grad(rg);
    for (auto& p : private_poolers) p.set_requires_grad(rg);
    for (auto& h : private_heads) h.set_requires_grad(rg);
  }
};

// Frozen per-example teacher signals used during distillation: hidden states
// at the mapped layers plus classification logits.
template <typename S>
struct TeacherOutput {
  std::vector<TensorT<S>> mapped_hidden;  // K matrices, L×d_teacher
  std::vector<S> logits;                  // C
};

// Per-example soft-label bookkeeping: teacher and student distributions plus
// the logits they came from. validate() guards the probability simplex.
template <typename S>
struct SoftLabelSet {
  std::vector<std::vector<S>> teacher_probs;
  std::vector<std::vector<S>> teacher_logits;
  std::vector<S> gold_onehot;
  std::vector<S> student_probs;
  std::vector<S> student_logits;

  void validate() const {
    const std::size_t c = gold_onehot.size();
    auto check = [&](const std::vector<S>& p, const char* what) {
      if (p.size() != c) throw DimensionError(std::string("SoftLabelSet: ") + what +
                                              " has wrong class count");
      double sum = 0.0;
      for (S v : p) sum += static_cast<double>(v);
      if (std::abs(sum - 1.0) > 1e-6)
        throw ContractError(std::string("SoftLabelSet: ") + what + " does not sum to 1");
    };
    check(gold_onehot, "gold");
    check(student_probs, "student probs");
    if (student_logits.size() != c)
      throw DimensionError("SoftLabelSet: student logits have wrong class count");
    if (teacher_probs.size() != teacher_logits.size())
      throw ContractError("SoftLabelSet: teacher probs/logits count mismatch");
    for (const auto& p : teacher_probs) check(p, "teacher probs");
    for (const auto& z : teacher_logits)
      if (z.size() != c) throw DimensionError("SoftLabelSet: teacher logits wrong length");
  }
};

// ---- multi-teacher hidden loss ----

// Sum over teachers and mapped layers of masked MSE between the student
// hidden states and the projected teacher hidden states. Teacher states are
// constants; gradients reach the student and the projections only.
template <typename S>
Var<S> mt_hidden_loss(Tape<S>& tape, const LayerStack<S>& student,
                      const std::vector<TeacherOutput<S>>& teachers,
                      ProjectionSet<S>& proj, const DistillSpec& spec,
                      const std::vector<std::size_t>& active_teachers) {
  if (student.num_layers() != spec.student_layers)
    throw ContractError("mt_hidden_loss: student has " + std::to_string(student.num_layers()) +
                        " layers, spec says " + std::to_string(spec.student_layers));
  const std::size_t upper = spec.hidden_bound == HiddenBound::StudentLayers
                                ? spec.student_layers
                                : std::min(spec.layer_ratio, spec.student_layers);
  std::vector<Var<S>> terms;
  for (std::size_t i : active_teachers) {
    const auto& tout = teachers.at(i);
    if (tout.mapped_hidden.size() != spec.student_layers)
      throw ContractError("mt_hidden_loss: teacher output layer count mismatch");
    for (std::size_t j = 1; j <= upper; ++j) {
      auto projected = tape.matmul(tape.constant(tout.mapped_hidden[j - 1]),
                                   tape.param(proj.at(i, j)));
      terms.push_back(tape.mse_masked(student.hidden[j], projected, student.mask));
    }
  }
  if (terms.empty()) throw ContractError("mt_hidden_loss: no active teachers");
  return tape.add_scalars(terms);
}

// ---- loss-weighted multi-teacher distillation ----

inline double cross_entropy_value(const std::vector<double>& target,
                                  const std::vector<double>& pred) {
  if (target.size() != pred.size())
    throw DimensionError("cross_entropy_value: length mismatch");
  double ce = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] != 0.0) ce -= target[i] * std::log(std::max(pred[i], 1e-12));
  return ce;
}

inline std::vector<double> softmax_values(const std::vector<double>& logits, double temp) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temp);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

// 1 / (1 + CE(gold, teacher probs)); in (0, 1], strictly decreasing in CE.
inline double teacher_weight(const std::vector<double>& gold_onehot,
                             const std::vector<double>& teacher_probs) {
  return 1.0 / (1.0 + cross_entropy_value(gold_onehot, teacher_probs));
}

// Per-example distillation loss. Weights come from un-tempered teacher
// probabilities and are constants (no gradient path through them).
template <typename S>
Var<S> mt_distill_loss(Tape<S>& tape, const std::vector<std::vector<S>>& teacher_logits,
                       Var<S> student_logits, const std::vector<S>& gold_onehot,
                       const DistillSpec& spec,
                       const std::vector<std::size_t>& active_teachers) {
  if (active_teachers.empty()) throw ContractError("mt_distill_loss: empty teacher list");
  const double t = spec.temperature;
  auto student_probs = tape.softmax_rows(student_logits, t);

  auto as_double = [](const std::vector<S>& v) {
    return std::vector<double>(v.begin(), v.end());
  };

  if (spec.weighting == WeightingMode::EnsembleAverage) {
    const std::size_t c = gold_onehot.size();
    std::vector<S> target(c, S(0));
    for (std::size_t i : active_teachers) {
      auto p = softmax_values(as_double(teacher_logits.at(i)), t);
      for (std::size_t k = 0; k < c; ++k)
        target[k] += static_cast<S>(p[k] / static_cast<double>(active_teachers.size()));
    }
    return tape.cross_entropy(target, student_probs);
  }

  std::vector<Var<S>> terms;
  std::vector<double> weights;
  for (std::size_t i : active_teachers) {
    if (spec.weighting == WeightingMode::Single && i != spec.single_index) continue;
    const auto logits = as_double(teacher_logits.at(i));
    auto tempered = softmax_values(logits, t);
    std::vector<S> target(tempered.begin(), tempered.end());
    terms.push_back(tape.cross_entropy(target, student_probs));
    if (spec.weighting == WeightingMode::LossWeighted)
      weights.push_back(teacher_weight(as_double(gold_onehot), softmax_values(logits, 1.0)));
    else
      weights.push_back(1.0);
  }
  if (terms.empty()) throw ContractError("mt_distill_loss: single teacher index not active");
  return tape.weighted_sum(terms, weights);
}

// ---- task loss and total ----

template <typename S>
Var<S> task_loss(Tape<S>& tape, const std::vector<S>& gold_onehot, Var<S> student_probs) {
  return tape.cross_entropy(gold_onehot, student_probs);
}

template <typename S>
Var<S> total_loss(Tape<S>& tape, const DistillSpec& spec, Var<S>* hidden, Var<S>* distill,
                  Var<S>* task) {
  std::vector<Var<S>> parts;
  if (spec.use_hidden) {
    if (!hidden) throw ContractError("total_loss: hidden term enabled but missing");
    parts.push_back(*hidden);
  }
  if (spec.use_distill) {
    if (!distill) throw ContractError("total_loss: distill term enabled but missing");
    parts.push_back(*distill);
  }
  if (spec.use_task) {
    if (!task) throw ContractError("total_loss: task term enabled but missing");
    parts.push_back(*task);
  }
  if (parts.empty()) throw ContractError("total_loss: all loss terms disabled");
  return tape.add_scalars(parts);
}

// ---- co-finetuning ----

// Jointly optimizes the sum of the per-teacher task losses through the
// shared pooling/prediction module. Returns the batch-mean loss.
template <typename S>
double cofinetune_step(TeacherBundle<S>& bundle, const Batch& batch, AdamOpt<S>& opt,
                       const std::vector<std::size_t>& active_teachers,
                       bool train = true, Rng* rng = nullptr) {
  if (active_teachers.empty()) throw ContractError("cofinetune_step: no active teachers");
  Tape<S> tape;
  std::vector<Var<S>> example_losses;
  for (std::size_t e = 0; e < batch.size; ++e) {
    const auto ids = batch.row_ids(e);
    const auto mask = batch.row_mask(e);
    const auto gold = batch.onehot<S>(e);
    std::vector<Var<S>> teacher_losses;
    for (std::size_t i : active_teachers) {
      auto stack = encode(tape, bundle.teachers.at(i), ids, mask, train, rng);
      auto pooled = attentive_pool(tape, stack.top(), bundle.pooler_for(i), mask);
      auto out = classify(tape, pooled, bundle.head_for(i), 1.0);
      teacher_losses.push_back(tape.cross_entropy(gold, out.probs));
    }
    example_losses.push_back(tape.add_scalars(teacher_losses));
  }
  auto loss = tape.scale(tape.add_scalars(example_losses), 1.0 / static_cast<double>(batch.size));
  const double value = static_cast<double>(tape.val(loss)[0]);
  if (train) {
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  return value;
}

// ---- student initialization ----

template <typename S>
EncoderParams<S> init_student(const EncoderParams<S>& teacher, std::size_t k,
                              StudentInitScheme scheme = StudentInitScheme::FirstK) {
  if (k < 1 || k > teacher.cfg.num_layers)
    throw ContractError("init_student: K " + std::to_string(k) + " exceeds teacher depth " +
                        std::to_string(teacher.cfg.num_layers));
  EncoderParams<S> student;
  student.cfg = teacher.cfg;
  student.cfg.num_layers = k;
  student.tok_emb = teacher.tok_emb;
  student.pos_emb = teacher.pos_emb;
  student.tok_emb.set_requires_grad(false);
  student.pos_emb.set_requires_grad(false);
  const std::size_t depth = teacher.cfg.num_layers;
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t src = j;
    switch (scheme) {
      case StudentInitScheme::FirstK: src = j; break;
      case StudentInitScheme::LastK: src = depth - k + j; break;
      case StudentInitScheme::Skip: src = j * depth / k; break;
    }
    student.layers.push_back(teacher.layers[src]);
  }
  student.set_requires_grad(false);
  return student;
}

// ---- frozen-teacher signal cache ----

template <typename S>
std::vector<TeacherOutput<S>> compute_teacher_outputs(TeacherBundle<S>& bundle,
                                                      const DistillSpec& spec,
                                                      const std::vector<std::size_t>& ids,
                                                      const std::vector<std::uint8_t>& mask) {
  std::vector<TeacherOutput<S>> out;
  for (std::size_t i = 0; i < bundle.teachers.size(); ++i) {
    Tape<S> tape;
    auto stack = encode(tape, bundle.teachers[i], ids, mask, false, nullptr);
    if (stack.num_layers() != spec.teacher_layers())
      throw ContractError("compute_teacher_outputs: teacher depth != T*K");
    TeacherOutput<S> t;
    for (std::size_t j = 1; j <= spec.student_layers; ++j) {
      const std::size_t tl = map_layer(j, spec.layer_ratio, spec.student_layers);
      auto h = stack.hidden[tl];
      t.mapped_hidden.emplace_back(h.shape(), tape.val(h));
    }
    auto pooled = attentive_pool(tape, stack.top(), bundle.pooler_for(i), mask);
    auto res = classify(tape, pooled, bundle.head_for(i), 1.0);
    t.logits = tape.val(res.logits);
    out.push_back(std::move(t));
  }
  return out;
}

// ---- distillation step ----

struct LossParts {
  double hidden = 0.0;
  double distill = 0.0;
  double task = 0.0;
  double total = 0.0;
};

// One optimizer step of the student (+pooler/head/projections) on a batch.
// teacher_outputs[e] carries the frozen signals for batch example e.
template <typename S>
LossParts distill_step(EncoderParams<S>& student, AttentivePooler<S>& pooler,
                       ClassifierHead<S>& head, ProjectionSet<S>& proj,
                       const std::vector<std::vector<TeacherOutput<S>>>& teacher_outputs,
                       const Batch& batch, const DistillSpec& spec,
                       const std::vector<std::size_t>& active_teachers, AdamOpt<S>& opt,
                       bool train = true, Rng* rng = nullptr) {
  spec.validate();
  if (!spec.use_hidden && !spec.use_distill && !spec.use_task)
    throw ContractError("distill_step: all loss terms disabled");
  Tape<S> tape;
  std::vector<Var<S>> hidden_terms, distill_terms, task_terms;
  for (std::size_t e = 0; e < batch.size; ++e) {
    const auto ids = batch.row_ids(e);
    const auto mask = batch.row_mask(e);
    const auto gold = batch.onehot<S>(e);
    auto stack = encode(tape, student, ids, mask, train, rng);
    if (spec.use_hidden)
      hidden_terms.push_back(
          mt_hidden_loss(tape, stack, teacher_outputs.at(e), proj, spec, active_teachers));
    if (spec.use_distill || spec.use_task) {
      auto pooled = attentive_pool(tape, stack.top(), pooler, mask);
      auto out = classify(tape, pooled, head, 1.0);
      if (spec.use_distill) {
        std::vector<std::vector<S>> tlogits;
        for (const auto& t : teacher_outputs.at(e)) tlogits.push_back(t.logits);
        distill_terms.push_back(
            mt_distill_loss(tape, tlogits, out.logits, gold, spec, active_teachers));
      }
      if (spec.use_task) task_terms.push_back(task_loss(tape, gold, out.probs));
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size);
  LossParts parts;
  Var<S> hidden{}, distill{}, task{};
  Var<S>*hp = nullptr, *dp = nullptr, *tp = nullptr;
  if (spec.use_hidden) {
    hidden = tape.scale(tape.add_scalars(hidden_terms), inv);
    parts.hidden = static_cast<double>(tape.val(hidden)[0]);
    hp = &hidden;
  }
  if (spec.use_distill) {
    distill = tape.scale(tape.add_scalars(distill_terms), inv);
    parts.distill = static_cast<double>(tape.val(distill)[0]);
    dp = &distill;
  }
  if (spec.use_task) {
    task = tape.scale(tape.add_scalars(task_terms), inv);
    parts.task = static_cast<double>(tape.val(task)[0]);
    tp = &task;
  }
  auto loss = total_loss(tape, spec, hp, dp, tp);
  parts.total = static_cast<double>(tape.val(loss)[0]);
  if (train) {
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  return parts;
}

}  // namespace mtkd
