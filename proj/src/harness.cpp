#include "mtkd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>

#include "mtkd/errors.hpp"

namespace mtkd {

namespace {

using TapeF = Tape<float>;
using VarF = Var<float>;

void check_finite(double v, const std::string& phase) {
  if (!std::isfinite(v)) throw NumericError(phase + ": loss is not finite");
}

void pad_example(const Example& ex, std::size_t max_len, std::vector<std::size_t>& ids,
                 std::vector<std::uint8_t>& mask) {
  ids.assign(max_len, kPadId);
  mask.assign(max_len, 0);
  const std::size_t n = std::min(ex.ids.size(), max_len);
  for (std::size_t j = 0; j < n; ++j) {
    ids[j] = ex.ids[j];
    mask[j] = 1;
  }
}

// One optimizer step over a chunk of examples, summing per-teacher CE losses.
// Labels may differ per teacher (the label-noise experiments) and each
// teacher gets its own token-dropout stream.
double joint_step(TeacherBundle<float>& bundle, const Dataset& data,
                  const std::vector<std::size_t>& chunk,
                  const std::vector<std::vector<int>>& labels,
                  const std::vector<std::size_t>& active, std::size_t max_len,
                  std::size_t num_classes, double token_drop, std::vector<Rng>& drop_rngs,
                  AdamOpt<float>& opt, Rng& enc_rng) {
  TapeF tape;
  std::vector<VarF> example_losses;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> base_mask;
  for (std::size_t e : chunk) {
    pad_example(data[e], max_len, ids, base_mask);
    std::vector<VarF> teacher_losses;
    for (std::size_t i : active) {
      auto mask = base_mask;
      if (token_drop > 0.0)
        for (std::size_t j = 1; j < max_len; ++j)
          if (mask[j] && drop_rngs[i].uniform() < token_drop) mask[j] = 0;
      auto stack = encode(tape, bundle.teachers[i], ids, mask, true, &enc_rng);
      auto pooled = attentive_pool(tape, stack.top(), bundle.pooler_for(i), mask);
      auto out = classify(tape, pooled, bundle.head_for(i), 1.0);
      std::vector<float> gold(num_classes, 0.0f);
      gold[static_cast<std::size_t>(labels[i][e])] = 1.0f;
      teacher_losses.push_back(tape.cross_entropy(gold, out.probs));
    }
    example_losses.push_back(tape.add_scalars(teacher_losses));
  }
  auto loss = tape.scale(tape.add_scalars(example_losses),
                         1.0 / static_cast<double>(chunk.size()));
  const double value = static_cast<double>(tape.val(loss)[0]);
  opt.zero_grad();
  tape.backward(loss);
  opt.step();
  return value;
}

MetricsReport teacher_report(TeacherBundle<float>& bundle, std::size_t i,
                             const Dataset& data, std::size_t max_len,
                             std::size_t num_classes) {
  std::vector<int> preds, golds;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;
  for (const auto& ex : data) {
    pad_example(ex, max_len, ids, mask);
    TapeF tape;
    auto stack = encode(tape, bundle.teachers[i], ids, mask);
    auto pooled = attentive_pool(tape, stack.top(), bundle.pooler_for(i), mask);
    auto out = classify(tape, pooled, bundle.head_for(i), 1.0);
    const auto& logits = tape.val(out.logits);
    preds.push_back(static_cast<int>(
        std::max_element(logits.begin(), logits.end()) - logits.begin()));
    golds.push_back(ex.label);
  }
  return classification_report(preds, golds, num_classes);
}

// Asymmetric pair noise: affected labels flip to the next class. Uniform
// random flips across many classes merely smooth the teacher; pair noise
// teaches it a systematically wrong mapping, the regime loss weighting is
// meant to defend against.
std::vector<int> noised_labels(const Dataset& data, double rate, std::size_t num_classes,
                               Rng& rng) {
  std::vector<int> out(data.size());
  for (std::size_t e = 0; e < data.size(); ++e) {
    out[e] = data[e].label;
    if (rate > 0.0 && rng.uniform() < rate)
      out[e] = static_cast<int>((static_cast<std::size_t>(out[e]) + 1) % num_classes);
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string markdown_from_rows(
    const std::vector<std::tuple<std::string, double, double>>& test_rows) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_variant;
  std::vector<std::string> order;
  for (const auto& [variant, acc, f1] : test_rows) {
    if (!by_variant.count(variant)) order.push_back(variant);
    by_variant[variant].first.push_back(acc);
    by_variant[variant].second.push_back(f1);
  }
  std::ostringstream md;
  md << "| variant | runs | test accuracy | test macro-F1 |\n"
     << "|---|---|---|---|\n";
  for (const auto& v : order) {
    const auto& [accs, f1s] = by_variant[v];
    const auto [am, as] = mean_std(accs);
    const auto [fm, fs] = mean_std(f1s);
    md << "| " << v << " | " << accs.size() << " | " << fmt(am) << " ± " << fmt(as)
       << " | " << fmt(fm) << " ± " << fmt(fs) << " |\n";
  }
  return md.str();
}

}  // namespace

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double x : xs) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(xs.size() - 1))};
}

VariantSpec resolve_variant(const RunConfig& cfg, const std::string& name) {
  VariantSpec v;
  v.name = name;
  v.cofinetune = cfg.cofinetune;
  v.distill = cfg.distill;
  for (std::size_t i = 0; i < cfg.distill.num_teachers; ++i) v.active.push_back(i);

  if (name == "full") return v;
  if (name == "no-cofinetune") {
    v.cofinetune = false;
    return v;
  }
  if (name == "uniform") {
    v.distill.weighting = WeightingMode::Uniform;
    return v;
  }
  if (name == "ensemble") {
    v.distill.weighting = WeightingMode::EnsembleAverage;
    return v;
  }
  if (name == "no-hidden") {
    v.distill.use_hidden = false;
    return v;
  }
  if (name == "no-distill") {
    v.distill.use_distill = false;
    return v;
  }
  if (name == "no-task") {
    v.distill.use_task = false;
    return v;
  }
  if (name.rfind("single:", 0) == 0) {
    std::size_t idx;
    try {
      idx = std::stoul(name.substr(7));
    } catch (...) {
      throw ConfigError("variant: bad teacher index in '" + name + "'");
    }
    if (idx >= cfg.distill.num_teachers)
      throw ConfigError("variant: teacher index out of range in '" + name + "'");
    v.distill.weighting = WeightingMode::Single;
    v.distill.single_index = idx;
    v.active = {idx};
    return v;
  }
  if (name.rfind("teachers:", 0) == 0) {
    v.active.clear();
    std::istringstream list(name.substr(9));
    std::string tok;
    while (std::getline(list, tok, ',')) {
      std::size_t idx;
      try {
        idx = std::stoul(tok);
      } catch (...) {
        throw ConfigError("variant: bad teacher index in '" + name + "'");
      }
      if (idx >= cfg.distill.num_teachers)
        throw ConfigError("variant: teacher index out of range in '" + name + "'");
      v.active.push_back(idx);
    }
    std::sort(v.active.begin(), v.active.end());
    v.active.erase(std::unique(v.active.begin(), v.active.end()), v.active.end());
    if (v.active.empty()) throw ConfigError("variant: empty teacher list in '" + name + "'");
    if (v.active.size() == 1) {
      v.distill.weighting = WeightingMode::Single;
      v.distill.single_index = v.active[0];
    }
    return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

std::vector<std::string> teacher_combos(std::size_t n) {
  std::vector<std::uint64_t> masks;
  for (std::uint64_t m = 1; m < (1ULL << n); ++m) masks.push_back(m);
  std::sort(masks.begin(), masks.end(), [](std::uint64_t a, std::uint64_t b) {
    const int pa = __builtin_popcountll(a), pb = __builtin_popcountll(b);
    return pa != pb ? pa < pb : a < b;
  });
  std::vector<std::string> out;
  for (std::uint64_t m : masks) {
    std::string name = "teachers:";
    bool first = true;
    for (std::size_t i = 0; i < n; ++i)
      if (m & (1ULL << i)) {
        if (!first) name += ',';
        name += std::to_string(i);
        first = false;
      }
    out.push_back(name);
  }
  return out;
}

std::vector<std::string> ablation_variants(std::size_t n) {
  std::vector<std::string> out{"full",      "no-cofinetune", "uniform", "ensemble",
                               "no-hidden", "no-distill",    "no-task"};
  for (auto& c : teacher_combos(n)) out.push_back(c);
  return out;
}

EvalResult evaluate_model(EncoderParams<float>& enc, AttentivePooler<float>& pooler,
                          ClassifierHead<float>& head, const Dataset& data,
                          std::size_t max_len, std::size_t num_classes) {
  std::vector<int> preds, golds;
  double loss = 0.0;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;
  for (const auto& ex : data) {
    pad_example(ex, max_len, ids, mask);
    TapeF tape;
    auto stack = encode(tape, enc, ids, mask);
    auto pooled = attentive_pool(tape, stack.top(), pooler, mask);
    auto out = classify(tape, pooled, head, 1.0);
    const auto& logits = tape.val(out.logits);
    const auto& probs = tape.val(out.probs);
    preds.push_back(static_cast<int>(
        std::max_element(logits.begin(), logits.end()) - logits.begin()));
    golds.push_back(ex.label);
    loss -= std::log(std::max(static_cast<double>(probs[static_cast<std::size_t>(ex.label)]),
                              1e-12));
  }
  EvalResult r;
  r.report = classification_report(preds, golds, num_classes);
  r.loss = loss / static_cast<double>(data.size());
  return r;
}

Workbench::Workbench(RunConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

const SplitDatasets& Workbench::data(std::uint64_t seed) {
  auto it = data_cache_.find(seed);
  if (it == data_cache_.end()) {
    TaskSpec spec = cfg_.task;
    spec.seed = seed;
    it = data_cache_.emplace(seed, gen_synthetic(spec)).first;
  }
  return it->second;
}

TeacherBundle<float>& Workbench::teachers(std::uint64_t seed, bool shared) {
  const auto key = std::make_pair(seed, shared);
  auto it = teacher_cache_.find(key);
  if (it == teacher_cache_.end())
    it = teacher_cache_.emplace(key, train_teachers(seed, shared)).first;
  return it->second;
}

TeacherBundle<float> Workbench::train_teachers(std::uint64_t seed, bool shared) {
  const auto& splits = data(seed);
  const std::size_t N = cfg_.distill.num_teachers;
  const std::size_t C = cfg_.task.num_classes;
  const std::size_t L = cfg_.task.max_seq_len;

  Rng root(seed * 0x9e3779b97f4a7c15ULL + 0xc0f1);
  TeacherBundle<float> bundle;
  bundle.shared = shared;
  for (std::size_t i = 0; i < N; ++i) {
    Rng trng(root.next_u64());  // per-teacher init seed (diversity source 1)
    bundle.teachers.push_back(EncoderParams<float>::init(cfg_.teacher, trng));
  }
  Rng hrng(root.next_u64());
  bundle.pooler = AttentivePooler<float>::init(cfg_.teacher.hidden_dim, cfg_.pool_query_dim, hrng);
  bundle.head = ClassifierHead<float>::init(cfg_.teacher.hidden_dim, C, hrng);
  if (!shared)
    for (std::size_t i = 0; i < N; ++i) {
      bundle.private_poolers.push_back(
          AttentivePooler<float>::init(cfg_.teacher.hidden_dim, cfg_.pool_query_dim, hrng));
      bundle.private_heads.push_back(
          ClassifierHead<float>::init(cfg_.teacher.hidden_dim, C, hrng));
    }

  // Per-teacher label views; the designated low-quality teacher sees noised
  // labels in every teacher-training phase.
  std::vector<std::vector<int>> labels(N);
  for (std::size_t i = 0; i < N; ++i) {
    Rng nrng(seed * 0xb5297a4dULL + i);
    const double rate =
        static_cast<long>(i) == cfg_.noisy_teacher ? cfg_.noisy_teacher_rate : 0.0;
    labels[i] = noised_labels(splits.train, rate, C, nrng);
  }

  // Distinct random shards (diversity source 2) + token dropout streams
  // (diversity source 3).
  std::vector<std::vector<std::size_t>> shards(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<std::size_t> idx(splits.train.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    Rng srng(seed * 0x2545f491ULL + 7 * i + 1);
    srng.shuffle(idx);
    const auto keep = static_cast<std::size_t>(
        std::max(1.0, cfg_.teacher_shard_fraction * static_cast<double>(idx.size())));
    idx.resize(keep);
    shards[i] = std::move(idx);
  }
  std::vector<Rng> drop_rngs;
  for (std::size_t i = 0; i < N; ++i) drop_rngs.emplace_back(seed * 0x94d049bbULL + i);

  const AdamConfig tcfg{cfg_.teacher_lr, 0.9, 0.999, 1e-8};

  // Phase 1: diversified per-teacher training on its shard with a throwaway
  // pooler/head (the desk-scale stand-in for heterogeneous pretraining).
  for (std::size_t i = 0; i < N; ++i) {
    Rng prng(seed * 0x8cb92ba7ULL + i);
    // Temporary 1-teacher bundle; teacher i's encoder is moved in for the
    // phase and moved back afterwards.
    TeacherBundle<float> solo;
    solo.shared = true;
    solo.teachers.push_back(std::move(bundle.teachers[i]));
    solo.pooler = AttentivePooler<float>::init(cfg_.teacher.hidden_dim, cfg_.pool_query_dim, prng);
    solo.head = ClassifierHead<float>::init(cfg_.teacher.hidden_dim, C, prng);
    solo.set_requires_grad(true);
    std::vector<Tensor*> params;
    solo.collect(params);
    AdamOpt<float> opt(params, tcfg);
    std::vector<std::vector<int>> solo_labels{labels[i]};
    Rng order(seed * 0xd1342543ULL + i);
    Rng enc_rng(seed * 0x63d1ab5dULL + i);
    std::vector<Rng> solo_drop{Rng(drop_rngs[i].next_u64())};
    for (std::size_t ep = 0; ep < cfg_.pretrain_epochs; ++ep) {
      auto idx = shards[i];
      order.shuffle(idx);
      for (std::size_t start = 0; start < idx.size(); start += cfg_.batch_size) {
        const std::vector<std::size_t> chunk(
            idx.begin() + static_cast<long>(start),
            idx.begin() + static_cast<long>(std::min(start + cfg_.batch_size, idx.size())));
        check_finite(joint_step(solo, splits.train, chunk, solo_labels, {0}, L, C,
                                cfg_.teacher_token_dropout, solo_drop, opt, enc_rng),
                     "train-teachers");
      }
    }
    bundle.teachers[i] = std::move(solo.teachers[0]);
    bundle.teachers[i].set_requires_grad(false);
  }

  // Phase 2: joint co-finetuning with the shared pooler/head — or, for the
  // no-cofinetune ablation, the same budget spent per teacher privately.
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < N; ++i) all.push_back(i);
  Rng order(seed * 0x6c62272eULL + 11);
  Rng enc_rng(seed * 0x27d4eb2fULL + 13);
  if (shared) {
    bundle.set_requires_grad(true);
    std::vector<Tensor*> params;
    bundle.collect(params);
    AdamOpt<float> opt(params, tcfg);
    double best = -1.0;
    std::size_t since = 0;
    for (std::size_t ep = 0; ep < cfg_.cofinetune_epochs; ++ep) {
      std::vector<std::size_t> idx(splits.train.size());
      for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
      order.shuffle(idx);
      for (std::size_t start = 0; start < idx.size(); start += cfg_.batch_size) {
        const std::vector<std::size_t> chunk(
            idx.begin() + static_cast<long>(start),
            idx.begin() + static_cast<long>(std::min(start + cfg_.batch_size, idx.size())));
        check_finite(joint_step(bundle, splits.train, chunk, labels, all, L, C,
                                cfg_.teacher_token_dropout, drop_rngs, opt, enc_rng),
                     "cofinetune");
      }
      double mean_acc = 0.0;
      for (std::size_t i = 0; i < N; ++i)
        mean_acc += teacher_report(bundle, i, splits.dev, L, C).accuracy;
      mean_acc /= static_cast<double>(N);
      if (mean_acc > best + 1e-9) {
        best = mean_acc;
        since = 0;
      } else if (++since >= cfg_.patience) {
        break;
      }
    }
  } else {
    for (std::size_t i = 0; i < N; ++i) {
      bundle.teachers[i].set_requires_grad(true);
      bundle.private_poolers[i].set_requires_grad(true);
      bundle.private_heads[i].set_requires_grad(true);
      std::vector<Tensor*> params;
      bundle.teachers[i].collect(params);
      bundle.private_poolers[i].collect(params);
      bundle.private_heads[i].collect(params);
      AdamOpt<float> opt(params, tcfg);
      double best = -1.0;
      std::size_t since = 0;
      for (std::size_t ep = 0; ep < cfg_.cofinetune_epochs; ++ep) {
        std::vector<std::size_t> idx(splits.train.size());
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
        order.shuffle(idx);
        for (std::size_t start = 0; start < idx.size(); start += cfg_.batch_size) {
          const std::vector<std::size_t> chunk(
              idx.begin() + static_cast<long>(start),
              idx.begin() + static_cast<long>(std::min(start + cfg_.batch_size, idx.size())));
          check_finite(joint_step(bundle, splits.train, chunk, labels, {i}, L, C,
                                  cfg_.teacher_token_dropout, drop_rngs, opt, enc_rng),
                       "train-teachers");
        }
        const double acc = teacher_report(bundle, i, splits.dev, L, C).accuracy;
        if (acc > best + 1e-9) {
          best = acc;
          since = 0;
        } else if (++since >= cfg_.patience) {
          break;
        }
      }
    }
  }
  bundle.set_requires_grad(false);
  return bundle;
}

std::vector<double> Workbench::teacher_dev_accuracy(std::uint64_t seed, bool shared) {
  auto& bundle = teachers(seed, shared);
  const auto& splits = data(seed);
  std::vector<double> out;
  for (std::size_t i = 0; i < bundle.teachers.size(); ++i)
    out.push_back(teacher_report(bundle, i, splits.dev, cfg_.task.max_seq_len,
                                 cfg_.task.num_classes)
                      .accuracy);
  return out;
}

RunRecord Workbench::run_single(const std::string& variant, std::uint64_t seed,
                                NamedTensors* student_out) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.variant = variant;
  rec.seed = seed;
  rec.run_id = variant + "-s" + std::to_string(seed);
  rec.config_digest = config_hash(cfg_);
  std::string phase = "setup";
  try {
    VariantSpec var = resolve_variant(cfg_, variant);
    var.distill.validate();
    if (!var.distill.use_hidden && !var.distill.use_distill && !var.distill.use_task)
      throw ConfigError("variant disables every loss term");

    phase = "gen-data";
    const auto& splits = data(seed);
    rec.data_hash = dataset_hash(splits);

    phase = "train-teachers";
    auto& bundle = teachers(seed, var.cofinetune);

    phase = "teacher-outputs";
    const std::size_t L = cfg_.task.max_seq_len;
    const std::size_t C = cfg_.task.num_classes;
    // The student distills on a leading fraction of train; the teachers were
    // trained on all of it, so they can carry knowledge the student's gold
    // labels alone do not.
    const std::size_t n_distill = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg_.distill_fraction *
                                    static_cast<double>(splits.train.size()) + 0.5));
    const Dataset dtrain(splits.train.begin(),
                         splits.train.begin() + static_cast<long>(
                             std::min(n_distill, splits.train.size())));
    std::vector<std::vector<TeacherOutput<float>>> touts(dtrain.size());
    {
      std::vector<std::size_t> ids;
      std::vector<std::uint8_t> mask;
      for (std::size_t e = 0; e < dtrain.size(); ++e) {
        pad_example(dtrain[e], L, ids, mask);
        touts[e] = compute_teacher_outputs(bundle, var.distill, ids, mask);
      }
    }

    phase = "distill";
    const std::size_t d = cfg_.teacher.hidden_dim;
    auto student = init_student(bundle.teachers[var.active[0]], var.distill.student_layers,
                                var.distill.student_init);
    Rng srng(seed * 0xa0761d64ULL + 0x5d1);
    auto pooler = AttentivePooler<float>::init(d, cfg_.pool_query_dim, srng);
    auto head = ClassifierHead<float>::init(d, C, srng);
    auto proj = ProjectionSet<float>::init(var.distill, d, d, srng);

    std::vector<Tensor*> params;
    student.collect(params);
    pooler.collect(params);
    head.collect(params);
    proj.collect(params);
    for (auto* p : params) p->set_requires_grad(true);
    AdamOpt<float> opt(params, {cfg_.student_lr, 0.9, 0.999, 1e-8});

    Rng order(seed * 0xe7037ed1ULL + 0xa7);
    Rng enc_rng(seed * 0x8ebc6af0ULL + 0x9e);
    double best_acc = -1.0;
    std::size_t since = 0;
    std::vector<std::vector<float>> snapshot;
    for (std::size_t ep = 1; ep <= cfg_.distill_epochs; ++ep) {
      std::vector<std::size_t> idx(dtrain.size());
      for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
      order.shuffle(idx);
      LossParts sums;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < idx.size(); start += cfg_.batch_size) {
        const std::size_t end = std::min(start + cfg_.batch_size, idx.size());
        Dataset chunk;
        std::vector<std::vector<TeacherOutput<float>>> chunk_touts;
        for (std::size_t k = start; k < end; ++k) {
          chunk.push_back(dtrain[idx[k]]);
          chunk_touts.push_back(touts[idx[k]]);
        }
        Batch batch = dataset_to_batch(chunk, L, C);
        auto parts = distill_step(student, pooler, head, proj, chunk_touts, batch,
                                  var.distill, var.active, opt, true, &enc_rng);
        check_finite(parts.total, "distill");
        sums.hidden += parts.hidden;
        sums.distill += parts.distill;
        sums.task += parts.task;
        sums.total += parts.total;
        ++batches;
      }

      phase = "eval";
      auto dev = evaluate_model(student, pooler, head, splits.dev, L, C);
      EpochRow row;
      row.epoch = ep;
      row.split = "dev";
      row.accuracy = dev.report.accuracy;
      row.macro_f1 = dev.report.macro_f1;
      row.loss_task = dev.loss;
      row.loss_hid = sums.hidden / static_cast<double>(batches);
      row.loss_dis = sums.distill / static_cast<double>(batches);
      rec.rows.push_back(row);

      if (dev.report.accuracy > best_acc + 1e-12) {
        best_acc = dev.report.accuracy;
        rec.best_epoch = ep;
        snapshot.clear();
        for (auto* p : params) snapshot.push_back(p->values);
        since = 0;
      } else if (++since >= cfg_.patience) {
        break;
      }
      phase = "distill";
    }

    phase = "eval";
    if (!snapshot.empty())
      for (std::size_t k = 0; k < params.size(); ++k) params[k]->values = snapshot[k];
    auto test = evaluate_model(student, pooler, head, splits.test, L, C);
    EpochRow trow;
    trow.epoch = rec.best_epoch;
    trow.split = "test";
    trow.accuracy = test.report.accuracy;
    trow.macro_f1 = test.report.macro_f1;
    trow.loss_task = test.loss;
    rec.rows.push_back(trow);
    rec.test_accuracy = test.report.accuracy;
    rec.test_macro_f1 = test.report.macro_f1;
    if (student_out) {
      *student_out = encoder_tensors(student, "student");
      pooler.visit("pooler",
                   [&](const std::string& n, Tensor& t) { student_out->emplace_back(n, t); });
      head.visit("head",
                 [&](const std::string& n, Tensor& t) { student_out->emplace_back(n, t); });
      proj.visit("proj",
                 [&](const std::string& n, Tensor& t) { student_out->emplace_back(n, t); });
    }
  } catch (const NumericError& e) {
    rec.failed = true;
    rec.fail_phase = phase;
  }
  rec.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<RunRecord> Workbench::run_repeats(const std::string& variant) {
  std::vector<RunRecord> out;
  for (std::size_t r = 0; r < cfg_.repeats; ++r)
    out.push_back(run_single(variant, cfg_.master_seed + r));
  return out;
}

std::vector<RunRecord> Workbench::run_ablations() {
  std::vector<RunRecord> out;
  for (const auto& v : ablation_variants(cfg_.distill.num_teachers))
    for (auto& rec : run_repeats(v)) out.push_back(std::move(rec));
  return out;
}

namespace {

std::string csv_rows(const std::vector<RunRecord>& records, bool with_wall_clock) {
  std::ostringstream o;
  o << "run_id,variant,seed,epoch,split,accuracy,macro_f1,loss_task,loss_hid,loss_dis";
  if (with_wall_clock) o << ",wall_clock_s";
  o << '\n';
  for (const auto& rec : records) {
    for (const auto& row : rec.rows) {
      o << rec.run_id << ',' << rec.variant << ',' << rec.seed << ',' << row.epoch << ','
        << row.split << ',' << fmt(row.accuracy) << ',' << fmt(row.macro_f1) << ','
        << fmt(row.loss_task) << ',' << fmt(row.loss_hid) << ',' << fmt(row.loss_dis);
      if (with_wall_clock) o << ',' << fmt(rec.wall_clock_s);
      o << '\n';
    }
    if (rec.failed)
      o << rec.run_id << ',' << rec.variant << ',' << rec.seed << ",0,failed:" << rec.fail_phase
        << ",0,0,0,0,0" << (with_wall_clock ? ",0" : "") << '\n';
  }
  return o.str();
}

}  // namespace

std::string metrics_csv(const std::vector<RunRecord>& records) {
  return csv_rows(records, false);
}

std::string report_csv(const std::vector<RunRecord>& records) {
  return csv_rows(records, true);
}

std::string report_markdown(const std::vector<RunRecord>& records) {
  std::vector<std::tuple<std::string, double, double>> test_rows;
  for (const auto& rec : records)
    if (!rec.failed) test_rows.emplace_back(rec.variant, rec.test_accuracy, rec.test_macro_f1);
  return markdown_from_rows(test_rows);
}

std::string summarize_metrics_csv(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  std::vector<std::tuple<std::string, double, double>> test_rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 10 || cells[4] != "test") continue;
    test_rows.emplace_back(cells[1], std::stod(cells[5]), std::stod(cells[6]));
  }
  return markdown_from_rows(test_rows);
}

void emit_report(const std::vector<RunRecord>& records, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream f(dir + "/" + name);
    if (!f) throw IntegrityError("cannot open " + dir + "/" + name + " for writing");
    f << text;
  };
  write("metrics.csv", metrics_csv(records));
  write("report.csv", report_csv(records));
  write("report.md", report_markdown(records));
}

NamedTensors encoder_tensors(EncoderParams<float>& p, const std::string& prefix) {
  NamedTensors out;
  p.visit(prefix, [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::vector<std::pair<std::string, Tensor*>> encoder_slots(EncoderParams<float>& p,
                                                           const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor*>> out;
  p.visit(prefix, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

NamedTensors bundle_tensors(TeacherBundle<float>& b) {
  NamedTensors out;
  for (auto& [name, slot] : bundle_slots(b)) out.emplace_back(name, *slot);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> bundle_slots(TeacherBundle<float>& b) {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto add = [&](const std::string& prefix, auto& part) {
    part.visit(prefix, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  };
  for (std::size_t i = 0; i < b.teachers.size(); ++i)
    add("teacher" + std::to_string(i), b.teachers[i]);
  if (b.shared) {
    add("pooler", b.pooler);
    add("head", b.head);
  } else {
    for (std::size_t i = 0; i < b.private_poolers.size(); ++i) {
      add("pooler" + std::to_string(i), b.private_poolers[i]);
      add("head" + std::to_string(i), b.private_heads[i]);
    }
  }
  return out;
}

void load_into(std::vector<std::pair<std::string, Tensor*>> targets, const NamedTensors& src) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : src) by_name[name] = &t;
  for (auto& [name, slot] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IntegrityError("checkpoint is missing tensor " + name);
    if (it->second->shape != slot->shape)
      throw IntegrityError("checkpoint tensor " + name + " has the wrong shape");
    slot->values = it->second->values;
  }
}

}  // namespace mtkd
