#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mtkd/gradcheck.hpp"
#include "mtkd/harness.hpp"

using namespace mtkd;

namespace {

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string variant = "full";
};

RunConfig make_config(const CommonOpts& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  apply_env_overrides(cfg);
  if (o.seed_set) cfg.master_seed = o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "run configuration file");
  cmd->add_option("--seed", o.seed, "master seed override")->each([&](const std::string&) {
    o.seed_set = true;
  });
  cmd->add_option("--out", o.out, "output directory override");
  cmd->add_option("--variant", o.variant, "experiment variant name");
}

int cmd_gen_data(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  TaskSpec spec = cfg.task;
  spec.seed = cfg.master_seed;
  auto splits = gen_synthetic(spec);
  std::filesystem::create_directories(cfg.out_dir);
  save_dataset(cfg.out_dir + "/train.tsv", splits.train);
  save_dataset(cfg.out_dir + "/dev.tsv", splits.dev);
  save_dataset(cfg.out_dir + "/test.tsv", splits.test);
  save_manifest(cfg.out_dir + "/manifest.txt", spec);
  std::printf("wrote %zu/%zu/%zu examples to %s (hash %016llx)\n", splits.train.size(),
              splits.dev.size(), splits.test.size(), cfg.out_dir.c_str(),
              static_cast<unsigned long long>(dataset_hash(splits)));
  return 0;
}

int cmd_train_teachers(const CommonOpts& o, bool force_shared) {
  RunConfig cfg = make_config(o);
  Workbench wb(cfg);
  const bool shared = force_shared || cfg.cofinetune;
  auto& bundle = wb.teachers(cfg.master_seed, shared);
  std::filesystem::create_directories(cfg.out_dir);
  save_checkpoint(cfg.out_dir + "/teachers.ckpt", bundle_tensors(bundle));
  auto accs = wb.teacher_dev_accuracy(cfg.master_seed, shared);
  for (std::size_t i = 0; i < accs.size(); ++i)
    std::printf("teacher %zu dev accuracy %.4f\n", i, accs[i]);
  std::printf("saved %s/teachers.ckpt\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_distill(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  Workbench wb(cfg);
  NamedTensors student;
  RunRecord rec = wb.run_single(o.variant, cfg.master_seed, &student);
  emit_report({rec}, cfg.out_dir);
  if (rec.failed) {
    std::fprintf(stderr, "run diverged during %s\n", rec.fail_phase.c_str());
    return 3;
  }
  save_checkpoint(cfg.out_dir + "/student.ckpt", student);
  std::printf("%s: test accuracy %.4f macro-F1 %.4f (best epoch %zu)\n", rec.run_id.c_str(),
              rec.test_accuracy, rec.test_macro_f1, rec.best_epoch);
  return 0;
}

int cmd_eval(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  auto ckpt = load_checkpoint(cfg.out_dir + "/student.ckpt");
  Rng rng(0);
  auto student = EncoderParams<float>::init(cfg.student_config(), rng);
  auto pooler = AttentivePooler<float>::init(cfg.teacher.hidden_dim, cfg.pool_query_dim, rng);
  auto head = ClassifierHead<float>::init(cfg.teacher.hidden_dim, cfg.task.num_classes, rng);
  std::vector<std::pair<std::string, Tensor*>> slots = encoder_slots(student, "student");
  pooler.visit("pooler", [&](const std::string& n, Tensor& t) { slots.emplace_back(n, &t); });
  head.visit("head", [&](const std::string& n, Tensor& t) { slots.emplace_back(n, &t); });
  load_into(slots, ckpt);

  TaskSpec spec = cfg.task;
  spec.seed = cfg.master_seed;
  auto splits = gen_synthetic(spec);
  auto res = evaluate_model(student, pooler, head, splits.test, cfg.task.max_seq_len,
                            cfg.task.num_classes);
  std::printf("test accuracy %.4f macro-F1 %.4f loss %.4f\n", res.report.accuracy,
              res.report.macro_f1, res.loss);
  return 0;
}

int cmd_ablate(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  Workbench wb(cfg);
  auto records = wb.run_ablations();
  emit_report(records, cfg.out_dir);
  std::printf("%s", report_markdown(records).c_str());
  for (const auto& r : records)
    if (r.failed) {
      std::fprintf(stderr, "%s diverged during %s\n", r.run_id.c_str(), r.fail_phase.c_str());
      return 3;
    }
  return 0;
}

int cmd_report(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  std::ifstream f(cfg.out_dir + "/metrics.csv");
  if (!f) throw ConfigError("no metrics.csv in " + cfg.out_dir + "; run distill/ablate first");
  std::stringstream buf;
  buf << f.rdbuf();
  const std::string md = summarize_metrics_csv(buf.str());
  std::ofstream out(cfg.out_dir + "/report.md");
  out << md;
  std::printf("%s", md.c_str());
  return 0;
}

// Finite-difference audit of the full objective on a d=8 toy model, 64-bit.
int cmd_gradcheck(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  (void)cfg;
  Rng rng(o.seed_set ? o.seed : 12);
  EncoderConfig ecfg;
  ecfg.vocab_size = 20;
  ecfg.max_seq_len = 6;
  ecfg.hidden_dim = 8;
  ecfg.num_heads = 2;
  ecfg.ffn_dim = 16;
  ecfg.num_layers = 4;
  ecfg.dropout = 0.0;
  DistillSpec spec;
  spec.num_teachers = 2;
  spec.student_layers = 2;
  spec.layer_ratio = 2;

  TeacherBundle<double> bundle;
  for (std::size_t i = 0; i < 2; ++i)
    bundle.teachers.push_back(EncoderParams<double>::init(ecfg, rng));
  bundle.pooler = AttentivePooler<double>::init(8, 4, rng);
  bundle.head = ClassifierHead<double>::init(8, 3, rng);

  Batch batch;
  batch.size = 2;
  batch.len = 5;
  batch.num_classes = 3;
  batch.ids = {kClsId, 7, 12, 3, kPadId, kClsId, 4, 9, kPadId, kPadId};
  batch.mask = {1, 1, 1, 1, 0, 1, 1, 1, 0, 0};
  batch.labels = {0, 1};

  auto student = init_student(bundle.teachers[0], 2);
  auto pooler = AttentivePooler<double>::init(8, 4, rng);
  auto head = ClassifierHead<double>::init(8, 3, rng);
  auto proj = ProjectionSet<double>::init(spec, 8, 8, rng);
  std::vector<std::vector<TeacherOutput<double>>> touts;
  for (std::size_t e = 0; e < batch.size; ++e)
    touts.push_back(
        compute_teacher_outputs(bundle, spec, batch.row_ids(e), batch.row_mask(e)));

  std::vector<Tensor64*> params;
  student.collect(params);
  pooler.collect(params);
  head.collect(params);
  proj.collect(params);
  for (auto* p : params) p->set_requires_grad(true);
  AdamConfig frozen;
  frozen.lr = 0.0;
  AdamOpt<double> opt(params, frozen);
  distill_step(student, pooler, head, proj, touts, batch, spec, {0, 1}, opt, true);
  std::vector<double> analytic;
  for (auto* p : params) analytic.insert(analytic.end(), p->grad.begin(), p->grad.end());

  for (auto* p : params) p->set_requires_grad(false);
  std::vector<double> flat;
  for (auto* p : params) flat.insert(flat.end(), p->values.begin(), p->values.end());
  auto f = [&](const std::vector<double>& vals) {
    std::size_t off = 0;
    for (auto* p : params) {
      std::copy(vals.begin() + off, vals.begin() + off + p->values.size(), p->values.begin());
      off += p->values.size();
    }
    return distill_step(student, pooler, head, proj, touts, batch, spec, {0, 1}, opt, false)
        .total;
  };
  const std::vector<double> numeric = finite_diff_grad_richardson(f, flat, 1e-4);
  const double err = max_rel_error(analytic, numeric);
  std::printf("full-objective gradient check over %zu parameters: max rel error %.3g\n",
              flat.size(), err);
  if (!(err < 1e-5)) {
    std::fprintf(stderr, "gradient check FAILED (tolerance 1e-5)\n");
    return 3;
  }
  std::printf("gradient check passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-teacher knowledge-distillation workbench"};
  app.require_subcommand(1);
  CommonOpts o;
  auto* gen = app.add_subcommand("gen-data", "generate synthetic datasets");
  auto* teach = app.add_subcommand("train-teachers", "train the diversified teachers");
  auto* cofi = app.add_subcommand("cofinetune", "train teachers with the shared pooler/head");
  auto* dist = app.add_subcommand("distill", "run the full pipeline for one variant");
  auto* evalc = app.add_subcommand("eval", "evaluate a saved student checkpoint");
  auto* abl = app.add_subcommand("ablate", "run the ablation grid");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of the objective");
  auto* rep = app.add_subcommand("report", "summarize metrics.csv into report.md");
  for (auto* c : {gen, teach, cofi, dist, evalc, abl, grad, rep}) add_common(c, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a config error
  }
  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (teach->parsed()) return cmd_train_teachers(o, false);
    if (cofi->parsed()) return cmd_train_teachers(o, true);
    if (dist->parsed()) return cmd_distill(o);
    if (evalc->parsed()) return cmd_eval(o);
    if (abl->parsed()) return cmd_ablate(o);
    if (grad->parsed()) return cmd_gradcheck(o);
    if (rep->parsed()) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric divergence: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
