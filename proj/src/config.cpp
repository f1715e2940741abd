#include "mtkd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mtkd/checkpoint.hpp"
#include "mtkd/errors.hpp"

namespace mtkd {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: " + key + " expects a boolean, got '" + v + "'");
}

std::string weighting_name(WeightingMode m) {
  switch (m) {
    case WeightingMode::LossWeighted: return "loss";
    case WeightingMode::Uniform: return "uniform";
    case WeightingMode::Single: return "single";
    case WeightingMode::EnsembleAverage: return "ensemble";
  }
  return "?";
}

WeightingMode weighting_from_name(const std::string& v) {
  if (v == "loss") return WeightingMode::LossWeighted;
  if (v == "uniform") return WeightingMode::Uniform;
  if (v == "single") return WeightingMode::Single;
  if (v == "ensemble") return WeightingMode::EnsembleAverage;
  throw ConfigError("config: unknown weighting mode '" + v + "'");
}

std::string init_name(StudentInitScheme s) {
  switch (s) {
    case StudentInitScheme::FirstK: return "first";
    case StudentInitScheme::LastK: return "last";
    case StudentInitScheme::Skip: return "skip";
  }
  return "?";
}

StudentInitScheme init_from_name(const std::string& v) {
  if (v == "first") return StudentInitScheme::FirstK;
  if (v == "last") return StudentInitScheme::LastK;
  if (v == "skip") return StudentInitScheme::Skip;
  throw ConfigError("config: unknown student init scheme '" + v + "'");
}

}  // namespace

void RunConfig::validate() const {
  task.validate();
  teacher.validate();
  distill.validate();
  student_config().validate();
  if (teacher.num_layers != distill.teacher_layers())
    throw ConfigError("config: teacher depth " + std::to_string(teacher.num_layers) +
                      " != layer_ratio * student_layers = " +
                      std::to_string(distill.teacher_layers()));
  if (teacher.vocab_size != task.vocab_size)
    throw ConfigError("config: encoder vocab must match the task vocab");
  if (teacher.max_seq_len != task.max_seq_len)
    throw ConfigError("config: encoder max_seq_len must match the task");
  if (repeats < 1) throw ConfigError("config: repeats must be >= 1");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (!(teacher_lr > 0.0) || !(student_lr > 0.0))
    throw ConfigError("config: learning rates must be > 0");
  if (!(teacher_shard_fraction > 0.0) || teacher_shard_fraction > 1.0)
    throw ConfigError("config: teacher_shard_fraction must be in (0, 1]");
  if (!(distill_fraction > 0.0) || distill_fraction > 1.0)
    throw ConfigError("config: distill_fraction must be in (0, 1]");
  if (teacher_token_dropout < 0.0 || teacher_token_dropout >= 1.0)
    throw ConfigError("config: teacher_token_dropout must be in [0, 1)");
  if (noisy_teacher >= static_cast<long>(distill.num_teachers))
    throw ConfigError("config: noisy_teacher index out of range");
  if (noisy_teacher >= 0 && (noisy_teacher_rate < 0.0 || noisy_teacher_rate > 1.0))
    throw ConfigError("config: noisy_teacher_rate must be in [0, 1]");
  if (pool_query_dim < 1) throw ConfigError("config: pool_query_dim must be >= 1");
}

std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream o;
  o << "task.kind = " << task_kind_name(c.task.kind) << '\n'
    << "task.classes = " << c.task.num_classes << '\n'
    << "task.train = " << c.task.n_train << '\n'
    << "task.dev = " << c.task.n_dev << '\n'
    << "task.test = " << c.task.n_test << '\n'
    << "task.vocab = " << c.task.vocab_size << '\n'
    << "task.max_seq_len = " << c.task.max_seq_len << '\n'
    << "task.noise = " << c.task.noise_rate << '\n'
    << "task.imbalance = " << c.task.imbalance << '\n'
    << "encoder.hidden_dim = " << c.teacher.hidden_dim << '\n'
    << "encoder.num_heads = " << c.teacher.num_heads << '\n'
    << "encoder.ffn_dim = " << c.teacher.ffn_dim << '\n'
    << "encoder.teacher_layers = " << c.teacher.num_layers << '\n'
    << "encoder.dropout = " << c.teacher.dropout << '\n'
    << "encoder.activation = " << (c.teacher.activation == Activation::Gelu ? "gelu" : "relu")
    << '\n'
    << "distill.num_teachers = " << c.distill.num_teachers << '\n'
    << "distill.student_layers = " << c.distill.student_layers << '\n'
    << "distill.layer_ratio = " << c.distill.layer_ratio << '\n'
    << "distill.temperature = " << c.distill.temperature << '\n'
    << "distill.use_hidden = " << (c.distill.use_hidden ? "true" : "false") << '\n'
    << "distill.use_distill = " << (c.distill.use_distill ? "true" : "false") << '\n'
    << "distill.use_task = " << (c.distill.use_task ? "true" : "false") << '\n'
    << "distill.weighting = " << weighting_name(c.distill.weighting) << '\n'
    << "distill.single_index = " << c.distill.single_index << '\n'
    << "distill.student_init = " << init_name(c.distill.student_init) << '\n'
    << "distill.hidden_bound = "
    << (c.distill.hidden_bound == HiddenBound::StudentLayers ? "student" : "narrow") << '\n'
    << "train.teacher_lr = " << c.teacher_lr << '\n'
    << "train.student_lr = " << c.student_lr << '\n'
    << "train.pretrain_epochs = " << c.pretrain_epochs << '\n'
    << "train.cofinetune_epochs = " << c.cofinetune_epochs << '\n'
    << "train.distill_epochs = " << c.distill_epochs << '\n'
    << "train.patience = " << c.patience << '\n'
    << "train.batch_size = " << c.batch_size << '\n'
    << "train.repeats = " << c.repeats << '\n'
    << "train.master_seed = " << c.master_seed << '\n'
    << "train.out_dir = " << c.out_dir << '\n'
    << "train.cofinetune = " << (c.cofinetune ? "true" : "false") << '\n'
    << "train.distill_fraction = " << c.distill_fraction << '\n'
    << "train.teacher_shard_fraction = " << c.teacher_shard_fraction << '\n'
    << "train.teacher_token_dropout = " << c.teacher_token_dropout << '\n'
    << "train.noisy_teacher = " << c.noisy_teacher << '\n'
    << "train.noisy_teacher_rate = " << c.noisy_teacher_rate << '\n'
    << "train.pool_query_dim = " << c.pool_query_dim << '\n';
  return o.str();
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw IntegrityError("cannot open " + path + " for writing");
  f << serialize_run_config(cfg);
}

namespace {

void apply_key(RunConfig& c, const std::string& key, const std::string& val) {
  try {
    if (key == "task.kind") {
      c.task.kind = task_kind_from_name(val);
      c.task.num_classes = task_kind_classes(c.task.kind);
    } else if (key == "task.classes") c.task.num_classes = std::stoul(val);
    else if (key == "task.train") c.task.n_train = std::stoul(val);
    else if (key == "task.dev") c.task.n_dev = std::stoul(val);
    else if (key == "task.test") c.task.n_test = std::stoul(val);
    else if (key == "task.vocab") c.task.vocab_size = c.teacher.vocab_size = std::stoul(val);
    else if (key == "task.max_seq_len")
      c.task.max_seq_len = c.teacher.max_seq_len = std::stoul(val);
    else if (key == "task.noise") c.task.noise_rate = std::stod(val);
    else if (key == "task.imbalance") c.task.imbalance = std::stod(val);
    else if (key == "encoder.hidden_dim") c.teacher.hidden_dim = std::stoul(val);
    else if (key == "encoder.num_heads") c.teacher.num_heads = std::stoul(val);
    else if (key == "encoder.ffn_dim") c.teacher.ffn_dim = std::stoul(val);
    else if (key == "encoder.teacher_layers") c.teacher.num_layers = std::stoul(val);
    else if (key == "encoder.dropout") c.teacher.dropout = std::stod(val);
    else if (key == "encoder.activation") {
      if (val == "gelu") c.teacher.activation = Activation::Gelu;
      else if (val == "relu") c.teacher.activation = Activation::Relu;
      else throw ConfigError("config: unknown activation '" + val + "'");
    } else if (key == "distill.num_teachers") c.distill.num_teachers = std::stoul(val);
    else if (key == "distill.student_layers") c.distill.student_layers = std::stoul(val);
    else if (key == "distill.layer_ratio") c.distill.layer_ratio = std::stoul(val);
    else if (key == "distill.temperature") c.distill.temperature = std::stod(val);
    else if (key == "distill.use_hidden") c.distill.use_hidden = parse_bool(val, key);
    else if (key == "distill.use_distill") c.distill.use_distill = parse_bool(val, key);
    else if (key == "distill.use_task") c.distill.use_task = parse_bool(val, key);
    else if (key == "distill.weighting") c.distill.weighting = weighting_from_name(val);
    else if (key == "distill.single_index") c.distill.single_index = std::stoul(val);
    else if (key == "distill.student_init") c.distill.student_init = init_from_name(val);
    else if (key == "distill.hidden_bound") {
      if (val == "student") c.distill.hidden_bound = HiddenBound::StudentLayers;
      else if (val == "narrow") c.distill.hidden_bound = HiddenBound::NarrowBound;
      else throw ConfigError("config: unknown hidden_bound '" + val + "'");
    } else if (key == "train.teacher_lr") c.teacher_lr = std::stod(val);
    else if (key == "train.student_lr") c.student_lr = std::stod(val);
    else if (key == "train.pretrain_epochs") c.pretrain_epochs = std::stoul(val);
    else if (key == "train.cofinetune_epochs") c.cofinetune_epochs = std::stoul(val);
    else if (key == "train.distill_epochs") c.distill_epochs = std::stoul(val);
    else if (key == "train.patience") c.patience = std::stoul(val);
    else if (key == "train.batch_size") c.batch_size = std::stoul(val);
    else if (key == "train.repeats") c.repeats = std::stoul(val);
    else if (key == "train.master_seed") c.master_seed = std::stoull(val);
    else if (key == "train.out_dir") c.out_dir = val;
    else if (key == "train.cofinetune") c.cofinetune = parse_bool(val, key);
    else if (key == "train.distill_fraction") c.distill_fraction = std::stod(val);
    else if (key == "train.teacher_shard_fraction") c.teacher_shard_fraction = std::stod(val);
    else if (key == "train.teacher_token_dropout") c.teacher_token_dropout = std::stod(val);
    else if (key == "train.noisy_teacher") c.noisy_teacher = std::stol(val);
    else if (key == "train.noisy_teacher_rate") c.noisy_teacher_rate = std::stod(val);
    else if (key == "train.pool_query_dim") c.pool_query_dim = std::stoul(val);
    else throw ConfigError("config: unknown key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw ConfigError("config: cannot parse value '" + val + "' for " + key);
  } catch (const std::out_of_range&) {
    throw ConfigError("config: value '" + val + "' out of range for " + key);
  }
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    apply_key(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::uint64_t config_hash(const RunConfig& cfg) {
  const std::string s = serialize_run_config(cfg);
  return fnv1a64_bytes(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

void apply_env_overrides(RunConfig& cfg) {
  if (const char* dir = std::getenv("MTKD_OUT_DIR"); dir && *dir) cfg.out_dir = dir;
}

}  // namespace mtkd
