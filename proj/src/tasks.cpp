#include "mtkd/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace mtkd {

namespace {

constexpr std::size_t kSentMarkers = 10;  // per polarity
constexpr std::size_t kSentPosBase = kFirstContentId;
constexpr std::size_t kSentNegBase = kSentPosBase + kSentMarkers;
constexpr std::size_t kSentFillerBase = kSentNegBase + kSentMarkers;

constexpr std::size_t kTopicCount = 18;
constexpr std::size_t kTopicSigSize = 3;
constexpr std::size_t kTopicFillerBase = kFirstContentId + kTopicCount * kTopicSigSize;

std::size_t topic_sig_base(std::size_t topic) {
  return kFirstContentId + topic * kTopicSigSize;
}

int topic_of_token(std::size_t id) {
  if (id < kFirstContentId || id >= kTopicFillerBase) return -1;
  return static_cast<int>((id - kFirstContentId) / kTopicSigSize);
}

Example gen_sent2(const TaskSpec& spec, Rng& rng) {
  const std::size_t content_len = static_cast<std::size_t>(rng.range(8, static_cast<std::int64_t>(spec.max_seq_len) - 1));
  const int label = static_cast<int>(rng.below(2));
  const std::size_t n_marker = static_cast<std::size_t>(rng.range(3, 7));
  const std::size_t n_min = static_cast<std::size_t>(rng.below((n_marker - 1) / 2 + 1));
  const std::size_t n_maj = n_marker - n_min;  // strict majority
  const std::size_t maj_base = label == 1 ? kSentPosBase : kSentNegBase;
  const std::size_t min_base = label == 1 ? kSentNegBase : kSentPosBase;
  std::vector<std::size_t> content;
  for (std::size_t i = 0; i < n_maj; ++i) content.push_back(maj_base + rng.below(kSentMarkers));
  for (std::size_t i = 0; i < n_min; ++i) content.push_back(min_base + rng.below(kSentMarkers));
  while (content.size() < content_len)
    content.push_back(kSentFillerBase + rng.below(spec.vocab_size - kSentFillerBase));
  rng.shuffle(content);
  Example ex;
  ex.ids.push_back(kClsId);
  ex.ids.insert(ex.ids.end(), content.begin(), content.end());
  ex.label = label;
  return ex;
}

Example gen_nli2(const TaskSpec& spec, Rng& rng) {
  const std::size_t pool = spec.vocab_size - kFirstContentId;
  const int label = static_cast<int>(rng.below(2));
  const std::size_t n1 = static_cast<std::size_t>(rng.range(4, 6));
  std::vector<std::size_t> seg1;
  for (std::size_t i = 0; i < n1; ++i) seg1.push_back(kFirstContentId + rng.below(pool));
  std::vector<std::size_t> seg2;
  if (label == 1) {  // entailment analog: seg2 multiset contained in seg1
    const std::size_t n2 = static_cast<std::size_t>(rng.range(2, static_cast<std::int64_t>(std::min<std::size_t>(4, n1))));
    std::vector<std::size_t> idx(n1);
    for (std::size_t i = 0; i < n1; ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t i = 0; i < n2; ++i) seg2.push_back(seg1[idx[i]]);
  } else {
    const std::size_t n2 = static_cast<std::size_t>(rng.range(2, 4));
    for (std::size_t i = 0; i + 1 < n2; ++i) seg2.push_back(seg1[rng.below(n1)]);
    std::size_t outsider = kFirstContentId + rng.below(pool);
    while (std::count(seg1.begin(), seg1.end(), outsider) > 0)
      outsider = kFirstContentId + rng.below(pool);
    seg2.push_back(outsider);
  }
  rng.shuffle(seg2);
  Example ex;
  ex.ids.push_back(kClsId);
  ex.ids.insert(ex.ids.end(), seg1.begin(), seg1.end());
  ex.ids.push_back(kSepId);
  ex.ids.insert(ex.ids.end(), seg2.begin(), seg2.end());
  ex.label = label;
  return ex;
}

std::size_t pick_topic(const TaskSpec& spec, Rng& rng) {
  if (spec.imbalance <= 0.0) return rng.below(kTopicCount);
  // geometric-style skew controlled by the imbalance knob
  std::vector<double> w(kTopicCount);
  double sum = 0.0;
  for (std::size_t t = 0; t < kTopicCount; ++t) {
    w[t] = std::pow(1.0 - spec.imbalance, static_cast<double>(t));
    sum += w[t];
  }
  double u = rng.uniform() * sum;
  for (std::size_t t = 0; t < kTopicCount; ++t) {
    u -= w[t];
    if (u <= 0.0) return t;
  }
  return kTopicCount - 1;
}

Example gen_topic18(const TaskSpec& spec, Rng& rng) {
  const std::size_t content_len = static_cast<std::size_t>(rng.range(9, static_cast<std::int64_t>(spec.max_seq_len) - 1));
  const std::size_t topic = pick_topic(spec, rng);
  const std::size_t n_sig = static_cast<std::size_t>(rng.range(2, 4));
  std::vector<std::size_t> content;
  for (std::size_t i = 0; i < n_sig; ++i)
    content.push_back(topic_sig_base(topic) + rng.below(kTopicSigSize));
  // distractor topics always stay strictly below the true topic's count
  const std::size_t n_distract_topics = rng.below(3);
  std::map<std::size_t, std::size_t> distract_counts;
  for (std::size_t k = 0; k < n_distract_topics && content.size() < content_len; ++k) {
    std::size_t other = rng.below(kTopicCount);
    while (other == topic) other = rng.below(kTopicCount);
    const std::size_t cnt = 1 + rng.below(n_sig - 1 > 0 ? n_sig - 1 : 1);
    const std::size_t room = n_sig - 1 - std::min(n_sig - 1, distract_counts[other]);
    const std::size_t take = std::min(cnt, room);
    distract_counts[other] += take;
    for (std::size_t i = 0; i < take && content.size() < content_len; ++i)
      content.push_back(topic_sig_base(other) + rng.below(kTopicSigSize));
  }
  while (content.size() < content_len)
    content.push_back(kTopicFillerBase + rng.below(spec.vocab_size - kTopicFillerBase));
  rng.shuffle(content);
  Example ex;
  ex.ids.push_back(kClsId);
  ex.ids.insert(ex.ids.end(), content.begin(), content.end());
  ex.label = static_cast<int>(topic);
  return ex;
}

Dataset gen_split(const TaskSpec& spec, std::size_t n, Rng& rng) {
  Dataset data;
  data.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    switch (spec.kind) {
      case TaskKind::Sent2: ex = gen_sent2(spec, rng); break;
      case TaskKind::Nli2: ex = gen_nli2(spec, rng); break;
      case TaskKind::Topic18: ex = gen_topic18(spec, rng); break;
    }
    if (spec.noise_rate > 0.0 && rng.uniform() < spec.noise_rate) {
      const std::size_t c = spec.num_classes;
      int flipped = static_cast<int>(rng.below(c - 1));
      if (flipped >= ex.label) ++flipped;
      ex.label = flipped;
    }
    data.push_back(std::move(ex));
  }
  return data;
}

std::uint64_t fnv1a64(std::uint64_t h, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) {
    h ^= (v >> (8 * b)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::Sent2: return "SENT2";
    case TaskKind::Nli2: return "NLI2";
    case TaskKind::Topic18: return "TOPIC18";
  }
  return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "SENT2") return TaskKind::Sent2;
  if (name == "NLI2") return TaskKind::Nli2;
  if (name == "TOPIC18") return TaskKind::Topic18;
  throw ConfigError("unknown task kind: " + name);
}

std::size_t task_kind_classes(TaskKind k) {
  return k == TaskKind::Topic18 ? kTopicCount : 2;
}

void TaskSpec::validate() const {
  if (num_classes != task_kind_classes(kind))
    throw ConfigError("task " + task_kind_name(kind) + " requires " +
                      std::to_string(task_kind_classes(kind)) + " classes");
  if (n_train < 1 || n_dev < 1 || n_test < 1) throw ConfigError("split sizes must be >= 1");
  if (noise_rate < 0.0 || noise_rate > 1.0) throw ConfigError("noise_rate must be in [0,1]");
  if (max_seq_len < 12) throw ConfigError("max_seq_len too small for the generators");
  const std::size_t min_vocab =
      kind == TaskKind::Topic18 ? kTopicFillerBase + 8 : kSentFillerBase + 8;
  if (vocab_size < min_vocab)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                      " too small for signature tokens (need >= " + std::to_string(min_vocab) + ")");
}

SplitDatasets gen_synthetic(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed * 0x51f15eedULL + 0xa11ce5ULL);
  SplitDatasets out;
  out.train = gen_split(spec, spec.n_train, rng);
  out.dev = gen_split(spec, spec.n_dev, rng);
  out.test = gen_split(spec, spec.n_test, rng);
  return out;
}

int recover_label(const TaskSpec& spec, const Example& ex) {
  switch (spec.kind) {
    case TaskKind::Sent2: {
      long pos = 0, neg = 0;
      for (std::size_t id : ex.ids) {
        if (id >= kSentPosBase && id < kSentNegBase) ++pos;
        else if (id >= kSentNegBase && id < kSentFillerBase) ++neg;
      }
      if (pos == neg) return -1;
      return pos > neg ? 1 : 0;
    }
    case TaskKind::Nli2: {
      std::map<std::size_t, long> seg1;
      bool after_sep = false;
      bool entail = true;
      for (std::size_t i = 1; i < ex.ids.size(); ++i) {
        const std::size_t id = ex.ids[i];
        if (id == kSepId) {
          after_sep = true;
          continue;
        }
        if (id == kPadId) continue;
        if (!after_sep) ++seg1[id];
        else if (--seg1[id] < 0) entail = false;
      }
      return entail ? 1 : 0;
    }
    case TaskKind::Topic18: {
      long counts[kTopicCount] = {};
      for (std::size_t id : ex.ids) {
        const int t = topic_of_token(id);
        if (t >= 0) ++counts[t];
      }
      int best = -1;
      long best_count = 0;
      bool tie = false;
      for (std::size_t t = 0; t < kTopicCount; ++t) {
        if (counts[t] > best_count) {
          best = static_cast<int>(t);
          best_count = counts[t];
          tie = false;
        } else if (counts[t] == best_count && counts[t] > 0) {
          tie = true;
        }
      }
      return tie || best < 0 ? -1 : best;
    }
  }
  return -1;
}

Batch dataset_to_batch(const Dataset& data, std::size_t max_len, std::size_t num_classes) {
  Batch b;
  b.size = data.size();
  b.len = max_len;
  b.num_classes = num_classes;
  b.ids.assign(b.size * max_len, kPadId);
  b.mask.assign(b.size * max_len, 0);
  b.labels.resize(b.size);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& ex = data[i];
    const std::size_t n = std::min(ex.ids.size(), max_len);
    for (std::size_t j = 0; j < n; ++j) {
      b.ids[i * max_len + j] = ex.ids[j];
      b.mask[i * max_len + j] = 1;
    }
    b.labels[i] = ex.label;
  }
  return b;
}

std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size,
                                std::uint64_t shuffle_seed, std::size_t max_len,
                                std::size_t num_classes) {
  if (data.empty()) throw ContractError("make_batches: empty dataset");
  if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(shuffle_seed);
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Dataset chunk;
    const std::size_t end = std::min(start + batch_size, order.size());
    for (std::size_t i = start; i < end; ++i) chunk.push_back(data[order[i]]);
    out.push_back(dataset_to_batch(chunk, max_len, num_classes));
  }
  return out;
}

void save_dataset(const std::string& path, const Dataset& data) {
  std::ofstream f(path);
  if (!f) throw IntegrityError("cannot open " + path + " for writing");
  for (const auto& ex : data) {
    for (std::size_t i = 0; i < ex.ids.size(); ++i) {
      if (i) f << ' ';
      f << ex.ids[i];
    }
    f << '\t' << ex.label << '\n';
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IntegrityError("cannot open " + path);
  Dataset data;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IntegrityError("malformed dataset line in " + path);
    Example ex;
    std::istringstream toks(line.substr(0, tab));
    std::size_t id;
    while (toks >> id) ex.ids.push_back(id);
    ex.label = std::stoi(line.substr(tab + 1));
    data.push_back(std::move(ex));
  }
  return data;
}

void save_manifest(const std::string& path, const TaskSpec& spec) {
  std::ofstream f(path);
  if (!f) throw IntegrityError("cannot open " + path + " for writing");
  f << "kind = " << task_kind_name(spec.kind) << '\n'
    << "classes = " << spec.num_classes << '\n'
    << "train = " << spec.n_train << '\n'
    << "dev = " << spec.n_dev << '\n'
    << "test = " << spec.n_test << '\n'
    << "vocab = " << spec.vocab_size << '\n'
    << "max_seq_len = " << spec.max_seq_len << '\n'
    << "noise = " << spec.noise_rate << '\n'
    << "imbalance = " << spec.imbalance << '\n'
    << "seed = " << spec.seed << '\n';
}

TaskSpec load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IntegrityError("cannot open " + path);
  TaskSpec spec;
  std::string line;
  while (std::getline(f, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "kind") spec.kind = task_kind_from_name(val);
    else if (key == "classes") spec.num_classes = std::stoul(val);
    else if (key == "train") spec.n_train = std::stoul(val);
    else if (key == "dev") spec.n_dev = std::stoul(val);
    else if (key == "test") spec.n_test = std::stoul(val);
    else if (key == "vocab") spec.vocab_size = std::stoul(val);
    else if (key == "max_seq_len") spec.max_seq_len = std::stoul(val);
    else if (key == "noise") spec.noise_rate = std::stod(val);
    else if (key == "imbalance") spec.imbalance = std::stod(val);
    else if (key == "seed") spec.seed = std::stoull(val);
  }
  return spec;
}

std::uint64_t dataset_hash(const SplitDatasets& splits) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Dataset* d : {&splits.train, &splits.dev, &splits.test}) {
    h = fnv1a64(h, d->size());
    for (const auto& ex : *d) {
      for (std::size_t id : ex.ids) h = fnv1a64(h, id);
      h = fnv1a64(h, static_cast<std::uint64_t>(ex.label) + 0x1000);
    }
  }
  return h;
}

void token_dropout(Batch& batch, double rate, Rng& rng) {
  if (rate <= 0.0) return;
  for (std::size_t i = 0; i < batch.size; ++i) {
    for (std::size_t j = 1; j < batch.len; ++j) {  // never drop the cls slot
      const std::size_t k = i * batch.len + j;
      if (batch.mask[k] && rng.uniform() < rate) batch.mask[k] = 0;
    }
  }
}

}  // namespace mtkd
