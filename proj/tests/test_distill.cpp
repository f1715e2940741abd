#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mtkd/distill.hpp"
#include "mtkd/gradcheck.hpp"
#include "test_util.hpp"

using namespace mtkd;
using testutil::Tape64;
using testutil::Var64;
using testutil::random_tensor;

namespace {

EncoderConfig toy_config(std::size_t layers, std::size_t d = 8) {
  EncoderConfig cfg;
  cfg.vocab_size = 20;
  cfg.max_seq_len = 6;
  cfg.hidden_dim = d;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.num_layers = layers;
  cfg.dropout = 0.0;
  return cfg;
}

TeacherBundle<double> toy_bundle(std::size_t n, std::size_t layers, std::size_t classes,
                                 Rng& rng) {
  TeacherBundle<double> b;
  const EncoderConfig cfg = toy_config(layers);
  for (std::size_t i = 0; i < n; ++i)
    b.teachers.push_back(EncoderParams<double>::init(cfg, rng));
  b.pooler = AttentivePooler<double>::init(cfg.hidden_dim, 4, rng);
  b.head = ClassifierHead<double>::init(cfg.hidden_dim, classes, rng);
  return b;
}

Batch toy_batch(std::size_t classes = 3) {
  Batch b;
  b.size = 2;
  b.len = 5;
  b.num_classes = classes;
  b.ids = {kClsId, 7, 12, 3, kPadId, kClsId, 4, 9, kPadId, kPadId};
  b.mask = {1, 1, 1, 1, 0, 1, 1, 1, 0, 0};
  b.labels = {0, 1};
  return b;
}

std::vector<double> entropy_ref(const std::vector<double>& p) {
  std::vector<double> out(1, 0.0);
  for (double v : p) out[0] -= v * std::log(v);
  return out;
}

}  // namespace

TEST_CASE("map_layer follows the T*j rule and rejects bad indices") {
  CHECK(map_layer(3, 2, 6) == 6);
  for (std::size_t j = 1; j <= 5; ++j) CHECK(map_layer(j, 1, 5) == j);
  std::vector<std::size_t> expect{3, 6, 9, 12};
  for (std::size_t j = 1; j <= 4; ++j) CHECK(map_layer(j, 3, 4) == expect[j - 1]);
  CHECK(map_layer(4, 3, 4) == 12);  // top student layer hits top teacher layer
  CHECK_THROWS_AS(map_layer(0, 2, 4), ContractError);
  CHECK_THROWS_AS(map_layer(5, 2, 4), ContractError);
}

TEST_CASE("DistillSpec validation") {
  DistillSpec s;
  CHECK_NOTHROW(s.validate());
  CHECK(s.teacher_layers() == s.layer_ratio * s.student_layers);

  DistillSpec bad = s;
  bad.num_teachers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.student_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.weighting = WeightingMode::Single;
  bad.single_index = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("ProjectionSet has N*K matrices, identity init on equal dims") {
  Rng rng(5);
  DistillSpec spec;
  spec.num_teachers = 3;
  spec.student_layers = 2;
  auto p = ProjectionSet<double>::init(spec, 8, 8, rng);
  CHECK(p.mats.size() == 6);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 1; j <= 2; ++j) {
      auto& w = p.at(i, j);
      REQUIRE(w.shape == std::vector<std::size_t>{8, 8});
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c)
          CHECK(w.values[r * 8 + c] == (r == c ? 1.0 : 0.0));
    }
  CHECK_THROWS_AS(p.at(3, 1), ContractError);
  CHECK_THROWS_AS(p.at(0, 0), ContractError);
  CHECK_THROWS_AS(p.at(0, 3), ContractError);

  auto q = ProjectionSet<double>::init(spec, 12, 8, rng);
  REQUIRE(q.at(1, 2).shape == std::vector<std::size_t>{12, 8});
  double nonzero_off_diag = 0.0;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      if (r != c) nonzero_off_diag += std::abs(q.at(0, 1).values[r * 8 + c]);
  CHECK(nonzero_off_diag > 0.0);
}

TEST_CASE("SoftLabelSet validation guards the simplex") {
  SoftLabelSet<double> s;
  s.gold_onehot = {0, 1, 0};
  s.student_probs = {0.2, 0.5, 0.3};
  s.student_logits = {0.1, 1.0, 0.4};
  s.teacher_probs = {{0.6, 0.3, 0.1}};
  s.teacher_logits = {{2.0, 1.3, 0.2}};
  CHECK_NOTHROW(s.validate());
  s.student_probs = {0.2, 0.5, 0.4};
  CHECK_THROWS_AS(s.validate(), ContractError);
  s.student_probs = {0.2, 0.8};
  CHECK_THROWS_AS(s.validate(), DimensionError);
}

TEST_CASE("mt_hidden_loss zero cases and brute-force oracle") {
  Rng rng(11);
  DistillSpec spec;
  spec.num_teachers = 2;
  spec.student_layers = 2;
  spec.layer_ratio = 2;
  const std::size_t L = 4, d = 5;
  std::vector<std::uint8_t> mask{1, 1, 1, 0};

  SUBCASE("identical states through identity projection give 0") {
    DistillSpec one = spec;
    one.num_teachers = 1;
    one.student_layers = 1;
    Tape64 tape;
    Tensor64 h = random_tensor({L, d}, rng);
    LayerStack<double> student;
    student.mask = mask;
    student.hidden = {tape.constant(h), tape.constant(h)};
    std::vector<TeacherOutput<double>> teachers(1);
    teachers[0].mapped_hidden = {h};
    auto proj = ProjectionSet<double>::init(one, d, d, rng);
    auto loss = mt_hidden_loss(tape, student, teachers, proj, one, {0});
    CHECK(tape.val(loss)[0] == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("all-zero student and zero projection give 0") {
    DistillSpec one = spec;
    one.num_teachers = 1;
    one.student_layers = 1;
    Tape64 tape;
    LayerStack<double> student;
    student.mask = mask;
    student.hidden = {tape.constant(Tensor64::zeros({L, d})),
                      tape.constant(Tensor64::zeros({L, d}))};
    std::vector<TeacherOutput<double>> teachers(1);
    teachers[0].mapped_hidden = {random_tensor({L, d}, rng)};
    auto proj = ProjectionSet<double>::init(one, d, d, rng);
    proj.at(0, 1) = Tensor64::zeros({d, d});
    auto loss = mt_hidden_loss(tape, student, teachers, proj, one, {0});
    CHECK(tape.val(loss)[0] == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("N=2 K=2 random stacks match an (i,j,token,dim) loop") {
    Tape64 tape;
    std::vector<Tensor64> sh{random_tensor({L, d}, rng), random_tensor({L, d}, rng)};
    LayerStack<double> student;
    student.mask = mask;
    student.hidden = {tape.constant(Tensor64::zeros({L, d})), tape.constant(sh[0]),
                      tape.constant(sh[1])};
    std::vector<TeacherOutput<double>> teachers(2);
    for (auto& t : teachers)
      t.mapped_hidden = {random_tensor({L, d}, rng), random_tensor({L, d}, rng)};
    auto proj = ProjectionSet<double>::init(spec, d, d, rng);
    for (auto& m : proj.mats) m = random_tensor({d, d}, rng, 0.3);
    auto loss = mt_hidden_loss(tape, student, teachers, proj, spec, {0, 1});

    double expect = 0.0;
    std::size_t live = 0;
    for (auto m : mask) live += m;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        const auto& ht = teachers[i].mapped_hidden[j].values;
        const auto& w = proj.mats[i * 2 + j].values;
        double sq = 0.0;
        for (std::size_t tok = 0; tok < L; ++tok) {
          if (!mask[tok]) continue;
          for (std::size_t c = 0; c < d; ++c) {
            double pr = 0.0;
            for (std::size_t k = 0; k < d; ++k) pr += ht[tok * d + k] * w[k * d + c];
            const double diff = sh[j].values[tok * d + c] - pr;
            sq += diff * diff;
          }
        }
        expect += sq / static_cast<double>(live * d);
      }
    CHECK(tape.val(loss)[0] == doctest::Approx(expect).epsilon(1e-10));
  }

  SUBCASE("audit bound stops at min(T, K)") {
    DistillSpec narrow = spec;
    narrow.num_teachers = 1;
    narrow.layer_ratio = 1;  // teacher depth 2, T=1 < K=2
    narrow.hidden_bound = HiddenBound::NarrowBound;
    Tape64 tape;
    Tensor64 s1 = random_tensor({L, d}, rng), s2 = random_tensor({L, d}, rng);
    LayerStack<double> student;
    student.mask = mask;
    student.hidden = {tape.constant(Tensor64::zeros({L, d})), tape.constant(s1),
                      tape.constant(s2)};
    std::vector<TeacherOutput<double>> teachers(1);
    teachers[0].mapped_hidden = {random_tensor({L, d}, rng), random_tensor({L, d}, rng)};
    auto proj = ProjectionSet<double>::init(narrow, d, d, rng);
    auto bounded = mt_hidden_loss(tape, student, teachers, proj, narrow, {0});
    // Only the j=1 term should remain: recompute it alone.
    auto lone = tape.mse_masked(student.hidden[1],
                                tape.constant(teachers[0].mapped_hidden[0]), mask);
    CHECK(tape.val(bounded)[0] == doctest::Approx(tape.val(lone)[0]).epsilon(1e-12));
  }

  SUBCASE("gradients reach student and projections, never teacher tensors") {
    Tape64 tape;
    Tensor64 s1 = random_tensor({L, d}, rng);
    s1.set_requires_grad(true);
    DistillSpec one = spec;
    one.num_teachers = 1;
    one.student_layers = 1;
    LayerStack<double> student;
    student.mask = mask;
    student.hidden = {tape.constant(Tensor64::zeros({L, d})), tape.param(s1)};
    std::vector<TeacherOutput<double>> teachers(1);
    teachers[0].mapped_hidden = {random_tensor({L, d}, rng)};
    auto proj = ProjectionSet<double>::init(one, d, d, rng);
    proj.set_requires_grad(true);
    auto loss = mt_hidden_loss(tape, student, teachers, proj, one, {0});
    tape.backward(loss);
    double snorm = 0.0, pnorm = 0.0;
    for (double g : s1.grad) snorm += g * g;
    for (double g : proj.at(0, 1).grad) pnorm += g * g;
    CHECK(snorm > 0.0);
    CHECK(pnorm > 0.0);
    CHECK(teachers[0].mapped_hidden[0].grad.empty());
  }

  SUBCASE("layer-count mismatch throws") {
    Tape64 tape;
    LayerStack<double> student;
    student.mask = mask;
    student.hidden = {tape.constant(Tensor64::zeros({L, d})),
                      tape.constant(Tensor64::zeros({L, d}))};  // 1 layer, spec wants 2
    std::vector<TeacherOutput<double>> teachers(2);
    auto proj = ProjectionSet<double>::init(spec, d, d, rng);
    CHECK_THROWS_AS(mt_hidden_loss(tape, student, teachers, proj, spec, {0, 1}),
                    ContractError);
  }
}

TEST_CASE("teacher_weight closed-form examples and monotonicity") {
  std::vector<double> gold{0, 1, 0};
  CHECK(teacher_weight(gold, {0.0, 1.0, 0.0}) == doctest::Approx(1.0));
  const double e1 = std::exp(-1.0);
  CHECK(teacher_weight(gold, {(1 - e1) / 2, e1, (1 - e1) / 2}) == doctest::Approx(0.5));
  CHECK(teacher_weight({1, 0}, {0.5, 0.5}) ==
        doctest::Approx(1.0 / (1.0 + std::log(2.0))));

  double prev = 2.0;
  for (double p = 0.9; p > 0.05; p -= 0.1) {
    const double w = teacher_weight(gold, {(1 - p) / 2, p, (1 - p) / 2});
    CHECK(w < prev);
    CHECK(w > 0.0);
    CHECK(w <= 1.0);
    prev = w;
  }
}

TEST_CASE("mt_distill_loss examples, modes and oracle") {
  DistillSpec spec;
  spec.num_teachers = 2;

  SUBCASE("student == single teacher, uniform mode -> entropy of the shared distribution") {
    DistillSpec one = spec;
    one.num_teachers = 1;
    one.weighting = WeightingMode::Uniform;
    Tape64 tape;
    std::vector<double> z{0.7, -0.4, 1.2};
    Tensor64 zs({1, 3}, z);
    auto loss = mt_distill_loss(tape, {z}, tape.constant(zs), {1, 0, 0}, one, {0});
    CHECK(tape.val(loss)[0] ==
          doctest::Approx(entropy_ref(softmax_values(z, 1.0))[0]).epsilon(1e-10));
  }

  SUBCASE("near-one-hot correct teachers -> N * task CE") {
    Tape64 tape;
    std::vector<double> peak0{50.0, 0.0, 0.0};
    Tensor64 zs({1, 3}, {0.3, -0.2, 0.5});
    std::vector<double> gold{1, 0, 0};
    auto loss =
        mt_distill_loss(tape, {peak0, peak0}, tape.constant(zs), gold, spec, {0, 1});
    const double ys_gold = softmax_values(zs.values, 1.0)[0];
    CHECK(tape.val(loss)[0] == doctest::Approx(-2.0 * std::log(ys_gold)).epsilon(1e-9));
  }

  SUBCASE("2 teachers, C=3 loss-weighted value matches an independent scalar loop") {
    Tape64 tape;
    std::vector<std::vector<double>> tz{{0.4, -1.0, 0.9}, {-0.3, 0.8, 0.1}};
    std::vector<double> zsv{0.2, 0.5, -0.6};
    std::vector<double> gold{0, 0, 1};
    Tensor64 zs({1, 3}, zsv);
    auto loss = mt_distill_loss(tape, tz, tape.constant(zs), gold, spec, {0, 1});

    auto sm = [](const std::vector<double>& z) {
      double mx = *std::max_element(z.begin(), z.end()), s = 0;
      std::vector<double> p(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
      for (auto& v : p) v /= s;
      return p;
    };
    auto ys = sm(zsv);
    double expect = 0.0;
    for (const auto& z : tz) {
      auto yt = sm(z);
      double ce_gold = 0.0, ce_soft = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        if (gold[c] != 0.0) ce_gold -= gold[c] * std::log(yt[c]);
        ce_soft -= yt[c] * std::log(ys[c]);
      }
      expect += ce_soft / (1.0 + ce_gold);
    }
    CHECK(tape.val(loss)[0] == doctest::Approx(expect).epsilon(1e-10));
  }

  SUBCASE("single mode keeps only the chosen teacher") {
    DistillSpec single = spec;
    single.weighting = WeightingMode::Single;
    single.single_index = 1;
    DistillSpec lone = spec;
    lone.num_teachers = 1;
    lone.weighting = WeightingMode::Uniform;
    Tape64 tape;
    std::vector<std::vector<double>> tz{{2.0, 0.0, -1.0}, {-0.3, 0.8, 0.1}};
    Tensor64 zs({1, 3}, {0.2, 0.5, -0.6});
    auto a = mt_distill_loss(tape, tz, tape.constant(zs), {0, 1, 0}, single, {0, 1});
    auto b = mt_distill_loss(tape, {tz[1]}, tape.constant(zs), {0, 1, 0}, lone, {0});
    CHECK(tape.val(a)[0] == tape.val(b)[0]);
  }

  SUBCASE("ensemble-average with two identical teachers equals single mode") {
    DistillSpec ens = spec;
    ens.weighting = WeightingMode::EnsembleAverage;
    DistillSpec single = spec;
    single.weighting = WeightingMode::Single;
    single.single_index = 0;
    Tape64 tape;
    std::vector<double> z{0.4, -1.0, 0.9};
    Tensor64 zs({1, 3}, {0.2, 0.5, -0.6});
    auto a = mt_distill_loss(tape, {z, z}, tape.constant(zs), {1, 0, 0}, ens, {0, 1});
    auto b = mt_distill_loss(tape, {z, z}, tape.constant(zs), {1, 0, 0}, single, {0, 1});
    CHECK(tape.val(a)[0] == tape.val(b)[0]);
  }

  SUBCASE("t=1 equals an untempered reference bitwise") {
    Tape64 tape;
    std::vector<std::vector<double>> tz{{0.4, -1.0, 0.9}, {-0.3, 0.8, 0.1}};
    Tensor64 zs({1, 3}, {0.2, 0.5, -0.6});
    std::vector<double> gold{0, 0, 1};
    auto tempered = mt_distill_loss(tape, tz, tape.constant(zs), gold, spec, {0, 1});

    // Untempered path: no temperature anywhere.
    std::vector<Var64> terms;
    std::vector<double> weights;
    auto probs = tape.softmax_rows(tape.constant(zs), 1.0);
    for (const auto& z : tz) {
      terms.push_back(tape.cross_entropy(softmax_values(z, 1.0), probs));
      weights.push_back(teacher_weight(gold, softmax_values(z, 1.0)));
    }
    auto plain = tape.weighted_sum(terms, weights);
    CHECK(tape.val(tempered)[0] == tape.val(plain)[0]);
  }

  SUBCASE("temperature preserves the argmax") {
    std::vector<double> z{0.3, 1.7, -0.9, 1.1};
    for (double t : {0.25, 0.5, 1.0, 2.0, 8.0}) {
      auto p = softmax_values(z, t);
      CHECK(std::max_element(p.begin(), p.end()) - p.begin() == 1);
    }
  }

  SUBCASE("empty teacher list throws") {
    Tape64 tape;
    Tensor64 zs({1, 3}, {0.2, 0.5, -0.6});
    CHECK_THROWS_AS(mt_distill_loss(tape, {}, tape.constant(zs),
                                    std::vector<double>{1, 0, 0}, spec, {}),
                    ContractError);
  }
}

TEST_CASE("task_loss and total_loss") {
  Tape64 tape;
  SUBCASE("perfect student gives 0, uniform student gives ln C") {
    Tensor64 perfect({1, 3}, {0.0, 1.0, 0.0});
    auto l0 = task_loss<double>(tape, {0, 1, 0}, tape.constant(perfect));
    CHECK(tape.val(l0)[0] == doctest::Approx(0.0));
    Tensor64 uniform({1, 18}, std::vector<double>(18, 1.0 / 18.0));
    std::vector<double> gold(18, 0.0);
    gold[7] = 1.0;
    auto lu = task_loss<double>(tape, gold, tape.constant(uniform));
    CHECK(tape.val(lu)[0] == doctest::Approx(std::log(18.0)).epsilon(1e-10));
  }

  SUBCASE("random case matches a scalar loop") {
    Rng rng(3);
    std::vector<double> p = softmax_values({rng.normal(), rng.normal(), rng.normal()}, 1.0);
    Tensor64 probs({1, 3}, p);
    std::vector<double> gold{0, 0, 1};
    auto l = task_loss<double>(tape, gold, tape.constant(probs));
    CHECK(tape.val(l)[0] == doctest::Approx(-std::log(p[2])).epsilon(1e-12));
  }

  SUBCASE("total is the unweighted sum of enabled terms") {
    DistillSpec spec;
    auto h = tape.scalar_constant(0.1);
    auto d = tape.scalar_constant(0.2);
    auto t = tape.scalar_constant(0.3);
    auto all = total_loss(tape, spec, &h, &d, &t);
    CHECK(tape.val(all)[0] == doctest::Approx(0.6).epsilon(1e-12));

    DistillSpec only_task = spec;
    only_task.use_hidden = only_task.use_distill = false;
    auto just_t = total_loss<double>(tape, only_task, nullptr, nullptr, &t);
    CHECK(tape.val(just_t)[0] == tape.val(t)[0]);

    DistillSpec none = spec;
    none.use_hidden = none.use_distill = none.use_task = false;
    CHECK_THROWS_AS(total_loss<double>(tape, none, nullptr, nullptr, nullptr),
                    ContractError);
    CHECK_THROWS_AS(total_loss<double>(tape, spec, nullptr, &d, &t), ContractError);
  }
}

TEST_CASE("cofinetune_step reduction, symmetry and shared-head accumulation") {
  Rng rng(21);
  Batch batch = toy_batch();

  SUBCASE("N=2 identical teachers double the N=1 loss") {
    auto solo = toy_bundle(1, 2, 3, rng);
    auto duo = solo;
    duo.teachers.push_back(solo.teachers[0]);
    std::vector<Tensor64*> ps, pd;
    solo.collect(ps);
    duo.collect(pd);
    AdamOpt<double> opt_s(ps, {}), opt_d(pd, {});
    const double l1 = cofinetune_step(solo, batch, opt_s, {0}, false);
    const double l2 = cofinetune_step(duo, batch, opt_d, {0, 1}, false);
    CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-12));
  }

  SUBCASE("shared-head gradient is the sum of the isolated per-teacher gradients") {
    auto duo = toy_bundle(2, 2, 3, rng);
    duo.set_requires_grad(true);
    std::vector<Tensor64*> params;
    duo.collect(params);
    AdamConfig frozen;
    frozen.lr = 0.0;  // harvest gradients without moving parameters
    AdamOpt<double> opt(params, frozen);
    cofinetune_step(duo, batch, opt, {0, 1}, true);
    std::vector<double> joint = duo.head.w.grad;

    std::vector<double> summed(joint.size(), 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
      auto solo = toy_bundle(1, 2, 3, rng);  // shapes only; overwrite below
      solo.teachers[0] = duo.teachers[i];
      solo.pooler = duo.pooler;
      solo.head = duo.head;
      solo.set_requires_grad(true);
      std::vector<Tensor64*> sp;
      solo.collect(sp);
      AdamOpt<double> sopt(sp, frozen);
      cofinetune_step(solo, batch, sopt, {0}, true);
      for (std::size_t k = 0; k < summed.size(); ++k) summed[k] += solo.head.w.grad[k];
    }
    for (std::size_t k = 0; k < joint.size(); ++k)
      CHECK(joint[k] == doctest::Approx(summed[k]).epsilon(1e-10));
  }

  SUBCASE("empty active set throws") {
    auto solo = toy_bundle(1, 2, 3, rng);
    std::vector<Tensor64*> ps;
    solo.collect(ps);
    AdamOpt<double> opt(ps, {});
    CHECK_THROWS_AS(cofinetune_step(solo, batch, opt, {}, false), ContractError);
  }
}

TEST_CASE("init_student copy schemes") {
  Rng rng(31);
  auto teacher = EncoderParams<double>::init(toy_config(4), rng);

  SUBCASE("full-depth copy reproduces every teacher layer output") {
    auto student = init_student(teacher, 4);
    std::vector<std::size_t> ids{kClsId, 7, 12, 3};
    std::vector<std::uint8_t> mask{1, 1, 1, 1};
    Tape64 tape;
    auto st = encode(tape, teacher, ids, mask);
    auto ss = encode(tape, student, ids, mask);
    REQUIRE(st.num_layers() == ss.num_layers());
    for (std::size_t l = 0; l <= 4; ++l) {
      const auto& a = tape.val(st.hidden[l]);
      const auto& b = tape.val(ss.hidden[l]);
      for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
    }
  }

  SUBCASE("first-K takes the leading layers verbatim") {
    auto student = init_student(teacher, 2);
    CHECK(student.cfg.num_layers == 2);
    CHECK(student.tok_emb.values == teacher.tok_emb.values);
    CHECK(student.pos_emb.values == teacher.pos_emb.values);
    for (std::size_t l = 0; l < 2; ++l)
      CHECK(student.layers[l].wq.values == teacher.layers[l].wq.values);
  }

  SUBCASE("last-K and skip pick the documented source layers") {
    auto last = init_student(teacher, 2, StudentInitScheme::LastK);
    CHECK(last.layers[0].wq.values == teacher.layers[2].wq.values);
    CHECK(last.layers[1].wq.values == teacher.layers[3].wq.values);
    auto skip = init_student(teacher, 2, StudentInitScheme::Skip);
    CHECK(skip.layers[0].wq.values == teacher.layers[0].wq.values);
    CHECK(skip.layers[1].wq.values == teacher.layers[2].wq.values);
  }

  SUBCASE("K beyond teacher depth throws") {
    CHECK_THROWS_AS(init_student(teacher, 5), ContractError);
    CHECK_THROWS_AS(init_student(teacher, 0), ContractError);
  }
}

TEST_CASE("distill_step task-only reduction equals plain supervised training") {
  Rng rng(41);
  DistillSpec spec;
  spec.num_teachers = 2;
  spec.student_layers = 2;
  spec.layer_ratio = 2;
  spec.use_hidden = spec.use_distill = false;
  Batch batch = toy_batch();

  auto bundle = toy_bundle(2, 4, 3, rng);
  auto student_a = init_student(bundle.teachers[0], 2);
  auto student_b = student_a;
  auto pooler_a = AttentivePooler<double>::init(8, 4, rng);
  auto head_a = ClassifierHead<double>::init(8, 3, rng);
  auto pooler_b = pooler_a;
  auto head_b = head_a;
  auto proj = ProjectionSet<double>::init(spec, 8, 8, rng);

  std::vector<std::vector<TeacherOutput<double>>> touts;
  for (std::size_t e = 0; e < batch.size; ++e)
    touts.push_back(
        compute_teacher_outputs(bundle, spec, batch.row_ids(e), batch.row_mask(e)));

  // Path A: distill_step with only the task term.
  student_a.set_requires_grad(true);
  pooler_a.set_requires_grad(true);
  head_a.set_requires_grad(true);
  std::vector<Tensor64*> pa;
  student_a.collect(pa);
  pooler_a.collect(pa);
  head_a.collect(pa);
  AdamOpt<double> opt_a(pa, {});
  auto parts = distill_step(student_a, pooler_a, head_a, proj, touts, batch, spec, {0, 1},
                            opt_a, true);
  CHECK(parts.hidden == 0.0);
  CHECK(parts.distill == 0.0);
  CHECK(parts.total == parts.task);

  // Path B: hand-rolled supervised step with the same op sequence.
  student_b.set_requires_grad(true);
  pooler_b.set_requires_grad(true);
  head_b.set_requires_grad(true);
  std::vector<Tensor64*> pb;
  student_b.collect(pb);
  pooler_b.collect(pb);
  head_b.collect(pb);
  AdamOpt<double> opt_b(pb, {});
  Tape64 tape;
  std::vector<Var64> losses;
  for (std::size_t e = 0; e < batch.size; ++e) {
    auto stack = encode(tape, student_b, batch.row_ids(e), batch.row_mask(e), true);
    auto pooled = attentive_pool(tape, stack.top(), pooler_b, batch.row_mask(e));
    auto out = classify(tape, pooled, head_b, 1.0);
    losses.push_back(tape.cross_entropy(batch.onehot<double>(e), out.probs));
  }
  auto loss = tape.scale(tape.add_scalars(losses), 1.0 / static_cast<double>(batch.size));
  CHECK(parts.task == tape.val(loss)[0]);
  opt_b.zero_grad();
  tape.backward(loss);
  opt_b.step();

  for (std::size_t k = 0; k < pa.size(); ++k)
    CHECK(pa[k]->values == pb[k]->values);  // bitwise-identical update
}

TEST_CASE("distill_step full objective: FD check, frozen teachers, term independence") {
  Rng rng(51);
  DistillSpec spec;
  spec.num_teachers = 2;
  spec.student_layers = 2;
  spec.layer_ratio = 2;
  Batch batch = toy_batch();

  auto bundle = toy_bundle(2, 4, 3, rng);
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

  std::vector<double> teacher_before;
  std::vector<Tensor64*> tparams;
  bundle.collect(tparams);
  for (auto* t : tparams)
    teacher_before.insert(teacher_before.end(), t->values.begin(), t->values.end());

  distill_step(student, pooler, head, proj, touts, batch, spec, {0, 1}, opt, true);
  std::vector<double> analytic;
  for (auto* p : params) analytic.insert(analytic.end(), p->grad.begin(), p->grad.end());

  SUBCASE("gradient of the full objective matches finite differences") {
    for (auto* p : params) p->set_requires_grad(false);
    std::vector<double> flat;
    for (auto* p : params) flat.insert(flat.end(), p->values.begin(), p->values.end());
    auto f = [&](const std::vector<double>& vals) {
      std::size_t off = 0;
      for (auto* p : params) {
        std::copy(vals.begin() + off, vals.begin() + off + p->values.size(),
                  p->values.begin());
        off += p->values.size();
      }
      return distill_step(student, pooler, head, proj, touts, batch, spec, {0, 1}, opt,
                          false)
          .total;
    };
    std::vector<double> numeric = finite_diff_grad_richardson(f, flat, 1e-4);
    f(flat);
    CHECK(max_rel_error(analytic, numeric) < 1e-5);
  }

  SUBCASE("teacher parameters stay bit-identical through distillation") {
    std::vector<double> teacher_after;
    for (auto* t : tparams)
      teacher_after.insert(teacher_after.end(), t->values.begin(), t->values.end());
    CHECK(teacher_before == teacher_after);
    for (auto* t : tparams) CHECK(t->grad.empty());
  }

  SUBCASE("sum of single-term gradients equals the full-objective gradient") {
    std::vector<double> summed(analytic.size(), 0.0);
    for (int term = 0; term < 3; ++term) {
      DistillSpec one = spec;
      one.use_hidden = term == 0;
      one.use_distill = term == 1;
      one.use_task = term == 2;
      distill_step(student, pooler, head, proj, touts, batch, one, {0, 1}, opt, true);
      std::size_t off = 0;
      for (auto* p : params) {
        for (double g : p->grad) summed[off++] += g;
      }
    }
    for (std::size_t k = 0; k < analytic.size(); ++k)
      CHECK(analytic[k] == doctest::Approx(summed[k]).epsilon(1e-9));
  }
}
