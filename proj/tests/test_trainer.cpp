#include "test_util.hpp"

using namespace splos;
using splos::testing::small_task;
using splos::testing::snapshot;

namespace {

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.max_pre_iter = 20;
  cfg.max_epochs = 3;
  cfg.iter_per_epoch = 5;
  cfg.batch_size = 16;
  cfg.widths = {16, 8};
  return cfg;
}

std::vector<Tensor> gm_parameters(const ModelBundle& b) {
  std::vector<Tensor> out;
  for (const auto& h : b.gm)
    for (auto& p : h.parameters()) out.push_back(p);
  return out;
}

/// Bundle whose features pass x through and whose heads read fixed logits
/// from the input coordinates, for constructing decision cases.
ModelBundle passthrough_bundle(std::size_t classes, std::size_t m) {
  const std::size_t d = classes + 1;
  ModelBundle b = make_bundle({d, classes, m, {d}}, 0);
  auto fw = b.f.parameters()[0].mutable_data();
  std::fill(fw.begin(), fw.end(), 0.0);
  for (std::size_t j = 0; j < d; ++j) fw[j * d + j] = 1.0;
  auto set_head = [&](ClassifierHead& h) {
    auto w = h.linear.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    const std::size_t out = h.linear.out_features();
    for (std::size_t j = 0; j < out; ++j) w[j * out + j] = 1.0;
  };
  set_head(b.gc);
  set_head(b.gaux);
  for (auto& h : b.gm) set_head(h);
  return b;
}

}  // namespace

TEST(LearningRate, Schedule) {
  SgdConfig sgd;
  EXPECT_EQ(lr_at(0, sgd), sgd.base_lr);
  EXPECT_NEAR(lr_at(1000, sgd), sgd.base_lr * std::pow(2.0, -0.75), 1e-17);
  EXPECT_NEAR(lr_at(1000, sgd) / sgd.base_lr, 0.59460, 1e-5);
  for (std::uint64_t i = 0; i < 5000; ++i) EXPECT_LT(lr_at(i + 1, sgd), lr_at(i, sgd));
}

TEST(Sgd, PlainStepWithoutMomentumOrDecay) {
  SgdConfig sgd;
  sgd.momentum = 0;
  sgd.weight_decay = 0;
  Tensor p = Tensor::vector({1.0, -2.0}, true);
  sum(mul(p, Tensor::vector({3.0, 0.5}))).backward();
  std::vector<Tensor> params{p};
  SgdState st;
  sgd_update(params, st, 0.1, sgd);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(p[1], -2.0 - 0.1 * 0.5, 1e-15);
  EXPECT_EQ(p.grad(), (std::vector<double>{0, 0}));
}

TEST(Sgd, NesterovSequenceMatchesScalarOracle) {
  SgdConfig sgd;
  sgd.weight_decay = 0;
  const double lr = 0.05, g = 0.7;
  Tensor p = Tensor::vector({2.0}, true);
  std::vector<Tensor> params{p};
  SgdState st;
  double x = 2.0, v = 0.0;
  std::vector<double> steps;
  for (int i = 0; i < 4; ++i) {
    sum(scale(p, g)).backward();
    double before = p[0];
    sgd_update(params, st, lr, sgd);
    steps.push_back(before - p[0]);
    v = 0.9 * v + g;
    x -= lr * (g + 0.9 * v);
    EXPECT_NEAR(p[0], x, 1e-15);
  }
  EXPECT_NEAR(steps[1], lr * g * (1 + 0.9 * (1 + 0.9)), 1e-15);
}

TEST(Sgd, WeightDecayOnlyShrinksGeometrically) {
  SgdConfig sgd;
  sgd.momentum = 0;
  sgd.weight_decay = 0.1;
  Tensor p = Tensor::vector({4.0}, true);
  std::vector<Tensor> params{p};
  SgdState st;
  for (int i = 1; i <= 5; ++i) {
    sgd_update(params, st, 0.5, sgd);
    EXPECT_NEAR(p[0], 4.0 * std::pow(1 - 0.5 * 0.1, i), 1e-14);
  }
}

TEST(Config, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ContractError);
  };
  bad([](TrainConfig& c) { c.lambda1 = 0.4; });
  bad([](TrainConfig& c) { c.lambda1 = 1.1; });
  bad([](TrainConfig& c) { c.lambda2 = -0.1; });
  bad([](TrainConfig& c) { c.m = 1; });
  bad([](TrainConfig& c) { c.max_pre_iter = 0; });
  bad([](TrainConfig& c) { c.iter_per_epoch = 0; });
  bad([](TrainConfig& c) { c.manual_h = 1.5; });
}

TEST(Config, GrlRamp) {
  TrainConfig cfg;
  EXPECT_LT(cfg.grl_coeff_at(0, 1000), 0.01);
  EXPECT_NEAR(cfg.grl_coeff_at(999, 1000), 2.0 / (1.0 + std::exp(-10.0)) - 1.0, 1e-15);
  for (std::size_t i = 0; i + 1 < 100; ++i) EXPECT_LT(cfg.grl_coeff_at(i, 100), cfg.grl_coeff_at(i + 1, 100));
  cfg.grl_ramp = 0;
  EXPECT_EQ(cfg.grl_coeff_at(0, 1000), cfg.grl_coeff);
}

TEST(Config, AblationWiring) {
  TrainConfig cfg;
  cfg.flags.no_mixup = true;
  cfg.flags.beta_lambda2 = true;
  auto c = cfg.cmmc_options();
  EXPECT_EQ(c.lambda2.fixed, 0.0);
  EXPECT_EQ(c.lambda2.mode, Lambda2Policy::Mode::Fixed);
  cfg.flags = {};
  cfg.flags.no_adv_source_term = true;
  cfg.flags.no_gaux = true;
  auto d = cfg.dmc_options();
  EXPECT_FALSE(d.adv_source_term);
  EXPECT_FALSE(d.use_gaux);
  EXPECT_EQ(decision_rule_for({}), DecisionRule::Commonness);
  AblationFlags f;
  f.no_cmmc = true;
  EXPECT_EQ(decision_rule_for(f), DecisionRule::GcCommonMass);
  f.no_cmmc_h = true;
  EXPECT_EQ(decision_rule_for(f), DecisionRule::GcArgmax);
}

TEST(Pretrain, LeavesGcAndGauxUntouched) {
  auto task = small_task(2);
  auto cfg = quick_config(2);
  Trainer tr(task, cfg);
  auto gc = snapshot(tr.bundle().gc.parameters());
  auto ga = snapshot(tr.bundle().gaux.parameters());
  auto f = snapshot(tr.bundle().f.parameters());
  tr.pretrain();
  EXPECT_EQ(snapshot(tr.bundle().gc.parameters()), gc);
  EXPECT_EQ(snapshot(tr.bundle().gaux.parameters()), ga);
  EXPECT_NE(snapshot(tr.bundle().f.parameters()), f);
}

TEST(Pretrain, Deterministic) {
  auto task = small_task(2);
  auto cfg = quick_config(2);
  auto a = pretrain(task, cfg), b = pretrain(task, cfg);
  EXPECT_EQ(snapshot(a.parameters()), snapshot(b.parameters()));
}

TEST(Pretrain, SourceAccuracyOnNoShiftTask) {
  SynthConfig sc;
  sc.seed = 8;
  sc.rotation_deg = sc.translation = sc.noise_translation = 0;
  sc.spread_multiplier = 1;
  auto task = generate_task(sc, 3, 6);
  TrainConfig cfg;
  cfg.seed = 8;
  auto b = pretrain(task, cfg);
  NoGradGuard ng;
  Tensor z = b.f.forward(task.source.all());
  for (std::size_t k = 0; k < b.num_gm(); ++k) {
    Tensor p = gm_probs(b, z, k);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < task.source.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 3; ++j)
        if (p.at(i, j) > p.at(i, best)) best = j;
      correct += static_cast<int>(best) == task.source.labels[i];
    }
    EXPECT_GE(static_cast<double>(correct) / task.source.size(), 0.9) << "head " << k;
  }
}

TEST(Train, ZeroEpochsReturnsPretrainedBundle) {
  auto task = small_task(3);
  auto cfg = quick_config(3);
  cfg.max_epochs = 0;
  auto pre = pretrain(task, cfg);
  auto res = train(task, cfg, pre.clone());
  EXPECT_TRUE(res.log.epochs.empty());
  EXPECT_TRUE(res.log.schedule.entries.empty());
  EXPECT_EQ(snapshot(res.bundle.parameters()), snapshot(pre.parameters()));
}

TEST(Train, LogMatchesScheduleAndMetricsInRange) {
  auto task = small_task(3);
  auto cfg = quick_config(3);
  auto res = train(task, cfg, pretrain(task, cfg));
  ASSERT_EQ(res.log.epochs.size(), 3u);
  ASSERT_EQ(res.log.schedule.entries.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto& ep = res.log.epochs[e];
    EXPECT_EQ(ep.epoch, e + 1);
    EXPECT_EQ(ep.h, res.log.schedule.entries[e].h);
    EXPECT_EQ(ep.threshold_pairs, task.target.size() / 2);
    ASSERT_TRUE(ep.metrics.has_value());
    for (double v : {ep.metrics->os, ep.metrics->os_star, ep.metrics->unk, ep.metrics->h_score}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(res.log.audit.size(), 3 * task.target.size());
}

TEST(Train, NoCmmcFreezesGmHeads) {
  auto task = small_task(4);
  auto cfg = quick_config(4);
  cfg.flags.no_cmmc = true;
  auto pre = pretrain(task, cfg);
  auto before = snapshot(gm_parameters(pre));
  auto res = train(task, cfg, pre);
  EXPECT_EQ(snapshot(gm_parameters(res.bundle)), before);
  for (const auto& e : res.log.epochs) EXPECT_EQ(e.mixup_pairs, 0u);
}

TEST(Train, NoMixupAuditsZeroLambda) {
  auto task = small_task(4);
  auto cfg = quick_config(4);
  cfg.flags.no_mixup = true;
  auto res = train(task, cfg, pretrain(task, cfg));
  for (const auto& r : res.log.audit) {
    if (r.gated) EXPECT_EQ(r.lambda2, 0.0);
    else EXPECT_TRUE(std::isnan(r.lambda2));
  }
}

TEST(Train, ManualThresholdReplacesSelfTuned) {
  auto task = small_task(4);
  auto cfg = quick_config(4);
  cfg.manual_h = 0.7;
  auto res = train(task, cfg, pretrain(task, cfg));
  for (const auto& e : res.log.epochs) {
    EXPECT_EQ(e.h, 0.7);
    EXPECT_EQ(e.eval_h, 0.7);
  }
}

TEST(Train, FeatureExtractorFrozenDuringCmmcSteps) {
  auto task = small_task(5);
  auto cfg = quick_config(5);
  auto b = pretrain(task, cfg);
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < b.num_gm(); ++k) seeds.push_back(k);
  auto streams = make_classifier_streams(task, cfg.batch_size, seeds);
  for (int i = 0; i < 5; ++i) {
    auto f = snapshot(b.f.parameters());
    auto r = cmmc_step(b, task, streams, 0.3, 0.01, cfg.sgd, cfg.cmmc_options());
    EXPECT_GT(r.total_pairs(), 0u);
    EXPECT_EQ(snapshot(b.f.parameters()), f);
  }
}

TEST(Train, EpochOrderIsDmcThresholdCmmc) {
  // The threshold of each epoch must be computed from the G^C state after
  // that epoch's DMC block and before its CMMC block (which leaves G^C alone).
  auto task = small_task(6);
  auto cfg = quick_config(6);
  cfg.max_epochs = 2;
  Trainer tr(task, cfg, pretrain(task, cfg));
  tr.set_iteration(cfg.max_pre_iter);
  std::vector<double> recomputed;
  tr.on_epoch([&](const EpochLog& e, const ModelBundle& b) {
    recomputed.push_back(compute_threshold(gc_probs_of(b, task.target.all()), cfg.lambda1,
                                           derive_seed(cfg.seed, {kThresholdStream, e.epoch - 1}))
                             .h);
  });
  tr.train();
  ASSERT_EQ(recomputed.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(tr.log().epochs[e].h, recomputed[e]);
}

TEST(Train, Deterministic) {
  auto task = small_task(7);
  auto cfg = quick_config(7);
  auto a = train(task, cfg, pretrain(task, cfg));
  auto b = train(task, cfg, pretrain(task, cfg));
  EXPECT_EQ(snapshot(a.bundle.parameters()), snapshot(b.bundle.parameters()));
  ASSERT_EQ(a.log.epochs.size(), b.log.epochs.size());
  for (std::size_t e = 0; e < a.log.epochs.size(); ++e) {
    EXPECT_EQ(a.log.epochs[e].h, b.log.epochs[e].h);
    EXPECT_EQ(a.log.epochs[e].loss_adv, b.log.epochs[e].loss_adv);
    EXPECT_EQ(a.log.epochs[e].loss_cmmc, b.log.epochs[e].loss_cmmc);
  }
}

TEST(Train, RejectsMismatchedBundle) {
  auto task = small_task(7);
  auto cfg = quick_config(7);
  EXPECT_THROW(Trainer(task, cfg, make_bundle({4, 4, 5, {8}}, 0)), ContractError);
}

TEST(Predict, CommonnessGate) {
  auto b = passthrough_bundle(2, 3);
  // Identical saturated GM outputs: omega = 1, argmax of G^C common part = class 1.
  std::vector<double> x{0, 40, 0};
  EXPECT_EQ(predict(b, x, 0.9), 1);
  // GM outputs uniform over 2 classes: omega = 0.5.
  std::vector<double> u{0, 0, 5};
  EXPECT_EQ(predict(b, u, 0.6), kUnknownPrediction);
  // Boundary omega == h counts as common.
  EXPECT_EQ(predict(b, u, 0.5), 0);
}

TEST(Predict, GcRules) {
  auto b = passthrough_bundle(2, 2);
  std::vector<double> unk{0, 0, 5}, known{3, 0, 0};
  EXPECT_EQ(predict(b, unk, 0.5, DecisionRule::GcArgmax), kUnknownPrediction);
  EXPECT_EQ(predict(b, known, 0.5, DecisionRule::GcArgmax), 0);
  EXPECT_EQ(predict(b, unk, 0.5, DecisionRule::GcCommonMass), kUnknownPrediction);
  EXPECT_EQ(predict(b, known, 0.5, DecisionRule::GcCommonMass), 0);
  EXPECT_EQ(predict(b, known, 0.5, DecisionRule::EnsembleConfidence), 0);
  std::vector<double> flat{0, 0, 0};
  EXPECT_EQ(predict(b, flat, 0.6, DecisionRule::EnsembleConfidence), kUnknownPrediction);
}

TEST(Predict, IndependentOfThreadCount) {
  auto task = small_task(8);
  auto cfg = quick_config(8);
  auto res = train(task, cfg, pretrain(task, cfg));
  auto one = predict_dataset(res.bundle, task.target, 0.6, DecisionRule::Commonness, 1);
  for (std::size_t t : {2, 3, 7, 1000}) EXPECT_EQ(predict_dataset(res.bundle, task.target, 0.6, DecisionRule::Commonness, t), one);
}

TEST(Evaluate, RequiresLabelsAndMatchingShapes) {
  auto task = small_task(8);
  auto b = make_bundle({4, 3, 2, {8}}, 0);
  EXPECT_NO_THROW(evaluate(task, b, {}));
  auto unlabeled = task;
  std::fill(unlabeled.target.labels.begin(), unlabeled.target.labels.end(), kUnlabeled);
  EXPECT_THROW(evaluate(unlabeled, b, {}), ContractError);
  EXPECT_THROW(evaluate(task, make_bundle({4, 5, 2, {8}}, 0), {}), ContractError);
  EXPECT_THROW(evaluate(task, make_bundle({3, 3, 2, {8}}, 0), {}), ContractError);
}

TEST(Metrics, HandCases) {
  EXPECT_NEAR(h_score(0.7, 0.7), 0.7, 1e-15);
  EXPECT_NEAR(h_score(0.8, 0.6), 0.68571, 1e-5);
  EXPECT_EQ(h_score(0.9, 0.0), 0.0);
  EXPECT_EQ(h_score(0.0, 0.0), 0.0);

  // |C| = 2: class 0 all right, class 1 half right, unknown half right.
  std::vector<int> truth{0, 0, 1, 1, 2, 3};
  std::vector<int> pred{0, 0, 1, kUnknownPrediction, kUnknownPrediction, 1};
  auto m = compute_metrics(truth, pred, 2);
  EXPECT_NEAR(m.os, 2.0 / 3, 1e-15);
  EXPECT_NEAR(m.os_star, 0.75, 1e-15);
  EXPECT_NEAR(m.unk, 0.5, 1e-15);
  EXPECT_NEAR(m.h_score, 2 * 0.75 * 0.5 / 1.25, 1e-15);
}

TEST(Metrics, UnlabeledRowsIgnored) {
  std::vector<int> truth{0, kUnlabeled, 2};
  std::vector<int> pred{0, 1, kUnknownPrediction};
  auto m = compute_metrics(truth, pred, 2);
  EXPECT_EQ(m.os_star, 1.0);
  EXPECT_EQ(m.unk, 1.0);
  std::vector<int> none{kUnlabeled};
  std::vector<int> p1{0};
  EXPECT_THROW(compute_metrics(none, p1, 2), ContractError);
}
