#include <gtest/gtest.h>

#include <cmath>

#include "haed/optim.hpp"
#include "haed/train.hpp"
#include "test_util.hpp"

using namespace haed;
using namespace haed_test;

namespace {

std::size_t count_phase(const fs::path& csv, const std::string& phase) {
  std::size_t n = 0;
  for (const auto& l : lines(csv))
    if (split_csv(l).at(1) == phase) ++n;
  return n;
}

std::vector<std::string> rows_after(const fs::path& csv, std::size_t step) {
  std::vector<std::string> out;
  const auto ls = lines(csv);
  for (std::size_t i = 1; i < ls.size(); ++i)
    if (std::stoul(split_csv(ls[i]).at(0)) > step) out.push_back(ls[i]);
  return out;
}

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

// Scalar Adam with decoupled decay, written out independently.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double wd) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    return theta - lr * wd * theta - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

}  // namespace

TEST(Schedule, Examples) {
  const Schedule s{2000, 10000, 0.05};
  EXPECT_EQ(lr_at(s, 0, 0.002), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 2000, 0.002), 0.002);
  EXPECT_NEAR(lr_at(s, 10000, 0.002), 0.05 * 0.002, 1e-12);
  EXPECT_NEAR(lr_at(s, 1000, 0.002), 0.001, 1e-15);
  EXPECT_NEAR(lr_at(s, 6000, 1.0), 0.05 + 0.95 * 0.5, 1e-12);
}

TEST(Schedule, Errors) {
  EXPECT_EQ(code_of([] { lr_at(Schedule{10, 10, 0.05}, 0, 1.0); }), "InvalidSchedule");
  EXPECT_EQ(code_of([] { lr_at(Schedule{10, 5, 0.05}, 0, 1.0); }), "InvalidSchedule");
  EXPECT_EQ(code_of([] { lr_at(Schedule{0, 5, 0.05}, 6, 1.0); }), "OutOfRange");
}

TEST(Schedule, ContinuousAtWarmupAndMonotoneAfter) {
  const Schedule s{50, 400, 0.05};
  EXPECT_NEAR(lr_at(s, 49, 1.0), lr_at(s, 50, 1.0), 1.0 / 50 + 1e-12);
  double prev = lr_at(s, 50, 1.0);
  for (std::size_t t = 51; t <= 400; ++t) {
    const double cur = lr_at(s, t, 1.0);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
  const Schedule none{0, 100, 0.05};
  EXPECT_EQ(lr_at(none, 0, 1.0), 1.0);
}

TEST(AdamW, FirstStepClosedForm) {
  AdamW<double> opt({.weight_decay = 0.0});
  Tensor<double> theta({1}), grad({1}, 1.0);
  AdamSlot<double> s{Tensor<double>({1}), Tensor<double>({1})};
  opt.update(theta, grad, s, 0.1, 1 - 0.9, 1 - 0.999);
  EXPECT_NEAR(theta[0], -0.1, 1e-8);
}

TEST(AdamW, DecayOnly) {
  AdamW<double> opt({.weight_decay = 0.1});
  Tensor<double> theta({1}, 1.0), grad({1});
  AdamSlot<double> s{Tensor<double>({1}), Tensor<double>({1})};
  opt.update(theta, grad, s, 0.1, 1 - 0.9, 1 - 0.999);
  EXPECT_DOUBLE_EQ(theta[0], 0.99);
}

TEST(AdamW, TwoStepsMatchScalarReference) {
  ParamStore<double> ps;
  auto& p = ps.add("w", Tensor<double>({3}, std::vector<double>{0.5, -1.0, 2.0}), ParamGroup::main);
  AdamW<double> opt({.weight_decay = 0.01});
  opt.track(p);
  const std::vector<std::vector<double>> grads{{0.3, -0.2, 1.0}, {0.1, 0.4, -0.5}};
  std::vector<double> ref{0.5, -1.0, 2.0};
  std::vector<ScalarAdam> sa(3);
  for (const auto& g : grads) {
    for (std::size_t i = 0; i < 3; ++i) {
      p.grad[i] = g[i];
      ref[i] = sa[i].step(ref[i], g[i], 0.01, 0.01);
    }
    opt.step(ps, 0.5, 0.01);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value[i], ref[i], 1e-14);
  EXPECT_EQ(opt.step_count(), 2u);
}

TEST(AdamW, GroupsGetTheirOwnRate) {
  ParamStore<double> ps;
  auto& a = ps.add("a", Tensor<double>({1}), ParamGroup::enc_dec);
  auto& b = ps.add("b", Tensor<double>({1}), ParamGroup::main);
  a.grad[0] = b.grad[0] = 1.0;
  AdamW<double> opt({.weight_decay = 0.0});
  opt.track(a);
  opt.track(b);
  opt.step(ps, 0.002, 0.00035);
  EXPECT_NEAR(a.value[0], -0.002, 1e-10);
  EXPECT_NEAR(b.value[0], -0.00035, 1e-10);
}

TEST(AdamW, ZeroGradientDecaysGeometrically) {
  ParamStore<double> ps;
  auto& p = ps.add("w", Tensor<double>({2}, std::vector<double>{3.0, -4.0}), ParamGroup::main);
  AdamW<double> opt({.weight_decay = 0.2});
  opt.track(p);
  for (int n = 1; n <= 50; ++n) {
    opt.step(ps, 0.05, 0.05);
    EXPECT_NEAR(p.value[0], 3.0 * std::pow(1 - 0.05 * 0.2, n), 1e-12);
    EXPECT_NEAR(p.value[1], -4.0 * std::pow(1 - 0.05 * 0.2, n), 1e-12);
  }
}

TEST(AdamW, NonFiniteAborts) {
  AdamW<double> opt;
  Tensor<double> theta({1}), grad({1}, std::nan(""));
  AdamSlot<double> s{Tensor<double>({1}), Tensor<double>({1})};
  EXPECT_EQ(code_of([&] { opt.update(theta, grad, s, 0.1, 0.1, 0.001); }), "NonFinite");
}

TEST(Clip, PostClipNormWithinBoundOnRealGradients) {
  const auto cfg = tiny_config("/tmp/unused");
  HaedModel<float> m(cfg.model, 3);
  const auto docs = tiny_docs();
  BatchStream stream(docs, cfg.dataset.batch, 1);
  for (std::size_t i = 0; i < 5; ++i) {
    Graph<float> g;
    auto l = e2e_batch_loss(g, m, stream.batch(i));
    m.params().zero_grad();
    g.backward(l.loss);
    const float before = clip_global_norm(m.params(), 0.01);
    EXPECT_GT(before, 0.01f);
    std::vector<const Tensor<float>*> grads;
    m.params().for_each([&](const Parameter<float>& p) { grads.push_back(&p.grad); });
    EXPECT_LE(global_norm<float>(grads), 0.01 + 1e-9);
  }
}

TEST(TrainE2e, EvalCadenceAndArtifacts) {
  const auto dir = scratch("cadence");
  auto cfg = tiny_config(dir.string(), 10);
  cfg.run.eval_every = 5;
  const auto art = train_e2e(cfg, tiny_docs());
  EXPECT_EQ(art.steps, 10u);
  EXPECT_EQ(count_phase(art.metrics, "eval"), 2u);
  EXPECT_EQ(count_phase(art.metrics, "train"), 10u);
  EXPECT_EQ(lines(art.metrics)[0], "step,phase,loss_nats,bpt,lr_enc_dec,lr_main,wallclock_s,tokens_seen");
  EXPECT_TRUE(fs::exists(art.checkpoint));
  EXPECT_TRUE(fs::exists(manifest_path(art.checkpoint)));
  const Json resolved = Json::parse(slurp(art.resolved_config));
  EXPECT_EQ(resolved["run"]["steps"], 10);
  EXPECT_EQ(resolved["optimizer"]["lr_main"], 0.00035);
  const auto meta = read_manifest(art.checkpoint);
  EXPECT_EQ(meta.step, 10u);
  EXPECT_EQ(meta.config_hash, config_hash(cfg));
  EXPECT_FALSE(meta.parameter_names.empty());
}

TEST(TrainE2e, SameSeedSameMetrics) {
  const auto a = scratch("seed_a"), b = scratch("seed_b"), c = scratch("seed_c");
  auto cfg = tiny_config(a.string(), 8);
  cfg.run.eval_every = 4;
  const auto docs = tiny_docs();
  train_e2e(cfg, docs);
  cfg.run.out_dir = b.string();
  train_e2e(cfg, docs);
  cfg.run.out_dir = c.string();
  cfg.run.seed = 1;
  train_e2e(cfg, docs);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
  EXPECT_NE(slurp(a / "metrics.csv"), slurp(c / "metrics.csv"));
}

TEST(TrainE2e, ResumeFromMidRunCheckpointMatches) {
  const auto a = scratch("resume_a"), b = scratch("resume_b");
  auto cfg = tiny_config(a.string(), 10);
  cfg.run.eval_every = 3;
  cfg.run.checkpoint_every = 5;
  const auto docs = tiny_docs();
  train_e2e(cfg, docs);
  ASSERT_TRUE(fs::exists(a / "checkpoint_step5.bin"));
  cfg.run.out_dir = b.string();
  TrainOptions opts;
  opts.resume = a / "checkpoint_step5.bin";
  const auto art = train_e2e(cfg, docs, opts);
  EXPECT_EQ(art.steps, 10u);
  const auto expect = rows_after(a / "metrics.csv", 5), got = rows_after(b / "metrics.csv", 5);
  EXPECT_EQ(got, expect);
  EXPECT_EQ(got.size(), 5u + 3u);  // evals at 6, 9 and the final step
  EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
}

TEST(TrainE2e, ResumeRejectsOtherConfigOrPhase) {
  const auto a = scratch("resume_bad"), b = scratch("resume_bad_b");
  auto cfg = tiny_config(a.string(), 6);
  const auto docs = tiny_docs();
  train_e2e(cfg, docs);
  cfg.run.out_dir = b.string();
  cfg.optimizer.lr_main = 0.001;
  TrainOptions opts;
  opts.resume = a / "checkpoint.bin";
  EXPECT_EQ(code_of([&] { train_e2e(cfg, docs, opts); }), "IncompatibleCheckpoint");
  cfg.optimizer.lr_main = 0.00035;
  EXPECT_EQ(code_of([&] { pretrain_iem(cfg, docs, opts); }), "IncompatibleCheckpoint");
}

TEST(TrainE2e, DivergenceKeepsLastGoodCheckpoint) {
  const auto dir = scratch("diverge");
  auto cfg = tiny_config(dir.string(), 10);
  cfg.optimizer.lr_enc_dec = cfg.optimizer.lr_main = 1e38;
  cfg.schedule.warmup_steps = 0;
  EXPECT_EQ(code_of([&] { train_e2e(cfg, tiny_docs()); }), "TrainingDiverged");
  EXPECT_TRUE(fs::exists(dir / "last_good.bin"));
  HaedModel<float> m(cfg.model, 0);
  load_checkpoint(dir / "last_good.bin", m, static_cast<AdamW<float>*>(nullptr));
  m.params().for_each([](const Parameter<float>& p) { EXPECT_TRUE(p.value.all_finite()) << p.name; });
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto dir = scratch("corrupt");
  const auto cfg = tiny_config(dir.string());
  HaedModel<float> m(cfg.model, 1);
  CheckpointMeta meta{config_hash(cfg), arch_hash(cfg.model), Phase::train, 0, 0, 0.0, {}, to_json(cfg)};
  save_checkpoint(dir / "c.bin", m, static_cast<const AdamW<float>*>(nullptr), meta);
  std::string bytes = slurp(dir / "c.bin");
  std::ofstream(dir / "c.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "c.bin", m, static_cast<AdamW<float>*>(nullptr)); }), "Truncated");
  std::ofstream(dir / "c.bin", std::ios::binary) << "XXXX" << bytes.substr(4);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "c.bin", m, static_cast<AdamW<float>*>(nullptr)); }), "BadCheckpoint");
}

TEST(Pretrain, NoDecoderAndFourBatchesPerStep) {
  const auto dir = scratch("pretrain");
  auto cfg = tiny_config(dir.string(), 4);
  cfg.objective.kind = ObjectiveKind::iem;
  const auto docs = tiny_docs(2, 40000);
  const auto art = pretrain_iem(cfg, docs);
  const auto meta = read_manifest(art.checkpoint);
  EXPECT_EQ(meta.phase, Phase::pretrain);
  for (const auto& n : meta.parameter_names) EXPECT_FALSE(n.starts_with("decoder.")) << n;

  // tokens_seen after step s covers batches 0 .. 4s-1 of the pretrain stream.
  const auto splits = split_corpus(docs, cfg.dataset.eval_fraction);
  BatchStream stream(splits.pretrain, cfg.dataset.batch, detail::data_seed(cfg.run.seed));
  const auto ls = lines(art.metrics);
  std::size_t expect = 0, step = 0;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto f = split_csv(ls[i]);
    if (f[1] != "iem") continue;
    for (std::size_t j = 0; j < 4; ++j) expect += stream.batch(4 * step + j).real_tokens();
    ++step;
    EXPECT_EQ(std::stoul(f[7]), expect);
    EXPECT_EQ(f[3], "");
  }
  EXPECT_EQ(step, 4u);
  EXPECT_EQ(count_phase(art.metrics, "iem_eval"), 1u);
}

TEST(Pretrain, SameSeedSameMetrics) {
  const auto a = scratch("pre_a"), b = scratch("pre_b");
  auto cfg = tiny_config(a.string(), 4);
  const auto docs = tiny_docs(2, 40000);
  pretrain_iem(cfg, docs);
  cfg.run.out_dir = b.string();
  pretrain_iem(cfg, docs);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
}

TEST(Finetune, LoadsEncoderAndMainExactlyWithFreshDecoder) {
  const auto pre = scratch("ft_pre"), ft = scratch("ft_run");
  auto cfg = tiny_config(pre.string(), 4);
  const auto docs = tiny_docs(2, 40000);
  const auto pre_art = pretrain_iem(cfg, docs);

  HaedModel<float> pretrained(cfg.model, 0, false);
  load_checkpoint(pre_art.checkpoint, pretrained, static_cast<AdamW<float>*>(nullptr));
  cfg.run.seed = 9;
  HaedModel<float> m(cfg.model, cfg.run.seed), fresh(cfg.model, cfg.run.seed);
  load_checkpoint(pre_art.checkpoint, m, static_cast<AdamW<float>*>(nullptr), "decoder.");
  m.params().for_each([&](const Parameter<float>& p) {
    if (p.name.starts_with("decoder."))
      EXPECT_TRUE(p.value == fresh.params().find(p.name)->value) << p.name;
    else
      EXPECT_TRUE(p.value == pretrained.params().find(p.name)->value) << p.name;
  });

  cfg.run.out_dir = ft.string();
  TrainOptions opts;
  opts.pretrained = pre_art.checkpoint;
  const auto art = finetune(cfg, docs, opts);
  EXPECT_EQ(read_manifest(art.checkpoint).phase, Phase::finetune);
  EXPECT_EQ(count_phase(art.metrics, "finetune"), 4u);
  EXPECT_FALSE(split_csv(lines(art.metrics)[1])[3].empty());
}

TEST(Finetune, RejectsOtherArchitectureAndNeedsCheckpoint) {
  const auto pre = scratch("ft_arch"), ft = scratch("ft_arch_run");
  auto cfg = tiny_config(pre.string(), 4);
  const auto docs = tiny_docs(2, 40000);
  const auto pre_art = pretrain_iem(cfg, docs);
  cfg.run.out_dir = ft.string();
  cfg.model.main.layers = 3;
  TrainOptions opts;
  opts.pretrained = pre_art.checkpoint;
  EXPECT_EQ(code_of([&] { finetune(cfg, docs, opts); }), "IncompatibleCheckpoint");
  EXPECT_EQ(code_of([&] { finetune(cfg, docs, {}); }), "MissingFlag");
  // A different decoder width is compatible.
  cfg.model.main.layers = 2;
  cfg.model.decoder.units = 24;
  EXPECT_NO_THROW(finetune(cfg, docs, opts));
}

TEST(Splits, HalvesAreDisjointAndContiguous) {
  const auto docs = tiny_docs(3, 20000);
  const auto s = split_corpus(docs, 0.1);
  ASSERT_EQ(s.pretrain.size(), 1u);
  ASSERT_EQ(s.finetune.size(), 1u);
  EXPECT_EQ(s.pretrain[0].size() + s.finetune[0].size(), s.train[0].size());
  EXPECT_EQ(s.train[0].size() + s.eval[0].size(), docs[0].size());
  std::vector<std::uint8_t> joined = s.pretrain[0].tokens;
  joined.insert(joined.end(), s.finetune[0].tokens.begin(), s.finetune[0].tokens.end());
  EXPECT_EQ(joined, s.train[0].tokens);
}

TEST(Metrics, NumberFormatting) {
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(8.005624549193878), "8.005624549");
  EXPECT_EQ(format_number(3.5e-05), "3.5e-05");
}

TEST(Resume, PretrainAndFinetuneMatchUninterruptedRuns) {
  const auto docs = tiny_docs(2, 40000);
  const auto pa = scratch("rp_a"), pb = scratch("rp_b"), fa = scratch("rf_a"), fb = scratch("rf_b");
  auto cfg = tiny_config(pa.string(), 6);
  cfg.run.checkpoint_every = 3;
  const auto pre = pretrain_iem(cfg, docs);
  cfg.run.out_dir = pb.string();
  TrainOptions resume;
  resume.resume = pa / "checkpoint_step3.bin";
  pretrain_iem(cfg, docs, resume);
  EXPECT_EQ(rows_after(pa / "metrics.csv", 3), rows_after(pb / "metrics.csv", 3));

  cfg.run.out_dir = fa.string();
  TrainOptions from;
  from.pretrained = pre.checkpoint;
  finetune(cfg, docs, from);
  cfg.run.out_dir = fb.string();
  TrainOptions mid;
  mid.resume = fa / "checkpoint_step3.bin";
  finetune(cfg, docs, mid);
  EXPECT_EQ(rows_after(fa / "metrics.csv", 3), rows_after(fb / "metrics.csv", 3));
  EXPECT_EQ(slurp(fa / "checkpoint.bin"), slurp(fb / "checkpoint.bin"));
}
