#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "haed/eval.hpp"
#include "test_util.hpp"

using namespace haed;
using namespace haed_test;

namespace {

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

double order0(const std::string& s) {
  return order0_baseline(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace

TEST(Order0, Examples) {
  EXPECT_EQ(order0("aaaa"), 0.0);
  EXPECT_DOUBLE_EQ(order0("abab"), 1.0);
  EXPECT_DOUBLE_EQ(order0("abcd"), 2.0);
  EXPECT_EQ(code_of([] { order0(""); }), "EmptySlice");
}

TEST(Order0, UniformMegabyteIsEightBits) {
  std::mt19937_64 rng(17);
  std::vector<std::uint8_t> bytes(1 << 20);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(rng() >> 56);
  EXPECT_NEAR(order0_baseline(bytes), 8.0, 0.01);
}

TEST(Order0, DocsOverloadConcatenates) {
  const auto docs = tiny_docs(4, 3000);
  EXPECT_DOUBLE_EQ(order0_baseline(docs), order0_baseline(docs[0].tokens));
}

TEST(EvaluateBpt, ZeroLogitDecoderGivesLog2Of257) {
  auto cfg = tiny_config("/tmp/unused");
  cfg.model.decoder.units = 0;
  HaedModel<double> m(cfg.model, 1);
  const auto r = evaluate_bpt(m, tiny_docs(5, 2000), 8, 64);
  EXPECT_NEAR(r.bpt, std::log2(257.0), 1e-12);
  EXPECT_EQ(r.tokens, 2000u);
}

TEST(EvaluateBpt, CheckpointEvaluationIsPure) {
  const auto dir = scratch("eval_pure");
  const auto docs = tiny_docs();
  const auto art = train_e2e(tiny_config(dir.string(), 6), docs);
  const auto a = evaluate_bpt(art.checkpoint, docs), b = evaluate_bpt(art.checkpoint, docs);
  EXPECT_EQ(a.bpt, b.bpt);
  EXPECT_EQ(a.total_nats, b.total_nats);
  EXPECT_TRUE(std::isfinite(a.bpt));
  std::size_t tokens = 0;
  for (const auto& d : docs) tokens += d.tokens.size();
  EXPECT_EQ(a.tokens, tokens);
}

TEST(EvaluateBpt, Errors) {
  auto cfg = tiny_config("/tmp/unused");
  HaedModel<float> no_decoder(cfg.model, 1, false), m(cfg.model, 1);
  EXPECT_EQ(code_of([&] { evaluate_bpt(no_decoder, tiny_docs(), 8, 64); }), "InvalidState");
  EXPECT_EQ(code_of([&] { evaluate_bpt(m, std::vector<SegmentedSequence>{}, 8, 64); }), "EmptySlice");
}

TEST(Timing, FractionsSumToOneAndStubDecoderIsNegligible) {
  auto cfg = tiny_config("/tmp/unused");
  const auto docs = tiny_docs();
  for (std::size_t units : {0u, 16u}) {
    cfg.model.decoder.units = units;
    const auto r = timing_breakdown(cfg, docs, 20);
    double sum = 0;
    for (double f : r.fraction) {
      EXPECT_GE(f, 0.0);
      EXPECT_LE(f, 1.0);
      sum += f;
    }
    EXPECT_NEAR(sum, 1.0, 0.01);
    EXPECT_EQ(r.trials, 20u);
    EXPECT_EQ(r.warmup_trials, 5u);
    // The stub still allocates its 257-wide zero logits.
    if (units == 0) EXPECT_LT(r.fraction_of(Component::decoder), 0.05);
    else EXPECT_GT(r.fraction_of(Component::decoder), 0.15);
  }
  EXPECT_EQ(code_of([&] { timing_breakdown(cfg, docs, 19); }), "InvalidValue");
}

TEST(Timing, CsvLayout) {
  const auto dir = scratch("timing_csv");
  TimingReport r;
  r.ms = {4, 1, 2, 3};  // indexed by Component: other, encoder, main, decoder
  r.fraction = {0.4, 0.1, 0.2, 0.3};
  r.total_ms = 10;
  r.trials = 20;
  r.warmup_trials = 5;
  write_timing_csv(dir / "timing.csv", {{"w16", 16, r}});
  const auto ls = lines(dir / "timing.csv");
  ASSERT_EQ(ls.size(), 2u);
  EXPECT_EQ(ls[0],
            "label,decoder_units,encoder_ms,main_ms,decoder_ms,other_ms,total_ms,encoder_frac,main_frac,"
            "decoder_frac,other_frac,trials,warmup_trials,reliable");
  EXPECT_EQ(ls[1], "w16,16,1,2,3,4,10,0.1,0.2,0.3,0.4,20,5,true");
}

TEST(Sweep, DecoderGridWritesOneRowPerPoint) {
  const auto dir = scratch("sweep_dec");
  SweepSpec spec;
  spec.axis = SweepAxis::decoder_units;
  spec.values = {8, 16, 32};
  spec.base = tiny_config(dir.string(), 4);
  spec.out_dir = dir;
  const auto res = run_sweep(spec, tiny_docs());
  ASSERT_EQ(res.points.size(), 3u);
  const auto ls = lines(res.csv);
  ASSERT_EQ(ls.size(), 4u);
  EXPECT_EQ(ls[0], "point_id,axis,value,phase,final_loss_nats,final_bpt,decoder_frac,wallclock_s,seed,config_hash,status");
  std::set<std::uint64_t> seeds;
  for (const auto& p : res.points) {
    EXPECT_EQ(p.status, "ok") << p.error;
    EXPECT_EQ(p.config_hash.size(), 16u);
    EXPECT_TRUE(std::isfinite(p.final_bpt));
    seeds.insert(p.seed);
    EXPECT_TRUE(fs::exists(dir / ("point" + std::to_string(p.point_id)) / "metrics.csv"));
  }
  EXPECT_EQ(seeds.size(), 3u);
}

TEST(Sweep, FailingPointIsRecordedNotFatal) {
  const auto dir = scratch("sweep_fail");
  SweepSpec spec;
  spec.axis = SweepAxis::encoder_units;
  spec.values = {0, 8};
  spec.base = tiny_config(dir.string(), 4);
  spec.out_dir = dir;
  const auto res = run_sweep(spec, tiny_docs());
  ASSERT_EQ(res.points.size(), 2u);
  EXPECT_EQ(res.points[0].status, "failed");
  EXPECT_EQ(res.points[1].status, "ok");
  EXPECT_EQ(split_csv(lines(res.csv)[1]).back(), "failed");
}

TEST(Sweep, RegimeEmitsBothSeries) {
  const auto dir = scratch("sweep_regime");
  SweepSpec spec;
  spec.axis = SweepAxis::regime;
  spec.base = tiny_config(dir.string(), 4);
  spec.out_dir = dir;
  const auto res = run_sweep(spec, tiny_docs(2, 40000));
  ASSERT_EQ(res.points.size(), 3u);
  EXPECT_EQ(res.points[0].phase, "pretrain+finetune");
  EXPECT_EQ(res.points[1].phase, "e2e");
  EXPECT_EQ(res.points[2].phase, "finetune");
  EXPECT_EQ(res.points[2].value, "random_init");
  for (const auto& p : res.points) EXPECT_EQ(p.status, "ok") << p.error;
  EXPECT_EQ(res.points[0].seed, res.points[2].seed);
  EXPECT_EQ(lines(res.csv).size(), 4u);
}

TEST(Sweep, AxisNames) {
  for (auto a : {SweepAxis::encoder_units, SweepAxis::decoder_units, SweepAxis::regime})
    EXPECT_EQ(parse_axis(axis_name(a)), a);
  EXPECT_EQ(code_of([] { parse_axis("width"); }), "InvalidValue");
}
