#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haed/train.hpp"

namespace haed {

// ---------------------------------------------------------------------------
// Bits per token

/// Model restored from a checkpoint, built from the configuration recorded
/// in its manifest.
template <typename T = float>
struct LoadedModel {
  ExperimentConfig config;
  CheckpointMeta meta;
  std::unique_ptr<HaedModel<T>> model;
};

template <typename T = float>
LoadedModel<T> load_model(const fs::path& ckpt) {
  LoadedModel<T> out;
  out.meta = read_manifest(ckpt);
  out.config = resolve_config(out.meta.config);
  out.model = std::make_unique<HaedModel<T>>(out.config.model, out.config.run.seed,
                                             out.meta.phase != Phase::pretrain);
  load_checkpoint(ckpt, *out.model, static_cast<AdamW<T>*>(nullptr));
  return out;
}

/// Teacher-forced bits per real token of `docs` under a decoder-bearing model.
template <typename T>
LossReport evaluate_bpt(const HaedModel<T>& model, const std::vector<SegmentedSequence>& docs,
                        std::size_t window, std::size_t max_segments) {
  require(model.has_decoder(), "InvalidState", "bits per token need a decoder");
  std::size_t segs = 0;
  for (const auto& d : docs) segs += d.size();
  require(segs > 0, "EmptySlice", "evaluation slice has no segments");
  return evaluate_batches(model, sequential_batches(docs, window, model.config().k, max_segments));
}

template <typename T = float>
LossReport evaluate_bpt(const fs::path& ckpt, const std::vector<SegmentedSequence>& docs) {
  LoadedModel<T> m = load_model<T>(ckpt);
  return evaluate_bpt(*m.model, docs, m.config.dataset.batch.window, m.config.dataset.batch.count);
}

/// Empirical unigram entropy of the bytes, in bits per token.
inline double order0_baseline(std::span<const std::uint8_t> bytes) {
  require(!bytes.empty(), "EmptySlice", "order-0 baseline of an empty slice");
  std::array<std::size_t, 256> counts{};
  for (auto b : bytes) ++counts[b];
  const double n = static_cast<double>(bytes.size());
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return h;
}

inline double order0_baseline(const std::vector<SegmentedSequence>& docs) {
  std::vector<std::uint8_t> all;
  for (const auto& d : docs) all.insert(all.end(), d.tokens.begin(), d.tokens.end());
  return order0_baseline(all);
}

// ---------------------------------------------------------------------------
// Component timing

struct TimingReport {
  /// Mean forward+backward milliseconds per batch, indexed by Component.
  std::array<double, kComponentCount> ms{};
  std::array<double, kComponentCount> fraction{};
  std::size_t trials = 0;
  std::size_t warmup_trials = 0;
  double total_ms = 0.0;
  double timer_resolution_s = 0.0;
  bool reliable = true;

  double ms_of(Component c) const { return ms[static_cast<std::size_t>(c)]; }
  double fraction_of(Component c) const { return fraction[static_cast<std::size_t>(c)]; }
};

namespace detail {

inline double measured_timer_resolution() {
  using clock = std::chrono::steady_clock;
  double best = 1.0;
  for (int i = 0; i < 64; ++i) {
    const auto a = clock::now();
    auto b = clock::now();
    while (b == a) b = clock::now();
    best = std::min(best, std::chrono::duration<double>(b - a).count());
  }
  return best;
}

}  // namespace detail

/// Times encoder, main model, decoder and everything else (loss, clipping,
/// tape bookkeeping) over repeated forward+backward passes of one fixed batch.
template <typename T = float>
TimingReport timing_breakdown(const ModelConfig& model_cfg, const Batch& batch, std::size_t trials,
                              std::size_t warmup = 5, std::uint64_t seed = 0) {
  require(trials >= 20, "InvalidValue", "timing needs at least 20 trials");
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
  HaedModel<T> model(model_cfg, seed, true);
  TimingReport r;
  r.trials = trials;
  r.warmup_trials = warmup;
  r.timer_resolution_s = detail::measured_timer_resolution();
  std::array<double, kComponentCount> sum{};
  double total = 0.0, shortest = 1e300;
  for (std::size_t t = 0; t < warmup + trials; ++t) {
    Graph<T> g(true);
    g.enable_backward_timing(true);
    const auto a = clock::now();
    Var<T> enc = model.encode(g, batch.tokens, batch.lengths);
    const auto b = clock::now();
    Var<T> ctx = model.main_forward(g, enc, batch.window_sizes);
    const auto c = clock::now();
    DecodeResult<T> d = model.decode(g, ctx, batch.tokens, batch.lengths);
    const auto e = clock::now();
    LossTerm<T> l = e2e_loss(d.logits, std::move(d.targets), batch.segment_count());
    model.params().zero_grad();
    g.backward(l.loss);
    clip_global_norm(model.params(), 1.0);
    const auto f = clock::now();
    if (t < warmup) continue;
    const double whole = secs(a, f);
    const double enc_s = secs(a, b) + g.backward_seconds(Component::encoder);
    const double main_s = secs(b, c) + g.backward_seconds(Component::main);
    const double dec_s = secs(c, e) + g.backward_seconds(Component::decoder);
    sum[static_cast<std::size_t>(Component::encoder)] += enc_s;
    sum[static_cast<std::size_t>(Component::main)] += main_s;
    sum[static_cast<std::size_t>(Component::decoder)] += dec_s;
    sum[static_cast<std::size_t>(Component::other)] += std::max(0.0, whole - enc_s - main_s - dec_s);
    total += whole;
    shortest = std::min(shortest, whole);
  }
  double parts = 0.0;
  for (double s : sum) parts += s;
  for (std::size_t i = 0; i < kComponentCount; ++i) {
    r.ms[i] = 1e3 * sum[i] / static_cast<double>(trials);
    r.fraction[i] = parts > 0 ? sum[i] / parts : 0.0;
  }
  r.total_ms = 1e3 * total / static_cast<double>(trials);
  r.reliable = r.timer_resolution_s <= 0.01 * shortest;
  return r;
}

template <typename T = float>
TimingReport timing_breakdown(const ExperimentConfig& cfg, const std::vector<SegmentedSequence>& docs,
                              std::size_t trials, std::size_t warmup = 5) {
  BatchStream stream(docs, cfg.dataset.batch, detail::data_seed(cfg.run.seed));
  return timing_breakdown<T>(cfg.model, stream.batch(0), trials, warmup, cfg.run.seed);
}

struct TimingRow {
  std::string label;
  std::size_t decoder_units = 0;
  TimingReport report;
};

inline void write_timing_csv(const fs::path& path, const std::vector<TimingRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), "IoError", "cannot write " + path.string());
  os << "label,decoder_units,encoder_ms,main_ms,decoder_ms,other_ms,total_ms,encoder_frac,main_frac,"
        "decoder_frac,other_frac,trials,warmup_trials,reliable\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    os << row.label << ',' << row.decoder_units;
    for (Component c : {Component::encoder, Component::main, Component::decoder, Component::other})
      os << ',' << format_number(r.ms_of(c));
    os << ',' << format_number(r.total_ms);
    for (Component c : {Component::encoder, Component::main, Component::decoder, Component::other})
      os << ',' << format_number(r.fraction_of(c));
    os << ',' << r.trials << ',' << r.warmup_trials << ',' << (r.reliable ? "true" : "false") << "\n";
  }
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis : std::uint8_t { encoder_units, decoder_units, regime };

inline const char* axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::encoder_units: return "encoder_units";
    case SweepAxis::decoder_units: return "decoder_units";
    case SweepAxis::regime: return "regime";
  }
  return "";
}

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "encoder_units") return SweepAxis::encoder_units;
  if (s == "decoder_units") return SweepAxis::decoder_units;
  if (s == "regime") return SweepAxis::regime;
  fail("InvalidValue", "unknown sweep axis \"" + s + "\"");
}

struct SweepSpec {
  SweepAxis axis = SweepAxis::decoder_units;
  /// Widths for the unit axes; ignored for the regime axis.
  std::vector<std::size_t> values;
  ExperimentConfig base;
  /// Timing trials per point for decoder_frac; 0 skips timing.
  std::size_t timing_trials = 0;
  /// Regime axis: IEM pretraining steps; 0 uses run.steps.
  std::size_t pretrain_steps = 0;
  fs::path out_dir = "runs/sweep";
};

struct SweepPoint {
  std::size_t point_id = 0;
  std::string axis;
  std::string value;
  std::string phase;
  double final_loss_nats = std::numeric_limits<double>::quiet_NaN();
  double final_bpt = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> decoder_frac;
  double wallclock_s = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string status = "ok";
  std::string error;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::decoder_units;
  std::vector<SweepPoint> points;
  fs::path csv;
};

inline void write_sweep_csv(const fs::path& path, const std::vector<SweepPoint>& points) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), "IoError", "cannot write " + path.string());
  os << "point_id,axis,value,phase,final_loss_nats,final_bpt,decoder_frac,wallclock_s,seed,config_hash,status\n";
  auto num = [](double v) { return std::isfinite(v) ? format_number(v) : std::string(); };
  for (const auto& p : points) {
    os << p.point_id << ',' << p.axis << ',' << p.value << ',' << p.phase << ',' << num(p.final_loss_nats) << ','
       << num(p.final_bpt) << ',' << (p.decoder_frac ? format_number(*p.decoder_frac) : "") << ','
       << format_number(p.wallclock_s) << ',' << p.seed << ',' << p.config_hash << ',' << p.status << "\n";
  }
}

namespace detail {

inline std::uint64_t point_seed(std::uint64_t base, std::size_t id) {
  return fnv1a(std::to_string(base) + ":" + std::to_string(id));
}

template <typename Fn>
void run_point(SweepPoint& p, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    p.status = "failed";
    p.error = e.code() + ": " + e.what();
  }
}

}  // namespace detail

/// Runs each grid point with its own seed and output directory, writing one
/// CSV row per point. The regime axis runs IEM pretraining plus fine-tuning,
/// end-to-end training on the same wall-clock budget, and fine-tuning from
/// random encoder/main weights on the same step budget.
template <typename T = float>
SweepResult run_sweep(const SweepSpec& spec, const std::vector<SegmentedSequence>& docs) {
  fs::create_directories(spec.out_dir);
  SweepResult res;
  res.axis = spec.axis;
  res.csv = spec.out_dir / "sweep.csv";
  const CorpusSplits splits = split_corpus(docs, spec.base.dataset.eval_fraction);

  auto point_cfg = [&](std::size_t id) {
    ExperimentConfig c = spec.base;
    c.run.seed = detail::point_seed(spec.base.run.seed, id);
    c.run.out_dir = (spec.out_dir / ("point" + std::to_string(id))).string();
    return c;
  };
  auto fill = [&](SweepPoint& p, const ExperimentConfig& c, const RunArtifacts& a) {
    p.final_loss_nats = a.final_eval.mean_nats;
    p.final_bpt = a.final_eval.bpt;
    p.wallclock_s += a.wallclock_s;
    p.config_hash = config_hash(c);
  };

  if (spec.axis != SweepAxis::regime) {
    require(!spec.values.empty(), "InvalidValue", "sweep needs at least one value");
    for (std::size_t id = 0; id < spec.values.size(); ++id) {
      const std::size_t v = spec.values[id];
      ExperimentConfig c = point_cfg(id);
      if (spec.axis == SweepAxis::decoder_units) {
        c.model.decoder.units = v;
      } else if (c.model.encoder.kind == EncoderKind::rnn) {
        c.model.encoder.rnn_units = v;
      } else {
        for (auto& w : c.model.encoder.mlp_hidden) w = v;
      }
      SweepPoint p{id, axis_name(spec.axis), std::to_string(v), "e2e", {}, {}, {}, 0.0, 0, {}, "ok", {}};
      p.seed = c.run.seed;
      p.config_hash = config_hash(c);
      detail::run_point(p, [&] {
        fill(p, c, run_procedure<T>(c, Phase::train, splits.train, splits.eval));
        if (spec.timing_trials > 0)
          p.decoder_frac = timing_breakdown<T>(c, splits.train, spec.timing_trials).fraction_of(Component::decoder);
      });
      res.points.push_back(std::move(p));
      write_sweep_csv(res.csv, res.points);
    }
    return res;
  }

  // (a) pretrain on one half, fine-tune on the other.
  SweepPoint staged{0, axis_name(spec.axis), "decoupled", "pretrain+finetune", {}, {}, {}, 0.0, 0, {}, "ok", {}};
  ExperimentConfig pre = point_cfg(0);
  pre.run.out_dir += "/pretrain";
  if (spec.pretrain_steps > 0) pre.run.steps = spec.pretrain_steps;
  ExperimentConfig fine = point_cfg(0);
  fine.run.out_dir += "/finetune";
  staged.seed = pre.run.seed;
  staged.config_hash = config_hash(fine);
  std::size_t finetune_steps = 0;
  detail::run_point(staged, [&] {
    const RunArtifacts a = run_procedure<T>(pre, Phase::pretrain, splits.pretrain, splits.eval);
    staged.wallclock_s += a.wallclock_s;
    TrainOptions o;
    o.pretrained = a.checkpoint;
    const RunArtifacts b = run_procedure<T>(fine, Phase::finetune, splits.finetune, splits.eval, o);
    fill(staged, fine, b);
    finetune_steps = b.steps;
  });
  const double budget = staged.wallclock_s;
  res.points.push_back(staged);

  // (b) end-to-end on the whole training slice, same wall-clock budget.
  SweepPoint e2e{1, axis_name(spec.axis), "wallclock_matched", "e2e", {}, {}, {}, 0.0, 0, {}, "ok", {}};
  ExperimentConfig ec = point_cfg(1);
  if (budget > 0) ec.run.max_wallclock_s = budget;
  e2e.seed = ec.run.seed;
  e2e.config_hash = config_hash(ec);
  detail::run_point(e2e, [&] { fill(e2e, ec, run_procedure<T>(ec, Phase::train, splits.train, splits.eval)); });
  res.points.push_back(e2e);

  // (c) fine-tuning budget from random encoder/main weights. Shares the seed
  // of (a) so data order and decoder init match and only the start differs.
  SweepPoint rnd{2, axis_name(spec.axis), "random_init", "finetune", {}, {}, {}, 0.0, 0, {}, "ok", {}};
  ExperimentConfig rc = point_cfg(2);
  rc.run.seed = fine.run.seed;
  if (finetune_steps > 0) rc.run.steps = finetune_steps;
  rnd.seed = rc.run.seed;
  rnd.config_hash = config_hash(rc);
  detail::run_point(rnd, [&] { fill(rnd, rc, run_procedure<T>(rc, Phase::finetune, splits.finetune, splits.eval)); });
  res.points.push_back(rnd);

  write_sweep_csv(res.csv, res.points);
  return res;
}

}  // namespace haed
