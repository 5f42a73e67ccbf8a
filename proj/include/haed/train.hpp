#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "haed/config.hpp"
#include "haed/numeric.hpp"
#include "haed/objectives.hpp"
#include "haed/optim.hpp"

namespace haed {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Corpus loading and splits

/// Loads and segments the configured corpus. Text is one document; every
/// image of a container is its own document.
inline std::vector<SegmentedSequence> load_corpus(const DatasetConfig& d, const fs::path& path) {
  std::vector<SegmentedSequence> docs;
  if (d.kind == Source::text) {
    docs.push_back(segment(load_text_corpus(path), d.hierarchy));
  } else {
    for (const auto& img : load_image_corpus(path)) docs.push_back(segment(img, d.hierarchy));
  }
  return docs;
}

struct CorpusSplits {
  std::vector<SegmentedSequence> train;     // everything but the eval tail
  std::vector<SegmentedSequence> pretrain;  // first half of train
  std::vector<SegmentedSequence> finetune;  // second half of train
  std::vector<SegmentedSequence> eval;
};

inline CorpusSplits split_corpus(const std::vector<SegmentedSequence>& docs, double eval_fraction) {
  CorpusSplits s;
  s.train = slice_corpus(docs, 0.0, 1.0 - eval_fraction);
  s.eval = slice_corpus(docs, 1.0 - eval_fraction, 1.0);
  s.pretrain = slice_corpus(s.train, 0.0, 0.5);
  s.finetune = slice_corpus(s.train, 0.5, 1.0);
  require(!s.train.empty(), "EmptyCorpus", "training slice is empty");
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

enum class Phase : std::uint8_t { train, pretrain, finetune };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::train: return "train";
    case Phase::pretrain: return "pretrain";
    case Phase::finetune: return "finetune";
  }
  return "train";
}

inline Phase parse_phase(const std::string& s) {
  if (s == "train") return Phase::train;
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  fail("BadCheckpoint", "unknown checkpoint phase \"" + s + "\"");
}

struct CheckpointMeta {
  std::string config_hash;
  std::string arch_hash;
  Phase phase = Phase::train;
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  double wallclock_s = 0.0;
  std::vector<std::string> parameter_names;
  Json config;
};

inline fs::path manifest_path(const fs::path& ckpt) {
  fs::path p = ckpt;
  p.replace_extension(".json");
  return p;
}

namespace detail {

template <typename V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  require(static_cast<bool>(is), "Truncated", "checkpoint ends early");
  return v;
}

template <typename T>
void put_values(std::ostream& os, const Tensor<T>& t) {
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename T>
void take_values(std::istream& is, Tensor<T>& t) {
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  require(static_cast<bool>(is), "Truncated", "checkpoint ends early");
}

inline constexpr char kCheckpointMagic[4] = {'H', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

/// Writes parameters (and optimizer moments when given) to `path` plus a JSON
/// manifest next to it.
template <typename T>
void save_checkpoint(const fs::path& path, const HaedModel<T>& model, const AdamW<T>* opt,
                     CheckpointMeta meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  meta.parameter_names.clear();
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "IoError", "cannot write " + path.string());
    os.write(detail::kCheckpointMagic, 4);
    detail::put<std::uint32_t>(os, detail::kCheckpointVersion);
    detail::put<std::uint32_t>(os, sizeof(T));
    detail::put<std::uint64_t>(os, meta.step);
    detail::put<std::uint64_t>(os, opt ? opt->step_count() : 0);
    detail::put<std::uint64_t>(os, model.params().size());
    model.params().for_each([&](const Parameter<T>& p) {
      meta.parameter_names.push_back(p.name);
      detail::put<std::uint64_t>(os, p.name.size());
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(p.group));
      detail::put<std::uint8_t>(os, p.trainable ? 1 : 0);
      detail::put<std::uint64_t>(os, p.value.shape().size());
      for (auto d : p.value.shape()) detail::put<std::uint64_t>(os, d);
      detail::put_values(os, p.value);
      const bool moments = opt && opt->tracks(p.name);
      detail::put<std::uint8_t>(os, moments ? 1 : 0);
      if (moments) {
        detail::put_values(os, opt->slot(p.name).m);
        detail::put_values(os, opt->slot(p.name).v);
      }
    });
    require(static_cast<bool>(os), "IoError", "failed writing " + path.string());
  }
  Json j{{"config_hash", meta.config_hash},
         {"arch_hash", meta.arch_hash},
         {"phase", phase_name(meta.phase)},
         {"step", meta.step},
         {"tokens_seen", meta.tokens_seen},
         {"wallclock_s", meta.wallclock_s},
         {"parameter_names", meta.parameter_names},
         {"config", meta.config}};
  std::ofstream ms(manifest_path(path), std::ios::trunc);
  require(static_cast<bool>(ms), "IoError", "cannot write " + manifest_path(path).string());
  ms << j.dump(2) << "\n";
}

inline CheckpointMeta read_manifest(const fs::path& ckpt) {
  const auto bytes = read_file_bytes(manifest_path(ckpt));
  Json j;
  try {
    j = Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::exception& e) {
    fail("BadCheckpoint", "manifest is not valid JSON: " + std::string(e.what()));
  }
  CheckpointMeta m;
  try {
    m.config_hash = j.at("config_hash").get<std::string>();
    m.arch_hash = j.at("arch_hash").get<std::string>();
    m.phase = parse_phase(j.at("phase").get<std::string>());
    m.step = j.at("step").get<std::size_t>();
    m.tokens_seen = j.at("tokens_seen").get<std::size_t>();
    m.wallclock_s = j.at("wallclock_s").get<double>();
    m.parameter_names = j.at("parameter_names").get<std::vector<std::string>>();
    m.config = j.at("config");
  } catch (const Json::exception& e) {
    fail("BadCheckpoint", "manifest field missing or mistyped: " + std::string(e.what()));
  }
  return m;
}

/// Restores parameter values (and optimizer moments when `opt` is given)
/// from a checkpoint. Parameters whose name starts with `skip_prefix` are
/// ignored on both sides; every other model parameter must be present with
/// a matching shape.
template <typename T>
CheckpointMeta load_checkpoint(const fs::path& path, HaedModel<T>& model, AdamW<T>* opt,
                               const std::string& skip_prefix = {}) {
  CheckpointMeta meta = read_manifest(path);
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "MissingFile", "cannot open " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  require(static_cast<bool>(is) && std::equal(magic, magic + 4, detail::kCheckpointMagic), "BadCheckpoint",
          path.string() + " is not a checkpoint");
  require(detail::take<std::uint32_t>(is) == detail::kCheckpointVersion, "BadCheckpoint",
          "unsupported checkpoint version");
  require(detail::take<std::uint32_t>(is) == sizeof(T), "BadCheckpoint", "checkpoint scalar width differs");
  meta.step = detail::take<std::uint64_t>(is);
  const auto opt_steps = detail::take<std::uint64_t>(is);
  const auto count = detail::take<std::uint64_t>(is);
  std::size_t loaded = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::take<std::uint64_t>(is);
    require(len < (1u << 16), "BadCheckpoint", "implausible parameter name length");
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    const auto group = detail::take<std::uint8_t>(is);
    const auto trainable = detail::take<std::uint8_t>(is);
    const auto ndim = detail::take<std::uint64_t>(is);
    require(ndim <= 8, "BadCheckpoint", "implausible tensor rank");
    Shape shape(ndim);
    for (auto& d : shape) d = detail::take<std::uint64_t>(is);
    Tensor<T> value(shape);
    detail::take_values(is, value);
    const bool moments = detail::take<std::uint8_t>(is) != 0;
    AdamSlot<T> slot{Tensor<T>(shape), Tensor<T>(shape)};
    if (moments) {
      detail::take_values(is, slot.m);
      detail::take_values(is, slot.v);
    }
    if (!skip_prefix.empty() && name.starts_with(skip_prefix)) continue;
    Parameter<T>* p = model.params().find(name);
    require(p != nullptr, "IncompatibleCheckpoint", "checkpoint parameter " + name + " not in model");
    require(p->value.shape() == shape, "IncompatibleCheckpoint",
            "parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                shape_str(p->value.shape()));
    p->value = std::move(value);
    p->group = static_cast<ParamGroup>(group);
    p->trainable = trainable != 0;
    if (opt && moments) {
      opt->track(*p);
      opt->slot(name) = std::move(slot);
    }
    ++loaded;
  }
  std::size_t expected = 0;
  model.params().for_each([&](const Parameter<T>& p) {
    if (skip_prefix.empty() || !p.name.starts_with(skip_prefix)) ++expected;
  });
  require(loaded == expected, "IncompatibleCheckpoint",
          "checkpoint covers " + std::to_string(loaded) + " of " + std::to_string(expected) +
              " model parameters");
  if (opt) opt->set_step_count(opt_steps);
  return meta;
}

// ---------------------------------------------------------------------------
// Metrics

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct MetricsRow {
  std::size_t step = 0;
  std::string phase;
  double loss_nats = 0.0;
  std::optional<double> bpt;
  double lr_enc_dec = 0.0;
  double lr_main = 0.0;
  std::optional<double> wallclock_s;
  std::size_t tokens_seen = 0;
};

class MetricsLog {
 public:
  static constexpr const char* kHeader = "step,phase,loss_nats,bpt,lr_enc_dec,lr_main,wallclock_s,tokens_seen";

  explicit MetricsLog(const fs::path& path) : os_(path, std::ios::trunc) {
    require(static_cast<bool>(os_), "IoError", "cannot write " + path.string());
    os_ << kHeader << "\n";
  }

  void write(const MetricsRow& r) {
    os_ << r.step << ',' << r.phase << ',' << format_number(r.loss_nats) << ','
        << (r.bpt ? format_number(*r.bpt) : "") << ',' << format_number(r.lr_enc_dec) << ','
        << format_number(r.lr_main) << ',' << (r.wallclock_s ? format_number(*r.wallclock_s) : "")
        << ',' << r.tokens_seen << "\n";
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// ---------------------------------------------------------------------------
// Training procedures

struct RunArtifacts {
  fs::path out_dir;
  fs::path checkpoint;
  fs::path metrics;
  fs::path resolved_config;
  fs::path timing;  // empty unless a timing report was written
  std::size_t steps = 0;
  double final_train_loss_nats = 0.0;
  LossReport final_eval;
  double wallclock_s = 0.0;
  bool stopped_on_wallclock = false;
};

struct TrainOptions {
  /// Resume a run of the same procedure from this checkpoint.
  std::optional<fs::path> resume;
  /// Fine-tuning only: pretrained checkpoint providing embedding, encoder
  /// and main-model weights.
  std::optional<fs::path> pretrained;
};

/// Loss of one batch under the full pipeline, recorded on `g`.
template <typename T>
LossTerm<T> e2e_batch_loss(Graph<T>& g, const HaedModel<T>& model, const Batch& b) {
  Var<T> enc = model.encode(g, b.tokens, b.lengths);
  Var<T> ctx = model.main_forward(g, enc, b.window_sizes);
  DecodeResult<T> d = model.decode(g, ctx, b.tokens, b.lengths);
  return e2e_loss(d.logits, std::move(d.targets), b.segment_count());
}

template <typename T>
LossTerm<T> iem_batch_loss(Graph<T>& g, const HaedModel<T>& model, const Batch& b,
                           std::span<const Batch> negatives) {
  NegativePool<T> pool = build_negative_pool(g, model, b, negatives);
  std::vector<std::size_t> rows(pool.batch_segments);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Var<T> own = pool.extra_batches == 0 ? pool.encodings : gather_rows(pool.encodings, std::move(rows));
  Var<T> ctx = model.main_forward(g, own, b.window_sizes);
  return iem_loss(ctx, pool);
}

/// Teacher-forced evaluation without gradients. IEM models report mean
/// nats per segment using following eval batches as negatives.
template <typename T>
LossReport evaluate_batches(const HaedModel<T>& model, const std::vector<Batch>& batches,
                            std::size_t extra_negatives = 0) {
  require(!batches.empty(), "EmptySlice", "evaluation slice is empty");
  LossReport r;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Graph<T> g(false);
    LossTerm<T> l;
    if (model.has_decoder()) {
      l = e2e_batch_loss(g, model, batches[i]);
    } else {
      std::vector<Batch> neg;
      for (std::size_t e = 1; e <= extra_negatives && e < batches.size(); ++e)
        neg.push_back(batches[(i + e) % batches.size()]);
      l = iem_batch_loss(g, model, batches[i], neg);
    }
    r.total_nats += l.report.total_nats;
    r.tokens += l.report.tokens;
    r.segments += l.report.segments;
  }
  if (model.has_decoder()) {
    r.mean_nats = r.total_nats / static_cast<double>(r.tokens);
    r.bpt = nats_to_bits(r.mean_nats);
  } else {
    r.mean_nats = r.total_nats / static_cast<double>(r.segments);
  }
  return r;
}

namespace detail {

inline std::uint64_t data_seed(std::uint64_t seed) { return seed ^ 0xD1B54A32D192ED03ULL; }

inline std::size_t resolve_steps(const ExperimentConfig& cfg, std::size_t batches_per_epoch,
                                 std::size_t per_step) {
  if (cfg.run.steps > 0) return cfg.run.steps;
  const std::size_t steps = batches_per_epoch / per_step;
  require(steps > cfg.schedule.warmup_steps, "InvalidSchedule",
          "run.steps: one epoch is " + std::to_string(steps) +
              " steps, which does not exceed schedule.warmup_steps (" +
              std::to_string(cfg.schedule.warmup_steps) + ")");
  return steps;
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::trunc);
  require(static_cast<bool>(os), "IoError", "cannot write " + p.string());
  os << s;
}

}  // namespace detail

/// Shared loop of the three procedures. `train_docs` feeds the gradient
/// batches, `eval_docs` the periodic eval rows (the training slice is used
/// when it is empty).
template <typename T = float>
RunArtifacts run_procedure(ExperimentConfig cfg, Phase phase, const std::vector<SegmentedSequence>& train_docs,
                           const std::vector<SegmentedSequence>& eval_docs, const TrainOptions& options = {}) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const bool iem = phase == Phase::pretrain;
  const std::size_t per_step = iem ? 1 + cfg.objective.extra_negative_batches : 1;

  BatchStream stream(train_docs, cfg.dataset.batch, detail::data_seed(cfg.run.seed));
  cfg.run.steps = detail::resolve_steps(cfg, stream.batches_per_epoch(), per_step);
  const std::size_t total = cfg.run.steps;
  Schedule sched = cfg.schedule;
  sched.total_steps = total;
  require(total > sched.warmup_steps, "InvalidSchedule",
          "run.steps (" + std::to_string(total) + ") must exceed schedule.warmup_steps (" +
              std::to_string(sched.warmup_steps) + ")");

  RunArtifacts art;
  art.out_dir = cfg.run.out_dir;
  fs::create_directories(art.out_dir);
  art.metrics = art.out_dir / "metrics.csv";
  art.checkpoint = art.out_dir / "checkpoint.bin";
  art.resolved_config = art.out_dir / "resolved_config.json";
  const Json resolved = to_json(cfg);
  detail::write_text(art.resolved_config, resolved.dump(2) + "\n");

  HaedModel<T> model(cfg.model, cfg.run.seed, !iem);
  AdamW<T> opt(cfg.optimizer);
  std::size_t start = 0, tokens_seen = 0;
  double prior_wall = 0.0;
  CheckpointMeta meta{config_hash(cfg), arch_hash(cfg.model), phase, 0, 0, 0.0, {}, resolved};

  if (options.resume) {
    CheckpointMeta m = read_manifest(*options.resume);
    require(m.phase == phase, "IncompatibleCheckpoint",
            std::string("checkpoint phase ") + phase_name(m.phase) + " cannot resume " + phase_name(phase));
    require(m.config_hash == meta.config_hash, "IncompatibleCheckpoint",
            "checkpoint config hash " + m.config_hash + " differs from " + meta.config_hash);
    m = load_checkpoint(*options.resume, model, &opt);
    start = m.step;
    tokens_seen = m.tokens_seen;
    prior_wall = m.wallclock_s;
    require(start <= total, "IncompatibleCheckpoint", "checkpoint step beyond run length");
  } else if (options.pretrained) {
    require(phase == Phase::finetune, "InvalidState", "pretrained weights only apply to fine-tuning");
    CheckpointMeta m = read_manifest(*options.pretrained);
    require(m.arch_hash == meta.arch_hash, "IncompatibleCheckpoint",
            "pretrained architecture " + m.arch_hash + " differs from configured " + meta.arch_hash);
    load_checkpoint(*options.pretrained, model, static_cast<AdamW<T>*>(nullptr), "decoder.");
  }
  model.params().for_each([&](Parameter<T>& p) {
    if (p.trainable) opt.track(p);
  });

  const auto& eval_src = eval_docs.empty() ? train_docs : eval_docs;
  std::vector<Batch> eval_set = sequential_batches(eval_src, cfg.dataset.batch.window, cfg.dataset.batch.k,
                                                   cfg.dataset.batch.count);
  if (cfg.run.eval_batches > 0 && eval_set.size() > cfg.run.eval_batches) eval_set.resize(cfg.run.eval_batches);

  MetricsLog log(art.metrics);
  const std::string train_phase = iem ? "iem" : phase == Phase::finetune ? "finetune" : "train";
  const std::string eval_phase = iem ? "iem_eval" : "eval";
  auto elapsed = [&] { return prior_wall + std::chrono::duration<double>(clock::now() - t0).count(); };
  auto wall = [&]() -> std::optional<double> {
    if (!cfg.run.log_wallclock) return std::nullopt;
    return elapsed();
  };
  auto save = [&](const fs::path& p, std::size_t step) {
    meta.step = step;
    meta.tokens_seen = tokens_seen;
    meta.wallclock_s = elapsed();
    save_checkpoint(p, model, &opt, meta);
  };

  double lr_e = 0.0, lr_m = 0.0;
  std::size_t step = start;
  auto run_eval = [&] {
    art.final_eval = evaluate_batches(model, eval_set, cfg.objective.extra_negative_batches);
    log.write({step, eval_phase, art.final_eval.mean_nats,
               iem ? std::nullopt : std::optional<double>(art.final_eval.bpt), lr_e, lr_m, wall(), tokens_seen});
  };

  while (step < total) {
    if (cfg.run.max_wallclock_s > 0 && elapsed() >= cfg.run.max_wallclock_s) {
      art.stopped_on_wallclock = true;
      break;
    }
    lr_e = lr_at(sched, step + 1, cfg.optimizer.lr_enc_dec);
    lr_m = lr_at(sched, step + 1, cfg.optimizer.lr_main);
    double loss = 0.0;
    std::optional<double> bpt;
    try {
      Graph<T> g(true);
      Batch b = stream.batch(step * per_step);
      LossTerm<T> l;
      std::size_t consumed = b.real_tokens();
      if (iem) {
        std::vector<Batch> neg;
        for (std::size_t e = 1; e < per_step; ++e) {
          neg.push_back(stream.batch(step * per_step + e));
          consumed += neg.back().real_tokens();
        }
        l = iem_batch_loss(g, model, b, neg);
      } else {
        l = e2e_batch_loss(g, model, b);
        bpt = l.report.bpt;
      }
      loss = l.report.mean_nats;
      require(std::isfinite(loss), "NonFinite", "loss is not finite");
      model.params().zero_grad();
      g.backward(l.loss);
      clip_global_norm(model.params(), cfg.optimizer.clip_norm);
      opt.step(model.params(), lr_e, lr_m);
      tokens_seen += consumed;
    } catch (const Error& e) {
      if (e.code() != "NonFinite") throw;
      const fs::path last_good = art.out_dir / "last_good.bin";
      save(last_good, step);
      fail("TrainingDiverged", "step " + std::to_string(step + 1) + ": " + e.what() +
                                   "; state before the step saved to " + last_good.string());
    }
    ++step;
    art.final_train_loss_nats = loss;
    if (step % cfg.run.log_every == 0) log.write({step, train_phase, loss, bpt, lr_e, lr_m, wall(), tokens_seen});
    if (cfg.run.eval_every > 0 && step % cfg.run.eval_every == 0) run_eval();
    if (cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every == 0 && step < total)
      save(art.out_dir / ("checkpoint_step" + std::to_string(step) + ".bin"), step);
  }
  if (cfg.run.eval_every == 0 || step % cfg.run.eval_every != 0) run_eval();
  save(art.checkpoint, step);
  art.steps = step;
  art.wallclock_s = elapsed();
  return art;
}

/// End-to-end training on the corpus minus its eval tail.
template <typename T = float>
RunArtifacts train_e2e(const ExperimentConfig& cfg, const std::vector<SegmentedSequence>& docs,
                       const TrainOptions& options = {}) {
  const CorpusSplits s = split_corpus(docs, cfg.dataset.eval_fraction);
  return run_procedure<T>(cfg, Phase::train, s.train, s.eval, options);
}

/// Implicit-embedding pretraining of encoder and main model on the first
/// half of the training slice. The decoder does not exist in this phase.
template <typename T = float>
RunArtifacts pretrain_iem(const ExperimentConfig& cfg, const std::vector<SegmentedSequence>& docs,
                          const TrainOptions& options = {}) {
  const CorpusSplits s = split_corpus(docs, cfg.dataset.eval_fraction);
  return run_procedure<T>(cfg, Phase::pretrain, s.pretrain, s.eval, options);
}

/// End-to-end fine-tuning of all parameters on the second half, starting
/// from pretrained embedding/encoder/main weights and a fresh decoder.
template <typename T = float>
RunArtifacts finetune(const ExperimentConfig& cfg, const std::vector<SegmentedSequence>& docs,
                      const TrainOptions& options) {
  require(options.pretrained || options.resume, "MissingFlag", "finetune needs a checkpoint");
  const CorpusSplits s = split_corpus(docs, cfg.dataset.eval_fraction);
  return run_procedure<T>(cfg, Phase::finetune, s.finetune, s.eval, options);
}

}  // namespace haed
