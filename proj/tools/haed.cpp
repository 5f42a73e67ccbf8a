// haed: command-line entry point for training, evaluation and benchmarks.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "haed/eval.hpp"
#include "haed/gradcheck.hpp"
#include "haed/synth.hpp"

namespace {

using namespace haed;

struct CommonFlags {
  std::string config;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint to resume from or initialise with");
  cmd->add_option("--data", f.data, "corpus path (overrides dataset.path)");
  cmd->add_option("--out", f.out, "output directory (overrides run.out_dir)");
  cmd->add_option("--seed", f.seed, "seed (overrides run.seed)");
  cmd->add_option("--steps", f.steps, "steps (overrides run.steps)");
}

/// Applies command-line overrides to the raw document so the resolved
/// config, its validation and its hash all see them.
ExperimentConfig load_config(const CommonFlags& f) {
  Json root = Json::object();
  if (!f.config.empty()) {
    const auto bytes = read_file_bytes(f.config);
    root = parse_json_merging(std::string(bytes.begin(), bytes.end()));
  }
  require(root.is_object(), "TypeMismatch", "config must be a JSON object");
  if (!f.data.empty()) root["dataset"]["path"] = f.data;
  if (!f.out.empty()) root["run"]["out_dir"] = f.out;
  if (f.seed) root["run"]["seed"] = *f.seed;
  if (f.steps) root["run"]["steps"] = *f.steps;
  return resolve_config(root);
}

std::vector<SegmentedSequence> corpus_for(const ExperimentConfig& cfg) {
  require(!cfg.dataset.path.empty(), "MissingFlag", "no corpus: pass --data or set dataset.path");
  return load_corpus(cfg.dataset, cfg.dataset.path);
}

void report(const RunArtifacts& a) {
  std::cout << "steps=" << a.steps << " final_loss_nats=" << format_number(a.final_eval.mean_nats);
  if (std::isfinite(a.final_eval.bpt)) std::cout << " final_bpt=" << format_number(a.final_eval.bpt);
  std::cout << " out_dir=" << a.out_dir.string() << "\n";
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      require(used == item.size(), "InvalidValue", "not an integer: " + item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      fail("InvalidValue", "not an integer: \"" + item + "\"");
    }
  }
  require(!out.empty(), "InvalidValue", "empty value list");
  return out;
}

void write_file(const std::string& path, const std::string& bytes) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), "IoError", "cannot write " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n' ? ' ' : c);
  }
  return out;
}

int fail_line(const std::string& code, const std::string& message, int status = 1) {
  std::cerr << "error code=" << code << " message=\"" << escape(message) << "\"\n";
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical autoregressive encoder-decoder experiments"};
  app.require_subcommand(1);
  app.fallthrough(false);

  CommonFlags train_f, pre_f, fine_f, sweep_f, timing_f;
  auto* train = app.add_subcommand("train", "end-to-end training");
  add_common(train, train_f, true);
  auto* pretrain = app.add_subcommand("pretrain", "implicit-embedding pretraining of encoder and main model");
  add_common(pretrain, pre_f, true);
  auto* fine = app.add_subcommand("finetune", "end-to-end fine-tuning from a pretrained checkpoint");
  add_common(fine, fine_f, true);
  fine->get_option("--checkpoint")->required();

  std::string eval_ckpt, eval_data;
  auto* eval = app.add_subcommand("eval", "bits per token of a checkpoint on a corpus");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint")->required();
  eval->add_option("--data", eval_data, "corpus path")->required();

  std::string axis = "decoder_units", values;
  std::size_t sweep_trials = 0, sweep_pre_steps = 0;
  auto* sweep = app.add_subcommand("sweep", "ablation sweep over one axis");
  add_common(sweep, sweep_f, true);
  sweep->add_option("--axis", axis, "encoder_units | decoder_units | regime");
  sweep->add_option("--values", values, "comma-separated widths");
  sweep->add_option("--timing-trials", sweep_trials, "timing trials per point (0 skips timing)");
  sweep->add_option("--pretrain-steps", sweep_pre_steps, "regime axis: IEM pretraining steps (0 uses run.steps)");

  std::string timing_units = "128,512,2000";
  std::size_t timing_trials = 20, timing_warmup = 5;
  auto* timing = app.add_subcommand("timing", "component wall-clock breakdown");
  add_common(timing, timing_f, true);
  timing->add_option("--decoder-units", timing_units, "comma-separated decoder widths");
  timing->add_option("--trials", timing_trials, "measured trials (>= 20)");
  timing->add_option("--warmup", timing_warmup, "excluded warmup trials");

  double gc_eps = 3e-5, gc_tol = 1e-5;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable block");
  gradcheck->add_option("--eps", gc_eps, "central-difference step");
  gradcheck->add_option("--tolerance", gc_tol, "maximum relative error");

  std::string synth_kind = "text", synth_out;
  std::uint64_t synth_seed = 0;
  std::size_t synth_bytes = 1 << 20;
  std::uint32_t synth_count = 64, synth_h = 32, synth_w = 32;
  auto* synth = app.add_subcommand("make-synth", "write a deterministic synthetic corpus");
  synth->add_option("--kind", synth_kind, "text | image");
  synth->add_option("--out", synth_out, "output file")->required();
  synth->add_option("--seed", synth_seed, "seed");
  synth->add_option("--bytes", synth_bytes, "text size in bytes");
  synth->add_option("--count", synth_count, "number of images");
  synth->add_option("--height", synth_h, "image height");
  synth->add_option("--width", synth_w, "image width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    const std::set<std::string> commands{"train", "pretrain", "finetune", "eval", "sweep", "timing", "gradcheck", "make-synth"};
    if (argc >= 2 && std::string(argv[1]).rfind("-", 0) != 0 && !commands.contains(argv[1]))
      return fail_line("UnknownCommand", "unknown command \"" + std::string(argv[1]) + "\"", 2);
    if (e.get_name() == "RequiredError") return fail_line("MissingFlag", msg, 2);
    return fail_line(e.get_name(), msg, 2);
  }

  try {
    if (*train) {
      const ExperimentConfig cfg = load_config(train_f);
      TrainOptions o;
      if (!train_f.checkpoint.empty()) o.resume = train_f.checkpoint;
      report(train_e2e(cfg, corpus_for(cfg), o));
    } else if (*pretrain) {
      const ExperimentConfig cfg = load_config(pre_f);
      TrainOptions o;
      if (!pre_f.checkpoint.empty()) o.resume = pre_f.checkpoint;
      report(pretrain_iem(cfg, corpus_for(cfg), o));
    } else if (*fine) {
      const ExperimentConfig cfg = load_config(fine_f);
      TrainOptions o;
      if (read_manifest(fine_f.checkpoint).phase == Phase::finetune)
        o.resume = fine_f.checkpoint;
      else
        o.pretrained = fine_f.checkpoint;
      report(finetune(cfg, corpus_for(cfg), o));
    } else if (*eval) {
      const CheckpointMeta meta = read_manifest(eval_ckpt);
      const ExperimentConfig cfg = resolve_config(meta.config);
      const LossReport r = evaluate_bpt(fs::path(eval_ckpt), load_corpus(cfg.dataset, eval_data));
      std::cout << "bpt=" << format_number(r.bpt) << "\n";
    } else if (*sweep) {
      const ExperimentConfig cfg = load_config(sweep_f);
      SweepSpec spec;
      spec.axis = parse_axis(axis);
      if (spec.axis != SweepAxis::regime) {
        require(!values.empty(), "MissingFlag", "--values is required for axis " + axis);
        spec.values = parse_list(values);
      }
      spec.base = cfg;
      spec.timing_trials = sweep_trials;
      spec.pretrain_steps = sweep_pre_steps;
      spec.out_dir = cfg.run.out_dir;
      fs::create_directories(spec.out_dir);
      std::ofstream(spec.out_dir / "resolved_config.json") << to_json(cfg).dump(2) << "\n";
      const SweepResult res = run_sweep(spec, corpus_for(cfg));
      std::size_t failed = 0;
      for (const auto& p : res.points) {
        std::cout << "point=" << p.point_id << " value=" << p.value << " phase=" << p.phase
                  << " status=" << p.status;
        if (p.status == "ok" && std::isfinite(p.final_bpt)) std::cout << " final_bpt=" << format_number(p.final_bpt);
        if (!p.error.empty()) std::cout << " error=\"" << escape(p.error) << "\"";
        std::cout << "\n";
        failed += p.status != "ok";
      }
      std::cout << "sweep_csv=" << res.csv.string() << "\n";
      if (failed > 0) return fail_line("SweepPointFailed", std::to_string(failed) + " sweep point(s) failed");
    } else if (*timing) {
      const ExperimentConfig cfg = load_config(timing_f);
      const auto docs = corpus_for(cfg);
      const fs::path out = cfg.run.out_dir;
      fs::create_directories(out);
      std::ofstream(out / "resolved_config.json") << to_json(cfg).dump(2) << "\n";
      std::vector<TimingRow> rows;
      for (std::size_t u : parse_list(timing_units)) {
        ExperimentConfig c = cfg;
        c.model.decoder.units = u;
        rows.push_back({"decoder_units=" + std::to_string(u), u, timing_breakdown(c, docs, timing_trials, timing_warmup)});
        const auto& r = rows.back().report;
        std::cout << "decoder_units=" << u << " decoder_frac=" << format_number(r.fraction_of(Component::decoder))
                  << " total_ms=" << format_number(r.total_ms) << " reliable=" << (r.reliable ? "true" : "false")
                  << "\n";
      }
      write_timing_csv(out / "timing.csv", rows);
      std::cout << "timing_csv=" << (out / "timing.csv").string() << "\n";
    } else if (*gradcheck) {
      GradCheckOptions o;
      o.eps = gc_eps;
      o.tolerance = gc_tol;
      bool ok = true;
      for (const auto& c : gradcheck_cases()) {
        const GradCheckReport r = c.run(o);
        std::cout << (r.passed ? "PASS " : "FAIL ") << c.name << " max_rel_error=" << format_number(r.max_rel_error)
                  << (r.deterministic ? "" : " nondeterministic") << "\n";
        ok = ok && r.passed;
      }
      if (!ok) return fail_line("GradCheckFailed", "at least one gradient check exceeded the tolerance");
    } else if (*synth) {
      require(synth_kind == "text" || synth_kind == "image", "InvalidValue",
              "--kind must be text or image, got \"" + synth_kind + "\"");
      if (synth_kind == "text") {
        SynthTextOptions o;
        o.bytes = synth_bytes;
        write_file(synth_out, make_synth_text(synth_seed, o));
      } else {
        const auto bytes = make_synth_images(synth_seed, synth_count, synth_h, synth_w);
        write_file(synth_out, std::string(bytes.begin(), bytes.end()));
      }
      std::cout << "wrote " << synth_out << "\n";
    }
  } catch (const Error& e) {
    return fail_line(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail_line("Internal", e.what());
  }
  return 0;
}
