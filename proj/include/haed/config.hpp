#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "haed/data.hpp"
#include "haed/model.hpp"
#include "haed/optim.hpp"

namespace haed {

using Json = nlohmann::json;

enum class ObjectiveKind : std::uint8_t { e2e, iem };

struct DatasetConfig {
  Source kind = Source::text;
  std::string path;
  HierarchyConfig hierarchy;
  BatchSpec batch;
  /// Tail fraction of the corpus held out for evaluation rows.
  double eval_fraction = 0.1;
};

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::e2e;
  std::size_t extra_negative_batches = 3;
};

struct RunConfig {
  /// 0 means one pass over the training slice.
  std::size_t steps = 0;
  std::size_t eval_every = 0;
  std::size_t eval_batches = 4;
  std::size_t log_every = 1;
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  bool log_wallclock = true;
  /// Stop early once this much wall-clock time has elapsed (0 = no limit).
  double max_wallclock_s = 0.0;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  ObjectiveConfig objective;
  OptimizerConfig optimizer;
  Schedule schedule;
  RunConfig run;
};

// ---------------------------------------------------------------------------
// JSON reading with duplicate-object merging

namespace detail {

inline void merge_objects(Json& dst, Json src, const std::string& path) {
  for (auto& [key, value] : src.items()) {
    const std::string sub = path.empty() ? key : path + "." + key;
    if (!dst.contains(key)) {
      dst[key] = std::move(value);
    } else if (dst[key].is_object() && value.is_object()) {
      merge_objects(dst[key], std::move(value), sub);
    } else {
      fail("DuplicateKey", "duplicate key " + sub);
    }
  }
}

/// SAX builder that merges repeated object keys whose values are objects,
/// so `{"model":{...},"model":{...}}` reads as one overlay.
class MergingSax : public nlohmann::json_sax<Json> {
 public:
  bool null() override { return put(Json(nullptr)); }
  bool boolean(bool v) override { return put(Json(v)); }
  bool number_integer(number_integer_t v) override { return put(Json(v)); }
  bool number_unsigned(number_unsigned_t v) override { return put(Json(v)); }
  bool number_float(number_float_t v, const string_t&) override { return put(Json(v)); }
  bool string(string_t& v) override { return put(Json(v)); }
  bool binary(binary_t& v) override { return put(Json::binary(v)); }
  bool start_object(std::size_t) override {
    stack_.push_back({Json::object(), {}});
    return true;
  }
  bool key(string_t& k) override {
    stack_.back().key = k;
    return true;
  }
  bool end_object() override { return pop(); }
  bool start_array(std::size_t) override {
    stack_.push_back({Json::array(), {}});
    return true;
  }
  bool end_array() override { return pop(); }
  bool parse_error(std::size_t pos, const std::string&, const nlohmann::detail::exception& e) override {
    fail("ParseError", "config is not valid JSON at byte " + std::to_string(pos) + ": " + e.what());
  }

  Json result() { return std::move(root_); }

 private:
  struct Frame {
    Json value;
    std::string key;
  };

  std::string path() const {
    std::string p;
    for (const auto& f : stack_)
      if (f.value.is_object() && !f.key.empty()) p += (p.empty() ? "" : ".") + f.key;
    return p;
  }

  bool pop() {
    Frame f = std::move(stack_.back());
    stack_.pop_back();
    return put(std::move(f.value));
  }

  bool put(Json v) {
    if (stack_.empty()) {
      root_ = std::move(v);
      return true;
    }
    Frame& parent = stack_.back();
    if (parent.value.is_array()) {
      parent.value.push_back(std::move(v));
      return true;
    }
    Json wrapper = Json::object();
    wrapper[parent.key] = std::move(v);
    std::string base;
    for (std::size_t i = 0; i + 1 < stack_.size(); ++i)
      if (stack_[i].value.is_object()) base += (base.empty() ? "" : ".") + stack_[i].key;
    merge_objects(parent.value, std::move(wrapper), base);
    return true;
  }

  std::vector<Frame> stack_;
  Json root_;
};

/// Strict view of one JSON object: unknown keys and type mismatches raise
/// path-qualified errors.
class Section {
 public:
  Section(const Json* obj, std::string path, std::set<std::string> allowed)
      : obj_(obj), path_(std::move(path)) {
    if (obj_ == nullptr) return;
    require(obj_->is_object(), "TypeMismatch", where() + " must be an object");
    for (const auto& [key, value] : obj_->items()) {
      (void)value;
      if (!allowed.contains(key)) fail("UnknownKey", "unknown key \"" + qualify(key) + "\"");
    }
  }

  bool has(const std::string& key) const { return obj_ && obj_->contains(key); }
  const Json* child(const std::string& key) const { return has(key) ? &obj_->at(key) : nullptr; }
  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  std::size_t uint(const std::string& key, std::size_t def) const {
    if (!has(key)) return def;
    const Json& v = obj_->at(key);
    require(v.is_number_integer() && v.get<std::int64_t>() >= 0, "TypeMismatch",
            qualify(key) + " must be a non-negative integer");
    return v.get<std::size_t>();
  }
  double number(const std::string& key, double def) const {
    if (!has(key)) return def;
    const Json& v = obj_->at(key);
    require(v.is_number(), "TypeMismatch", qualify(key) + " must be a number");
    return v.get<double>();
  }
  bool boolean(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const Json& v = obj_->at(key);
    require(v.is_boolean(), "TypeMismatch", qualify(key) + " must be a boolean");
    return v.get<bool>();
  }
  std::string str(const std::string& key, const std::string& def) const {
    if (!has(key)) return def;
    const Json& v = obj_->at(key);
    require(v.is_string(), "TypeMismatch", qualify(key) + " must be a string");
    return v.get<std::string>();
  }
  std::string choice(const std::string& key, const std::string& def,
                     const std::set<std::string>& options) const {
    std::string v = str(key, def);
    if (!options.contains(v)) {
      std::string all;
      for (const auto& o : options) all += (all.empty() ? "" : "|") + o;
      fail("InvalidValue", qualify(key) + " must be one of " + all + ", got \"" + v + "\"");
    }
    return v;
  }
  std::vector<std::size_t> uint_list(const std::string& key, std::vector<std::size_t> def) const {
    if (!has(key)) return def;
    const Json& v = obj_->at(key);
    require(v.is_array(), "TypeMismatch", qualify(key) + " must be an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      require(e.is_number_integer() && e.get<std::int64_t>() >= 0, "TypeMismatch",
              qualify(key) + " must be an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const Json* obj_;
  std::string path_;
};

inline void check(bool cond, const std::string& path, const std::string& what) {
  require(cond, "InvalidValue", path + " " + what);
}

}  // namespace detail

/// Parses JSON text with duplicate-object merging.
inline Json parse_json_merging(const std::string& text) {
  detail::MergingSax sax;
  Json::sax_parse(text, &sax);
  return sax.result();
}

/// Builds a fully resolved configuration from a JSON overlay. Omitted fields
/// take their documented defaults; some defaults depend on other fields
/// (dataset kind, main model kind, objective).
inline ExperimentConfig resolve_config(const Json& root) {
  using detail::Section;
  using detail::check;
  Section top(&root, "", {"dataset", "model", "objective", "optimizer", "schedule", "run"});
  ExperimentConfig c;

  Section obj(top.child("objective"), "objective", {"kind", "extra_negative_batches"});
  c.objective.kind = obj.choice("kind", "e2e", {"e2e", "iem"}) == "iem" ? ObjectiveKind::iem
                                                                        : ObjectiveKind::e2e;
  const bool iem = c.objective.kind == ObjectiveKind::iem;
  c.objective.extra_negative_batches = obj.uint("extra_negative_batches", 3);

  // dataset
  Section ds(top.child("dataset"), "dataset", {"kind", "path", "hierarchy", "batch", "eval_fraction"});
  c.dataset.kind = ds.choice("kind", "text", {"text", "image"}) == "image" ? Source::image : Source::text;
  const bool text = c.dataset.kind == Source::text;
  c.dataset.path = ds.str("path", "");
  c.dataset.eval_fraction = ds.number("eval_fraction", 0.1);
  check(c.dataset.eval_fraction >= 0.0 && c.dataset.eval_fraction < 1.0, "dataset.eval_fraction",
        "must be in [0, 1)");
  Section hier(ds.child("hierarchy"), "dataset.hierarchy", {"mode", "k"});
  c.dataset.hierarchy.mode =
      hier.choice("mode", text ? "word" : "fixed", {"word", "fixed"}) == "word" ? HierarchyMode::word
                                                                               : HierarchyMode::fixed_k;
  c.dataset.hierarchy.k = hier.uint("k", 12);
  check(c.dataset.hierarchy.k >= 1, "dataset.hierarchy.k", "must be >= 1");
  check(text || c.dataset.hierarchy.mode == HierarchyMode::fixed_k, "dataset.hierarchy.mode",
        "word mode requires a text dataset");
  Section batch(ds.child("batch"), "dataset.batch", {"unit", "count", "window", "shuffle"});
  c.dataset.batch.unit = batch.choice("unit", text ? "segments" : "documents", {"segments", "documents"}) ==
                                 "documents"
                             ? BatchUnit::documents
                             : BatchUnit::segments;
  c.dataset.batch.count = batch.uint("count", text ? 256 : 32);
  c.dataset.batch.window = batch.uint("window", text ? 64 : kMaxWindowSegments);
  c.dataset.batch.shuffle = batch.boolean("shuffle", true);
  c.dataset.batch.k = c.dataset.hierarchy.k;
  check(c.dataset.batch.count >= 1, "dataset.batch.count", "must be >= 1");
  check(c.dataset.batch.window >= 1 && c.dataset.batch.window <= kMaxWindowSegments,
        "dataset.batch.window", "must be in [1, 100]");

  // model
  Section model(top.child("model"), "model", {"encoder", "main", "decoder"});
  c.model.k = c.dataset.hierarchy.k;
  Section enc(model.child("encoder"), "model.encoder", {"kind", "mlp_hidden", "rnn_units", "embed_dim"});
  c.model.encoder.kind = enc.choice("kind", "mlp", {"mlp", "rnn"}) == "rnn" ? EncoderKind::rnn : EncoderKind::mlp;
  c.model.encoder.mlp_hidden = enc.uint_list("mlp_hidden", {256, 256});
  c.model.encoder.rnn_units = enc.uint("rnn_units", 1024);
  c.model.encoder.embed_dim = enc.uint("embed_dim", 10);
  check(!c.model.encoder.mlp_hidden.empty(), "model.encoder.mlp_hidden", "must not be empty");
  for (auto w : c.model.encoder.mlp_hidden) check(w >= 1, "model.encoder.mlp_hidden", "widths must be >= 1");
  check(c.model.encoder.rnn_units >= 1, "model.encoder.rnn_units", "must be >= 1");
  check(c.model.encoder.embed_dim >= 1, "model.encoder.embed_dim", "must be >= 1");

  Section main(model.child("main"), "model.main",
               {"kind", "layers", "model_dim", "ff_dim", "heads", "head_dim", "max_positions",
                "rnn_units", "capped_input_gate"});
  auto& m = c.model.main;
  m.kind = main.choice("kind", "transformer", {"transformer", "rnn"}) == "rnn" ? MainKind::rnn
                                                                              : MainKind::transformer;
  m.layers = main.uint("layers", 6);
  m.model_dim = main.uint("model_dim", 356);
  m.ff_dim = main.uint("ff_dim", 1424);
  m.heads = main.uint("heads", iem ? 12 : 8);
  m.head_dim = main.uint("head_dim", 32);
  m.max_positions = main.uint("max_positions", 100);
  m.rnn_units = main.uint("rnn_units", 1500);
  m.capped_input_gate = main.boolean("capped_input_gate", true);
  for (const char* key : {"layers", "model_dim", "ff_dim", "heads", "head_dim", "rnn_units"})
    check(main.uint(key, 1) >= 1, main.qualify(key), "must be >= 1");
  check(m.max_positions >= 1 && m.max_positions <= kMaxWindowSegments, "model.main.max_positions",
        "must be in [1, 100]");
  check(c.dataset.batch.window <= m.max_positions, "dataset.batch.window",
        "must not exceed model.main.max_positions");

  Section dec(model.child("decoder"), "model.decoder", {"units"});
  c.model.decoder.units = dec.uint("units", iem ? 2000 : 1024);
  check(c.model.decoder.units >= 1, "model.decoder.units", "must be >= 1");

  // optimizer
  Section opt(top.child("optimizer"), "optimizer",
              {"beta1", "beta2", "eps", "weight_decay", "lr_enc_dec", "lr_main", "clip_norm"});
  auto& o = c.optimizer;
  o.beta1 = opt.number("beta1", 0.9);
  o.beta2 = opt.number("beta2", 0.999);
  o.eps = opt.number("eps", 1e-8);
  o.weight_decay = opt.number("weight_decay", 0.01);
  o.lr_enc_dec = opt.number("lr_enc_dec", 0.002);
  o.lr_main = opt.number("lr_main", m.kind == MainKind::transformer ? 0.00035 : 0.002);
  o.clip_norm = opt.number("clip_norm", 0.01);
  check(o.lr_enc_dec > 0 && o.lr_main > 0, "optimizer", "learning rates must be > 0");
  check(o.clip_norm > 0, "optimizer.clip_norm", "must be > 0");
  check(o.beta1 >= 0 && o.beta1 < 1 && o.beta2 >= 0 && o.beta2 < 1, "optimizer", "betas must be in [0, 1)");
  check(o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0");

  // schedule
  Section sch(top.child("schedule"), "schedule", {"warmup_steps", "floor_fraction"});
  c.schedule.warmup_steps = sch.uint("warmup_steps", m.kind == MainKind::transformer ? 2000 : 0);
  c.schedule.floor_fraction = sch.number("floor_fraction", 0.05);
  check(c.schedule.floor_fraction >= 0 && c.schedule.floor_fraction <= 1, "schedule.floor_fraction",
        "must be in [0, 1]");

  // run
  Section run(top.child("run"), "run",
              {"steps", "eval_every", "eval_batches", "log_every", "checkpoint_every", "seed", "out_dir",
               "log_wallclock", "max_wallclock_s"});
  auto& r = c.run;
  r.steps = run.uint("steps", 0);
  r.eval_every = run.uint("eval_every", 0);
  r.eval_batches = run.uint("eval_batches", 4);
  r.log_every = run.uint("log_every", 1);
  r.checkpoint_every = run.uint("checkpoint_every", 0);
  r.seed = run.uint("seed", 0);
  r.out_dir = run.str("out_dir", "runs/default");
  r.log_wallclock = run.boolean("log_wallclock", true);
  r.max_wallclock_s = run.number("max_wallclock_s", 0.0);
  check(r.log_every >= 1, "run.log_every", "must be >= 1");
  check(r.steps == 0 || r.steps > c.schedule.warmup_steps, "run.steps",
        "must exceed schedule.warmup_steps (" + std::to_string(c.schedule.warmup_steps) + ")");
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  return resolve_config(parse_json_merging(text));
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

// ---------------------------------------------------------------------------
// Resolved snapshot

inline Json model_to_json(const ModelConfig& m) {
  return {
      {"encoder",
       {{"kind", m.encoder.kind == EncoderKind::mlp ? "mlp" : "rnn"},
        {"mlp_hidden", m.encoder.mlp_hidden},
        {"rnn_units", m.encoder.rnn_units},
        {"embed_dim", m.encoder.embed_dim}}},
      {"main",
       {{"kind", m.main.kind == MainKind::transformer ? "transformer" : "rnn"},
        {"layers", m.main.layers},
        {"model_dim", m.main.model_dim},
        {"ff_dim", m.main.ff_dim},
        {"heads", m.main.heads},
        {"head_dim", m.main.head_dim},
        {"max_positions", m.main.max_positions},
        {"rnn_units", m.main.rnn_units},
        {"capped_input_gate", m.main.capped_input_gate}}},
      {"decoder", {{"units", m.decoder.units}}},
  };
}

inline Json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  return {
      {"dataset",
       {{"kind", d.kind == Source::text ? "text" : "image"},
        {"path", d.path},
        {"eval_fraction", d.eval_fraction},
        {"hierarchy",
         {{"mode", d.hierarchy.mode == HierarchyMode::word ? "word" : "fixed"}, {"k", d.hierarchy.k}}},
        {"batch",
         {{"unit", d.batch.unit == BatchUnit::documents ? "documents" : "segments"},
          {"count", d.batch.count},
          {"window", d.batch.window},
          {"shuffle", d.batch.shuffle}}}}},
      {"model", model_to_json(c.model)},
      {"objective",
       {{"kind", c.objective.kind == ObjectiveKind::iem ? "iem" : "e2e"},
        {"extra_negative_batches", c.objective.extra_negative_batches}}},
      {"optimizer",
       {{"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"lr_enc_dec", c.optimizer.lr_enc_dec},
        {"lr_main", c.optimizer.lr_main},
        {"clip_norm", c.optimizer.clip_norm}}},
      {"schedule",
       {{"warmup_steps", c.schedule.warmup_steps}, {"floor_fraction", c.schedule.floor_fraction}}},
      {"run",
       {{"steps", c.run.steps},
        {"eval_every", c.run.eval_every},
        {"eval_batches", c.run.eval_batches},
        {"log_every", c.run.log_every},
        {"checkpoint_every", c.run.checkpoint_every},
        {"seed", c.run.seed},
        {"out_dir", c.run.out_dir},
        {"log_wallclock", c.run.log_wallclock},
        {"max_wallclock_s", c.run.max_wallclock_s}}},
  };
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Digest of the resolved configuration.
/// Digest of the resolved config, minus the output directory so a run can
/// resume into a fresh directory.
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = to_json(c);
  j["run"].erase("out_dir");
  return hex64(detail::fnv1a(j.dump()));
}

/// Digest of everything a pretrained checkpoint must share with a
/// fine-tuning run: segment length, embedding, encoder and main model.
inline std::string arch_hash(const ModelConfig& m) {
  Json j = model_to_json(m);
  j.erase("decoder");
  j["k"] = m.k;
  return hex64(detail::fnv1a(j.dump()));
}

}  // namespace haed
