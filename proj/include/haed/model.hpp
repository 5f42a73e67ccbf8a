#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "haed/data.hpp"
#include "haed/ops.hpp"

namespace haed {

enum class EncoderKind : std::uint8_t { mlp, rnn };
enum class MainKind : std::uint8_t { transformer, rnn };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::mlp;
  std::vector<std::size_t> mlp_hidden{256, 256};
  std::size_t rnn_units = 1024;
  std::size_t embed_dim = 10;
};

struct MainConfig {
  MainKind kind = MainKind::transformer;
  std::size_t layers = 6;
  std::size_t model_dim = 356;
  std::size_t ff_dim = 1424;
  std::size_t heads = 8;
  std::size_t head_dim = 32;
  std::size_t max_positions = 100;
  std::size_t rnn_units = 1500;
  bool capped_input_gate = true;
};

struct DecoderConfig {
  /// 0 selects a stub decoder that emits all-zero logits (timing baseline).
  std::size_t units = 1024;
};

struct ModelConfig {
  std::size_t k = 12;
  EncoderConfig encoder;
  MainConfig main;
  DecoderConfig decoder;
};

/// Zero-pads or truncates a vector to width d.
template <typename T>
std::vector<T> adapt_width(std::span<const T> v, std::size_t d) {
  std::vector<T> out(d, T{0});
  std::copy_n(v.begin(), std::min(v.size(), d), out.begin());
  return out;
}

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Per-parameter generator: initialization of one parameter depends only on
/// the seed and the parameter's name.
inline std::mt19937_64 param_rng(std::uint64_t seed, const std::string& name) {
  return std::mt19937_64(seed ^ fnv1a(name));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recurrent cell

template <typename T>
struct LstmWeights {
  Parameter<T>* wx = nullptr;  // [in, 4U]
  Parameter<T>* wh = nullptr;  // [U, 4U]
  Parameter<T>* b = nullptr;   // [4U]
  std::size_t units = 0;
};

template <typename T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

/// Clamps into [lo, hi]. The gradient passes through unchanged; the clamp
/// only absorbs rounding past a bound the capped cell already guarantees.
template <typename T>
Var<T> clamp_rounding(Var<T> a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  Graph<T>& g = *a.graph;
  return g.op(std::move(out), {a}, [&g, a] {
    return [&g, a](const Tensor<T>& d) { detail::accumulate(g.grad(a.id), d); };
  });
}

/// One LSTM step with gate order (input, forget, candidate, output). With
/// `capped`, the effective input gate is min(i, 1 - f), which keeps a cell
/// state that starts in [-1, 1] inside [-1, 1].
template <typename T>
LstmState<T> lstm_step(Graph<T>& g, const LstmWeights<T>& w, Var<T> x, LstmState<T> s, bool capped) {
  const std::size_t u = w.units;
  Var<T> gates = add_bias(add(matmul(x, g.parameter(*w.wx)), matmul(s.h, g.parameter(*w.wh))),
                          g.parameter(*w.b));
  Var<T> i = sigmoid(slice_cols(gates, 0, u));
  Var<T> f = sigmoid(slice_cols(gates, u, 2 * u));
  Var<T> cand = tanh(slice_cols(gates, 2 * u, 3 * u));
  Var<T> o = sigmoid(slice_cols(gates, 3 * u, 4 * u));
  if (capped) i = minimum(i, affine(f, T{-1}, T{1}));
  Var<T> c = add(mul(f, s.c), mul(i, cand));
  if (capped) c = clamp_rounding(c, T{-1}, T{1});
  Var<T> h = mul(o, tanh(c));
  return {h, c};
}

// ---------------------------------------------------------------------------
// Model

/// Output of the decoder over a batch: step-major logits [steps * n, 257]
/// (row t*n + i is segment i's prediction of its token t).
template <typename T>
struct DecodeResult {
  Var<T> logits;
  std::size_t steps = 0;
  std::vector<int> targets;  // kIgnoreTarget past each segment's length
};

template <typename T>
class HaedModel {
 public:
  HaedModel(ModelConfig cfg, std::uint64_t seed, bool with_decoder = true)
      : cfg_(std::move(cfg)), seed_(seed), has_decoder_(with_decoder) {
    validate();
    build_embedding();
    build_encoder();
    build_main();
    if (has_decoder_) build_decoder();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  bool has_decoder() const noexcept { return has_decoder_; }
  std::size_t model_dim() const noexcept { return cfg_.main.model_dim; }

  /// Re-draws every decoder parameter from `seed`.
  void reinit_decoder(std::uint64_t seed) {
    params_.for_each([&](Parameter<T>& p) {
      if (p.name.starts_with("decoder.")) initialize(p, seed);
    });
  }

  // -- embedding ------------------------------------------------------------

  /// Token ids in [0, 256] -> [ids.size(), embed_dim].
  Var<T> embed(Graph<T>& g, const std::vector<int>& ids) const {
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] <= kPad, "OutOfRange",
              "token id " + std::to_string(ids[i]) + " outside [0, 256]");
      idx[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(g.parameter(*embed_), std::move(idx));
  }

  // -- encoder --------------------------------------------------------------

  /// Encodes n segments given as a [n * k] PAD-filled token grid -> [n, D].
  Var<T> encode(Graph<T>& g, const std::vector<int>& tokens,
                const std::vector<std::size_t>& lengths) const {
    ComponentScope<T> scope(g, Component::encoder);
    const std::size_t n = lengths.size(), k = cfg_.k;
    require(tokens.size() == n * k, "DimensionMismatch", "encode: token grid is not n*k");
    require(n > 0, "EmptyBatch", "encode: no segments");
    Var<T> e = embed(g, tokens);
    Var<T> out;
    if (cfg_.encoder.kind == EncoderKind::mlp) {
      Var<T> x = reshape(e, {n, k * cfg_.encoder.embed_dim});
      for (std::size_t l = 0; l < mlp_w_.size(); ++l)
        x = relu(add_bias(matmul(x, g.parameter(*mlp_w_[l])), g.parameter(*mlp_b_[l])));
      out = x;
    } else {
      const std::size_t u = enc_rnn_.units;
      std::size_t steps = 0;
      for (auto len : lengths) {
        require(len >= 1 && len <= k, "InvalidValue", "encode: segment length outside [1, k]");
        steps = std::max(steps, len);
      }
      LstmState<T> s{g.constant(Tensor<T>({n, u})), g.constant(Tensor<T>({n, u}))};
      for (std::size_t t = 0; t < steps; ++t) {
        std::vector<std::size_t> idx(n);
        std::vector<std::uint8_t> active(n);
        for (std::size_t i = 0; i < n; ++i) {
          idx[i] = i * k + t;
          active[i] = t < lengths[i] ? 1 : 0;
        }
        LstmState<T> next = lstm_step(g, enc_rnn_, gather_rows(e, std::move(idx)), s, false);
        s = {where_rows(next.h, s.h, active), where_rows(next.c, s.c, active)};
      }
      out = s.h;
    }
    return pad_cols(out, cfg_.main.model_dim);
  }

  // -- main model -----------------------------------------------------------

  /// Context vectors for n segments grouped into consecutive windows. Row i
  /// of the result depends only on encodings of earlier segments of the
  /// same window (and the learned begin-of-sequence vector).
  Var<T> main_forward(Graph<T>& g, Var<T> encodings, const std::vector<std::size_t>& windows) const {
    ComponentScope<T> scope(g, Component::main);
    const std::size_t n = encodings.rows();
    require(encodings.cols() == cfg_.main.model_dim, "DimensionMismatch",
            "main_forward: encoding width");
    std::size_t total = 0;
    for (auto m : windows) {
      require(m >= 1, "InvalidValue", "main_forward: empty window");
      require(m <= cfg_.main.max_positions, "WindowTooLong",
              "window of " + std::to_string(m) + " segments exceeds " +
                  std::to_string(cfg_.main.max_positions) + " positions");
      total += m;
    }
    require(total == n, "DimensionMismatch", "main_forward: windows do not cover the encodings");

    // Shift right by one within each window: [BOS, x_0, ..., x_{m-2}].
    std::vector<std::size_t> shift(n);
    std::vector<std::size_t> pos(n);
    for (std::size_t w = 0, r0 = 0; w < windows.size(); r0 += windows[w], ++w) {
      for (std::size_t i = 0; i < windows[w]; ++i) {
        shift[r0 + i] = i == 0 ? n : r0 + i - 1;
        pos[r0 + i] = i;
      }
    }
    Var<T> x = gather_rows(concat_rows<T>({encodings, g.parameter(*bos_)}), std::move(shift));

    if (cfg_.main.kind == MainKind::transformer) {
      x = add(x, gather_rows(g.parameter(*pos_), std::move(pos)));
      for (const auto& L : layers_) {
        Var<T> a = layer_norm(x, g.parameter(*L.ln1_g), g.parameter(*L.ln1_b));
        Var<T> att = causal_attention(matmul(a, g.parameter(*L.wq)), matmul(a, g.parameter(*L.wk)),
                                      matmul(a, g.parameter(*L.wv)), cfg_.main.heads, windows);
        x = add(x, add_bias(matmul(att, g.parameter(*L.wo)), g.parameter(*L.bo)));
        Var<T> f = layer_norm(x, g.parameter(*L.ln2_g), g.parameter(*L.ln2_b));
        Var<T> hdn = gelu(add_bias(matmul(f, g.parameter(*L.w1)), g.parameter(*L.b1)));
        x = add(x, add_bias(matmul(hdn, g.parameter(*L.w2)), g.parameter(*L.b2)));
      }
      return layer_norm(x, g.parameter(*lnf_g_), g.parameter(*lnf_b_));
    }

    // Recurrent main model: windows advance in lockstep, time-major.
    const std::size_t nw = windows.size(), u = main_rnn_.units;
    std::size_t steps = 0;
    for (auto m : windows) steps = std::max(steps, m);
    std::vector<std::size_t> win_start(nw);
    for (std::size_t w = 0, r0 = 0; w < nw; r0 += windows[w], ++w) win_start[w] = r0;
    LstmState<T> s{g.constant(Tensor<T>({nw, u})), g.constant(Tensor<T>({nw, u}))};
    std::vector<Var<T>> hs;
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<std::size_t> idx(nw);
      for (std::size_t w = 0; w < nw; ++w) idx[w] = t < windows[w] ? win_start[w] + t : kZeroRow;
      s = lstm_step(g, main_rnn_, gather_rows(x, std::move(idx)), s, cfg_.main.capped_input_gate);
      hs.push_back(s.h);
    }
    std::vector<std::size_t> out_idx(n);
    for (std::size_t w = 0; w < nw; ++w)
      for (std::size_t t = 0; t < windows[w]; ++t) out_idx[win_start[w] + t] = t * nw + w;
    Var<T> h = gather_rows(concat_rows(hs), std::move(out_idx));
    return add_bias(matmul(h, g.parameter(*proj_w_)), g.parameter(*proj_b_));
  }

  // -- decoder --------------------------------------------------------------

  /// Teacher-forced decoding of n segments conditioned on their context
  /// vectors. Step t consumes token t-1 (a learned BOS at t = 0).
  DecodeResult<T> decode(Graph<T>& g, Var<T> contexts, const std::vector<int>& tokens,
                         const std::vector<std::size_t>& lengths) const {
    require(has_decoder_, "InvalidState", "model was built without a decoder");
    ComponentScope<T> scope(g, Component::decoder);
    const std::size_t n = lengths.size(), k = cfg_.k;
    require(tokens.size() == n * k, "DimensionMismatch", "decode: token grid is not n*k");
    require(contexts.rows() == n && contexts.cols() == cfg_.main.model_dim, "DimensionMismatch",
            "decode: context shape " + shape_str(contexts.shape()));
    DecodeResult<T> r;
    for (auto len : lengths) {
      require(len >= 1 && len <= k, "InvalidValue", "decode: segment length outside [1, k]");
      r.steps = std::max(r.steps, len);
    }
    r.targets.assign(r.steps * n, kIgnoreTarget);
    for (std::size_t t = 0; t < r.steps; ++t)
      for (std::size_t i = 0; i < n; ++i)
        if (t < lengths[i]) r.targets[t * n + i] = tokens[i * k + t];

    if (cfg_.decoder.units == 0) {
      r.logits = g.constant(Tensor<T>({r.steps * n, kOutputVocab}));
      return r;
    }

    LstmState<T> s{
        add_bias(matmul(contexts, g.parameter(*init_h_w_)), g.parameter(*init_h_b_)),
        add_bias(matmul(contexts, g.parameter(*init_c_w_)), g.parameter(*init_c_b_))};
    std::vector<int> prev;
    prev.reserve(n * (r.steps - 1));
    for (std::size_t t = 1; t < r.steps; ++t)
      for (std::size_t i = 0; i < n; ++i) prev.push_back(tokens[i * k + t - 1]);
    Var<T> bos = gather_rows(g.parameter(*dec_bos_), std::vector<std::size_t>(n, 0));
    Var<T> emb = r.steps > 1 ? embed(g, prev) : bos;
    std::vector<Var<T>> hs;
    for (std::size_t t = 0; t < r.steps; ++t) {
      Var<T> in = bos;
      if (t > 0) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = (t - 1) * n + i;
        in = gather_rows(emb, std::move(idx));
      }
      s = lstm_step(g, dec_rnn_, in, s, false);
      hs.push_back(s.h);
    }
    r.logits = add_bias(matmul(concat_rows(hs), g.parameter(*out_w_)), g.parameter(*out_b_));
    return r;
  }

 private:
  struct Layer {
    Parameter<T>*ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *bo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };

  enum class Init : std::uint8_t { zeros, ones, normal_fan_in, normal_small, normal_unit, residual, lstm_bias };

  void validate() const {
    require(cfg_.k >= 1, "InvalidValue", "k must be >= 1");
    require(cfg_.encoder.embed_dim >= 1, "InvalidValue", "embed_dim must be >= 1");
    require(cfg_.main.model_dim >= 1, "InvalidValue", "model_dim must be >= 1");
    require(cfg_.main.max_positions >= 1 && cfg_.main.max_positions <= kMaxWindowSegments,
            "InvalidValue", "max_positions must be in [1, 100]");
    if (cfg_.encoder.kind == EncoderKind::mlp)
      require(!cfg_.encoder.mlp_hidden.empty(), "InvalidValue", "MLP encoder needs a hidden layer");
    else
      require(cfg_.encoder.rnn_units >= 1, "InvalidValue", "encoder rnn_units must be >= 1");
    if (cfg_.main.kind == MainKind::transformer) {
      require(cfg_.main.heads >= 1 && cfg_.main.head_dim >= 1 && cfg_.main.layers >= 1 &&
                  cfg_.main.ff_dim >= 1,
              "InvalidValue", "transformer dimensions must be >= 1");
    } else {
      require(cfg_.main.rnn_units >= 1, "InvalidValue", "main rnn_units must be >= 1");
    }
  }

  Parameter<T>* make_param(const std::string& name, Shape shape, ParamGroup group, Init init,
                    std::size_t fan_in = 1) {
    Parameter<T>& p = params_.add(name, Tensor<T>(std::move(shape)), group);
    inits_.push_back({init, fan_in});
    initialize(p, seed_);
    return &p;
  }

  void initialize(Parameter<T>& p, std::uint64_t seed) {
    std::size_t idx = 0;
    while (&params_[idx] != &p) ++idx;
    const auto [init, fan_in] = inits_[idx];
    auto rng = detail::param_rng(seed, p.name);
    double sd = 0.0;
    switch (init) {
      case Init::zeros: p.value.fill(T{0}); return;
      case Init::ones: p.value.fill(T{1}); return;
      case Init::lstm_bias:
        // Forget-gate bias of 1, everything else 0.
        p.value.fill(T{0});
        for (std::size_t j = fan_in; j < 2 * fan_in; ++j) p.value[j] = T{1};
        return;
      case Init::normal_fan_in: sd = 1.0 / std::sqrt(static_cast<double>(fan_in)); break;
      case Init::normal_small: sd = 0.02; break;
      case Init::normal_unit: sd = 1.0; break;
      case Init::residual:
        sd = 1.0 / std::sqrt(static_cast<double>(fan_in) * 2.0 * static_cast<double>(cfg_.main.layers));
        break;
    }
    std::normal_distribution<double> dist(0.0, sd);
    for (auto& v : p.value.values()) v = static_cast<T>(dist(rng));
  }

  LstmWeights<T> add_lstm(const std::string& prefix, std::size_t in, std::size_t units,
                          ParamGroup group) {
    LstmWeights<T> w;
    w.units = units;
    w.wx = make_param(prefix + ".wx", {in, 4 * units}, group, Init::normal_fan_in, in);
    w.wh = make_param(prefix + ".wh", {units, 4 * units}, group, Init::normal_fan_in, units);
    w.b = make_param(prefix + ".b", {4 * units}, group, Init::lstm_bias, units);
    return w;
  }

  void build_embedding() {
    embed_ = make_param("embed.table", {kEmbedRows, cfg_.encoder.embed_dim}, ParamGroup::enc_dec,
                 Init::normal_unit);
  }

  void build_encoder() {
    const std::size_t e = cfg_.encoder.embed_dim;
    if (cfg_.encoder.kind == EncoderKind::mlp) {
      std::size_t in = cfg_.k * e;
      for (std::size_t l = 0; l < cfg_.encoder.mlp_hidden.size(); ++l) {
        const std::size_t out = cfg_.encoder.mlp_hidden[l];
        const std::string p = "encoder.mlp." + std::to_string(l);
        mlp_w_.push_back(make_param(p + ".w", {in, out}, ParamGroup::enc_dec, Init::normal_fan_in, in));
        mlp_b_.push_back(make_param(p + ".b", {out}, ParamGroup::enc_dec, Init::zeros));
        in = out;
      }
    } else {
      enc_rnn_ = add_lstm("encoder.rnn", e, cfg_.encoder.rnn_units, ParamGroup::enc_dec);
    }
  }

  void build_main() {
    const auto& m = cfg_.main;
    const std::size_t d = m.model_dim;
    bos_ = make_param("main.bos", {1, d}, ParamGroup::main, Init::normal_fan_in, d);
    if (m.kind == MainKind::transformer) {
      const std::size_t hw = m.heads * m.head_dim;
      pos_ = make_param("main.pos", {m.max_positions, d}, ParamGroup::main, Init::normal_small);
      for (std::size_t l = 0; l < m.layers; ++l) {
        const std::string p = "main.layer" + std::to_string(l);
        Layer L{};
        L.ln1_g = make_param(p + ".ln1.g", {d}, ParamGroup::main, Init::ones);
        L.ln1_b = make_param(p + ".ln1.b", {d}, ParamGroup::main, Init::zeros);
        L.wq = make_param(p + ".attn.wq", {d, hw}, ParamGroup::main, Init::normal_fan_in, d);
        L.wk = make_param(p + ".attn.wk", {d, hw}, ParamGroup::main, Init::normal_fan_in, d);
        L.wv = make_param(p + ".attn.wv", {d, hw}, ParamGroup::main, Init::normal_fan_in, d);
        L.wo = make_param(p + ".attn.wo", {hw, d}, ParamGroup::main, Init::residual, hw);
        L.bo = make_param(p + ".attn.bo", {d}, ParamGroup::main, Init::zeros);
        L.ln2_g = make_param(p + ".ln2.g", {d}, ParamGroup::main, Init::ones);
        L.ln2_b = make_param(p + ".ln2.b", {d}, ParamGroup::main, Init::zeros);
        L.w1 = make_param(p + ".ff.w1", {d, m.ff_dim}, ParamGroup::main, Init::normal_fan_in, d);
        L.b1 = make_param(p + ".ff.b1", {m.ff_dim}, ParamGroup::main, Init::zeros);
        L.w2 = make_param(p + ".ff.w2", {m.ff_dim, d}, ParamGroup::main, Init::residual, m.ff_dim);
        L.b2 = make_param(p + ".ff.b2", {d}, ParamGroup::main, Init::zeros);
        layers_.push_back(L);
      }
      lnf_g_ = make_param("main.ln_f.g", {d}, ParamGroup::main, Init::ones);
      lnf_b_ = make_param("main.ln_f.b", {d}, ParamGroup::main, Init::zeros);
    } else {
      main_rnn_ = add_lstm("main.rnn", d, m.rnn_units, ParamGroup::main);
      proj_w_ = make_param("main.proj.w", {m.rnn_units, d}, ParamGroup::main, Init::normal_fan_in, m.rnn_units);
      proj_b_ = make_param("main.proj.b", {d}, ParamGroup::main, Init::zeros);
    }
  }

  void build_decoder() {
    const std::size_t u = cfg_.decoder.units, d = cfg_.main.model_dim, e = cfg_.encoder.embed_dim;
    if (u == 0) return;
    dec_bos_ = make_param("decoder.bos", {1, e}, ParamGroup::enc_dec, Init::normal_unit);
    init_h_w_ = make_param("decoder.init_h.w", {d, u}, ParamGroup::enc_dec, Init::normal_fan_in, d);
    init_h_b_ = make_param("decoder.init_h.b", {u}, ParamGroup::enc_dec, Init::zeros);
    init_c_w_ = make_param("decoder.init_c.w", {d, u}, ParamGroup::enc_dec, Init::normal_fan_in, d);
    init_c_b_ = make_param("decoder.init_c.b", {u}, ParamGroup::enc_dec, Init::zeros);
    dec_rnn_ = add_lstm("decoder.rnn", e, u, ParamGroup::enc_dec);
    out_w_ = make_param("decoder.out.w", {u, kOutputVocab}, ParamGroup::enc_dec, Init::normal_fan_in, u);
    out_b_ = make_param("decoder.out.b", {kOutputVocab}, ParamGroup::enc_dec, Init::zeros);
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  bool has_decoder_;
  ParamStore<T> params_;
  std::vector<std::pair<Init, std::size_t>> inits_;

  Parameter<T>* embed_ = nullptr;
  std::vector<Parameter<T>*> mlp_w_, mlp_b_;
  LstmWeights<T> enc_rnn_;
  Parameter<T>*bos_ = nullptr, *pos_ = nullptr, *lnf_g_ = nullptr, *lnf_b_ = nullptr;
  std::vector<Layer> layers_;
  LstmWeights<T> main_rnn_;
  Parameter<T>*proj_w_ = nullptr, *proj_b_ = nullptr;
  Parameter<T>*dec_bos_ = nullptr, *init_h_w_ = nullptr, *init_h_b_ = nullptr,
  *init_c_w_ = nullptr, *init_c_b_ = nullptr, *out_w_ = nullptr, *out_b_ = nullptr;
  LstmWeights<T> dec_rnn_;
};

}  // namespace haed
