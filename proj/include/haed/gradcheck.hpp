#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "haed/numeric.hpp"
#include "haed/objectives.hpp"
#include "haed/train.hpp"

namespace haed {

struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

namespace detail {

inline ModelConfig tiny_model(EncoderKind enc, MainKind main, std::size_t decoder_units = 5) {
  ModelConfig m;
  m.k = 3;
  m.encoder.kind = enc;
  m.encoder.embed_dim = 3;
  m.encoder.mlp_hidden = {5, 4};
  m.encoder.rnn_units = 4;
  m.main.kind = main;
  m.main.layers = 2;
  m.main.model_dim = 6;
  m.main.ff_dim = 8;
  m.main.heads = 2;
  m.main.head_dim = 3;
  m.main.max_positions = 8;
  m.main.rnn_units = 5;
  m.decoder.units = decoder_units;
  return m;
}

/// Random batch of two windows (3 and 2 segments) over a small alphabet.
inline Batch tiny_batch(std::uint64_t seed, std::size_t k = 3) {
  std::mt19937_64 rng(seed);
  Batch b;
  b.k = k;
  b.window_sizes = {3, 2};
  for (std::size_t w = 0; w < 2; ++w) {
    for (std::size_t s = 0; s < b.window_sizes[w]; ++s) {
      const std::size_t len = 1 + rng() % k;
      b.lengths.push_back(len);
      b.segment_window.push_back(w);
      for (std::size_t p = 0; p < k; ++p) {
        b.tokens.push_back(p < len ? static_cast<int>(97 + rng() % 5) : kPad);
        b.pad_mask.push_back(p < len ? 0 : 1);
      }
    }
  }
  return b;
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

/// Marks every parameter outside `prefixes` as frozen so the check spends
/// its evaluations on the component under test.
inline void only_train(ParamStore<double>& params, std::initializer_list<std::string_view> prefixes) {
  params.for_each([&](Parameter<double>& p) {
    p.trainable = false;
    for (auto pre : prefixes)
      if (p.name.starts_with(pre)) p.trainable = true;
  });
}

/// Moves every parameter off its initial value so the check runs at a
/// generic point: zero biases put ReLU inputs exactly on the kink.
inline void jitter(ParamStore<double>& params, std::uint64_t seed, double sd = 0.1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  params.for_each([&](Parameter<double>& p) {
    for (auto& v : p.value.values()) v += dist(rng);
  });
}

/// Scalar readout with a fixed random direction, so every output coordinate
/// carries a well-scaled gradient.
inline Var<double> project(Var<double> x, std::uint64_t seed) {
  Graph<double>& g = *x.graph;
  return sum(mul(x, g.constant(random_tensor(x.shape(), seed))));
}

}  // namespace detail

/// Every differentiable building block, checked at tiny 64-bit dimensions.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using detail::tiny_model;
  std::vector<GradCheckCase> cases;

  cases.push_back({"softmax_xent", [](const GradCheckOptions& o) {
                     ParamStore<double> ps;
                     auto& logits = ps.add("logits", detail::random_tensor({4, 7}, 11, 2.0), ParamGroup::main);
                     return grad_check([&](Graph<double>& g) {
                       return cross_entropy_rows(g.parameter(logits), {0, 3, kIgnoreTarget, 6});
                     }, ps, o);
                   }});

  cases.push_back({"embed", [](const GradCheckOptions& o) {
                     HaedModel<double> m(tiny_model(EncoderKind::mlp, MainKind::transformer), 1);
                     detail::jitter(m.params(), 77);
                     detail::only_train(m.params(), {"embed."});
                     const std::vector<int> ids{0, 5, 97, 97, 256, 255};
                     return grad_check([&](Graph<double>& g) { return detail::project(m.embed(g, ids), 21); },
                                       m.params(), o);
                   }});

  auto encoder_case = [](EncoderKind kind) {
    return [kind](const GradCheckOptions& o) {
      HaedModel<double> m(tiny_model(kind, MainKind::transformer), 2);
      detail::jitter(m.params(), 77);
      detail::only_train(m.params(), {"embed.", "encoder."});
      const Batch b = detail::tiny_batch(3);
      return grad_check([&](Graph<double>& g) { return detail::project(m.encode(g, b.tokens, b.lengths), 22); },
                        m.params(), o);
    };
  };
  cases.push_back({"encoder_mlp", encoder_case(EncoderKind::mlp)});
  cases.push_back({"encoder_rnn", encoder_case(EncoderKind::rnn)});

  cases.push_back({"capped_cell", [](const GradCheckOptions& o) {
                     ParamStore<double> ps;
                     const std::size_t in = 3, u = 4, n = 2;
                     LstmWeights<double> w;
                     w.units = u;
                     w.wx = &ps.add("cell.wx", detail::random_tensor({in, 4 * u}, 31, 0.6), ParamGroup::main);
                     w.wh = &ps.add("cell.wh", detail::random_tensor({u, 4 * u}, 32, 0.6), ParamGroup::main);
                     w.b = &ps.add("cell.b", detail::random_tensor({4 * u}, 33, 0.3), ParamGroup::main);
                     auto& x = ps.add("cell.x", detail::random_tensor({n, in}, 34), ParamGroup::main);
                     return grad_check([&](Graph<double>& g) {
                       LstmState<double> s{g.constant(Tensor<double>({n, u})), g.constant(Tensor<double>({n, u}))};
                       Var<double> acc = g.constant(Tensor<double>({1}));
                       for (int t = 0; t < 4; ++t) {
                         s = lstm_step(g, w, affine(g.parameter(x), 1.0 + t, 0.0), s, true);
                         acc = add(acc, add(detail::project(s.h, 40 + t), detail::project(s.c, 50 + t)));
                       }
                       return acc;
                     }, ps, o);
                   }});

  auto main_case = [](MainKind kind) {
    return [kind](const GradCheckOptions& o) {
      HaedModel<double> m(tiny_model(EncoderKind::mlp, kind), 4);
      detail::jitter(m.params(), 77);
      detail::only_train(m.params(), {"main."});
      auto& enc = m.params().add("input.encodings", detail::random_tensor({5, 6}, 41), ParamGroup::main);
      const std::vector<std::size_t> windows{3, 2};
      return grad_check([&](Graph<double>& g) {
        return detail::project(m.main_forward(g, g.parameter(enc), windows), 23);
      }, m.params(), o);
    };
  };
  cases.push_back({"main_transformer", main_case(MainKind::transformer)});
  cases.push_back({"main_rnn", main_case(MainKind::rnn)});

  cases.push_back({"decoder", [](const GradCheckOptions& o) {
                     HaedModel<double> m(tiny_model(EncoderKind::mlp, MainKind::transformer), 5);
                     detail::jitter(m.params(), 77);
                     detail::only_train(m.params(), {"decoder.", "embed.", "input."});
                     auto& ctx = m.params().add("input.contexts", detail::random_tensor({5, 6}, 42), ParamGroup::main);
                     const Batch b = detail::tiny_batch(6);
                     return grad_check([&](Graph<double>& g) {
                       DecodeResult<double> d = m.decode(g, g.parameter(ctx), b.tokens, b.lengths);
                       return detail::project(d.logits, 24);
                     }, m.params(), o);
                   }});

  cases.push_back({"e2e_loss", [](const GradCheckOptions& o) {
                     HaedModel<double> m(tiny_model(EncoderKind::mlp, MainKind::transformer), 7);
                     detail::jitter(m.params(), 77);
                     const Batch b = detail::tiny_batch(8);
                     return grad_check([&](Graph<double>& g) { return e2e_batch_loss(g, m, b).loss; }, m.params(), o);
                   }});

  cases.push_back({"iem_loss", [](const GradCheckOptions& o) {
                     HaedModel<double> m(tiny_model(EncoderKind::rnn, MainKind::transformer), 9, false);
                     detail::jitter(m.params(), 77);
                     const Batch b = detail::tiny_batch(10);
                     const std::vector<Batch> neg{detail::tiny_batch(12), detail::tiny_batch(13)};
                     return grad_check([&](Graph<double>& g) { return iem_batch_loss(g, m, b, neg).loss; },
                                       m.params(), o);
                   }});
  return cases;
}

}  // namespace haed
