#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "haed/model.hpp"

namespace haed {

struct LossReport {
  double total_nats = 0.0;
  std::size_t tokens = 0;
  std::size_t segments = 0;
  /// Mean nats per token (e2e) or per segment (IEM).
  double mean_nats = 0.0;
  /// Bits per real token; NaN for segment-level losses.
  double bpt = std::numeric_limits<double>::quiet_NaN();
};

inline double nats_to_bits(double nats) { return nats / std::numbers::ln2; }

template <typename T>
struct LossTerm {
  Var<T> loss;  // mean, differentiable
  LossReport report;
};

/// Mean token cross-entropy over non-ignored targets.
template <typename T>
LossTerm<T> e2e_loss(Var<T> logits, std::vector<int> targets, std::size_t segments = 0) {
  std::size_t count = 0;
  for (int t : targets) {
    if (t == kIgnoreTarget) continue;
    require(t >= 0 && t < static_cast<int>(kByteVocab), "OutOfRange",
            "e2e_loss: target " + std::to_string(t) + " outside [0, 255]");
    ++count;
  }
  require(count > 0, "AllMasked", "e2e_loss: every position is masked");
  Var<T> total = cross_entropy_rows(logits, std::move(targets));
  LossTerm<T> out{affine(total, T{1} / static_cast<T>(count)), {}};
  out.report.total_nats = static_cast<double>(total.value()[0]);
  out.report.tokens = count;
  out.report.segments = segments;
  out.report.mean_nats = out.report.total_nats / static_cast<double>(count);
  out.report.bpt = nats_to_bits(out.report.mean_nats);
  return out;
}

/// Segment encodings acting as the sampled columns of the implicit
/// embedding matrix: the gradient batch followed by the extra batches.
template <typename T>
struct NegativePool {
  Var<T> encodings;                  // [P, D]
  std::vector<std::size_t> positive;  // per gradient-batch segment
  std::size_t batch_segments = 0;     // rows [0, batch_segments) are the gradient batch
  std::size_t extra_batches = 0;
  std::size_t size() const { return encodings.rows(); }
};

/// Encodes every segment of the gradient batch and of `extra` with the current
/// encoder in one pass (gradients enabled for all rows). Duplicate segments
/// stay as distinct rows.
template <typename T>
NegativePool<T> build_negative_pool(Graph<T>& g, const HaedModel<T>& model, const Batch& batch,
                                    std::span<const Batch> extra) {
  require(batch.segment_count() > 0, "EmptyBatch", "negative pool: empty gradient batch");
  std::vector<int> tokens = batch.tokens;
  std::vector<std::size_t> lengths = batch.lengths;
  for (const Batch& b : extra) {
    require(b.k == batch.k, "DimensionMismatch", "negative pool: segment length mismatch");
    tokens.insert(tokens.end(), b.tokens.begin(), b.tokens.end());
    lengths.insert(lengths.end(), b.lengths.begin(), b.lengths.end());
  }
  NegativePool<T> pool;
  pool.encodings = model.encode(g, tokens, lengths);
  pool.batch_segments = batch.segment_count();
  pool.extra_batches = extra.size();
  pool.positive.resize(batch.segment_count());
  for (std::size_t i = 0; i < pool.positive.size(); ++i) pool.positive[i] = i;
  return pool;
}

/// Sampled-softmax loss over raw dot products ŷ_i · e_p; context i's
/// positive is pool row positive[i]. Mean nats per context.
template <typename T>
LossTerm<T> iem_loss(Var<T> contexts, const NegativePool<T>& pool) {
  require(contexts.cols() == pool.encodings.cols(), "DimensionMismatch",
          "iem_loss: context width " + std::to_string(contexts.cols()) + " vs encoding width " +
              std::to_string(pool.encodings.cols()));
  require(contexts.rows() == pool.positive.size(), "DimensionMismatch",
          "iem_loss: one positive per context required");
  require(contexts.rows() > 0, "EmptyBatch", "iem_loss: no contexts");
  std::vector<int> targets(pool.positive.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    require(pool.positive[i] < pool.size(), "OutOfRange", "iem_loss: positive index out of range");
    targets[i] = static_cast<int>(pool.positive[i]);
  }
  Var<T> logits = matmul_nt(contexts, pool.encodings);
  Var<T> total = cross_entropy_rows(logits, std::move(targets));
  const std::size_t n = contexts.rows();
  LossTerm<T> out{affine(total, T{1} / static_cast<T>(n)), {}};
  out.report.total_nats = static_cast<double>(total.value()[0]);
  out.report.segments = n;
  out.report.mean_nats = out.report.total_nats / static_cast<double>(n);
  return out;
}

}  // namespace haed
