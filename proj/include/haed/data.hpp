#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "haed/error.hpp"

namespace haed {

inline constexpr int kPad = 256;
inline constexpr std::size_t kByteVocab = 256;
/// Rows of the token embedding table: 256 byte values plus PAD.
inline constexpr std::size_t kEmbedRows = 257;
/// Decoder output width: 256 byte values plus PAD (never a target).
inline constexpr std::size_t kOutputVocab = 257;
/// Main-model window cap, equal to the positional table size.
inline constexpr std::size_t kMaxWindowSegments = 100;

enum class Source : std::uint8_t { text, image };

struct TokenSequence {
  std::vector<std::uint8_t> tokens;
  Source source = Source::text;
};

// ---------------------------------------------------------------------------
// Corpus loading

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "MissingFile", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Raw bytes of a file, in order.
inline TokenSequence load_text_corpus(const std::filesystem::path& path) {
  TokenSequence seq{read_file_bytes(path), Source::text};
  require(!seq.tokens.empty(), "EmptyCorpus", "corpus file is empty: " + path.string());
  return seq;
}

namespace detail {
inline std::uint32_t read_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void write_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
}  // namespace detail

struct ImageHeader {
  std::uint32_t count = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
};

/// Parses a HAIM container: "HAIM" | count u32le | H u32le | W u32le |
/// count*H*W*3 RGB bytes, row-major pixels.
inline std::vector<TokenSequence> parse_image_container(const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), "HAIM", 4) == 0, "BadMagic",
          "image container does not start with HAIM");
  require(bytes.size() >= 16, "Truncated", "image container header truncated");
  const ImageHeader h{detail::read_u32le(bytes.data() + 4), detail::read_u32le(bytes.data() + 8),
                      detail::read_u32le(bytes.data() + 12)};
  require(h.count > 0, "ZeroImages", "image container declares zero images");
  require(h.height > 0 && h.width > 0, "InvalidValue", "image container has zero-sized images");
  const std::size_t per_image = std::size_t{h.height} * h.width * 3;
  require(bytes.size() - 16 >= per_image * h.count, "Truncated",
          "image container payload shorter than declared " + std::to_string(h.count) + " images");
  std::vector<TokenSequence> out;
  out.reserve(h.count);
  for (std::size_t i = 0; i < h.count; ++i) {
    const auto* b = bytes.data() + 16 + i * per_image;
    out.push_back({std::vector<std::uint8_t>(b, b + per_image), Source::image});
  }
  return out;
}

inline std::vector<TokenSequence> load_image_corpus(const std::filesystem::path& path) {
  return parse_image_container(read_file_bytes(path));
}

inline std::vector<std::uint8_t> encode_image_container(const ImageHeader& h,
                                                        const std::vector<std::uint8_t>& rgb) {
  std::vector<std::uint8_t> out{'H', 'A', 'I', 'M'};
  detail::write_u32le(out, h.count);
  detail::write_u32le(out, h.height);
  detail::write_u32le(out, h.width);
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

// ---------------------------------------------------------------------------
// Hierarchies

enum class HierarchyMode : std::uint8_t { fixed_k, word };

struct HierarchyConfig {
  HierarchyMode mode = HierarchyMode::word;
  std::size_t k = 12;
};

struct SegmentSpan {
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct SegmentedSequence {
  std::vector<std::uint8_t> tokens;
  std::vector<SegmentSpan> segments;

  std::size_t size() const noexcept { return segments.size(); }
};

/// Consecutive segments of length k; a shorter tail segment is kept.
inline SegmentedSequence segment_fixed(const TokenSequence& seq, std::size_t k) {
  require(k >= 1, "InvalidValue", "segment length k must be >= 1");
  SegmentedSequence out{seq.tokens, {}};
  for (std::size_t off = 0; off < seq.tokens.size(); off += k)
    out.segments.push_back({off, std::min(k, seq.tokens.size() - off)});
  return out;
}

inline bool is_word_break(std::uint8_t b) {
  return b == 0x20 || b == 0x0A || b == 0x09 || b == 0x0D;
}

/// A segment ends after each whitespace byte; longer chunks are cut into
/// max_len pieces.
inline SegmentedSequence segment_words(const TokenSequence& seq, std::size_t max_len = 12) {
  require(max_len >= 1, "InvalidValue", "segment length k must be >= 1");
  require(seq.source == Source::text, "InvalidValue", "word segmentation requires a text source");
  SegmentedSequence out{seq.tokens, {}};
  std::size_t start = 0;
  const std::size_t n = seq.tokens.size();
  auto emit = [&](std::size_t end) {
    for (std::size_t off = start; off < end; off += max_len)
      out.segments.push_back({off, std::min(max_len, end - off)});
    start = end;
  };
  for (std::size_t i = 0; i < n; ++i)
    if (is_word_break(seq.tokens[i])) emit(i + 1);
  if (start < n) emit(n);
  return out;
}

inline SegmentedSequence segment(const TokenSequence& seq, const HierarchyConfig& h) {
  if (h.mode == HierarchyMode::word) return segment_words(seq, h.k);
  return segment_fixed(seq, h.k);
}

/// Contiguous sub-range [begin, end) of a document's segments, with tokens
/// re-based to the slice.
inline SegmentedSequence slice_segments(const SegmentedSequence& doc, std::size_t begin,
                                        std::size_t end) {
  SegmentedSequence out;
  if (begin >= end) return out;
  const std::size_t t0 = doc.segments[begin].offset;
  const std::size_t t1 = doc.segments[end - 1].offset + doc.segments[end - 1].length;
  out.tokens.assign(doc.tokens.begin() + static_cast<std::ptrdiff_t>(t0),
                    doc.tokens.begin() + static_cast<std::ptrdiff_t>(t1));
  for (std::size_t s = begin; s < end; ++s)
    out.segments.push_back({doc.segments[s].offset - t0, doc.segments[s].length});
  return out;
}

/// Fractional slice [lo, hi) of a corpus. A single document (text) is split
/// at segment granularity; multiple documents (images) at document granularity.
inline std::vector<SegmentedSequence> slice_corpus(const std::vector<SegmentedSequence>& docs,
                                                   double lo, double hi) {
  auto cut = [](std::size_t n, double f) {
    return std::min(n, static_cast<std::size_t>(static_cast<double>(n) * f + 0.5));
  };
  if (docs.size() == 1) {
    const std::size_t n = docs[0].size();
    auto s = slice_segments(docs[0], cut(n, lo), cut(n, hi));
    if (s.segments.empty()) return {};
    return {std::move(s)};
  }
  const std::size_t n = docs.size();
  return {docs.begin() + static_cast<std::ptrdiff_t>(cut(n, lo)),
          docs.begin() + static_cast<std::ptrdiff_t>(cut(n, hi))};
}

// ---------------------------------------------------------------------------
// Batching

/// A window is a run of at most kMaxWindowSegments consecutive segments of
/// one document: the unit the main model sees as a sequence.
struct Window {
  std::size_t doc = 0;
  std::size_t first_segment = 0;
  std::size_t segment_count = 0;
};

struct Batch {
  std::size_t k = 0;
  /// [n_seg * k] token ids, PAD-filled past each segment's length.
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;
  /// [n_seg * k], 1 where position >= length.
  std::vector<std::uint8_t> pad_mask;
  /// Window index (within the batch) of each segment.
  std::vector<std::size_t> segment_window;
  /// Segment count of each window, in batch order.
  std::vector<std::size_t> window_sizes;
  /// Corpus-wide window ids, for provenance checks.
  std::vector<std::size_t> window_ids;

  std::size_t segment_count() const noexcept { return lengths.size(); }
  std::size_t real_tokens() const noexcept {
    return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  }
  int token(std::size_t seg, std::size_t pos) const { return tokens[seg * k + pos]; }
};

enum class BatchUnit : std::uint8_t { documents, segments };

struct BatchSpec {
  BatchUnit unit = BatchUnit::segments;
  /// Documents per batch (documents) or minimum segments per batch (segments).
  std::size_t count = 256;
  std::size_t window = 64;
  std::size_t k = 12;
  /// Shuffle with the seed; otherwise corpus order.
  bool shuffle = true;
};

inline std::vector<Window> make_windows(const std::vector<SegmentedSequence>& docs,
                                        std::size_t window) {
  require(window >= 1 && window <= kMaxWindowSegments, "InvalidValue",
          "window length must be in [1, " + std::to_string(kMaxWindowSegments) + "]");
  std::vector<Window> out;
  for (std::size_t d = 0; d < docs.size(); ++d)
    for (std::size_t s = 0; s < docs[d].size(); s += window)
      out.push_back({d, s, std::min(window, docs[d].size() - s)});
  return out;
}

/// Assembles a padded batch from the given windows.
inline Batch assemble_batch(const std::vector<SegmentedSequence>& docs,
                            const std::vector<Window>& windows,
                            const std::vector<std::size_t>& window_ids, std::size_t k) {
  Batch b;
  b.k = k;
  for (std::size_t wi = 0; wi < window_ids.size(); ++wi) {
    const Window& w = windows[window_ids[wi]];
    const SegmentedSequence& doc = docs[w.doc];
    b.window_sizes.push_back(w.segment_count);
    b.window_ids.push_back(window_ids[wi]);
    for (std::size_t s = w.first_segment; s < w.first_segment + w.segment_count; ++s) {
      const SegmentSpan span = doc.segments[s];
      require(span.length >= 1 && span.length <= k, "InvalidValue",
              "segment length " + std::to_string(span.length) + " outside [1, k]");
      b.lengths.push_back(span.length);
      b.segment_window.push_back(wi);
      for (std::size_t p = 0; p < k; ++p) {
        const bool real = p < span.length;
        b.tokens.push_back(real ? doc.tokens[span.offset + p] : kPad);
        b.pad_mask.push_back(real ? 0 : 1);
      }
    }
  }
  return b;
}

/// Deterministic, randomly addressable stream of batches. Each epoch permutes
/// the units (documents or windows) with its own seed and groups them greedily
/// until a group reaches the requested size; an incomplete trailing group is
/// dropped.
class BatchStream {
 public:
  BatchStream(const std::vector<SegmentedSequence>& docs, BatchSpec spec, std::uint64_t seed)
      : docs_(&docs), spec_(spec), seed_(seed), windows_(make_windows(docs, spec.window)) {
    require(spec_.count >= 1, "InvalidValue", "batch size must be >= 1");
    if (spec_.unit == BatchUnit::documents) {
      std::vector<std::size_t> doc_unit(docs.size(), kNone);
      for (std::size_t w = 0; w < windows_.size(); ++w) {
        auto& slot = doc_unit[windows_[w].doc];
        if (slot == kNone) {
          slot = units_.size();
          units_.emplace_back();
          unit_size_.push_back(1);
        }
        units_[slot].push_back(w);
      }
    } else {
      for (std::size_t w = 0; w < windows_.size(); ++w) {
        units_.push_back({w});
        unit_size_.push_back(windows_[w].segment_count);
      }
    }
    const std::size_t total = std::accumulate(unit_size_.begin(), unit_size_.end(), std::size_t{0});
    require(total > 0, "EmptyBatch", "corpus has no segments");
    require(spec_.count <= total, "BatchTooLarge",
            "batch of " + std::to_string(spec_.count) + " exceeds corpus of " +
                std::to_string(total) +
                (spec_.unit == BatchUnit::documents ? " documents" : " segments"));
  }

  std::size_t batches_per_epoch() const { return epoch(0).size(); }
  const std::vector<Window>& windows() const noexcept { return windows_; }

  /// Window ids of batch `index`, in batch order.
  std::vector<std::size_t> batch_windows(std::size_t index) const {
    std::size_t e = 0;
    while (index >= epoch(e).size()) index -= epoch(e++).size();
    return epoch(e)[index];
  }

  Batch batch(std::size_t index) const {
    return assemble_batch(*docs_, windows_, batch_windows(index), spec_.k);
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  using Groups = std::vector<std::vector<std::size_t>>;

  const Groups& epoch(std::size_t e) const {
    while (epochs_.size() <= e) epochs_.push_back(group_epoch(epochs_.size()));
    return epochs_[e];
  }

  Groups group_epoch(std::size_t e) const {
    std::vector<std::size_t> order(units_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (spec_.shuffle) {
      std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (e + 1)));
      std::shuffle(order.begin(), order.end(), rng);
    }
    Groups groups;
    std::vector<std::size_t> cur;
    std::size_t taken = 0;
    for (std::size_t u : order) {
      cur.insert(cur.end(), units_[u].begin(), units_[u].end());
      taken += unit_size_[u];
      if (taken >= spec_.count) {
        groups.push_back(std::move(cur));
        cur.clear();
        taken = 0;
      }
    }
    return groups;
  }

  const std::vector<SegmentedSequence>* docs_;
  BatchSpec spec_;
  std::uint64_t seed_;
  std::vector<Window> windows_;
  std::vector<std::vector<std::size_t>> units_;
  std::vector<std::size_t> unit_size_;
  mutable std::vector<Groups> epochs_;
};

/// One epoch of batches.
inline std::vector<Batch> make_batches(const std::vector<SegmentedSequence>& docs,
                                       const BatchSpec& spec, std::uint64_t seed) {
  BatchStream stream(docs, spec, seed);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < stream.batches_per_epoch(); ++i) out.push_back(stream.batch(i));
  return out;
}

/// Every window of the corpus exactly once, in corpus order, grouped into
/// batches of at most `max_segments` segments. Used for evaluation.
inline std::vector<Batch> sequential_batches(const std::vector<SegmentedSequence>& docs,
                                             std::size_t window, std::size_t k,
                                             std::size_t max_segments) {
  const auto windows = make_windows(docs, window);
  std::vector<Batch> out;
  std::vector<std::size_t> ids;
  std::size_t segs = 0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    if (!ids.empty() && segs + windows[w].segment_count > max_segments) {
      out.push_back(assemble_batch(docs, windows, ids, k));
      ids.clear();
      segs = 0;
    }
    ids.push_back(w);
    segs += windows[w].segment_count;
  }
  if (!ids.empty()) out.push_back(assemble_batch(docs, windows, ids, k));
  return out;
}

}  // namespace haed
