#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "haed/data.hpp"

namespace haed {

namespace detail {

/// Portable uniform double in [0, 1) from a 64-bit engine.
inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Index drawn from an (unnormalised) cumulative weight table.
inline std::size_t draw(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = unit(rng) * cdf.back();
  return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

inline std::vector<double> zipf_cdf(std::size_t n, double s) {
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) cdf[i] = acc += 1.0 / std::pow(static_cast<double>(i + 1), s);
  return cdf;
}

}  // namespace detail

struct SynthTextOptions {
  std::size_t bytes = 1 << 20;
  std::size_t vocabulary = 400;
  /// Successor list length of each word in the bigram chain.
  std::size_t successors = 6;
  /// Probability of following the bigram chain instead of the unigram draw.
  double chain_probability = 0.85;
};

/// Word-structured English-like text: a Zipf vocabulary of letter strings
/// emitted by a sparse bigram chain, with sentence breaks and newlines.
inline std::string make_synth_text(std::uint64_t seed, const SynthTextOptions& o = {}) {
  std::mt19937_64 rng(seed);
  const std::string letters = "etaoinshrdlcumwfgypbvkjxqz";
  const auto letter_cdf = detail::zipf_cdf(letters.size(), 1.0);
  std::vector<std::string> words(o.vocabulary);
  for (auto& w : words) {
    const std::size_t len = 1 + static_cast<std::size_t>(std::min(8.0, -std::log(1.0 - detail::unit(rng)) * 3.5));
    for (std::size_t i = 0; i < len; ++i) w += letters[detail::draw(rng, letter_cdf)];
  }
  const auto word_cdf = detail::zipf_cdf(o.vocabulary, 1.1);
  const auto succ_cdf = detail::zipf_cdf(o.successors, 1.5);
  std::vector<std::vector<std::size_t>> next(o.vocabulary);
  for (auto& s : next)
    for (std::size_t j = 0; j < o.successors; ++j) s.push_back(detail::draw(rng, word_cdf));

  std::string out;
  out.reserve(o.bytes + 16);
  std::size_t cur = detail::draw(rng, word_cdf);
  std::size_t in_sentence = 0, in_line = 0;
  while (out.size() < o.bytes) {
    out += words[cur];
    ++in_sentence;
    if (in_sentence >= 4 && detail::unit(rng) < 0.12) {
      out += '.';
      in_sentence = 0;
      if (++in_line >= 3 && detail::unit(rng) < 0.4) {
        out += '\n';
        in_line = 0;
      } else {
        out += ' ';
      }
      cur = detail::draw(rng, word_cdf);
      continue;
    }
    out += ' ';
    cur = detail::unit(rng) < o.chain_probability ? next[cur][detail::draw(rng, succ_cdf)]
                                                  : detail::draw(rng, word_cdf);
  }
  out.resize(o.bytes);
  return out;
}

/// HAIM container of smooth colour gradients with soft discs and mild noise.
inline std::vector<std::uint8_t> make_synth_images(std::uint64_t seed, std::uint32_t count,
                                                   std::uint32_t height, std::uint32_t width) {
  require(count > 0 && height > 0 && width > 0, "InvalidValue", "synthetic images need non-zero sizes");
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> rgb;
  rgb.reserve(std::size_t{count} * height * width * 3);
  for (std::uint32_t n = 0; n < count; ++n) {
    double base[3], gx[3], gy[3], disc[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = 40 + 170 * detail::unit(rng);
      gx[c] = (detail::unit(rng) - 0.5) * 4;
      gy[c] = (detail::unit(rng) - 0.5) * 4;
      disc[c] = (detail::unit(rng) - 0.5) * 160;
    }
    const double cx = width * detail::unit(rng), cy = height * detail::unit(rng);
    const double r = 2 + 0.3 * std::min(width, height) * detail::unit(rng);
    for (std::uint32_t y = 0; y < height; ++y) {
      for (std::uint32_t x = 0; x < width; ++x) {
        const double d = std::hypot(x - cx, y - cy);
        const double inside = 1.0 / (1.0 + std::exp(d - r));
        for (int c = 0; c < 3; ++c) {
          const double v = base[c] + gx[c] * x + gy[c] * y + disc[c] * inside + (detail::unit(rng) - 0.5) * 6;
          rgb.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
        }
      }
    }
  }
  return encode_image_container({count, height, width}, rgb);
}

}  // namespace haed
