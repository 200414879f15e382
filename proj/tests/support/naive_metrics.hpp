#pragma once

// Straightforward re-implementations of the caption metrics used as oracles.

#include "xt2c/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace xt2c::oracle {

inline std::string gram(const Sentence& s, std::size_t i, std::size_t n) {
  std::string k = s[i];
  for (std::size_t j = 1; j < n; ++j) k += "|" + s[i + j];
  return k;
}

inline std::map<std::string, int> grams(const Sentence& s, std::size_t n) {
  std::map<std::string, int> m;
  for (std::size_t i = 0; i + n <= s.size(); ++i) m[gram(s, i, n)]++;
  return m;
}

inline double naive_cider(const Corpus& corpus, std::size_t entry, double sigma = 6.0) {
  std::map<std::string, int> df;
  for (const auto& e : corpus) {
    std::set<std::string> seen;
    for (const auto& r : e.references)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto& [k, c] : grams(r, n)) seen.insert(k);
    for (const auto& k : seen) df[k]++;
  }
  const double logn = std::log(static_cast<double>(corpus.size()));
  auto weight = [&](const std::string& k, int tf) {
    const int d = df.count(k) ? df[k] : 0;
    return tf * (logn - std::log(std::max(1.0, static_cast<double>(d))));
  };
  const auto& e = corpus[entry];
  double sum = 0.0;
  for (const auto& ref : e.references) {
    const double lh = e.candidate.empty() ? 0.0 : static_cast<double>(e.candidate.size() - 1);
    const double lr = ref.empty() ? 0.0 : static_cast<double>(ref.size() - 1);
    const double pen = std::exp(-(lh - lr) * (lh - lr) / (2 * sigma * sigma));
    for (std::size_t n = 1; n <= 4; ++n) {
      auto h = grams(e.candidate, n);
      auto r = grams(ref, n);
      double num = 0.0, nh = 0.0, nr = 0.0;
      for (const auto& [k, c] : h) {
        const double wh = weight(k, c);
        nh += wh * wh;
        if (r.count(k)) {
          const double wr = weight(k, r[k]);
          num += std::min(wh, wr) * wr;
        }
      }
      for (const auto& [k, c] : r) nr += weight(k, c) * weight(k, c);
      double val = num;
      if (nh != 0 && nr != 0) val /= std::sqrt(nh) * std::sqrt(nr);
      sum += val * pen;
    }
  }
  return sum / 4.0 / static_cast<double>(e.references.size()) * 10.0;
}

inline double naive_bleu(const Corpus& corpus) {
  double c = 0, r = 0;
  double match[4] = {}, total[4] = {};
  for (const auto& e : corpus) {
    c += static_cast<double>(e.candidate.size());
    double best = -1;
    for (const auto& ref : e.references) {
      const double d = std::abs(static_cast<double>(ref.size()) - static_cast<double>(e.candidate.size()));
      const double bd = std::abs(best - static_cast<double>(e.candidate.size()));
      if (best < 0 || d < bd || (d == bd && static_cast<double>(ref.size()) < best))
        best = static_cast<double>(ref.size());
    }
    r += best;
    for (std::size_t n = 1; n <= 4; ++n) {
      for (const auto& [k, cnt] : grams(e.candidate, n)) {
        int mx = 0;
        for (const auto& ref : e.references) {
          auto rg = grams(ref, n);
          if (rg.count(k)) mx = std::max(mx, rg[k]);
        }
        match[n - 1] += std::min(cnt, mx);
        total[n - 1] += cnt;
      }
    }
  }
  double logp = 0;
  for (int n = 0; n < 4; ++n) {
    if (match[n] == 0 || total[n] == 0) return 0.0;
    logp += std::log(match[n] / total[n]) / 4.0;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(logp);
}

inline std::size_t naive_lcs(const Sentence& a, const Sentence& b) {
  // exhaustive over subsequences of the shorter side is too slow; use the
  // textbook recursion with memo
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> f = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::size_t v = a[i] == b[j] ? 1 + f(i + 1, j + 1) : std::max(f(i + 1, j), f(i, j + 1));
    return memo[key] = v;
  };
  return f(0, 0);
}

inline double naive_rouge(const CorpusEntry& e, double beta = 1.2) {
  double p = 0, r = 0;
  for (const auto& ref : e.references) {
    const double l = static_cast<double>(naive_lcs(e.candidate, ref));
    p = std::max(p, l / static_cast<double>(e.candidate.size()));
    r = std::max(r, l / static_cast<double>(ref.size()));
  }
  if (p == 0 || r == 0) return 0.0;
  return (1 + beta * beta) * p * r / (r + beta * beta * p);
}

inline Corpus random_corpus(std::mt19937_64& rng) {
  const std::vector<std::string> words = {"a", "b", "c", "d", "e"};
  std::uniform_int_distribution<int> entries(1, 4), refs(1, 3), len(1, 6), w(0, 4);
  auto sentence = [&] {
    Sentence s(static_cast<std::size_t>(len(rng)));
    for (auto& x : s) x = words[static_cast<std::size_t>(w(rng))];
    return s;
  };
  Corpus c(static_cast<std::size_t>(entries(rng)));
  for (auto& e : c) {
    e.candidate = sentence();
    e.references.resize(static_cast<std::size_t>(refs(rng)));
    for (auto& r : e.references) r = sentence();
  }
  return c;
}

inline CorpusEntry entry(const std::string& cand, std::vector<std::string> refs) {
  CorpusEntry e;
  e.candidate = tokenize(cand);
  for (const auto& r : refs) e.references.push_back(tokenize(r));
  return e;
}

inline Box3D box(double x, double y, double z, double w, double h, double l) { return Box3D{{x, y, z}, {w, h, l}}; }

}  // namespace xt2c::oracle
