#include "xt2c/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace xt2c {
namespace {

constexpr int kMaxN = 4;
constexpr char kJoin = '\x1f';

std::string ngram_key(const Sentence& s, std::size_t begin, int n) {
  std::string key = s[begin];
  for (int i = 1; i < n; ++i) {
    key += kJoin;
    key += s[begin + static_cast<std::size_t>(i)];
  }
  return key;
}

using Counts = std::unordered_map<std::string, int>;

// counts[n-1] holds the n-gram counts of s.
std::array<Counts, kMaxN> ngram_counts(const Sentence& s) {
  std::array<Counts, kMaxN> counts;
  for (int n = 1; n <= kMaxN; ++n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) ++counts[n - 1][ngram_key(s, i, n)];
  }
  return counts;
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct BleuStats {
  std::array<double, kMaxN> matched{};
  std::array<double, kMaxN> total{};
  double candidate_length = 0.0;
  double reference_length = 0.0;

  void add(const CorpusEntry& e) {
    const auto cand = ngram_counts(e.candidate);
    std::array<std::unordered_map<std::string, int>, kMaxN> max_ref;
    for (const auto& ref : e.references) {
      const auto rc = ngram_counts(ref);
      for (int n = 0; n < kMaxN; ++n) {
        for (const auto& [k, c] : rc[n]) max_ref[n][k] = std::max(max_ref[n][k], c);
      }
    }
    for (int n = 0; n < kMaxN; ++n) {
      for (const auto& [k, c] : cand[n]) {
        const auto it = max_ref[n].find(k);
        matched[n] += std::min(c, it == max_ref[n].end() ? 0 : it->second);
        total[n] += c;
      }
    }
    const double c = static_cast<double>(e.candidate.size());
    candidate_length += c;
    // Closest reference length; ties go to the shorter reference.
    double best = -1.0;
    for (const auto& ref : e.references) {
      const double r = static_cast<double>(ref.size());
      if (best < 0.0 || std::abs(r - c) < std::abs(best - c) || (std::abs(r - c) == std::abs(best - c) && r < best)) {
        best = r;
      }
    }
    reference_length += std::max(best, 0.0);
  }

  double score() const {
    if (candidate_length == 0.0) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < kMaxN; ++n) {
      if (matched[n] == 0.0 || total[n] == 0.0) return 0.0;
      log_sum += std::log(matched[n] / total[n]);
    }
    const double bp = candidate_length >= reference_length ? 1.0 : std::exp(1.0 - reference_length / candidate_length);
    return bp * std::exp(log_sum / kMaxN);
  }
};

}  // namespace

Sentence tokenize(std::string_view text) {
  Sentence out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

CiderScorer::CiderScorer(std::span<const std::vector<Sentence>> documents, double sigma) : sigma_(sigma) {
  for (const auto& refs : documents) {
    std::set<std::string> seen;
    for (const auto& ref : refs) {
      const auto counts = ngram_counts(ref);
      for (const auto& per_n : counts) {
        for (const auto& kv : per_n) seen.insert(kv.first);
      }
    }
    for (const auto& k : seen) document_frequency_[k] += 1.0;
  }
  log_documents_ = documents.empty() ? 0.0 : std::log(static_cast<double>(documents.size()));
}

CiderScorer::Vector CiderScorer::vectorize(const Sentence& s) const {
  Vector v;
  const auto counts = ngram_counts(s);
  for (int n = 0; n < kMaxN; ++n) {
    double norm = 0.0;
    for (const auto& [k, tf] : counts[n]) {
      const auto it = document_frequency_.find(k);
      const double df = std::log(std::max(1.0, it == document_frequency_.end() ? 0.0 : it->second));
      const double w = static_cast<double>(tf) * (log_documents_ - df);
      v.weights[n][k] = w;
      norm += w * w;
    }
    v.norms[n] = std::sqrt(norm);
  }
  // bigram count, as in the reference scorer
  v.length = s.empty() ? 0 : s.size() - 1;
  return v;
}

double CiderScorer::similarity(const Vector& hyp, const Vector& ref) const {
  const double delta = static_cast<double>(hyp.length) - static_cast<double>(ref.length);
  const double penalty = std::exp(-(delta * delta) / (2.0 * sigma_ * sigma_));
  double total = 0.0;
  for (int n = 0; n < kMaxN; ++n) {
    double val = 0.0;
    for (const auto& [k, w] : hyp.weights[n]) {
      const auto it = ref.weights[n].find(k);
      if (it == ref.weights[n].end()) continue;
      val += std::min(w, it->second) * it->second;
    }
    if (hyp.norms[n] != 0.0 && ref.norms[n] != 0.0) val /= hyp.norms[n] * ref.norms[n];
    total += val * penalty;
  }
  return total;
}

double CiderScorer::score(const Sentence& candidate, std::span<const Sentence> references) const {
  if (references.empty()) return 0.0;
  const Vector hyp = vectorize(candidate);
  double acc = 0.0;
  for (const auto& ref : references) acc += similarity(hyp, vectorize(ref));
  return acc / kMaxN / static_cast<double>(references.size()) * 10.0;
}

std::vector<double> cider_d_scores(const Corpus& corpus, double sigma) {
  std::vector<std::vector<Sentence>> docs;
  docs.reserve(corpus.size());
  for (const auto& e : corpus) docs.push_back(e.references);
  const CiderScorer scorer(docs, sigma);
  std::vector<double> out;
  out.reserve(corpus.size());
  for (const auto& e : corpus) out.push_back(scorer.score(e.candidate, e.references));
  return out;
}

double cider_d(const Corpus& corpus, double sigma) {
  if (corpus.empty()) throw ConfigError("cider_d: empty corpus");
  const auto s = cider_d_scores(corpus, sigma);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

double bleu4(const Corpus& corpus) {
  if (corpus.empty()) throw ConfigError("bleu4: empty corpus");
  BleuStats stats;
  for (const auto& e : corpus) stats.add(e);
  return stats.score();
}

std::vector<double> bleu4_sentence_scores(const Corpus& corpus) {
  std::vector<double> out;
  out.reserve(corpus.size());
  for (const auto& e : corpus) {
    BleuStats stats;
    stats.add(e);
    out.push_back(stats.score());
  }
  return out;
}

std::vector<double> rouge_l_scores(const Corpus& corpus, double beta) {
  std::vector<double> out;
  out.reserve(corpus.size());
  for (const auto& e : corpus) {
    double best_p = 0.0, best_r = 0.0;
    for (const auto& ref : e.references) {
      const double lcs = static_cast<double>(lcs_length(e.candidate, ref));
      if (!e.candidate.empty()) best_p = std::max(best_p, lcs / static_cast<double>(e.candidate.size()));
      if (!ref.empty()) best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
    }
    const double b2 = beta * beta;
    out.push_back(best_p > 0.0 && best_r > 0.0 ? ((1.0 + b2) * best_p * best_r) / (best_r + b2 * best_p) : 0.0);
  }
  return out;
}

double rouge_l(const Corpus& corpus, double beta) {
  if (corpus.empty()) throw ConfigError("rouge_l: empty corpus");
  const auto s = rouge_l_scores(corpus, beta);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

double iou_3d(const Box3D& a, const Box3D& b) {
  double inter = 1.0;
  double va = 1.0, vb = 1.0;
  for (int i = 0; i < 3; ++i) {
    const double alo = a.center[i] - a.size[i] / 2.0, ahi = a.center[i] + a.size[i] / 2.0;
    const double blo = b.center[i] - b.size[i] / 2.0, bhi = b.center[i] + b.size[i] / 2.0;
    inter *= std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo));
    va *= std::max(0.0, a.size[i]);
    vb *= std::max(0.0, b.size[i]);
  }
  const double uni = va + vb - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double m_at_k_iou(std::span<const double> metric_values, std::span<const double> ious, double k) {
  if (metric_values.size() != ious.size()) throw DimensionError("m_at_k_iou: metric and IoU counts differ");
  if (metric_values.empty()) throw ConfigError("m_at_k_iou: no entries");
  double acc = 0.0;
  for (std::size_t i = 0; i < ious.size(); ++i) acc += ious[i] > k ? metric_values[i] : 0.0;
  return acc / static_cast<double>(ious.size());
}

MetricReport evaluate_corpus(const Corpus& corpus, std::span<const double> thresholds) {
  if (corpus.empty()) throw ConfigError("evaluate_corpus: empty corpus");
  MetricReport report;
  report.n_entries = corpus.size();
  const auto cider_entries = cider_d_scores(corpus);
  report.cider = std::accumulate(cider_entries.begin(), cider_entries.end(), 0.0) / static_cast<double>(corpus.size());
  report.bleu4 = bleu4(corpus);
  const auto rouge_entries = rouge_l_scores(corpus);
  report.rouge_l = std::accumulate(rouge_entries.begin(), rouge_entries.end(), 0.0) / static_cast<double>(corpus.size());
  const auto bleu_entries = bleu4_sentence_scores(corpus);

  std::vector<double> ious;
  ious.reserve(corpus.size());
  for (const auto& e : corpus) {
    if (e.pred_box.has_value() != e.gt_box.has_value()) {
      throw ConfigError("evaluate_corpus: predicted and ground-truth boxes must be both present or both absent");
    }
    ious.push_back(e.pred_box ? iou_3d(*e.pred_box, *e.gt_box) : 1.0);
  }
  for (double k : thresholds) {
    report.m_at_iou["cider"][k] = m_at_k_iou(cider_entries, ious, k);
    report.m_at_iou["bleu4"][k] = m_at_k_iou(bleu_entries, ious, k);
    report.m_at_iou["rouge_l"][k] = m_at_k_iou(rouge_entries, ious, k);
  }
  return report;
}

namespace {

std::string threshold_key(double k) {
  std::ostringstream os;
  os << std::setprecision(6) << k;
  return os.str();
}

}  // namespace

std::string report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["cider_d"] = r.cider;
  j["cider_d_x100"] = r.cider * 100.0;
  j["bleu4"] = r.bleu4;
  j["rouge_l"] = r.rouge_l;
  j["meteor"] = nullptr;
  j["meteor_status"] = "unavailable";
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [metric, per_k] : r.m_at_iou) {
    for (const auto& [k, v] : per_k) m[metric + "@" + threshold_key(k) + "IoU"] = v;
  }
  j["m_at_iou"] = m;
  j["n_entries"] = r.n_entries;
  if (r.color_accuracy) j["color_accuracy"] = *r.color_accuracy;
  j["metadata"] = r.metadata;
  return j.dump(2);
}

MetricReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metric report: ") + e.what());
  }
  MetricReport r;
  r.cider = j.at("cider_d").get<double>();
  r.bleu4 = j.at("bleu4").get<double>();
  r.rouge_l = j.at("rouge_l").get<double>();
  r.n_entries = j.at("n_entries").get<std::size_t>();
  for (const auto& [key, v] : j.at("m_at_iou").items()) {
    const auto at = key.find('@');
    const auto iou = key.rfind("IoU");
    if (at == std::string::npos || iou == std::string::npos) throw FormatError("metric report: bad key " + key);
    r.m_at_iou[key.substr(0, at)][std::stod(key.substr(at + 1, iou - at - 1))] = v.get<double>();
  }
  if (j.contains("color_accuracy")) r.color_accuracy = j["color_accuracy"].get<double>();
  if (j.contains("metadata")) r.metadata = j["metadata"].get<std::map<std::string, std::string>>();
  return r;
}

std::string report_to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "metric,value\n";
  os << "cider_d," << r.cider << "\n";
  os << "cider_d_x100," << r.cider * 100.0 << "\n";
  os << "bleu4," << r.bleu4 << "\n";
  os << "rouge_l," << r.rouge_l << "\n";
  os << "meteor,unavailable\n";
  for (const auto& [metric, per_k] : r.m_at_iou) {
    for (const auto& [k, v] : per_k) os << metric << "@" << threshold_key(k) << "IoU," << v << "\n";
  }
  if (r.color_accuracy) os << "color_accuracy," << *r.color_accuracy << "\n";
  os << "n_entries," << r.n_entries << "\n";
  return os.str();
}

std::string report_to_table(const MetricReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "  entries        " << r.n_entries << "\n";
  os << "  CIDEr-D (x100) " << r.cider * 100.0 << "\n";
  os << "  BLEU-4  (x100) " << r.bleu4 * 100.0 << "\n";
  os << "  ROUGE-L (x100) " << r.rouge_l * 100.0 << "\n";
  os << "  METEOR         n/a\n";
  if (r.color_accuracy) os << "  color acc (%)  " << *r.color_accuracy * 100.0 << "\n";
  for (const auto& [metric, per_k] : r.m_at_iou) {
    for (const auto& [k, v] : per_k) {
      os << "  " << std::left << std::setw(15) << (metric + "@" + threshold_key(k)) << std::right << v * 100.0 << "\n";
    }
  }
  for (const auto& [k, v] : r.metadata) os << "  " << k << ": " << v << "\n";
  return os.str();
}

}  // namespace xt2c
