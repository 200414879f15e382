#pragma once

#include "xt2c/objrep.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xt2c {

using Sentence = std::vector<std::string>;

// Lowercases and splits on whitespace.
Sentence tokenize(std::string_view text);

struct CorpusEntry {
  Sentence candidate;
  std::vector<Sentence> references;
  std::optional<Box3D> pred_box;
  std::optional<Box3D> gt_box;
};

using Corpus = std::vector<CorpusEntry>;

// CIDEr-D with document frequencies taken from a fixed reference collection
// (one document per entry). Scores carry the conventional x10 factor.
class CiderScorer {
 public:
  explicit CiderScorer(std::span<const std::vector<Sentence>> documents, double sigma = 6.0);

  double score(const Sentence& candidate, std::span<const Sentence> references) const;
  double sigma() const { return sigma_; }

 private:
  struct Vector {
    std::array<std::unordered_map<std::string, double>, 4> weights;
    std::array<double, 4> norms{};
    std::size_t length = 0;
  };
  Vector vectorize(const Sentence& s) const;
  double similarity(const Vector& hyp, const Vector& ref) const;

  std::unordered_map<std::string, double> document_frequency_;
  double log_documents_ = 0.0;
  double sigma_;
};

// Per-entry CIDEr-D against the corpus's own references.
std::vector<double> cider_d_scores(const Corpus& corpus, double sigma = 6.0);
double cider_d(const Corpus& corpus, double sigma = 6.0);

// Corpus-level BLEU-4: clipped precisions, closest reference length, no
// smoothing.
double bleu4(const Corpus& corpus);
// Each entry scored as a one-entry corpus.
std::vector<double> bleu4_sentence_scores(const Corpus& corpus);

std::vector<double> rouge_l_scores(const Corpus& corpus, double beta = 1.2);
double rouge_l(const Corpus& corpus, double beta = 1.2);

double iou_3d(const Box3D& a, const Box3D& b);

// mean_i m_i * [iou_i > k]
double m_at_k_iou(std::span<const double> metric_values, std::span<const double> ious, double k);

struct MetricReport {
  double cider = 0.0;  // raw CIDEr-D (x10 convention); reports also carry 100x this
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  // metric name ("cider", "bleu4", "rouge_l") -> threshold -> m@kIoU
  std::map<std::string, std::map<double, double>> m_at_iou;
  std::size_t n_entries = 0;
  std::optional<double> color_accuracy;
  std::map<std::string, std::string> metadata;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline constexpr double kDefaultIouThresholds[] = {0.25, 0.5};

// Boxes missing from an entry count as a perfect localization (IoU 1).
MetricReport evaluate_corpus(const Corpus& corpus, std::span<const double> thresholds = kDefaultIouThresholds);

std::string report_to_json(const MetricReport& report);
MetricReport report_from_json(const std::string& text);
std::string report_to_csv(const MetricReport& report);
// Plain-text table for terminals.
std::string report_to_table(const MetricReport& report);

}  // namespace xt2c
