#pragma once

// Automatic evaluation metrics over token sequences.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "magic/core.hpp"

namespace magic::metrics {

/// Percentage of duplicated n-grams: 100 * (1 - unique / total). 0 when the
/// text is shorter than n. Throws ContractViolation for n < 1.
template <typename T>
double rep_n(const std::vector<T>& tokens, int n);

/// Product over n = 2..4 of (1 - rep_n / 100).
template <typename T>
double diversity(const std::vector<T>& tokens);

/// Cosine between the encodings of prompt and continuation. Either side
/// encoding to the zero vector gives 0. Throws Error on an empty text.
double coherence(std::span<const TokenId> prompt, std::span<const TokenId> continuation,
                 const TextEncoder& encoder);

/// 2.5 * max(cosine, 0).
double clip_score(double cosine);
/// Grounding score of `text` against `image` through the two encoders; a text
/// that encodes to the zero vector scores 0.
double clip_score(const ImageHandle& image, std::span<const TokenId> text, const ImageEncoder& images,
                  const TextEncoder& texts);

/// Sentence BLEU up to `max_n`: geometric mean of clipped n-gram precisions
/// times the brevity penalty, with the reference length closest to the
/// candidate (shorter wins ties). Any zero precision gives 0; no smoothing.
double bleu(const std::vector<std::string>& candidate,
            const std::vector<std::vector<std::string>>& references, int max_n = 4);

/// LCS F-measure with recall weight beta = 1.2.
double rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
               double beta = 1.2);

std::vector<std::string> split_words(const std::string& text);

/// Per-instance metric values with column order fixed by `columns`. Columns an
/// instance does not have are written as empty CSV cells / JSON null and are
/// excluded from that column's mean.
class MetricReport {
 public:
  explicit MetricReport(std::vector<std::string> columns);

  void add(std::string instance_id, const std::map<std::string, double>& values);

  const std::vector<std::string>& columns() const { return columns_; }
  std::size_t instance_count() const { return rows_.size(); }
  std::optional<double> value(std::size_t row, const std::string& column) const;
  /// Arithmetic mean of the column over the instances that have it.
  std::optional<double> mean(const std::string& column) const;

  /// Header "instance,<columns>", one row per instance, then a "mean" row.
  std::string to_csv() const;
  /// {"columns": [...], "instance_count": n, "instances": [{"id", <column>...}], "mean": {...}}
  std::string to_json() const;

 private:
  struct Row {
    std::string id;
    std::vector<std::optional<double>> values;
  };
  std::size_t column_index(const std::string& column) const;

  std::vector<std::string> columns_;
  std::vector<Row> rows_;
};

/// Formats a metric value with enough digits to round-trip a double.
std::string format_value(double v);

}  // namespace magic::metrics
