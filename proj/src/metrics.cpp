#include "magic/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"

namespace magic::metrics {

template <typename T>
double rep_n(const std::vector<T>& tokens, int n) {
  if (n < 1) throw ContractViolation("rep_n: n must be >= 1");
  const auto un = static_cast<std::size_t>(n);
  if (tokens.size() < un) return 0.0;
  std::set<std::vector<T>> unique;
  const std::size_t total = tokens.size() - un + 1;
  for (std::size_t i = 0; i < total; ++i) {
    unique.emplace(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                   tokens.begin() + static_cast<std::ptrdiff_t>(i + un));
  }
  return 100.0 * (1.0 - static_cast<double>(unique.size()) / static_cast<double>(total));
}

template <typename T>
double diversity(const std::vector<T>& tokens) {
  double d = 1.0;
  for (int n = 2; n <= 4; ++n) d *= 1.0 - rep_n(tokens, n) / 100.0;
  return d;
}

template double rep_n(const std::vector<std::string>&, int);
template double rep_n(const std::vector<TokenId>&, int);
template double diversity(const std::vector<std::string>&);
template double diversity(const std::vector<TokenId>&);

double coherence(std::span<const TokenId> prompt, std::span<const TokenId> continuation,
                 const TextEncoder& encoder) {
  if (prompt.empty() || continuation.empty()) throw Error("coherence: empty text");
  const auto a = encoder.encode_text(prompt);
  const auto b = encoder.encode_text(continuation);
  if (a.is_zero() || b.is_zero()) return 0.0;
  return cosine_sim(a, b);
}

double clip_score(double cosine) { return 2.5 * std::max(cosine, 0.0); }

double clip_score(const ImageHandle& image, std::span<const TokenId> text, const ImageEncoder& images,
                  const TextEncoder& texts) {
  const auto t = texts.encode_text(text);
  if (t.is_zero()) return 0.0;
  return clip_score(cosine_sim(images.encode_image(image), t));
}

namespace {

using Ngrams = std::map<std::vector<std::string>, int>;

Ngrams count_ngrams(const std::vector<std::string>& words, std::size_t n) {
  Ngrams counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++counts[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& candidate, const std::vector<std::vector<std::string>>& references,
            int max_n) {
  if (max_n < 1) throw ContractViolation("bleu: max_n must be >= 1");
  if (references.empty()) throw ContractViolation("bleu: no references");
  if (candidate.empty()) return 0.0;

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    const auto cand = count_ngrams(candidate, un);
    Ngrams max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, c] : count_ngrams(ref, un)) max_ref[gram] = std::max(max_ref[gram], c);
    }
    int clipped = 0, total = 0;
    for (const auto& [gram, c] : cand) {
      total += c;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }

  const auto c = static_cast<double>(candidate.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const auto len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / max_n);
}

double rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
               double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t m = candidate.size(), n = reference.size();
  std::vector<std::vector<int>> dp(m + 1, std::vector<int>(n + 1, 0));
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      dp[i][j] = candidate[i - 1] == reference[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
    }
  }
  const double lcs = dp[m][n];
  if (lcs == 0.0) return 0.0;
  const double precision = lcs / static_cast<double>(m);
  const double recall = lcs / static_cast<double>(n);
  const double b2 = beta * beta;
  return (1.0 + b2) * precision * recall / (recall + b2 * precision);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

namespace {

// Quotes a CSV field that contains a separator, quote or line break.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MetricReport::MetricReport(std::vector<std::string> columns) : columns_(std::move(columns)) {
  std::set<std::string> seen;
  for (const auto& c : columns_) {
    if (!seen.insert(c).second) throw ContractViolation("duplicate metric column: " + c);
  }
}

std::size_t MetricReport::column_index(const std::string& column) const {
  auto it = std::find(columns_.begin(), columns_.end(), column);
  if (it == columns_.end()) throw NotFoundError("unknown metric column: " + column);
  return static_cast<std::size_t>(it - columns_.begin());
}

void MetricReport::add(std::string instance_id, const std::map<std::string, double>& values) {
  Row row{std::move(instance_id), std::vector<std::optional<double>>(columns_.size())};
  for (const auto& [name, v] : values) row.values[column_index(name)] = v;
  rows_.push_back(std::move(row));
}

std::optional<double> MetricReport::value(std::size_t row, const std::string& column) const {
  return rows_.at(row).values[column_index(column)];
}

std::optional<double> MetricReport::mean(const std::string& column) const {
  const auto c = column_index(column);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows_) {
    if (r.values[c]) {
      sum += *r.values[c];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "instance";
  for (const auto& c : columns_) out << ',' << c;
  out << '\n';
  for (const auto& r : rows_) {
    out << csv_field(r.id);
    for (const auto& v : r.values) out << ',' << (v ? format_value(*v) : "");
    out << '\n';
  }
  out << "mean";
  for (const auto& c : columns_) {
    const auto m = mean(c);
    out << ',' << (m ? format_value(*m) : "");
  }
  out << '\n';
  return out.str();
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["columns"] = columns_;
  doc["instance_count"] = rows_.size();
  auto instances = nlohmann::ordered_json::array();
  for (const auto& r : rows_) {
    nlohmann::ordered_json row;
    row["id"] = r.id;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      row[columns_[i]] = r.values[i] ? nlohmann::ordered_json(*r.values[i]) : nlohmann::ordered_json();
    }
    instances.push_back(row);
  }
  doc["instances"] = instances;
  nlohmann::ordered_json means;
  for (const auto& c : columns_) {
    const auto m = mean(c);
    means[c] = m ? nlohmann::ordered_json(*m) : nlohmann::ordered_json();
  }
  doc["mean"] = means;
  return doc.dump(2) + "\n";
}

}  // namespace magic::metrics
