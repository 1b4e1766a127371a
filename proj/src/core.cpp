#include "magic/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace magic {

Vocabulary::Vocabulary(std::vector<std::string> surfaces, SpecialTokens specials)
    : specials_(specials) {
  const auto n = static_cast<TokenId>(surfaces.size());
  auto in_range = [n](TokenId id) { return id >= 0 && id < n; };
  if (!in_range(specials.sos) || !in_range(specials.eos) || !in_range(specials.pad)) {
    throw ContractViolation("special token id out of range");
  }
  if (specials.sos == specials.eos || specials.sos == specials.pad || specials.eos == specials.pad) {
    throw ContractViolation("special token ids must be distinct");
  }
  tokens_.reserve(surfaces.size());
  for (TokenId id = 0; id < n; ++id) {
    auto& s = surfaces[static_cast<std::size_t>(id)];
    if (!by_surface_.emplace(s, id).second) {
      throw ContractViolation("duplicate vocabulary surface: " + s);
    }
    tokens_.push_back(Token{id, std::move(s)});
  }
}

const Token& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw NotFoundError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::lookup(const std::string& surface) const {
  auto it = by_surface_.find(surface);
  if (it == by_surface_.end()) return std::nullopt;
  return it->second;
}

bool Vocabulary::is_special(TokenId id) const {
  return id == specials_.sos || id == specials_.eos || id == specials_.pad;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (is_special(id)) continue;
    if (!out.empty()) out += ' ';
    out += token(id).surface;
  }
  return out;
}

std::vector<TokenId> Vocabulary::tokenize(const std::string& text) const {
  std::vector<TokenId> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    auto id = lookup(word);
    if (!id) throw NotFoundError("word not in vocabulary: " + word);
    ids.push_back(*id);
  }
  return ids;
}

Embedding::Embedding(std::vector<double> values) : values_(std::move(values)) {
  for (double v : values_) {
    if (!std::isfinite(v)) throw ContractViolation("embedding entries must be finite");
  }
}

bool Embedding::is_zero() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0; });
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("dimension mismatch in dot product");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ContractViolation("cosine_sim: dimension mismatch (" + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()) + ")");
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw ZeroVectorError("cosine_sim: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double cosine_sim(const Embedding& a, const Embedding& b) {
  return cosine_sim(a.values(), b.values());
}

GenerationState GenerationState::from_prompt(std::vector<TokenId> prompt) {
  GenerationState s;
  s.prompt = std::move(prompt);
  return s;
}

std::vector<TokenId> GenerationState::prefix() const {
  std::vector<TokenId> p;
  p.reserve(prompt.size() + generated.size());
  p.insert(p.end(), prompt.begin(), prompt.end());
  p.insert(p.end(), generated.begin(), generated.end());
  return p;
}

void GenerationState::accept(TokenId token, Embedding rep) {
  generated.push_back(token);
  accepted_reps.push_back(std::move(rep));
  step = generated.size();
}

void GenerationState::accept(TokenId token) {
  generated.push_back(token);
  step = generated.size();
}

bool GenerationState::valid() const {
  return step == generated.size() &&
         (accepted_reps.empty() || accepted_reps.size() == generated.size());
}

bool ranks_before(double conf_a, TokenId id_a, double conf_b, TokenId id_b) {
  if (conf_a != conf_b) return conf_a > conf_b;
  return id_a < id_b;
}

std::vector<TokenId> top_k_ids(std::span<const double> probs, std::size_t k) {
  std::vector<TokenId> ids(probs.size());
  std::iota(ids.begin(), ids.end(), 0);
  k = std::min(k, ids.size());
  auto before = [&](TokenId a, TokenId b) {
    return ranks_before(probs[static_cast<std::size_t>(a)], a, probs[static_cast<std::size_t>(b)], b);
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), before);
  ids.resize(k);
  return ids;
}

CandidateSet::CandidateSet(std::vector<Candidate> proposals, int k)
    : candidates_(std::move(proposals)), requested_k_(k) {
  if (k < 1) throw ContractViolation("candidate set requires k >= 1");
  double total = 0.0;
  for (const auto& c : candidates_) {
    if (!std::isfinite(c.confidence) || c.confidence < 0.0 || c.confidence > 1.0) {
      throw ContractViolation("candidate confidence must lie in [0, 1]");
    }
    total += c.confidence;
  }
  std::sort(candidates_.begin(), candidates_.end(), [](const Candidate& a, const Candidate& b) {
    return ranks_before(a.confidence, a.token.id, b.confidence, b.token.id);
  });
  if (candidates_.size() > static_cast<std::size_t>(k)) {
    candidates_.resize(static_cast<std::size_t>(k));
  }
  if (total > 1.0 + 1e-6) {
    throw ContractViolation("candidate confidences sum above 1");
  }
}

void MagicParams::validate() const {
  if (k < 1) throw ContractViolation("k must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractViolation("alpha must lie in [0, 1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ContractViolation("beta must be >= 0");
  if (max_len < 0) throw ContractViolation("max_len must be non-negative");
}

}  // namespace magic
