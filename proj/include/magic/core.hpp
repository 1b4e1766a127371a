#pragma once

// Shared domain types and the two scorer interfaces consumed by every decoder.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace magic {

using TokenId = std::int32_t;

// ----------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (dimension mismatch, bad range).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ZeroVectorError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

// ----------------------------------------------------------------------------
// Tokens and vocabulary

struct Token {
  TokenId id = 0;
  std::string surface;

  bool operator==(const Token&) const = default;
};

struct SpecialTokens {
  TokenId sos = 0;
  TokenId eos = 1;
  TokenId pad = 2;
};

class Vocabulary {
 public:
  Vocabulary() = default;
  /// Token ids are the positions in `surfaces`. Surfaces must be unique.
  Vocabulary(std::vector<std::string> surfaces, SpecialTokens specials);

  std::size_t size() const { return tokens_.size(); }
  const SpecialTokens& specials() const { return specials_; }
  const Token& token(TokenId id) const;
  std::optional<TokenId> lookup(const std::string& surface) const;
  const std::vector<Token>& tokens() const { return tokens_; }
  bool is_special(TokenId id) const;

  /// Space-joined surfaces with special tokens dropped.
  std::string detokenize(std::span<const TokenId> ids) const;
  /// Whitespace split; throws NotFoundError on an unknown word.
  std::vector<TokenId> tokenize(const std::string& text) const;

 private:
  std::vector<Token> tokens_;
  SpecialTokens specials_;
  std::unordered_map<std::string, TokenId> by_surface_;
};

// ----------------------------------------------------------------------------
// Embeddings and vector math

class Embedding {
 public:
  Embedding() = default;
  explicit Embedding(std::vector<double> values);

  std::size_t dim() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  bool is_zero() const;

  bool operator==(const Embedding&) const = default;

 private:
  std::vector<double> values_;
};

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

/// Cosine similarity clamped to [-1, 1]. Throws ContractViolation on a
/// dimension mismatch and ZeroVectorError when either side is all zero.
double cosine_sim(std::span<const double> a, std::span<const double> b);
double cosine_sim(const Embedding& a, const Embedding& b);

// ----------------------------------------------------------------------------
// Decoding state

struct GenerationState {
  std::vector<TokenId> prompt;
  std::vector<TokenId> generated;
  std::vector<Embedding> accepted_reps;  // one per generated token
  std::size_t step = 0;

  static GenerationState from_prompt(std::vector<TokenId> prompt);

  /// prompt followed by generated.
  std::vector<TokenId> prefix() const;
  void accept(TokenId token, Embedding rep);
  void accept(TokenId token);  // for decoders that do not track reps
  bool valid() const;
};

struct Candidate {
  Token token;
  double confidence = 0.0;
  Embedding rep;
};

/// Top-k proposals, ordered by confidence descending then token id ascending.
class CandidateSet {
 public:
  CandidateSet() = default;
  /// Sorts and truncates `proposals` to `k`. Validates confidences.
  CandidateSet(std::vector<Candidate> proposals, int k);

  const std::vector<Candidate>& candidates() const { return candidates_; }
  std::size_t size() const { return candidates_.size(); }
  const Candidate& operator[](std::size_t i) const { return candidates_[i]; }
  auto begin() const { return candidates_.begin(); }
  auto end() const { return candidates_.end(); }

  /// The requested k (before clamping to the vocabulary).
  int requested_k() const { return requested_k_; }
  bool clamped() const { return clamped_; }
  void mark_clamped(bool c) { clamped_ = c; }

 private:
  std::vector<Candidate> candidates_;
  int requested_k_ = 0;
  bool clamped_ = false;
};

/// Strict total order used everywhere candidates are ranked.
bool ranks_before(double conf_a, TokenId id_a, double conf_b, TokenId id_b);

/// Ids of the min(k, probs.size()) most probable tokens in ranking order.
std::vector<TokenId> top_k_ids(std::span<const double> probs, std::size_t k);

struct MagicParams {
  int k = 45;
  double alpha = 0.1;
  double beta = 2.0;
  int max_len = 16;

  void validate() const;
};

// ----------------------------------------------------------------------------
// Interfaces

/// Opaque image reference understood by an ImageTextScorer.
struct ImageHandle {
  std::string id;
  bool operator==(const ImageHandle&) const = default;
};

/// Autoregressive LM seen by the decoders. Forward evaluation only.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual SpecialTokens specials() const = 0;
  virtual Token token(TokenId id) const = 0;
  virtual std::string detokenize(std::span<const TokenId> ids) const = 0;

  /// Full next-token distribution p(.|prefix), indexed by token id.
  virtual std::vector<double> next_token_probs(std::span<const TokenId> prefix) const = 0;

  /// Top-k candidates for the next token with their representations.
  /// k larger than the vocabulary is clamped and flagged on the result.
  virtual CandidateSet propose(const GenerationState& state, int k) const = 0;

  /// Maximum prefix length (including a proposed token); 0 means unbounded.
  virtual std::size_t context_limit() const { return 0; }
};

/// Image-text similarity logits for a batch of texts against one image.
class ImageTextScorer {
 public:
  virtual ~ImageTextScorer() = default;
  virtual std::vector<double> image_text_logits(
      const ImageHandle& image, std::span<const std::vector<TokenId>> texts) const = 0;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Embedding encode_text(std::span<const TokenId> text) const = 0;
};

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual Embedding encode_image(const ImageHandle& image) const = 0;
};

}  // namespace magic
