#pragma once

// Decoding algorithms: MAGIC search, contrastive search, greedy, beam and the
// stochastic samplers (top-k, nucleus, typical).

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "magic/core.hpp"

namespace magic {

/// Softmax of image-text logits over the candidate set.
struct MagicDistribution {
  std::vector<double> probs;
};

MagicDistribution magic_distribution(std::span<const double> logits);

/// Max cosine between `candidate_rep` and the accepted reps; 0 when none.
double degeneration_penalty(const Embedding& candidate_rep, std::span<const Embedding> accepted_reps);

/// The selection objective for one candidate:
///   (1 - alpha) * confidence - alpha * penalty + beta * magic
double selection_score(double confidence, double penalty, double magic, double alpha, double beta);

struct ScoredCandidate {
  Candidate candidate;
  double penalty = 0.0;
  double magic = 0.0;
  double total = 0.0;
};

struct StepDiagnostics {
  Token chosen_token;
  double confidence = 0.0;
  double penalty = 0.0;
  double magic = 0.0;
  double total_score = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  std::optional<std::vector<ScoredCandidate>> candidate_dump;

  /// Recomputes total_score from the stored terms.
  double recomputed_total() const;
};

struct StepResult {
  Candidate chosen;
  StepDiagnostics diagnostics;
};

/// One MAGIC search step over the LM's top-k candidates grounded on `image`.
/// With beta == 0 the scorer is not consulted.
StepResult magic_step(const GenerationState& state, const MagicParams& params,
                      const LanguageModel& lm, const ImageTextScorer& scorer,
                      const ImageHandle& image, bool dump_candidates = false);

/// Contrastive search step: MAGIC search without the image term.
StepResult contrastive_step(const GenerationState& state, int k, double alpha,
                            const LanguageModel& lm, bool dump_candidates = false);

// ----------------------------------------------------------------------------
// Truncation rules for the stochastic baselines

struct TopK {
  int k = 40;
};
struct Nucleus {
  double p = 0.95;
};
struct Typical {
  double tau = 0.2;
};
using FilterRule = std::variant<TopK, Nucleus, Typical>;

struct FilteredDistribution {
  std::vector<TokenId> ids;   // ascending
  std::vector<double> probs;  // renormalized, aligned with ids
};

FilteredDistribution filter_candidates(std::span<const double> probs, const FilterRule& rule);

/// Seeded randomness for the samplers; draws are portable across platforms.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : engine_(seed) {}
  /// Uniform double in [0, 1).
  double uniform();

 private:
  std::mt19937_64 engine_;
};

TokenId draw(const FilteredDistribution& dist, RandomSource& rng);

Token sample_step(const GenerationState& state, const FilterRule& rule, const LanguageModel& lm,
                  RandomSource& rng);

// ----------------------------------------------------------------------------
// Full decoding loop

enum class StopReason { eos, max_len };
const char* to_string(StopReason r);

struct DecodeResult {
  std::vector<TokenId> tokens;
  std::string text;
  std::vector<StepDiagnostics> steps;
  StopReason stop_reason = StopReason::max_len;
};

enum class Method { greedy, beam, top_k, nucleus, typical, contrastive, magic };
const char* to_string(Method m);
/// Throws ContractViolation for an unknown name.
Method parse_method(const std::string& name);

struct DecodeOptions {
  Method method = Method::magic;
  MagicParams params;
  int beam_width = 10;
  int top_k = 40;
  double top_p = 0.95;
  double typical_tau = 0.2;
  std::uint64_t seed = 0;
  bool dump_candidates = false;
  /// When set, receives the wall time of every step's token selection
  /// (including a final eos selection). Not filled by beam search.
  std::vector<double>* step_seconds = nullptr;
};

/// A scorer or LM failure during decoding; carries everything produced so far.
class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::size_t step, DecodeResult partial)
      : Error(what), step_(step), partial_(std::move(partial)) {}
  std::size_t step() const { return step_; }
  const DecodeResult& partial() const { return partial_; }

 private:
  std::size_t step_;
  DecodeResult partial_;
};

/// Beam search by cumulative log-probability; eos-terminated and length-capped
/// hypotheses compete on the same footing.
DecodeResult beam_search(const GenerationState& state, int width, int max_len,
                         const LanguageModel& lm);

/// Runs the per-step rule of `options.method` until eos or max_len.
/// `scorer` and `image` are required for Method::magic only.
DecodeResult decode(GenerationState state, const DecodeOptions& options, const LanguageModel& lm,
                    const ImageTextScorer* scorer = nullptr, const ImageHandle* image = nullptr);

}  // namespace magic
