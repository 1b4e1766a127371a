#include "magic/decoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace magic {

MagicDistribution magic_distribution(std::span<const double> logits) {
  if (logits.empty()) throw ContractViolation("magic_distribution: empty logits");
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (!std::isfinite(l)) throw ContractViolation("magic_distribution: non-finite logit");
    max_logit = std::max(max_logit, l);
  }
  MagicDistribution dist;
  dist.probs.resize(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    dist.probs[i] = std::exp(logits[i] - max_logit);
    sum += dist.probs[i];
  }
  for (double& p : dist.probs) p /= sum;
  return dist;
}

double degeneration_penalty(const Embedding& candidate_rep, std::span<const Embedding> accepted_reps) {
  if (accepted_reps.empty()) return 0.0;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& rep : accepted_reps) {
    best = std::max(best, cosine_sim(candidate_rep, rep));
  }
  return best;
}

double selection_score(double confidence, double penalty, double magic, double alpha, double beta) {
  return (1.0 - alpha) * confidence - alpha * penalty + beta * magic;
}

double StepDiagnostics::recomputed_total() const {
  return selection_score(confidence, penalty, magic, alpha, beta);
}

namespace {

StepResult select(const CandidateSet& cands, std::span<const double> penalties,
                  std::span<const double> magic, double alpha, double beta, bool dump) {
  if (cands.size() == 0) throw Error("language model proposed no candidates");
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<ScoredCandidate> scored;
  if (dump) scored.reserve(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double s = selection_score(cands[i].confidence, penalties[i], magic[i], alpha, beta);
    if (dump) scored.push_back({cands[i], penalties[i], magic[i], s});
    if (s > best_score || (s == best_score && cands[i].token.id < cands[best].token.id)) {
      best = i;
      best_score = s;
    }
  }
  StepResult r;
  r.chosen = cands[best];
  auto& d = r.diagnostics;
  d.chosen_token = cands[best].token;
  d.confidence = cands[best].confidence;
  d.penalty = penalties[best];
  d.magic = magic[best];
  d.total_score = best_score;
  d.alpha = alpha;
  d.beta = beta;
  if (dump) d.candidate_dump = std::move(scored);
  return r;
}

std::vector<double> penalties_for(const CandidateSet& cands, const GenerationState& state) {
  std::vector<double> pen(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    pen[i] = degeneration_penalty(cands[i].rep, state.accepted_reps);
  }
  return pen;
}

}  // namespace

StepResult magic_step(const GenerationState& state, const MagicParams& params,
                      const LanguageModel& lm, const ImageTextScorer& scorer,
                      const ImageHandle& image, bool dump_candidates) {
  params.validate();
  const CandidateSet cands = lm.propose(state, params.k);
  const auto pen = penalties_for(cands, state);
  std::vector<double> magic(cands.size(), 0.0);
  if (params.beta != 0.0) {
    const auto prefix = state.prefix();
    std::vector<std::vector<TokenId>> texts;
    texts.reserve(cands.size());
    for (const auto& c : cands) {
      auto t = prefix;
      t.push_back(c.token.id);
      texts.push_back(std::move(t));
    }
    const auto logits = scorer.image_text_logits(image, texts);
    if (logits.size() != cands.size()) {
      throw Error("scorer returned " + std::to_string(logits.size()) + " logits for " +
                  std::to_string(cands.size()) + " texts");
    }
    magic = magic_distribution(logits).probs;
  }
  return select(cands, pen, magic, params.alpha, params.beta, dump_candidates);
}

StepResult contrastive_step(const GenerationState& state, int k, double alpha,
                            const LanguageModel& lm, bool dump_candidates) {
  MagicParams params{k, alpha, 0.0, 1};
  params.validate();
  const CandidateSet cands = lm.propose(state, k);
  const auto pen = penalties_for(cands, state);
  const std::vector<double> magic(cands.size(), 0.0);
  return select(cands, pen, magic, alpha, 0.0, dump_candidates);
}

// ----------------------------------------------------------------------------

FilteredDistribution filter_candidates(std::span<const double> probs, const FilterRule& rule) {
  if (probs.empty()) throw ContractViolation("filter_candidates: empty distribution");
  double mass = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ContractViolation("filter_candidates: negative probability");
    mass += p;
  }
  if (std::abs(mass - 1.0) > 1e-6) throw ContractViolation("filter_candidates: probabilities must sum to 1");

  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  auto prob = [&](TokenId id) { return probs[static_cast<std::size_t>(id)]; };
  auto by_prob = [&](TokenId a, TokenId b) { return ranks_before(prob(a), a, prob(b), b); };

  std::vector<TokenId> kept;
  auto keep_prefix_reaching = [&](double target) {
    double acc = 0.0;
    for (TokenId id : order) {
      kept.push_back(id);
      acc += prob(id);
      if (acc >= target) return;
    }
  };

  if (const auto* tk = std::get_if<TopK>(&rule)) {
    if (tk->k < 1) throw ContractViolation("top_k requires k >= 1");
    kept = top_k_ids(probs, static_cast<std::size_t>(tk->k));
  } else if (const auto* nu = std::get_if<Nucleus>(&rule)) {
    if (!(nu->p > 0.0 && nu->p <= 1.0)) throw ContractViolation("nucleus requires 0 < p <= 1");
    std::sort(order.begin(), order.end(), by_prob);
    if (nu->p >= 1.0) {
      kept = order;
    } else {
      keep_prefix_reaching(nu->p);
    }
  } else {
    const double tau = std::get<Typical>(rule).tau;
    if (!(tau > 0.0 && tau <= 1.0)) throw ContractViolation("typical requires 0 < tau <= 1");
    double entropy = 0.0;
    for (double p : probs) {
      if (p > 0.0) entropy -= p * std::log(p);
    }
    auto surprise_gap = [&](TokenId id) {
      const double p = prob(id);
      return p > 0.0 ? std::abs(-std::log(p) - entropy) : std::numeric_limits<double>::infinity();
    };
    std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
      const double ga = surprise_gap(a), gb = surprise_gap(b);
      if (ga != gb) return ga < gb;
      return by_prob(a, b);
    });
    keep_prefix_reaching(tau);
  }

  std::sort(kept.begin(), kept.end());
  FilteredDistribution out;
  out.ids = kept;
  double kept_mass = 0.0;
  for (TokenId id : kept) kept_mass += prob(id);
  out.probs.reserve(kept.size());
  for (TokenId id : kept) {
    out.probs.push_back(kept_mass > 0.0 ? prob(id) / kept_mass : 1.0 / static_cast<double>(kept.size()));
  }
  return out;
}

double RandomSource::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

TokenId draw(const FilteredDistribution& dist, RandomSource& rng) {
  if (dist.ids.empty()) throw ContractViolation("draw: empty distribution");
  const double u = rng.uniform();
  double cdf = 0.0;
  for (std::size_t i = 0; i < dist.ids.size(); ++i) {
    cdf += dist.probs[i];
    if (u < cdf) return dist.ids[i];
  }
  // rounding: fall back to the last id with non-zero mass
  for (std::size_t i = dist.ids.size(); i-- > 0;) {
    if (dist.probs[i] > 0.0) return dist.ids[i];
  }
  return dist.ids.back();
}

Token sample_step(const GenerationState& state, const FilterRule& rule, const LanguageModel& lm,
                  RandomSource& rng) {
  const auto probs = lm.next_token_probs(state.prefix());
  const auto filtered = filter_candidates(probs, rule);
  return lm.token(draw(filtered, rng));
}

// ----------------------------------------------------------------------------

const char* to_string(StopReason r) { return r == StopReason::eos ? "eos" : "max_len"; }

const char* to_string(Method m) {
  switch (m) {
    case Method::greedy: return "greedy";
    case Method::beam: return "beam";
    case Method::top_k: return "top_k";
    case Method::nucleus: return "nucleus";
    case Method::typical: return "typical";
    case Method::contrastive: return "contrastive";
    case Method::magic: return "magic";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::greedy, Method::beam, Method::top_k, Method::nucleus, Method::typical,
                   Method::contrastive, Method::magic}) {
    if (name == to_string(m)) return m;
  }
  throw ContractViolation("unknown decoding method: " + name);
}

namespace {

struct Hypothesis {
  std::vector<TokenId> tokens;
  std::vector<double> step_probs;
  double log_prob = 0.0;
  bool ended_with_eos = false;
};

bool hyp_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

// Number of tokens that can still be generated before the LM context is full.
std::size_t room_left(const LanguageModel& lm, std::size_t prefix_len) {
  const std::size_t limit = lm.context_limit();
  if (limit == 0) return std::numeric_limits<std::size_t>::max();
  return prefix_len < limit ? limit - prefix_len : 0;
}

StepDiagnostics plain_diagnostics(const Token& tok, double confidence) {
  StepDiagnostics d;
  d.chosen_token = tok;
  d.confidence = confidence;
  d.total_score = selection_score(confidence, 0.0, 0.0, 0.0, 0.0);
  return d;
}

}  // namespace

DecodeResult beam_search(const GenerationState& state, int width, int max_len,
                         const LanguageModel& lm) {
  if (width < 1) throw ContractViolation("beam width must be >= 1");
  if (max_len < 0) throw ContractViolation("max_len must be non-negative");
  const TokenId eos = lm.specials().eos;
  const auto base = state.prefix();
  const std::size_t cap = std::min<std::size_t>(static_cast<std::size_t>(max_len), room_left(lm, base.size()));

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t len = 0; len < cap && !live.empty(); ++len) {
    std::vector<Hypothesis> expansions;
    for (const auto& h : live) {
      auto prefix = base;
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const auto probs = lm.next_token_probs(prefix);
      for (std::size_t v = 0; v < probs.size(); ++v) {
        if (probs[v] <= 0.0) continue;
        Hypothesis e = h;
        e.tokens.push_back(static_cast<TokenId>(v));
        e.step_probs.push_back(probs[v]);
        e.log_prob += std::log(probs[v]);
        e.ended_with_eos = static_cast<TokenId>(v) == eos;
        expansions.push_back(std::move(e));
      }
    }
    const auto keep = std::min(expansions.size(), static_cast<std::size_t>(width));
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<std::ptrdiff_t>(keep),
                      expansions.end(), hyp_before);
    expansions.resize(keep);
    live.clear();
    for (auto& e : expansions) {
      (e.ended_with_eos ? finished : live).push_back(std::move(e));
    }
  }
  for (auto& h : live) finished.push_back(std::move(h));

  DecodeResult result;
  if (finished.empty()) return result;
  const auto best = std::min_element(finished.begin(), finished.end(), hyp_before);
  result.stop_reason = best->ended_with_eos ? StopReason::eos : StopReason::max_len;
  const std::size_t n = best->tokens.size() - (best->ended_with_eos ? 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    result.tokens.push_back(best->tokens[i]);
    result.steps.push_back(plain_diagnostics(lm.token(best->tokens[i]), best->step_probs[i]));
  }
  result.text = lm.detokenize(result.tokens);
  return result;
}

DecodeResult decode(GenerationState state, const DecodeOptions& options, const LanguageModel& lm,
                    const ImageTextScorer* scorer, const ImageHandle* image) {
  options.params.validate();
  if (options.method == Method::magic && (scorer == nullptr || image == nullptr)) {
    throw ContractViolation("magic decoding requires an image-text scorer and an image");
  }
  if (options.method == Method::beam) {
    return beam_search(state, options.beam_width, options.params.max_len, lm);
  }

  const TokenId eos = lm.specials().eos;
  const std::size_t max_len = static_cast<std::size_t>(options.params.max_len);
  RandomSource rng(options.seed);
  FilterRule rule;
  switch (options.method) {
    case Method::top_k: rule = TopK{options.top_k}; break;
    case Method::nucleus: rule = Nucleus{options.top_p}; break;
    case Method::typical: rule = Typical{options.typical_tau}; break;
    default: break;
  }

  DecodeResult result;
  const std::size_t prompt_len = state.prefix().size();
  while (true) {
    if (result.tokens.size() >= max_len || room_left(lm, prompt_len + result.tokens.size()) == 0) {
      result.stop_reason = StopReason::max_len;
      break;
    }
    StepResult step;
    bool track_rep = false;
    const auto started = std::chrono::steady_clock::now();
    try {
      switch (options.method) {
        case Method::magic:
          step = magic_step(state, options.params, lm, *scorer, *image, options.dump_candidates);
          track_rep = true;
          break;
        case Method::contrastive:
          step = contrastive_step(state, options.params.k, options.params.alpha, lm,
                                  options.dump_candidates);
          track_rep = true;
          break;
        case Method::greedy: {
          // the top-1 proposal is the argmax; this also works for models
          // that only expose proposals
          const auto top = lm.propose(state, 1);
          step.chosen = Candidate{top[0].token, top[0].confidence, {}};
          step.diagnostics = plain_diagnostics(step.chosen.token, step.chosen.confidence);
          break;
        }
        default: {
          const auto probs = lm.next_token_probs(state.prefix());
          const auto filtered = filter_candidates(probs, rule);
          const TokenId id = draw(filtered, rng);
          step.chosen = Candidate{lm.token(id), probs[static_cast<std::size_t>(id)], {}};
          step.diagnostics = plain_diagnostics(step.chosen.token, step.chosen.confidence);
          break;
        }
      }
    } catch (const DecodeError&) {
      throw;
    } catch (const std::exception& e) {
      result.text = lm.detokenize(result.tokens);
      throw DecodeError(std::string("decoding failed at step ") + std::to_string(state.step) + ": " +
                            e.what(),
                        state.step, std::move(result));
    }
    if (options.step_seconds) {
      options.step_seconds->push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    }

    const TokenId chosen = step.chosen.token.id;
    if (chosen == eos) {
      result.stop_reason = StopReason::eos;
      break;
    }
    if (track_rep) {
      state.accept(chosen, std::move(step.chosen.rep));
    } else {
      state.accept(chosen);
    }
    result.tokens.push_back(chosen);
    result.steps.push_back(std::move(step.diagnostics));
  }
  result.text = lm.detokenize(result.tokens);
  return result;
}

}  // namespace magic
