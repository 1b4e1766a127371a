#pragma once

// A small causal self-attention language model with hand-written gradients,
// trained with MLE plus a token-level contrastive hinge on hidden states.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "magic/core.hpp"

namespace magic::lm {

struct LmConfig {
  int vocab_size = 0;
  int hidden_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int context_len = 32;
  double rho = 0.5;  // contrastive margin
  double learning_rate = 2e-5;
  int epochs = 3;
  int batch_size = 8;
  std::uint64_t seed = 1;

  void validate() const;
  int ffn_dim() const { return 4 * hidden_dim; }
};

struct ParamGroup {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Named layout of the flat parameter vector. Order is the checkpoint order.
class ParameterLayout {
 public:
  explicit ParameterLayout(const LmConfig& config);
  const std::vector<ParamGroup>& groups() const { return groups_; }
  const ParamGroup& group(const std::string& name) const;
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamGroup> groups_;
  std::size_t total_ = 0;
};

/// One training sequence: sos, words..., eos. Inputs are all but the last
/// token and targets all but the first.
using Sequence = std::vector<TokenId>;

struct LossBreakdown {
  double mle = 0.0;
  double cl = 0.0;
  double total = 0.0;
};

/// -(1/T) sum log softmax(logits_t)[target_t]; logits is row-major T x V.
double mle_from_logits(std::span<const double> logits, std::span<const TokenId> targets,
                       std::size_t vocab);
/// Contrastive hinge over all ordered pairs of hidden rows (T x D); 0 for T < 2.
double cl_from_hidden(std::span<const double> hidden, std::size_t dim, double rho);

/// Number of gradient computations performed by any model in this process.
std::uint64_t backward_pass_count();

struct SequenceOutput {
  std::vector<double> logits;  // T x V
  std::vector<double> hidden;  // T x D, final-layer states
};

struct PositionOutput {
  std::vector<double> logits;
  std::vector<double> hidden;
};

class Transformer {
 public:
  Transformer(LmConfig config, std::vector<double> params);
  static Transformer initialize(const LmConfig& config);

  const LmConfig& config() const { return config_; }
  const ParameterLayout& layout() const { return layout_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& mutable_params() { return params_; }

  /// Whole-sequence forward used for training and loss evaluation.
  SequenceOutput forward_sequence(std::span<const TokenId> inputs) const;

  /// Batch loss (mean over sequences); when `grad` is non-null it receives
  /// the gradient of the total loss, same layout as params().
  LossBreakdown loss(std::span<const Sequence> batch, double rho, std::vector<double>* grad = nullptr) const;

  /// Incremental decoding state holding per-layer keys and values.
  class Session {
   public:
    explicit Session(const Transformer& model);
    std::size_t length() const { return length_; }
    /// Appends `token` and returns its outputs.
    PositionOutput push(TokenId token);
    /// Outputs for `token` at the next position without appending it.
    PositionOutput peek(TokenId token) const;

   private:
    const Transformer* model_;
    std::vector<std::vector<double>> keys_, values_;  // per layer, length x D
    std::size_t length_ = 0;
  };

 private:
  struct LayerCache;
  struct SequenceCache;
  SequenceOutput forward_cached(std::span<const TokenId> inputs, SequenceCache* cache) const;
  void backward(const SequenceCache& cache, std::span<const double> dlogits,
                std::span<const double> dhidden, std::vector<double>& grad) const;
  PositionOutput position(std::span<const std::vector<double>> keys,
                          std::span<const std::vector<double>> values, std::size_t pos,
                          TokenId token, std::vector<std::vector<double>>* new_kv) const;

  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Offsets {
    std::size_t tok_emb, pos_emb, lnf_g, lnf_b, head_w, head_b;
    std::vector<LayerOffsets> layers;
  };
  const double* at(std::size_t offset) const { return params_.data() + offset; }

  LmConfig config_;
  ParameterLayout layout_;
  Offsets off_;
  std::vector<double> params_;
};

LossBreakdown evaluate_loss(const Transformer& model, std::span<const Sequence> batch, double rho);
double mle_loss(const Transformer& model, std::span<const Sequence> batch);
double cl_loss(const Transformer& model, std::span<const Sequence> batch, double rho);
double total_loss(const Transformer& model, std::span<const Sequence> batch, double rho);

// ----------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  LmConfig config;
  std::vector<std::string> vocabulary;  // surfaces by token id
  SpecialTokens specials;
  std::vector<float> parameters;
  int format_version = kFormatVersion;
};

/// "MAGICLM1", u32 JSON length, JSON header, u64 count, little-endian float32 payload.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ----------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  double total = 0.0;
  double mle = 0.0;
  double cl = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Adam (0.9, 0.999, 1e-8) over shuffled mini-batches. Deterministic per seed.
TrainResult train(std::span<const Sequence> corpus, const LmConfig& config, const Vocabulary& vocab,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Token-level perplexity of `model` on held-out sequences.
double perplexity(const Transformer& model, std::span<const Sequence> sequences);
/// Add-one smoothed unigram perplexity, fitted on `train_set`.
double unigram_perplexity(std::span<const Sequence> train_set, std::span<const Sequence> eval_set,
                          std::size_t vocab);

// ----------------------------------------------------------------------------
// LanguageModel implementation

struct ForwardResult {
  std::vector<double> probs;      // next-token distribution
  std::vector<Embedding> reps;    // one per prefix position
};

class NeuralLm : public LanguageModel {
 public:
  explicit NeuralLm(const Checkpoint& ckpt);

  ForwardResult forward(std::span<const TokenId> prefix) const;

  std::size_t vocab_size() const override { return vocab_.size(); }
  SpecialTokens specials() const override { return vocab_.specials(); }
  Token token(TokenId id) const override { return vocab_.token(id); }
  std::string detokenize(std::span<const TokenId> ids) const override { return vocab_.detokenize(ids); }
  std::vector<double> next_token_probs(std::span<const TokenId> prefix) const override;
  CandidateSet propose(const GenerationState& state, int k) const override;
  std::size_t context_limit() const override;

  const Transformer& model() const { return model_; }
  const Vocabulary& vocabulary() const { return vocab_; }

 private:
  Transformer model_;
  Vocabulary vocab_;
};

}  // namespace magic::lm
