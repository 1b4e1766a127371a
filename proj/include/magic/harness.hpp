#pragma once

// Experiment orchestration behind the command-line tool.

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "magic/bridge.hpp"
#include "magic/config.hpp"
#include "magic/decoder.hpp"
#include "magic/metrics.hpp"
#include "magic/neural_lm.hpp"
#include "magic/toy_world.hpp"

namespace magic::harness {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kMissingArtifact = 3, kInterfaceFailure = 4 };

/// A required input file does not exist or cannot be read.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

/// Maps an exception thrown by a task to its exit code.
int exit_code_for(const std::exception& e);

toy::WorldSpec world_spec(const RunConfig& cfg);
lm::LmConfig lm_config(const RunConfig& cfg, std::size_t vocab_size);

/// Image `i` of the world is held out of LM training when i % every == every - 1.
bool is_held_out(std::size_t image_index, int every);

/// sos, caption words, eos.
lm::Sequence caption_sequence(const Vocabulary& vocab, const std::vector<std::string>& words);

struct CorpusSplit {
  std::vector<lm::Sequence> train;
  std::vector<lm::Sequence> held_out;
  std::vector<std::size_t> held_out_images;  // indices into world.images
};
CorpusSplit split_corpus(const toy::World& world, int held_out_every);

/// Everything a decoding task needs: an LM, a scorer with both encoders and
/// the images to ground on. Backed either by the toy world and a trained
/// checkpoint, or by a remote bridge when MAGIC_BRIDGE_ADDR is set.
class ModelStack {
 public:
  static std::unique_ptr<ModelStack> open(const RunConfig& cfg);
  static std::unique_ptr<ModelStack> toy(toy::World world, const lm::Checkpoint& ckpt, double temperature);
  static std::unique_ptr<ModelStack> remote(std::unique_ptr<bridge::LineChannel> channel,
                                            const std::vector<std::string>& image_paths);

  const LanguageModel& lm() const { return *lm_; }
  const ImageTextScorer& scorer() const { return *scorer_; }
  const TextEncoder& text_encoder() const { return *text_encoder_; }
  const ImageEncoder& image_encoder() const { return *image_encoder_; }
  const std::vector<ImageHandle>& images() const { return images_; }
  /// The toy world, or nullptr for a remote stack.
  const toy::World* world() const { return world_.get(); }

  /// Token ids for whitespace-separated words (toy stack only).
  std::vector<TokenId> tokenize(const std::string& text) const;

 private:
  ModelStack() = default;
  std::unique_ptr<toy::World> world_;
  std::unique_ptr<toy::ToyScorer> toy_scorer_;
  std::unique_ptr<lm::NeuralLm> neural_lm_;
  std::unique_ptr<bridge::BridgeClient> client_;
  std::unique_ptr<bridge::RemoteLanguageModel> remote_lm_;
  std::unique_ptr<bridge::RemoteScorer> remote_scorer_;
  const LanguageModel* lm_ = nullptr;
  const ImageTextScorer* scorer_ = nullptr;
  const TextEncoder* text_encoder_ = nullptr;
  const ImageEncoder* image_encoder_ = nullptr;
  std::vector<ImageHandle> images_;
};

// ----------------------------------------------------------------------------
// Tasks. Each writes its artifact to cfg.out when set.

toy::World run_world(const RunConfig& cfg);

struct TrainReport {
  std::vector<lm::EpochLog> log;
  double held_out_perplexity = 0.0;
  double unigram_perplexity = 0.0;
  std::string checkpoint_sha256;
};
/// Trains on the non-held-out captions of the world at cfg.world_path and
/// saves the checkpoint to cfg.checkpoint_path.
TrainReport run_train(const RunConfig& cfg, std::ostream& log);

struct DecodedText {
  std::string key;  // image id or story title
  std::optional<std::string> image_id;
  std::optional<double> retrieval_score;
  std::vector<TokenId> prompt;
  DecodeResult result;
};

/// Prompt for image `i`: sos followed by the first cfg.prompt_tokens words of
/// the image's first caption (toy stack only).
std::vector<TokenId> caption_prompt(const RunConfig& cfg, const ModelStack& stack, std::size_t image_index);

/// One caption per stack image (the first cfg.max_images when positive).
std::vector<DecodedText> run_caption(const RunConfig& cfg, const ModelStack& stack);

/// Titles come from cfg.titles_path, or the first cfg.title_words words of
/// the first caption of each held-out image. Each title retrieves its top-1
/// image from the index, then the story is decoded from sos + title grounded
/// on that image. With retrieval off the story is plain contrastive search.
std::vector<DecodedText> run_story(const RunConfig& cfg, const ModelStack& stack);

/// JSON-lines serialization of decoded texts (one object per line).
std::string to_jsonl(const std::vector<DecodedText>& items, const RunConfig& cfg, const ModelStack& stack);
std::vector<DecodedText> read_jsonl(const std::string& path);

/// Scores decoded texts: rep-2..4, diversity, lm_logprob and length always;
/// clip_score when an image is attached; coherence for stories; bleu_1,
/// bleu_4 and rouge_l against the world's captions of the image.
metrics::MetricReport evaluate(const std::vector<DecodedText>& items, const ModelStack& stack);
metrics::MetricReport run_eval(const RunConfig& cfg, const ModelStack& stack);

/// Mean per-token log-probability pooled over every generated token.
double mean_token_logprob(const std::vector<DecodedText>& items);

struct MethodTiming {
  std::string method;
  std::size_t steps = 0;
  double mean_step_seconds = 0.0;
  double median_step_seconds = 0.0;
  double relative_to_baseline = 0.0;  // mean step latency / baseline mean step latency
};

struct BenchReport {
  std::vector<MethodTiming> methods;
  std::string baseline;
  std::uint64_t backward_passes = 0;  // gradient computations during decoding
  std::uint64_t seed = 0;
  std::string config_hash;

  std::string to_json() const;
};

/// Times per-step selection at batch size 1 on cfg.bench_images images after
/// cfg.bench_warmup unmeasured decodes per method.
BenchReport bench_decode(const RunConfig& cfg, const ModelStack& stack);

struct AblationRow {
  int k = 0;
  double alpha = 0.0;
  double beta = 0.0;
  std::map<std::string, double> metrics;
};

/// MAGIC captioning over the cross product of the k, alpha and beta grids
/// (the configured value when a grid is empty), k outermost.
std::vector<AblationRow> ablate(const RunConfig& cfg, const ModelStack& stack);
/// Columns: k, alpha, beta, then the metric names in `ablation_metrics()`.
std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& config_hash);
const std::vector<std::string>& ablation_metrics();

/// Runs cfg.task, writing artifacts and a short summary to `out`. Returns the
/// exit code; errors are reported on `err`.
int run_task(const RunConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace magic::harness
