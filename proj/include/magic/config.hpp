#pragma once

// Run configuration: a commented `key = value` file, named presets, and a
// stable hash of the resolved settings.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "magic/decoder.hpp"

namespace magic {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Parses `key = value` lines. `#` starts a comment anywhere on a line; blank
/// lines are ignored; a repeated key is an error. Keys are case-sensitive.
std::map<std::string, std::string> parse_key_values(const std::string& text);

struct Preset {
  std::string name;
  int k;
  double alpha;
  double beta;
};

/// coco-like (45, 0.1, 2.0), flickr-like (25, 0.1, 2.0), story (5, 0.6, 0.15).
const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);  // ConfigError if unknown

struct RunConfig {
  std::string task;
  std::string preset;
  DecodeOptions decode;  // method, MagicParams, baseline knobs and seed

  // toy world
  std::uint64_t world_seed = 7;
  int n_concepts = 24;
  int n_images = 200;
  int captions_per_image = 5;
  int min_caption_concepts = 3;
  int max_caption_concepts = 8;
  int min_bag_size = 4;
  int max_bag_size = 9;
  int held_out_every = 10;  // every n-th image is held out of LM training
  double scorer_temperature = 1.0;

  // language model
  int hidden_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int context_len = 32;
  double rho = 0.5;
  double learning_rate = 3e-3;
  int epochs = 3;
  int batch_size = 8;
  std::uint64_t train_seed = 1;

  // artifacts
  std::string world_path = "world.json";
  std::string checkpoint_path = "model.ckpt";
  std::string index_path;    // story: prebuilt image index, built on the fly when empty
  std::string results_path;  // eval: caption/story JSONL to score
  std::string titles_path;   // story: one title per line; held-out captions when empty
  std::string out;
  std::vector<std::string> image_paths;  // images to register with a remote bridge

  // task knobs
  int max_images = 0;   // 0 = all
  int prompt_tokens = 0;  // caption: words of the image's first caption fed after sos
  bool retrieval = true;  // story: ground on the retrieved image
  int title_words = 5;    // story: words kept from a held-out caption used as title
  std::vector<int> k_grid;
  std::vector<double> alpha_grid;
  std::vector<double> beta_grid;
  std::vector<std::string> bench_methods = {"greedy", "contrastive", "magic"};
  std::string bench_baseline = "contrastive";
  int bench_warmup = 3;
  int bench_images = 20;

  /// Sorted `key = value` lines of every setting; the input to config_hash().
  std::string canonical_text() const;
  /// Hex SHA-256 of canonical_text().
  std::string hash() const;
  void validate() const;
};

/// Command-line values that override the file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<int> k;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<std::string> out;
};

/// Applies `preset` first (when present), then every other key, then the
/// overrides. Unknown keys and malformed values raise ConfigError.
RunConfig resolve_config(const std::string& task, const std::map<std::string, std::string>& values,
                         const Overrides& overrides = {});
/// Reads and resolves a config file; a missing file is NotFoundError.
RunConfig load_config(const std::string& task, const std::string& path, const Overrides& overrides = {});

std::string sha256_hex(const std::string& bytes);

}  // namespace magic
