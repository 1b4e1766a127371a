#pragma once

// A synthetic image-text universe. An "image" is a multiset of concepts and
// image-text similarity is the cosine between concept-count vectors, so every
// grounding claim can be checked by brute force.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "magic/core.hpp"

namespace magic::toy {

struct WorldSpec {
  std::uint64_t seed = 7;
  int n_concepts = 24;
  int n_images = 200;
  int captions_per_image = 5;
  int min_caption_concepts = 3;  // concepts mentioned per caption, capped by the image's distinct concepts
  int max_caption_concepts = 8;
  int min_bag_size = 4;  // concepts per image, counting multiplicity
  int max_bag_size = 9;

  void validate() const;
};

/// Concept name -> multiplicity.
using ConceptBag = std::map<std::string, int>;

struct SyntheticImage {
  std::string id;
  ConceptBag bag;
};

struct Caption {
  std::string image_id;
  std::vector<std::string> tokens;  // surface words, no special tokens
};

struct World {
  WorldSpec spec;
  std::vector<std::string> concepts;
  std::vector<SyntheticImage> images;
  std::vector<Caption> captions;

  const SyntheticImage& image(const std::string& id) const;  // NotFoundError
  /// Token vocabulary: specials, function words, then concepts.
  Vocabulary vocabulary() const;
};

/// Function words used by the caption grammar.
const std::vector<std::string>& function_words();

/// Deterministic for a fixed spec. Rejects non-positive counts.
World generate_world(const WorldSpec& spec);

/// Stable JSON document {spec, images:[{id, bag:[...]}], captions:[{image_id, tokens:[...]}]}.
std::string to_json(const World& world);
World world_from_json(const std::string& text);
World load_world(const std::string& path);
void save_world(const World& world, const std::string& path);

/// Checks that every caption's concepts are contained in its image's bag.
bool captions_grounded(const World& world);

/// Concept-count vector of a word sequence, in `concepts` order. Words that are
/// not concepts contribute nothing.
std::vector<double> concept_counts(const std::vector<std::string>& concepts,
                                   const std::vector<std::string>& words);
std::vector<double> concept_counts(const std::vector<std::string>& concepts, const ConceptBag& bag);

/// Cosine of concept-count vectors; 0 when the text carries no concepts.
double concept_logit(const std::vector<std::string>& concepts, const SyntheticImage& image,
                     const std::vector<std::string>& words);

/// L2-normalized concept-count vector. Empty bag is a contract violation.
Embedding bag_embedding(const std::vector<std::string>& concepts, const ConceptBag& bag);

/// Implements the image-text and encoder interfaces over a World, with image
/// handles equal to image ids and logits = concept cosine / temperature.
class ToyScorer : public ImageTextScorer, public TextEncoder, public ImageEncoder {
 public:
  explicit ToyScorer(const World& world, double temperature = 1.0);

  std::vector<double> image_text_logits(
      const ImageHandle& image, std::span<const std::vector<TokenId>> texts) const override;
  /// Unnormalized concept-count vector of the text.
  Embedding encode_text(std::span<const TokenId> text) const override;
  Embedding encode_image(const ImageHandle& image) const override;

  const Vocabulary& vocabulary() const { return vocab_; }
  double temperature() const { return temperature_; }

 private:
  const World* world_;
  Vocabulary vocab_;
  double temperature_;
  std::vector<int> concept_index_;  // token id -> concept index or -1
  std::map<std::string, std::vector<double>> image_counts_;
};

}  // namespace magic::toy
