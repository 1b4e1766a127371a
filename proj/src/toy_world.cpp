#include "magic/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace magic::toy {

namespace {

const std::vector<std::string> kConceptNames = {
    "dog",   "cat",    "horse", "bird",   "car",    "bus",      "boat",   "tree",
    "bench", "table",  "chair", "kite",   "ball",   "cake",     "pizza",  "clock",
    "train", "plane",  "bike",  "truck",  "sheep",  "cow",      "bear",   "zebra",
    "vase",  "bottle", "cup",   "bowl",   "banana", "apple",    "couch",  "bed",
    "phone", "book",   "sign",  "fence",  "lamp",   "umbrella", "laptop", "giraffe"};

const std::vector<std::string> kDeterminers = {"a", "the"};
const std::vector<std::string> kRelations = {"with", "and", "near", "beside", "on", "under"};
// Function words follow a skewed, roughly Zipfian usage profile.
const std::vector<double> kDeterminerWeights = {0.6, 0.4};
const std::vector<double> kRelationWeights = {0.35, 0.25, 0.15, 0.1, 0.1, 0.05};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  int between(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::size_t>(hi - lo + 1))); }
  std::size_t weighted(const std::vector<double>& weights) {
    // 53-bit uniform in [0, 1) so the draw is identical on every platform
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

 private:
  std::mt19937_64 engine_;
};

using ojson = nlohmann::ordered_json;

}  // namespace

void WorldSpec::validate() const {
  if (n_concepts <= 0 || n_images <= 0 || captions_per_image <= 0) {
    throw ContractViolation("world spec counts must be positive");
  }
  if (min_caption_concepts < 1 || max_caption_concepts < min_caption_concepts) {
    throw ContractViolation("invalid caption concept range");
  }
  if (min_bag_size < 1 || max_bag_size < min_bag_size) {
    throw ContractViolation("invalid bag size range");
  }
}

const std::vector<std::string>& function_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w = kDeterminers;
    w.insert(w.end(), kRelations.begin(), kRelations.end());
    return w;
  }();
  return words;
}

const SyntheticImage& World::image(const std::string& id) const {
  for (const auto& img : images) {
    if (img.id == id) return img;
  }
  throw NotFoundError("unknown image: " + id);
}

Vocabulary World::vocabulary() const {
  std::vector<std::string> surfaces = {"<sos>", "<eos>", "<pad>"};
  for (const auto& w : function_words()) surfaces.push_back(w);
  for (const auto& c : concepts) surfaces.push_back(c);
  return Vocabulary(std::move(surfaces), SpecialTokens{0, 1, 2});
}

World generate_world(const WorldSpec& spec) {
  spec.validate();
  World world;
  world.spec = spec;
  for (int i = 0; i < spec.n_concepts; ++i) {
    world.concepts.push_back(static_cast<std::size_t>(i) < kConceptNames.size()
                                 ? kConceptNames[static_cast<std::size_t>(i)]
                                 : "thing" + std::to_string(i));
  }

  Rng rng(spec.seed);
  const int width = static_cast<int>(std::to_string(spec.n_images - 1).size());
  for (int i = 0; i < spec.n_images; ++i) {
    SyntheticImage img;
    std::string num = std::to_string(i);
    img.id = "img" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num;
    const int bag_size = rng.between(spec.min_bag_size, spec.max_bag_size);
    for (int j = 0; j < bag_size; ++j) {
      ++img.bag[world.concepts[rng.below(world.concepts.size())]];
    }

    std::vector<std::string> distinct;
    for (const auto& [name, count] : img.bag) distinct.push_back(name);
    for (int c = 0; c < spec.captions_per_image; ++c) {
      const int want = std::min(rng.between(spec.min_caption_concepts, spec.max_caption_concepts),
                                static_cast<int>(distinct.size()));
      // partial Fisher-Yates picks `want` distinct concepts in random order
      auto pool = distinct;
      Caption cap;
      cap.image_id = img.id;
      for (int m = 0; m < want; ++m) {
        const std::size_t pick = static_cast<std::size_t>(m) + rng.below(pool.size() - static_cast<std::size_t>(m));
        std::swap(pool[static_cast<std::size_t>(m)], pool[pick]);
        if (m > 0) cap.tokens.push_back(kRelations[rng.weighted(kRelationWeights)]);
        cap.tokens.push_back(kDeterminers[rng.weighted(kDeterminerWeights)]);
        cap.tokens.push_back(pool[static_cast<std::size_t>(m)]);
      }
      world.captions.push_back(std::move(cap));
    }
    world.images.push_back(std::move(img));
  }
  return world;
}

std::string to_json(const World& world) {
  ojson spec;
  spec["seed"] = world.spec.seed;
  spec["n_concepts"] = world.spec.n_concepts;
  spec["n_images"] = world.spec.n_images;
  spec["captions_per_image"] = world.spec.captions_per_image;
  spec["caption_len_range"] = {world.spec.min_caption_concepts, world.spec.max_caption_concepts};
  spec["bag_size_range"] = {world.spec.min_bag_size, world.spec.max_bag_size};

  ojson doc;
  doc["spec"] = spec;
  doc["concepts"] = world.concepts;
  ojson images = ojson::array();
  for (const auto& img : world.images) {
    ojson bag = ojson::array();
    for (const auto& [name, count] : img.bag) {
      for (int i = 0; i < count; ++i) bag.push_back(name);
    }
    images.push_back(ojson{{"id", img.id}, {"bag", bag}});
  }
  doc["images"] = images;
  ojson caps = ojson::array();
  for (const auto& c : world.captions) {
    caps.push_back(ojson{{"image_id", c.image_id}, {"tokens", c.tokens}});
  }
  doc["captions"] = caps;
  return doc.dump(1) + "\n";
}

World world_from_json(const std::string& text) {
  const auto doc = ojson::parse(text);
  World world;
  const auto& spec = doc.at("spec");
  world.spec.seed = spec.at("seed").get<std::uint64_t>();
  world.spec.n_concepts = spec.at("n_concepts").get<int>();
  world.spec.n_images = spec.at("n_images").get<int>();
  world.spec.captions_per_image = spec.at("captions_per_image").get<int>();
  world.spec.min_caption_concepts = spec.at("caption_len_range").at(0).get<int>();
  world.spec.max_caption_concepts = spec.at("caption_len_range").at(1).get<int>();
  world.spec.min_bag_size = spec.at("bag_size_range").at(0).get<int>();
  world.spec.max_bag_size = spec.at("bag_size_range").at(1).get<int>();
  world.concepts = doc.at("concepts").get<std::vector<std::string>>();
  for (const auto& img : doc.at("images")) {
    SyntheticImage s;
    s.id = img.at("id").get<std::string>();
    for (const auto& c : img.at("bag")) ++s.bag[c.get<std::string>()];
    world.images.push_back(std::move(s));
  }
  for (const auto& c : doc.at("captions")) {
    world.captions.push_back(
        Caption{c.at("image_id").get<std::string>(), c.at("tokens").get<std::vector<std::string>>()});
  }
  return world;
}

World load_world(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open world file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return world_from_json(ss.str());
}

void save_world(const World& world, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write world file: " + path);
  out << to_json(world);
}

bool captions_grounded(const World& world) {
  for (const auto& cap : world.captions) {
    const auto& img = world.image(cap.image_id);
    const auto counts = concept_counts(world.concepts, cap.tokens);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] > 0.0 && !img.bag.contains(world.concepts[i])) return false;
    }
  }
  return true;
}

std::vector<double> concept_counts(const std::vector<std::string>& concepts,
                                   const std::vector<std::string>& words) {
  std::vector<double> v(concepts.size(), 0.0);
  for (const auto& w : words) {
    auto it = std::find(concepts.begin(), concepts.end(), w);
    if (it != concepts.end()) v[static_cast<std::size_t>(it - concepts.begin())] += 1.0;
  }
  return v;
}

std::vector<double> concept_counts(const std::vector<std::string>& concepts, const ConceptBag& bag) {
  std::vector<double> v(concepts.size(), 0.0);
  for (const auto& [name, count] : bag) {
    auto it = std::find(concepts.begin(), concepts.end(), name);
    if (it == concepts.end()) throw ContractViolation("bag concept not in vocabulary: " + name);
    v[static_cast<std::size_t>(it - concepts.begin())] += count;
  }
  return v;
}

double concept_logit(const std::vector<std::string>& concepts, const SyntheticImage& image,
                     const std::vector<std::string>& words) {
  const auto text = concept_counts(concepts, words);
  if (std::all_of(text.begin(), text.end(), [](double x) { return x == 0.0; })) return 0.0;
  return cosine_sim(concept_counts(concepts, image.bag), text);
}

Embedding bag_embedding(const std::vector<std::string>& concepts, const ConceptBag& bag) {
  if (bag.empty()) throw ContractViolation("bag_embedding: empty bag");
  auto v = concept_counts(concepts, bag);
  const double n = l2_norm(v);
  for (double& x : v) x /= n;
  return Embedding(std::move(v));
}

ToyScorer::ToyScorer(const World& world, double temperature)
    : world_(&world), vocab_(world.vocabulary()), temperature_(temperature) {
  if (!(temperature > 0.0)) throw ContractViolation("scorer temperature must be positive");
  concept_index_.assign(vocab_.size(), -1);
  for (std::size_t c = 0; c < world.concepts.size(); ++c) {
    concept_index_[static_cast<std::size_t>(*vocab_.lookup(world.concepts[c]))] = static_cast<int>(c);
  }
  for (const auto& img : world.images) {
    image_counts_.emplace(img.id, concept_counts(world.concepts, img.bag));
  }
}

std::vector<double> ToyScorer::image_text_logits(const ImageHandle& image,
                                                 std::span<const std::vector<TokenId>> texts) const {
  auto it = image_counts_.find(image.id);
  if (it == image_counts_.end()) throw NotFoundError("unknown image handle: " + image.id);
  std::vector<double> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    if (text.empty()) throw ContractViolation("image_text_logits: empty text");
    const auto counts = encode_text(text);
    out.push_back(counts.is_zero() ? 0.0 : cosine_sim(it->second, counts.values()) / temperature_);
  }
  return out;
}

Embedding ToyScorer::encode_text(std::span<const TokenId> text) const {
  std::vector<double> v(world_->concepts.size(), 0.0);
  for (TokenId id : text) {
    if (id < 0 || static_cast<std::size_t>(id) >= concept_index_.size()) {
      throw NotFoundError("token id out of range: " + std::to_string(id));
    }
    const int c = concept_index_[static_cast<std::size_t>(id)];
    if (c >= 0) v[static_cast<std::size_t>(c)] += 1.0;
  }
  return Embedding(std::move(v));
}

Embedding ToyScorer::encode_image(const ImageHandle& image) const {
  return bag_embedding(world_->concepts, world_->image(image.id).bag);
}

}  // namespace magic::toy
