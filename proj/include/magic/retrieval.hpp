#pragma once

// Exact cosine nearest-neighbour search over image embeddings, plus the
// caption-retrieval baseline.

#include <string>
#include <utility>
#include <vector>

#include "magic/core.hpp"

namespace magic {

struct IndexRecord {
  std::string id;
  Embedding embedding;
};

struct SearchHit {
  std::string id;
  double score = 0.0;
};

/// Embeddings are L2-normalized and stored as float32 on insert, so a query
/// scores identically before and after a save/load roundtrip.
class ImageIndex {
 public:
  ImageIndex() = default;

  /// Throws ContractViolation on a dimension mismatch, a duplicate id or a
  /// zero embedding.
  static ImageIndex build(const std::vector<IndexRecord>& records);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  /// Stored (normalized, float32) vector of entry `i`.
  std::span<const float> vector(std::size_t i) const;

  /// Top min(top_m, size) entries by cosine, descending, ties by insertion order.
  std::vector<SearchHit> query(const Embedding& q, std::size_t top_m) const;

  // Byte layout (little-endian):
  //   "MAGICIX1"  u32 version  u32 dim  u64 count
  //   count x (u32 id length, id bytes)
  //   count x dim float32 values
  std::string serialize() const;
  static ImageIndex deserialize(const std::string& bytes);
  void save(const std::string& path) const;
  static ImageIndex load(const std::string& path);

  static constexpr std::uint32_t kVersion = 1;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> data_;  // size() x dim_
};

struct RetrievedCaption {
  std::size_t index = 0;
  double score = 0.0;
};

/// Caption whose encoding has the highest cosine with `image_embedding`; the
/// earliest caption wins ties. Captions that encode to the zero vector score
/// 0. Throws Error on an empty corpus.
RetrievedCaption clip_re(const Embedding& image_embedding,
                         const std::vector<std::vector<TokenId>>& corpus, const TextEncoder& encoder);

}  // namespace magic
