#include "magic/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace magic {

namespace {

constexpr char kIndexMagic[] = "MAGICIX1";

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    }
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("index file truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

double score_stored(std::span<const float> stored, std::span<const double> unit_query) {
  double s = 0.0;
  for (std::size_t i = 0; i < stored.size(); ++i) s += static_cast<double>(stored[i]) * unit_query[i];
  return s;
}

}  // namespace

ImageIndex ImageIndex::build(const std::vector<IndexRecord>& records) {
  ImageIndex index;
  if (records.empty()) return index;
  index.dim_ = records.front().embedding.dim();
  if (index.dim_ == 0) throw ContractViolation("index embeddings must have positive dimension");
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.embedding.dim() != index.dim_) {
      throw ContractViolation("embedding for '" + r.id + "' has dim " + std::to_string(r.embedding.dim()) +
                              ", expected " + std::to_string(index.dim_));
    }
    if (!seen.insert(r.id).second) throw ContractViolation("duplicate index id: " + r.id);
    const double n = l2_norm(r.embedding.values());
    if (n == 0.0) throw ZeroVectorError("zero embedding for '" + r.id + "'");
    index.ids_.push_back(r.id);
    for (double x : r.embedding.values()) index.data_.push_back(static_cast<float>(x / n));
  }
  return index;
}

std::span<const float> ImageIndex::vector(std::size_t i) const {
  return std::span<const float>(data_).subspan(i * dim_, dim_);
}

std::vector<SearchHit> ImageIndex::query(const Embedding& q, std::size_t top_m) const {
  if (ids_.empty()) return {};
  if (q.dim() != dim_) {
    throw ContractViolation("query dim " + std::to_string(q.dim()) + " does not match index dim " +
                            std::to_string(dim_));
  }
  const double n = l2_norm(q.values());
  if (n == 0.0) throw ZeroVectorError("zero query embedding");
  std::vector<double> unit(q.values().begin(), q.values().end());
  for (double& x : unit) x /= n;

  std::vector<double> scores(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    scores[i] = std::clamp(score_stored(vector(i), unit), -1.0, 1.0);
  }
  std::vector<std::size_t> order(ids_.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t m = std::min(top_m, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  std::vector<SearchHit> hits;
  for (std::size_t i = 0; i < m; ++i) hits.push_back(SearchHit{ids_[order[i]], scores[order[i]]});
  return hits;
}

std::string ImageIndex::serialize() const {
  std::string out(kIndexMagic, 8);
  put_le(out, kVersion, 4);
  put_le(out, dim_, 4);
  put_le(out, ids_.size(), 8);
  for (const auto& id : ids_) {
    put_le(out, id.size(), 4);
    out += id;
  }
  for (float f : data_) put_le(out, std::bit_cast<std::uint32_t>(f), 4);
  return out;
}

ImageIndex ImageIndex::deserialize(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(8) != std::string(kIndexMagic, 8)) throw Error("not a MAGICIX1 index file");
  const auto version = r.le(4);
  if (version != kVersion) throw Error("unsupported index version " + std::to_string(version));
  ImageIndex index;
  index.dim_ = static_cast<std::size_t>(r.le(4));
  const auto count = static_cast<std::size_t>(r.le(8));
  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    auto id = r.take(static_cast<std::size_t>(r.le(4)));
    if (!seen.insert(id).second) throw Error("duplicate id in index file: " + id);
    index.ids_.push_back(std::move(id));
  }
  index.data_.resize(count * index.dim_);
  for (float& f : index.data_) f = std::bit_cast<float>(static_cast<std::uint32_t>(r.le(4)));
  if (!r.done()) throw Error("trailing bytes in index file");
  return index;
}

void ImageIndex::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write index: " + path);
  const auto bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ImageIndex ImageIndex::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open index: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

RetrievedCaption clip_re(const Embedding& image_embedding, const std::vector<std::vector<TokenId>>& corpus,
                         const TextEncoder& encoder) {
  if (corpus.empty()) throw Error("clip_re: empty caption corpus");
  RetrievedCaption best{0, -2.0};
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto e = encoder.encode_text(corpus[i]);
    const double s = e.is_zero() ? 0.0 : cosine_sim(image_embedding, e);
    if (s > best.score) best = RetrievedCaption{i, s};
  }
  return best;
}

}  // namespace magic
