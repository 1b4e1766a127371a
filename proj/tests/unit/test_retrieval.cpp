#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "magic/retrieval.hpp"
#include "magic/toy_world.hpp"

using namespace magic;

namespace {

std::vector<IndexRecord> random_records(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<IndexRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = g(rng);
    out.push_back({"r" + std::to_string(i), Embedding(v)});
  }
  return out;
}

// Scores every stored vector against the normalized query and sorts.
std::vector<SearchHit> linear_scan(const ImageIndex& index, const Embedding& q) {
  double qn = 0.0;
  for (double x : q.values()) qn += x * x;
  qn = std::sqrt(qn);
  std::vector<SearchHit> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto v = index.vector(i);
    double s = 0.0;
    for (std::size_t d = 0; d < v.size(); ++d) s += static_cast<double>(v[d]) * (q[d] / qn);
    all.push_back({index.ids()[i], std::clamp(s, -1.0, 1.0)});
  }
  std::stable_sort(all.begin(), all.end(), [](const SearchHit& a, const SearchHit& b) { return a.score > b.score; });
  return all;
}

// Encodes a text as a fixed per-token vector sum; token 0 encodes to zero.
class TableEncoder : public TextEncoder {
 public:
  Embedding encode_text(std::span<const TokenId> text) const override {
    std::vector<double> v(3, 0.0);
    for (TokenId t : text) {
      if (t == 1) v[0] += 1;
      if (t == 2) v[1] += 1;
      if (t == 3) v[2] += 1;
    }
    return Embedding(v);
  }
};

}  // namespace

TEST_CASE("empty and sized indexes") {
  const auto empty = ImageIndex::build({});
  CHECK(empty.size() == 0);
  CHECK(empty.query(Embedding({1.0, 2.0}), 5).empty());
  const auto idx = ImageIndex::build(random_records(17, 4, 1));
  CHECK(idx.size() == 17);
  CHECK(idx.dim() == 4);
}

TEST_CASE("build errors") {
  auto recs = random_records(3, 4, 2);
  recs.push_back({"r0", Embedding({1, 2, 3, 4})});
  CHECK_THROWS_AS(ImageIndex::build(recs), ContractViolation);
  recs.pop_back();
  recs.push_back({"odd", Embedding({1, 2, 3})});
  CHECK_THROWS_AS(ImageIndex::build(recs), ContractViolation);
  recs.pop_back();
  recs.push_back({"zero", Embedding({0, 0, 0, 0})});
  CHECK_THROWS_AS(ImageIndex::build(recs), ZeroVectorError);
  const auto idx = ImageIndex::build(random_records(3, 4, 2));
  CHECK_THROWS_AS(idx.query(Embedding({1, 2}), 1), ContractViolation);
}

TEST_CASE("querying a stored embedding returns it first") {
  const auto recs = random_records(50, 8, 3);
  const auto idx = ImageIndex::build(recs);
  for (std::size_t i = 0; i < recs.size(); i += 7) {
    const auto hits = idx.query(recs[i].embedding, 3);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].id == recs[i].id);
    CHECK(hits[0].score == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(idx.query(recs[0].embedding, 500).size() == 50);
}

TEST_CASE("ranking equals a linear scan") {
  const auto idx = ImageIndex::build(random_records(300, 6, 4));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> q(6);
    for (auto& x : q) x = g(rng);
    const auto got = idx.query(Embedding(q), idx.size());
    const auto want = linear_scan(idx, Embedding(q));
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].id == want[i].id);
      CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-12));
    }
  }
}

TEST_CASE("ties keep insertion order") {
  const auto idx = ImageIndex::build({{"b", Embedding({1, 0})}, {"a", Embedding({2, 0})}, {"c", Embedding({0, 1})}});
  const auto hits = idx.query(Embedding({1, 0}), 3);
  CHECK(hits[0].id == "b");
  CHECK(hits[1].id == "a");
  CHECK(hits[0].score == hits[1].score);
}

TEST_CASE("persistence roundtrip is bit-exact") {
  const auto recs = random_records(100, 16, 6);
  const auto idx = ImageIndex::build(recs);
  const auto path = (std::filesystem::temp_directory_path() / "magic_test.index").string();
  idx.save(path);
  const auto back = ImageIndex::load(path);
  std::filesystem::remove(path);
  CHECK(back.serialize() == idx.serialize());
  CHECK(back.ids() == idx.ids());
  for (const auto& r : random_records(100, 16, 7)) {
    const auto a = idx.query(r.embedding, 100), b = back.query(r.embedding, 100);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].id == b[i].id);
      CHECK(std::bit_cast<std::uint64_t>(a[i].score) == std::bit_cast<std::uint64_t>(b[i].score));
    }
  }
}

TEST_CASE("index file layout") {
  const auto idx = ImageIndex::build({{"ab", Embedding({3, 4})}});
  const auto bytes = idx.serialize();
  CHECK(bytes.substr(0, 8) == "MAGICIX1");
  // magic + version + dim + count + (len + "ab") + 2 floats
  CHECK(bytes.size() == 8 + 4 + 4 + 8 + 4 + 2 + 8);
  CHECK(bytes.substr(28, 2) == "ab");
  CHECK_THROWS(ImageIndex::deserialize(bytes.substr(0, bytes.size() - 1)));
  CHECK_THROWS(ImageIndex::deserialize(bytes + "x"));
  CHECK_THROWS(ImageIndex::deserialize("MAGICIX2" + bytes.substr(8)));
  CHECK_THROWS_AS(ImageIndex::load("/nonexistent/index"), NotFoundError);
}

TEST_CASE("clip_re picks the best caption, earliest on ties") {
  TableEncoder enc;
  const std::vector<std::vector<TokenId>> single{{1, 2}};
  CHECK(clip_re(Embedding({0, 0, 1}), single, enc).index == 0);
  CHECK_THROWS(clip_re(Embedding({0, 0, 1}), {}, enc));

  const std::vector<std::vector<TokenId>> corpus{{0}, {2}, {1, 1}, {1}, {3, 3, 1}};
  const auto r = clip_re(Embedding({1, 0, 0}), corpus, enc);
  CHECK(r.index == 2);
  CHECK(r.score == doctest::Approx(1.0));
  // a zero-encoded caption scores 0 and still wins when everything else is negative
  const auto neg = clip_re(Embedding({-1, -1, -1}), corpus, enc);
  CHECK(neg.index == 0);
  CHECK(neg.score == 0.0);
}

TEST_CASE("clip_re on the toy world") {
  toy::WorldSpec spec;
  spec.n_images = 40;
  const auto world = toy::generate_world(spec);
  toy::ToyScorer scorer(world);
  const auto& vocab = scorer.vocabulary();
  std::vector<std::vector<TokenId>> corpus;
  for (const auto& c : world.captions) {
    std::vector<TokenId> ids;
    for (const auto& w : c.tokens) ids.push_back(*vocab.lookup(w));
    corpus.push_back(ids);
  }
  for (std::size_t i = 0; i < world.images.size(); ++i) {
    const auto img = scorer.encode_image(ImageHandle{world.images[i].id});
    const auto r = clip_re(img, corpus, scorer);
    // exhaustive argmax
    double best = -2.0;
    std::size_t best_i = 0;
    for (std::size_t c = 0; c < corpus.size(); ++c) {
      const auto e = scorer.encode_text(corpus[c]);
      const double s = e.is_zero() ? 0.0 : cosine_sim(img, e);
      if (s > best) {
        best = s;
        best_i = c;
      }
    }
    CHECK(r.index == best_i);
    CHECK(r.score == best);
  }

  // a caption listing exactly the image's bag beats every other caption
  const auto& img = world.images[3];
  std::vector<TokenId> aligned;
  for (const auto& [c, n] : img.bag) {
    for (int k = 0; k < n; ++k) aligned.push_back(*vocab.lookup(c));
  }
  auto with_aligned = corpus;
  with_aligned.push_back(aligned);
  const auto r = clip_re(scorer.encode_image(ImageHandle{img.id}), with_aligned, scorer);
  CHECK(r.score == doctest::Approx(1.0));
  // either the aligned caption or an earlier one with the same concept proportions
  CHECK(cosine_sim(scorer.encode_text(with_aligned[r.index]), scorer.encode_text(aligned)) == doctest::Approx(1.0));
}
