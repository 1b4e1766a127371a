#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "magic/harness.hpp"
#include "toy_fixture.hpp"

using namespace magic;
using namespace magic::harness;
using testsupport::small_toy;
using testsupport::small_toy_stack;

namespace {

namespace fs = std::filesystem;

RunConfig caption_cfg(Method method, double beta, int max_images = 10) {
  RunConfig cfg = small_toy().cfg;
  cfg.task = "caption";
  cfg.decode.method = method;
  cfg.decode.params.k = 5;
  cfg.decode.params.alpha = 0.1;
  cfg.decode.params.beta = beta;
  cfg.max_images = max_images;
  return cfg;
}

std::vector<std::vector<TokenId>> tokens_of(const std::vector<DecodedText>& items) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& i : items) out.push_back(i.result.tokens);
  return out;
}

double mean_clip(const std::vector<DecodedText>& items, const ModelStack& stack) {
  const auto report = evaluate(items, stack);
  double sum = 0.0;
  for (std::size_t i = 0; i < report.instance_count(); ++i) sum += report.value(i, "clip_score").value_or(0.0);
  return sum / static_cast<double>(report.instance_count());
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("magic_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MAGIC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("corpus split holds out every n-th image") {
  CHECK(is_held_out(9, 10));
  CHECK_FALSE(is_held_out(10, 10));
  const auto& toy = small_toy();
  const auto split = split_corpus(toy.world, 10);
  CHECK(split.held_out_images == std::vector<std::size_t>{9, 19, 29, 39});
  CHECK(split.held_out.size() == 4 * 4);
  CHECK(split.train.size() == 36 * 4);
  const auto vocab = toy.world.vocabulary();
  for (const auto& s : split.train) {
    CHECK(s.front() == vocab.specials().sos);
    CHECK(s.back() == vocab.specials().eos);
  }
  CHECK_THROWS_AS(caption_sequence(vocab, {"a", "unicorn"}), NotFoundError);
}

TEST_CASE("toy stack rejects a checkpoint with a different vocabulary") {
  auto ckpt = small_toy().checkpoint;
  ckpt.vocabulary.back() = "zebra";
  CHECK_THROWS_AS(ModelStack::toy(small_toy().world, ckpt, 1.0), ConfigError);
}

TEST_CASE("captioning with beta = 0 equals contrastive search") {
  const auto stack = small_toy_stack();
  const auto magic0 = run_caption(caption_cfg(Method::magic, 0.0), *stack);
  const auto contrastive = run_caption(caption_cfg(Method::contrastive, 0.0), *stack);
  CHECK(tokens_of(magic0) == tokens_of(contrastive));
}

TEST_CASE("captioning is reproducible") {
  const auto stack = small_toy_stack();
  const auto cfg = caption_cfg(Method::magic, 2.0);
  const auto a = to_jsonl(run_caption(cfg, *stack), cfg, *stack);
  const auto b = to_jsonl(run_caption(cfg, *stack), cfg, *stack);
  CHECK(a == b);
  const auto first = nlohmann::json::parse(a.substr(0, a.find('\n')));
  CHECK(first["config_hash"] == cfg.hash());
  CHECK(first["method"] == "magic");
  CHECK(first["steps"].size() == first["tokens"].size());
}

TEST_CASE("grounding raises the clip score") {
  const auto stack = small_toy_stack(0.2);
  const auto plain = run_caption(caption_cfg(Method::magic, 0.0, 20), *stack);
  const auto grounded = run_caption(caption_cfg(Method::magic, 2.0, 20), *stack);
  CHECK(mean_clip(grounded, *stack) > mean_clip(plain, *stack));
}

TEST_CASE("results survive a JSONL roundtrip") {
  const auto stack = small_toy_stack();
  auto cfg = caption_cfg(Method::magic, 1.0, 4);
  cfg.decode.dump_candidates = true;
  const auto items = run_caption(cfg, *stack);
  const auto dir = scratch_dir("jsonl");
  write_text(dir / "captions.jsonl", to_jsonl(items, cfg, *stack));
  const auto back = read_jsonl((dir / "captions.jsonl").string());
  REQUIRE(back.size() == items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    CHECK(back[i].key == items[i].key);
    CHECK(back[i].result.tokens == items[i].result.tokens);
    CHECK(back[i].result.stop_reason == items[i].result.stop_reason);
    CHECK(back[i].result.steps.size() == items[i].result.steps.size());
  }
  CHECK(evaluate(back, *stack).to_csv() == evaluate(items, *stack).to_csv());
  write_text(dir / "bad.jsonl", "{\"key\": 1}\n");
  CHECK_THROWS_AS(read_jsonl((dir / "bad.jsonl").string()), ConfigError);
  CHECK_THROWS_AS(read_jsonl((dir / "none.jsonl").string()), MissingArtifact);
  fs::remove_all(dir);
}

TEST_CASE("caption evaluation columns") {
  const auto stack = small_toy_stack();
  const auto items = run_caption(caption_cfg(Method::magic, 2.0, 3), *stack);
  const auto report = evaluate(items, *stack);
  CHECK(report.instance_count() == 3);
  for (const char* col : {"length", "rep_2", "diversity", "bleu_1", "bleu_4", "rouge_l"}) {
    CHECK(report.value(0, col).has_value());
  }
  CHECK_FALSE(report.value(0, "coherence").has_value());
  CHECK(mean_token_logprob(items) < 0.0);
}

TEST_CASE("story: titles retrieve their image and decode within max_len") {
  const auto stack = small_toy_stack();
  const auto& world = small_toy().world;
  const auto dir = scratch_dir("story");
  // each title lists exactly the bag of one image
  std::string titles;
  std::vector<std::string> targets;
  for (std::size_t i : {2, 11, 25}) {
    std::string t;
    for (const auto& [c, n] : world.images[i].bag) {
      for (int r = 0; r < n; ++r) t += c + " ";
    }
    titles += t + "\n";
    targets.push_back(world.images[i].id);
  }
  write_text(dir / "titles.txt", titles);

  RunConfig cfg = small_toy().cfg;
  cfg.task = "story";
  cfg.decode.method = Method::magic;
  cfg.decode.params = {5, 0.6, 0.15, 10};
  cfg.titles_path = (dir / "titles.txt").string();
  cfg.index_path = (dir / "images.index").string();
  const auto stories = run_story(cfg, *stack);
  REQUIRE(stories.size() == 3);
  CHECK(fs::exists(cfg.index_path));
  for (std::size_t s = 0; s < stories.size(); ++s) {
    REQUIRE(stories[s].image_id.has_value());
    CHECK(*stories[s].retrieval_score == doctest::Approx(1.0).epsilon(1e-6));
    const auto got = stack->image_encoder().encode_image(ImageHandle{*stories[s].image_id});
    const auto want = stack->image_encoder().encode_image(ImageHandle{targets[s]});
    CHECK(cosine_sim(got, want) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(stories[s].result.tokens.size() <= 10);
  }
  // the index written above is reused
  CHECK(tokens_of(run_story(cfg, *stack)) == tokens_of(stories));

  cfg.retrieval = false;
  const auto plain = run_story(cfg, *stack);
  cfg.decode.method = Method::contrastive;
  CHECK(tokens_of(plain) == tokens_of(run_story(cfg, *stack)));
  for (const auto& p : plain) CHECK_FALSE(p.image_id.has_value());

  const auto report = evaluate(stories, *stack);
  CHECK(report.value(0, "coherence").has_value());
  fs::remove_all(dir);
}

TEST_CASE("story titles default to held-out captions") {
  const auto stack = small_toy_stack();
  RunConfig cfg = small_toy().cfg;
  cfg.task = "story";
  cfg.decode.method = Method::magic;
  cfg.decode.params = {5, 0.6, 0.15, 8};
  const auto stories = run_story(cfg, *stack);
  CHECK(stories.size() == 4);
  for (const auto& s : stories) {
    CHECK(metrics::split_words(s.key).size() <= 5);
    CHECK(s.prompt.size() == metrics::split_words(s.key).size() + 1);
  }
}

TEST_CASE("bench reports latency without gradient computations") {
  const auto stack = small_toy_stack();
  RunConfig cfg = caption_cfg(Method::magic, 2.0);
  cfg.task = "bench";
  cfg.bench_methods = {"greedy", "contrastive", "magic", "beam"};
  cfg.bench_warmup = 1;
  cfg.bench_images = 3;
  const auto report = bench_decode(cfg, *stack);
  CHECK(report.backward_passes == 0);
  REQUIRE(report.methods.size() == 4);
  for (const auto& m : report.methods) {
    CHECK(m.steps > 0);
    CHECK(m.mean_step_seconds > 0.0);
    if (m.method == "contrastive") CHECK(m.relative_to_baseline == 1.0);
  }
  const auto j = nlohmann::json::parse(report.to_json());
  CHECK(j["batch_size"] == 1);
  CHECK(j["config_hash"] == cfg.hash());
}

TEST_CASE("ablation grid") {
  const auto stack = small_toy_stack();
  RunConfig cfg = caption_cfg(Method::magic, 0.0, 3);
  cfg.task = "ablate";
  cfg.k_grid = {1, 3, 5};
  cfg.alpha_grid = {0.0, 0.5};
  cfg.beta_grid = {0.0, 0.5, 1.0, 2.0};
  const auto rows = ablate(cfg, *stack);
  REQUIRE(rows.size() == 24);
  CHECK(rows[0].k == 1);
  CHECK(rows[23].k == 5);
  CHECK(rows[1].beta == 0.5);
  const auto csv = ablation_csv(rows, cfg.hash());
  CHECK(csv == ablation_csv(ablate(cfg, *stack), cfg.hash()));
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "# config_hash: " + cfg.hash());
  std::getline(lines, line);
  CHECK(line == "k,alpha,beta,clip_score,lm_logprob,rep_2,diversity,length");

  // beta = 0 rows are contrastive search
  for (const auto& row : rows) {
    if (row.beta != 0.0) continue;
    auto c = caption_cfg(Method::contrastive, 0.0, 3);
    c.decode.params.k = row.k;
    c.decode.params.alpha = row.alpha;
    CHECK(mean_token_logprob(run_caption(c, *stack)) == row.metrics.at("lm_logprob"));
  }
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == kConfigError);
  CHECK(exit_code_for(MissingArtifact("x")) == kMissingArtifact);
  CHECK(exit_code_for(bridge::BridgeError("x")) == kInterfaceFailure);
  CHECK(exit_code_for(Error("x")) == kFailure);

  std::ostringstream out, err;
  RunConfig cfg;
  cfg.task = "caption";
  cfg.world_path = "/nonexistent/world.json";
  CHECK(run_task(cfg, out, err) == kMissingArtifact);
  cfg.task = "paint";
  CHECK(run_task(cfg, out, err) == kConfigError);
}

TEST_CASE("command-line tool end to end") {
  const auto dir = scratch_dir("cli");
  const std::string world = (dir / "world.json").string();
  const std::string ckpt = (dir / "model.ckpt").string();
  write_text(dir / "run.cfg",
             "n_images = 12\nn_concepts = 8\ncaptions_per_image = 2\nhidden_dim = 16\nn_layers = 1\n"
             "n_heads = 2\nepochs = 1\nmax_len = 6\nk = 3\nbench_images = 2\nbench_warmup = 0\n"
             "world = " + world + "\ncheckpoint = " + ckpt + "\n");
  const std::string cfg = "--config " + (dir / "run.cfg").string();

  CHECK(run_cli("world " + cfg) == 0);
  CHECK(fs::exists(world));
  CHECK(run_cli("train " + cfg) == 0);
  CHECK(fs::exists(ckpt));
  const std::string caps = (dir / "caps.jsonl").string();
  CHECK(run_cli("caption " + cfg + " --method magic --beta 1 --out " + caps) == 0);
  CHECK(read_text(caps).find("\"method\":\"magic\"") != std::string::npos);
  // the same invocation writes the same bytes
  const std::string caps2 = (dir / "caps2.jsonl").string();
  CHECK(run_cli("caption " + cfg + " --method magic --beta 1 --out " + caps2) == 0);
  CHECK(read_text(caps) == read_text(caps2));
  write_text(dir / "eval.cfg", read_text(dir / "run.cfg") + "results = " + caps + "\n");
  CHECK(run_cli("eval --config " + (dir / "eval.cfg").string() + " --out " + (dir / "scores").string()) == 0);
  CHECK(read_text(dir / "scores.csv").rfind("# config_hash: ", 0) == 0);
  CHECK(fs::exists(dir / "scores.json"));
  CHECK(run_cli("bench " + cfg + " --out " + (dir / "bench.json").string()) == 0);
  CHECK(nlohmann::json::parse(read_text(dir / "bench.json"))["backward_passes"] == 0);

  CHECK(run_cli("caption --config " + (dir / "missing.cfg").string()) == kMissingArtifact);
  CHECK(run_cli("caption " + cfg + " --no-such-flag") == kConfigError);
  CHECK(run_cli("caption " + cfg + " --alpha 3") == kConfigError);
  write_text(dir / "bad.cfg", "colour = blue\n");
  CHECK(run_cli("caption --config " + (dir / "bad.cfg").string()) == kConfigError);
  write_text(dir / "nockpt.cfg", "world = " + world + "\ncheckpoint = " + (dir / "none.ckpt").string() + "\n");
  CHECK(run_cli("caption --config " + (dir / "nockpt.cfg").string()) == kMissingArtifact);
  write_text(dir / "remote.cfg", "image_paths = a.img\n");
  const std::string remote = "MAGIC_BRIDGE_ADDR=127.0.0.1:1 " + std::string(MAGIC_CLI_PATH) + " caption --config " +
                             (dir / "remote.cfg").string() + " >/dev/null 2>&1";
  const int status = std::system(remote.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == kInterfaceFailure);
  fs::remove_all(dir);
}
