#include "magic/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "magic/retrieval.hpp"

namespace magic::harness {

using ojson = nlohmann::ordered_json;

namespace {

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(std::string("missing ") + what + ": " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << contents;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty() || !std::filesystem::is_regular_file(path)) {
    throw MissingArtifact(std::string("missing ") + what + ": " + (path.empty() ? "(no path configured)" : path));
  }
}

std::size_t limit_images(const RunConfig& cfg, std::size_t available) {
  return cfg.max_images > 0 ? std::min(available, static_cast<std::size_t>(cfg.max_images)) : available;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const MissingArtifact*>(&e)) return kMissingArtifact;
  if (dynamic_cast<const bridge::BridgeError*>(&e)) return kInterfaceFailure;
  if (dynamic_cast<const DecodeError*>(&e)) return kInterfaceFailure;
  return kFailure;
}

toy::WorldSpec world_spec(const RunConfig& cfg) {
  toy::WorldSpec s;
  s.seed = cfg.world_seed;
  s.n_concepts = cfg.n_concepts;
  s.n_images = cfg.n_images;
  s.captions_per_image = cfg.captions_per_image;
  s.min_caption_concepts = cfg.min_caption_concepts;
  s.max_caption_concepts = cfg.max_caption_concepts;
  s.min_bag_size = cfg.min_bag_size;
  s.max_bag_size = cfg.max_bag_size;
  return s;
}

lm::LmConfig lm_config(const RunConfig& cfg, std::size_t vocab_size) {
  lm::LmConfig c;
  c.vocab_size = static_cast<int>(vocab_size);
  c.hidden_dim = cfg.hidden_dim;
  c.n_layers = cfg.n_layers;
  c.n_heads = cfg.n_heads;
  c.context_len = cfg.context_len;
  c.rho = cfg.rho;
  c.learning_rate = cfg.learning_rate;
  c.epochs = cfg.epochs;
  c.batch_size = cfg.batch_size;
  c.seed = cfg.train_seed;
  return c;
}

bool is_held_out(std::size_t image_index, int every) {
  return image_index % static_cast<std::size_t>(every) == static_cast<std::size_t>(every - 1);
}

lm::Sequence caption_sequence(const Vocabulary& vocab, const std::vector<std::string>& words) {
  lm::Sequence seq{vocab.specials().sos};
  for (const auto& w : words) {
    const auto id = vocab.lookup(w);
    if (!id) throw NotFoundError("word not in vocabulary: " + w);
    seq.push_back(*id);
  }
  seq.push_back(vocab.specials().eos);
  return seq;
}

CorpusSplit split_corpus(const toy::World& world, int held_out_every) {
  const auto vocab = world.vocabulary();
  std::map<std::string, std::size_t> image_index;
  for (std::size_t i = 0; i < world.images.size(); ++i) image_index[world.images[i].id] = i;
  CorpusSplit split;
  for (std::size_t i = 0; i < world.images.size(); ++i) {
    if (is_held_out(i, held_out_every)) split.held_out_images.push_back(i);
  }
  for (const auto& cap : world.captions) {
    auto seq = caption_sequence(vocab, cap.tokens);
    if (is_held_out(image_index.at(cap.image_id), held_out_every)) {
      split.held_out.push_back(std::move(seq));
    } else {
      split.train.push_back(std::move(seq));
    }
  }
  return split;
}

// ----------------------------------------------------------------------------

std::unique_ptr<ModelStack> ModelStack::toy(toy::World world, const lm::Checkpoint& ckpt, double temperature) {
  std::unique_ptr<ModelStack> s(new ModelStack());
  s->world_ = std::make_unique<toy::World>(std::move(world));
  s->toy_scorer_ = std::make_unique<toy::ToyScorer>(*s->world_, temperature);
  s->neural_lm_ = std::make_unique<lm::NeuralLm>(ckpt);
  const auto& a = s->neural_lm_->vocabulary().tokens();
  const auto& b = s->toy_scorer_->vocabulary().tokens();
  if (a != b) throw ConfigError("checkpoint vocabulary does not match the world vocabulary");
  s->lm_ = s->neural_lm_.get();
  s->scorer_ = s->toy_scorer_.get();
  s->text_encoder_ = s->toy_scorer_.get();
  s->image_encoder_ = s->toy_scorer_.get();
  for (const auto& img : s->world_->images) s->images_.push_back(ImageHandle{img.id});
  return s;
}

std::unique_ptr<ModelStack> ModelStack::remote(std::unique_ptr<bridge::LineChannel> channel,
                                               const std::vector<std::string>& image_paths) {
  std::unique_ptr<ModelStack> s(new ModelStack());
  s->client_ = std::make_unique<bridge::BridgeClient>(std::move(channel));
  s->remote_lm_ = std::make_unique<bridge::RemoteLanguageModel>(*s->client_);
  s->remote_scorer_ = std::make_unique<bridge::RemoteScorer>(*s->client_, *s->remote_lm_);
  s->lm_ = s->remote_lm_.get();
  s->scorer_ = s->remote_scorer_.get();
  s->text_encoder_ = s->remote_scorer_.get();
  s->image_encoder_ = s->remote_scorer_.get();
  for (const auto& path : image_paths) s->images_.push_back(ImageHandle{s->client_->register_image(path)});
  return s;
}

std::unique_ptr<ModelStack> ModelStack::open(const RunConfig& cfg) {
  if (auto channel = bridge::channel_from_env()) {
    if (cfg.image_paths.empty()) throw ConfigError("a bridge run needs image_paths");
    return remote(std::move(channel), cfg.image_paths);
  }
  auto world = toy::world_from_json(read_file(cfg.world_path, "world file"));
  require_file(cfg.checkpoint_path, "checkpoint");
  return toy(std::move(world), lm::load_checkpoint(cfg.checkpoint_path), cfg.scorer_temperature);
}

std::vector<TokenId> ModelStack::tokenize(const std::string& text) const {
  if (!toy_scorer_) throw ConfigError("text prompts are only supported on the toy stack");
  try {
    return toy_scorer_->vocabulary().tokenize(text);
  } catch (const NotFoundError& e) {
    throw ConfigError(e.what());
  }
}

// ----------------------------------------------------------------------------

toy::World run_world(const RunConfig& cfg) {
  toy::World world;
  try {
    world = toy::generate_world(world_spec(cfg));
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  write_file(cfg.out.empty() ? cfg.world_path : cfg.out, toy::to_json(world));
  return world;
}

TrainReport run_train(const RunConfig& cfg, std::ostream& log) {
  const auto world = toy::world_from_json(read_file(cfg.world_path, "world file"));
  const auto vocab = world.vocabulary();
  const auto split = split_corpus(world, cfg.held_out_every);
  if (split.train.empty()) throw ConfigError("no training captions after the held-out split");
  const auto lmc = lm_config(cfg, vocab.size());
  try {
    lmc.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }

  TrainReport report;
  auto result = lm::train(split.train, lmc, vocab, [&](const lm::EpochLog& e) {
    log << "epoch " << e.epoch << "  total " << e.total << "  mle " << e.mle << "  cl " << e.cl << "\n";
  });
  report.log = result.log;
  const std::string bytes = lm::serialize_checkpoint(result.checkpoint);
  write_file(cfg.checkpoint_path, bytes);
  report.checkpoint_sha256 = sha256_hex(bytes);

  const lm::NeuralLm model(result.checkpoint);
  if (!split.held_out.empty()) {
    report.held_out_perplexity = lm::perplexity(model.model(), split.held_out);
    report.unigram_perplexity = lm::unigram_perplexity(split.train, split.held_out, vocab.size());
  }
  if (!cfg.out.empty()) {
    ojson doc;
    doc["config_hash"] = cfg.hash();
    doc["checkpoint_sha256"] = report.checkpoint_sha256;
    auto epochs = ojson::array();
    for (const auto& e : report.log) epochs.push_back({{"epoch", e.epoch}, {"total", e.total}, {"mle", e.mle}, {"cl", e.cl}});
    doc["epochs"] = epochs;
    doc["held_out_perplexity"] = report.held_out_perplexity;
    doc["unigram_perplexity"] = report.unigram_perplexity;
    write_file(cfg.out, doc.dump(2) + "\n");
  }
  return report;
}

std::vector<TokenId> caption_prompt(const RunConfig& cfg, const ModelStack& stack, std::size_t image_index) {
  std::vector<TokenId> prompt{stack.lm().specials().sos};
  if (cfg.prompt_tokens == 0) return prompt;
  const auto* world = stack.world();
  if (!world) throw ConfigError("prompt_tokens needs the toy stack");
  const auto& id = world->images.at(image_index).id;
  for (const auto& cap : world->captions) {
    if (cap.image_id != id) continue;
    const std::size_t n = std::min(cap.tokens.size(), static_cast<std::size_t>(cfg.prompt_tokens));
    for (std::size_t i = 0; i < n; ++i) prompt.push_back(*world->vocabulary().lookup(cap.tokens[i]));
    break;
  }
  return prompt;
}

std::vector<DecodedText> run_caption(const RunConfig& cfg, const ModelStack& stack) {
  std::vector<DecodedText> out;
  const std::size_t n = limit_images(cfg, stack.images().size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& image = stack.images()[i];
    DecodedText item;
    item.key = image.id;
    item.image_id = image.id;
    item.prompt = caption_prompt(cfg, stack, i);
    item.result = decode(GenerationState::from_prompt(item.prompt), cfg.decode, stack.lm(), &stack.scorer(), &image);
    out.push_back(std::move(item));
  }
  return out;
}

namespace {

ImageIndex story_index(const RunConfig& cfg, const ModelStack& stack, std::ostream* log) {
  if (!cfg.index_path.empty() && std::filesystem::is_regular_file(cfg.index_path)) {
    return ImageIndex::load(cfg.index_path);
  }
  std::vector<IndexRecord> records;
  for (const auto& img : stack.images()) records.push_back(IndexRecord{img.id, stack.image_encoder().encode_image(img)});
  auto index = ImageIndex::build(records);
  if (!cfg.index_path.empty()) {
    index.save(cfg.index_path);
    if (log) *log << "built image index " << cfg.index_path << " (" << index.size() << " images)\n";
  }
  return index;
}

std::vector<std::string> story_titles(const RunConfig& cfg, const ModelStack& stack) {
  std::vector<std::string> titles;
  if (!cfg.titles_path.empty()) {
    std::istringstream in(read_file(cfg.titles_path, "titles file"));
    for (std::string line; std::getline(in, line);) {
      if (!metrics::split_words(line).empty()) titles.push_back(line);
    }
    return titles;
  }
  const auto* world = stack.world();
  if (!world) throw ConfigError("a bridge story run needs a titles file");
  for (std::size_t i : split_corpus(*world, cfg.held_out_every).held_out_images) {
    for (const auto& cap : world->captions) {
      if (cap.image_id == world->images[i].id) {
        std::string title;
        const std::size_t n = std::min(cap.tokens.size(), static_cast<std::size_t>(cfg.title_words));
        for (std::size_t w = 0; w < n; ++w) title += (title.empty() ? "" : " ") + cap.tokens[w];
        titles.push_back(title);
        break;
      }
    }
  }
  return titles;
}

std::vector<DecodedText> run_story_impl(const RunConfig& cfg, const ModelStack& stack, std::ostream* log) {
  auto titles = story_titles(cfg, stack);
  titles.resize(limit_images(cfg, titles.size()));
  std::optional<ImageIndex> index;
  if (cfg.retrieval) index = story_index(cfg, stack, log);

  std::vector<DecodedText> out;
  for (const auto& title : titles) {
    DecodedText item;
    item.key = title;
    item.prompt = {stack.lm().specials().sos};
    for (TokenId id : stack.tokenize(title)) item.prompt.push_back(id);

    auto options = cfg.decode;
    if (index) {
      const auto text = stack.text_encoder().encode_text(item.prompt);
      if (!text.is_zero()) {
        const auto hits = index->query(text, 1);
        if (!hits.empty()) {
          item.image_id = hits.front().id;
          item.retrieval_score = hits.front().score;
        }
      }
    }
    if (!item.image_id) options.method = Method::contrastive;  // nothing to ground on
    const ImageHandle image{item.image_id.value_or("")};
    item.result = decode(GenerationState::from_prompt(item.prompt), options, stack.lm(), &stack.scorer(),
                         item.image_id ? &image : nullptr);
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace

std::vector<DecodedText> run_story(const RunConfig& cfg, const ModelStack& stack) {
  return run_story_impl(cfg, stack, nullptr);
}

std::string to_jsonl(const std::vector<DecodedText>& items, const RunConfig& cfg, const ModelStack& stack) {
  const std::string hash = cfg.hash();
  std::string out;
  for (const auto& item : items) {
    ojson j;
    j["config_hash"] = hash;
    j["task"] = cfg.task;
    j["key"] = item.key;
    j["image_id"] = item.image_id ? ojson(*item.image_id) : ojson();
    if (item.retrieval_score) j["retrieval_score"] = *item.retrieval_score;
    j["method"] = to_string(cfg.decode.method);
    j["prompt"] = item.prompt;
    j["prompt_text"] = stack.lm().detokenize(item.prompt);
    j["tokens"] = item.result.tokens;
    j["text"] = item.result.text;
    j["stop_reason"] = to_string(item.result.stop_reason);
    auto steps = ojson::array();
    for (const auto& s : item.result.steps) {
      ojson st;
      st["token"] = s.chosen_token.id;
      st["surface"] = s.chosen_token.surface;
      st["confidence"] = s.confidence;
      st["penalty"] = s.penalty;
      st["magic"] = s.magic;
      st["total_score"] = s.total_score;
      if (s.candidate_dump) {
        auto cands = ojson::array();
        for (const auto& c : *s.candidate_dump) {
          cands.push_back({{"token", c.candidate.token.id},
                           {"surface", c.candidate.token.surface},
                           {"confidence", c.candidate.confidence},
                           {"penalty", c.penalty},
                           {"magic", c.magic},
                           {"total_score", c.total}});
        }
        st["candidates"] = cands;
      }
      steps.push_back(st);
    }
    j["steps"] = steps;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<DecodedText> read_jsonl(const std::string& path) {
  std::istringstream in(read_file(path, "results file"));
  std::vector<DecodedText> items;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = ojson::parse(line);
      DecodedText item;
      item.key = j.at("key").get<std::string>();
      if (!j.at("image_id").is_null()) item.image_id = j.at("image_id").get<std::string>();
      if (j.contains("retrieval_score")) item.retrieval_score = j["retrieval_score"].get<double>();
      item.prompt = j.at("prompt").get<std::vector<TokenId>>();
      item.result.tokens = j.at("tokens").get<std::vector<TokenId>>();
      item.result.text = j.at("text").get<std::string>();
      item.result.stop_reason = j.at("stop_reason").get<std::string>() == "eos" ? StopReason::eos : StopReason::max_len;
      for (const auto& s : j.at("steps")) {
        StepDiagnostics d;
        d.chosen_token = Token{s.at("token").get<TokenId>(), s.at("surface").get<std::string>()};
        d.confidence = s.at("confidence").get<double>();
        d.penalty = s.at("penalty").get<double>();
        d.magic = s.at("magic").get<double>();
        d.total_score = s.at("total_score").get<double>();
        item.result.steps.push_back(std::move(d));
      }
      items.push_back(std::move(item));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed result line: " + e.what());
    }
  }
  return items;
}

double mean_token_logprob(const std::vector<DecodedText>& items) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& item : items) {
    for (const auto& s : item.result.steps) {
      sum += std::log(s.confidence);
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

metrics::MetricReport evaluate(const std::vector<DecodedText>& items, const ModelStack& stack) {
  metrics::MetricReport report({"length", "rep_2", "rep_3", "rep_4", "diversity", "lm_logprob", "clip_score",
                                "coherence", "bleu_1", "bleu_4", "rouge_l"});
  const auto* world = stack.world();
  for (const auto& item : items) {
    std::map<std::string, double> row;
    const auto words = metrics::split_words(item.result.text);
    row["length"] = static_cast<double>(item.result.tokens.size());
    row["rep_2"] = metrics::rep_n(item.result.tokens, 2);
    row["rep_3"] = metrics::rep_n(item.result.tokens, 3);
    row["rep_4"] = metrics::rep_n(item.result.tokens, 4);
    row["diversity"] = metrics::diversity(item.result.tokens);
    if (!item.result.steps.empty()) {
      double lp = 0.0;
      for (const auto& s : item.result.steps) lp += std::log(s.confidence);
      row["lm_logprob"] = lp / static_cast<double>(item.result.steps.size());
    }
    if (item.image_id && !item.result.tokens.empty()) {
      row["clip_score"] =
          metrics::clip_score(ImageHandle{*item.image_id}, item.result.tokens, stack.image_encoder(), stack.text_encoder());
    }
    const bool story = item.prompt.size() > 1;
    if (story && !item.result.tokens.empty()) {
      std::vector<TokenId> title(item.prompt.begin() + 1, item.prompt.end());
      row["coherence"] = metrics::coherence(title, item.result.tokens, stack.text_encoder());
    }
    if (world && item.image_id && !story) {
      std::vector<std::vector<std::string>> refs;
      for (const auto& cap : world->captions) {
        if (cap.image_id == *item.image_id) refs.push_back(cap.tokens);
      }
      if (!refs.empty()) {
        row["bleu_1"] = metrics::bleu(words, refs, 1);
        row["bleu_4"] = metrics::bleu(words, refs, 4);
        double best = 0.0;
        for (const auto& r : refs) best = std::max(best, metrics::rouge_l(words, r));
        row["rouge_l"] = best;
      }
    }
    report.add(item.key, row);
  }
  return report;
}

metrics::MetricReport run_eval(const RunConfig& cfg, const ModelStack& stack) {
  if (cfg.results_path.empty()) throw ConfigError("eval needs 'results' (a caption or story JSONL file)");
  return evaluate(read_jsonl(cfg.results_path), stack);
}

// ----------------------------------------------------------------------------

std::string BenchReport::to_json() const {
  ojson doc;
  doc["config_hash"] = config_hash;
  doc["seed"] = seed;
  doc["baseline"] = baseline;
  doc["batch_size"] = 1;
  doc["backward_passes"] = backward_passes;
  auto ms = ojson::array();
  for (const auto& m : methods) {
    ms.push_back({{"method", m.method},
                  {"steps", m.steps},
                  {"mean_step_seconds", m.mean_step_seconds},
                  {"median_step_seconds", m.median_step_seconds},
                  {"relative_to_baseline", m.relative_to_baseline}});
  }
  doc["methods"] = ms;
  return doc.dump(2) + "\n";
}

BenchReport bench_decode(const RunConfig& cfg, const ModelStack& stack) {
  if (stack.images().empty()) throw ConfigError("bench needs at least one image");
  BenchReport report;
  report.baseline = cfg.bench_baseline;
  report.seed = cfg.decode.seed;
  report.config_hash = cfg.hash();
  const auto passes_before = lm::backward_pass_count();

  for (const auto& name : cfg.bench_methods) {
    auto options = cfg.decode;
    options.method = parse_method(name);
    options.dump_candidates = false;
    std::vector<double> measured;
    const int total = cfg.bench_warmup + cfg.bench_images;
    for (int run = 0; run < total; ++run) {
      const std::size_t i = static_cast<std::size_t>(run) % stack.images().size();
      const auto& image = stack.images()[i];
      std::vector<double> timings;
      options.step_seconds = &timings;
      const auto state = GenerationState::from_prompt(caption_prompt(cfg, stack, i));
      const auto started = std::chrono::steady_clock::now();
      const auto result = decode(state, options, stack.lm(), &stack.scorer(), &image);
      if (options.method == Method::beam) {
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        timings.assign(1, elapsed / static_cast<double>(result.tokens.size() + 1));
      }
      if (run >= cfg.bench_warmup) measured.insert(measured.end(), timings.begin(), timings.end());
    }
    MethodTiming t;
    t.method = name;
    t.steps = measured.size();
    t.mean_step_seconds =
        measured.empty() ? 0.0 : std::accumulate(measured.begin(), measured.end(), 0.0) / static_cast<double>(measured.size());
    t.median_step_seconds = median(measured);
    report.methods.push_back(t);
  }
  double base = 0.0;
  for (const auto& m : report.methods) {
    if (m.method == report.baseline) base = m.mean_step_seconds;
  }
  for (auto& m : report.methods) m.relative_to_baseline = base > 0.0 ? m.mean_step_seconds / base : 0.0;
  report.backward_passes = lm::backward_pass_count() - passes_before;
  return report;
}

const std::vector<std::string>& ablation_metrics() {
  static const std::vector<std::string> names = {"clip_score", "lm_logprob", "rep_2", "diversity", "length"};
  return names;
}

std::vector<AblationRow> ablate(const RunConfig& cfg, const ModelStack& stack) {
  const std::vector<int> ks = cfg.k_grid.empty() ? std::vector<int>{cfg.decode.params.k} : cfg.k_grid;
  const std::vector<double> alphas =
      cfg.alpha_grid.empty() ? std::vector<double>{cfg.decode.params.alpha} : cfg.alpha_grid;
  const std::vector<double> betas = cfg.beta_grid.empty() ? std::vector<double>{cfg.decode.params.beta} : cfg.beta_grid;

  std::vector<AblationRow> rows;
  for (int k : ks) {
    for (double alpha : alphas) {
      for (double beta : betas) {
        RunConfig point = cfg;
        point.decode.method = Method::magic;
        point.decode.params.k = k;
        point.decode.params.alpha = alpha;
        point.decode.params.beta = beta;
        const auto captions = run_caption(point, stack);
        const auto report = evaluate(captions, stack);
        AblationRow row{k, alpha, beta, {}};
        // texts without generated tokens have no clip_score; count them as 0
        double clip = 0.0;
        for (std::size_t i = 0; i < report.instance_count(); ++i) clip += report.value(i, "clip_score").value_or(0.0);
        row.metrics["clip_score"] = captions.empty() ? 0.0 : clip / static_cast<double>(captions.size());
        row.metrics["lm_logprob"] = mean_token_logprob(captions);
        row.metrics["rep_2"] = report.mean("rep_2").value_or(0.0);
        row.metrics["diversity"] = report.mean("diversity").value_or(0.0);
        row.metrics["length"] = report.mean("length").value_or(0.0);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& config_hash) {
  std::ostringstream out;
  out << "# config_hash: " << config_hash << "\n";
  out << "k,alpha,beta";
  for (const auto& m : ablation_metrics()) out << ',' << m;
  out << '\n';
  for (const auto& r : rows) {
    out << r.k << ',' << metrics::format_value(r.alpha) << ',' << metrics::format_value(r.beta);
    for (const auto& m : ablation_metrics()) out << ',' << metrics::format_value(r.metrics.at(m));
    out << '\n';
  }
  return out.str();
}

// ----------------------------------------------------------------------------

namespace {

void emit(const RunConfig& cfg, std::ostream& out, const std::string& contents) {
  if (cfg.out.empty()) {
    out << contents;
  } else {
    write_file(cfg.out, contents);
  }
}

int dispatch(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const std::string& task = cfg.task;
  if (task == "world") {
    const auto world = run_world(cfg);
    err << "wrote world with " << world.images.size() << " images and " << world.captions.size() << " captions to "
        << (cfg.out.empty() ? cfg.world_path : cfg.out) << "\n";
    return kOk;
  }
  if (task == "train") {
    const auto report = run_train(cfg, err);
    err << "held-out perplexity " << report.held_out_perplexity << " (unigram " << report.unigram_perplexity
        << "); checkpoint " << cfg.checkpoint_path << " sha256 " << report.checkpoint_sha256 << "\n";
    return kOk;
  }
  if (task == "caption" || task == "story" || task == "eval" || task == "bench" || task == "ablate") {
    const auto stack = ModelStack::open(cfg);
    if (task == "caption") {
      emit(cfg, out, to_jsonl(run_caption(cfg, *stack), cfg, *stack));
    } else if (task == "story") {
      emit(cfg, out, to_jsonl(run_story_impl(cfg, *stack, &err), cfg, *stack));
    } else if (task == "eval") {
      const auto report = run_eval(cfg, *stack);
      const std::string csv = "# config_hash: " + cfg.hash() + "\n" + report.to_csv();
      if (cfg.out.empty()) {
        out << csv;
      } else {
        write_file(cfg.out + ".csv", csv);
        auto doc = ojson::parse(report.to_json());
        doc["config_hash"] = cfg.hash();
        write_file(cfg.out + ".json", doc.dump(2) + "\n");
      }
    } else if (task == "bench") {
      emit(cfg, out, bench_decode(cfg, *stack).to_json());
    } else {
      emit(cfg, out, ablation_csv(ablate(cfg, *stack), cfg.hash()));
    }
    return kOk;
  }
  throw ConfigError("unknown task '" + task + "'");
}

}  // namespace

int run_task(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(cfg, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace magic::harness
