#include "fake_bridge.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cctype>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "magic/harness.hpp"
#include "magic/metrics.hpp"

namespace testsupport {

using ojson = nlohmann::ordered_json;

FakeModels make_fake_models() {
  magic::toy::WorldSpec spec;
  spec.seed = 11;
  spec.n_concepts = 8;
  spec.n_images = 6;
  spec.captions_per_image = 2;
  FakeModels m;
  m.world = magic::toy::generate_world(spec);
  const auto vocab = m.world.vocabulary();
  magic::lm::LmConfig cfg;
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.hidden_dim = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.context_len = 16;
  cfg.seed = 5;
  const auto model = magic::lm::Transformer::initialize(cfg);
  m.checkpoint.config = cfg;
  for (const auto& t : vocab.tokens()) m.checkpoint.vocabulary.push_back(t.surface);
  m.checkpoint.specials = vocab.specials();
  m.checkpoint.parameters.assign(model.params().begin(), model.params().end());
  return m;
}

FakeBridge::FakeBridge(FakeModels models, std::string image_dir)
    : models_(std::move(models)), image_dir_(std::move(image_dir)) {
  scorer_ = std::make_unique<magic::toy::ToyScorer>(models_.world, 1.0);
  lm_ = std::make_unique<magic::lm::NeuralLm>(models_.checkpoint);
}

FakeBridge::~FakeBridge() {
  stopping_ = true;
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
  }
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(mutex_);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : workers_) t.join();
  for (int fd : client_fds_) ::close(fd);
}

std::size_t FakeBridge::distinct_images() const {
  std::lock_guard lock(mutex_);
  return handle_by_content_.size();
}

namespace {

ojson error_response(const ojson& id, const std::string& code, const std::string& message) {
  ojson r;
  r["id"] = id;
  r["ok"] = false;
  r["error"] = {{"code", code}, {"message", message}};
  return r;
}

struct RequestError {
  std::string code;
  std::string message;
};

std::vector<magic::TokenId> words_to_ids(const magic::Vocabulary& vocab, const std::string& text) {
  std::vector<magic::TokenId> ids;
  for (const auto& w : magic::metrics::split_words(text)) {
    const auto id = vocab.lookup(w);
    if (!id) throw RequestError{"bad_request", "unknown word '" + w + "'"};
    ids.push_back(*id);
  }
  return ids;
}

}  // namespace

std::string FakeBridge::respond(const std::string& request_line) {
  ++served_;
  ojson request;
  try {
    request = ojson::parse(request_line);
  } catch (const nlohmann::json::exception& e) {
    return error_response(nullptr, "bad_request", "malformed JSON").dump();
  }
  const ojson id = request.value("id", ojson());
  try {
    const std::string op = request.at("op").get<std::string>();
    const ojson& p = request.at("payload");
    const auto& vocab = scorer_->vocabulary();
    ojson out = ojson::object();

    const auto image_of = [&](const std::string& handle) {
      std::lock_guard lock(mutex_);
      auto it = image_by_handle_.find(handle);
      if (it == image_by_handle_.end()) throw RequestError{"not_found", "unknown image handle " + handle};
      return it->second;
    };

    if (op == "hello") {
      out["version"] = magic::bridge::kProtocolVersion;
      out["hidden_dim"] = models_.checkpoint.config.hidden_dim;
      out["vocab_size"] = vocab.size();
      out["tokenizer"] = "toy-whitespace";
      out["sos_id"] = vocab.specials().sos;
      out["eos_id"] = vocab.specials().eos;
      out["pad_id"] = vocab.specials().pad;
    } else if (op == "lm_propose") {
      const auto prefix = p.at("prefix_ids").get<std::vector<magic::TokenId>>();
      const int k = p.at("k").get<int>();
      if (prefix.empty() || k < 1) throw RequestError{"bad_request", "empty prefix or k < 1"};
      for (auto t : prefix) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) throw RequestError{"bad_request", "token id out of range"};
      }
      const auto set = lm_->propose(magic::GenerationState::from_prompt(prefix), k);
      auto cands = ojson::array();
      for (const auto& c : set) {
        const auto rep = c.rep.values();
        cands.push_back({{"id", c.token.id},
                         {"surface", vocab.is_special(c.token.id) ? "" : " " + c.token.surface},
                         {"confidence", c.confidence},
                         {"rep", std::vector<double>(rep.begin(), rep.end())}});
      }
      out["candidates"] = cands;
    } else if (op == "image_text_logits") {
      const std::string image = image_of(p.at("image").get<std::string>());
      const int calls = scoring_calls_++;
      if (fail_after_ >= 0 && calls >= fail_after_) throw RequestError{"internal", "scoring backend unavailable"};
      // a text of only special tokens arrives empty; like a real text encoder, score it
      auto logits = ojson::array();
      for (const auto& t : p.at("texts")) {
        const std::vector<std::vector<magic::TokenId>> one{words_to_ids(vocab, t.get<std::string>())};
        logits.push_back(one[0].empty() ? 0.0 : scorer_->image_text_logits(magic::ImageHandle{image}, one)[0]);
      }
      out["logits"] = logits;
    } else if (op == "encode_text") {
      const auto e = scorer_->encode_text(words_to_ids(vocab, p.at("text").get<std::string>()));
      out["embedding"] = std::vector<double>(e.values().begin(), e.values().end());
    } else if (op == "encode_image") {
      const auto e = scorer_->encode_image(magic::ImageHandle{image_of(p.at("image").get<std::string>())});
      out["embedding"] = std::vector<double>(e.values().begin(), e.values().end());
    } else if (op == "register_image") {
      std::filesystem::path path = p.at("path").get<std::string>();
      if (path.is_relative()) path = std::filesystem::path(image_dir_) / path;
      std::ifstream in(path, std::ios::binary);
      if (!in) throw RequestError{"not_found", "cannot read " + path.string()};
      std::stringstream ss;
      ss << in.rdbuf();
      std::string content = ss.str();
      while (!content.empty() && std::isspace(static_cast<unsigned char>(content.back()))) content.pop_back();
      bool known = false;
      for (const auto& img : models_.world.images) known = known || img.id == content;
      if (!known) throw RequestError{"invalid_image", "undecodable image " + path.string()};
      std::lock_guard lock(mutex_);
      auto [it, inserted] = handle_by_content_.try_emplace(content, "h" + std::to_string(handle_by_content_.size() + 1));
      if (inserted) image_by_handle_[it->second] = content;
      out["handle"] = it->second;
    } else {
      throw RequestError{"bad_request", "unknown op " + op};
    }
    ojson r;
    r["id"] = id;
    r["ok"] = true;
    r["payload"] = out;
    return r.dump();
  } catch (const RequestError& e) {
    return error_response(id, e.code, e.message).dump();
  } catch (const std::exception& e) {
    return error_response(id, "bad_request", e.what()).dump();
  }
}

std::uint16_t FakeBridge::listen() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 8) != 0) {
    throw std::runtime_error(std::string("bind/listen failed: ") + std::strerror(errno));
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
  return port_;
}

void FakeBridge::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (stopping_) return;
      continue;
    }
    std::lock_guard lock(mutex_);
    client_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { serve(fd); });
  }
}

void FakeBridge::serve(int fd) {
  std::string buffer;
  char chunk[4096];
  for (;;) {
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n <= 0) break;
    buffer.append(chunk, static_cast<std::size_t>(n));
    for (auto nl = buffer.find('\n'); nl != std::string::npos; nl = buffer.find('\n')) {
      const std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      const std::string reply = respond(line) + "\n";
      if (::send(fd, reply.data(), reply.size(), MSG_NOSIGNAL) < 0) break;
    }
  }
}

// ----------------------------------------------------------------------------

const std::vector<std::string>& fixture_image_paths() {
  static const std::vector<std::string> paths = {"images/img1.img", "images/img4.img", "images/img1.img"};
  return paths;
}

std::vector<std::string> run_fixture_session(std::unique_ptr<magic::bridge::LineChannel> channel) {
  std::vector<std::string> log;
  const auto stack = magic::harness::ModelStack::remote(std::move(channel), fixture_image_paths());
  for (const auto& h : stack->images()) log.push_back("handle " + h.id);

  magic::DecodeOptions options;
  options.method = magic::Method::magic;
  options.params = {4, 0.1, 2.0, 6};
  std::vector<magic::TokenId> last_tokens;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& image = stack->images()[i];
    const auto r = magic::decode(magic::GenerationState::from_prompt({stack->lm().specials().sos}), options,
                                 stack->lm(), &stack->scorer(), &image);
    std::ostringstream line;
    line << "caption " << image.id << " [" << r.text << "] stop=" << magic::to_string(r.stop_reason);
    for (const auto& s : r.steps) line << " " << s.chosen_token.id << ":" << magic::metrics::format_value(s.total_score);
    log.push_back(line.str());
    if (!r.tokens.empty()) last_tokens = r.tokens;
  }
  const auto img = stack->image_encoder().encode_image(stack->images()[0]);
  const auto txt = stack->text_encoder().encode_text(last_tokens);
  log.push_back("encode_image dim=" + std::to_string(img.dim()));
  log.push_back("encode_text dim=" + std::to_string(txt.dim()));
  try {
    const std::vector<std::vector<magic::TokenId>> texts{last_tokens};
    stack->scorer().image_text_logits(magic::ImageHandle{"h99"}, texts);
    log.push_back("unknown handle accepted");
  } catch (const magic::NotFoundError& e) {
    log.push_back(std::string("not_found: ") + e.what());
  }
  return log;
}

}  // namespace testsupport
