#include "magic/bridge.hpp"

#include <netdb.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>

namespace magic::bridge {

using ojson = nlohmann::ordered_json;

Endpoint parse_endpoint(const std::string& address) {
  std::string rest = address;
  if (rest.rfind("tcp://", 0) == 0) rest = rest.substr(6);
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
    throw BridgeError("bridge address must look like host:port, got '" + address + "'");
  }
  Endpoint ep;
  ep.host = rest.substr(0, colon);
  const std::string port = rest.substr(colon + 1);
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (*end != '\0' || p <= 0 || p > 65535) throw BridgeError("invalid bridge port '" + port + "'");
  ep.port = static_cast<std::uint16_t>(p);
  return ep;
}

// ----------------------------------------------------------------------------

TcpLineChannel::TcpLineChannel(const Endpoint& endpoint, int timeout_ms) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(endpoint.port);
  if (const int rc = ::getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw BridgeError("cannot resolve bridge host " + endpoint.host + ": " + ::gai_strerror(rc));
  }
  std::string last_error = "no addresses";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    timeval tv{};
    tv.tv_sec = timeout_ms / 1000;
    tv.tv_usec = (timeout_ms % 1000) * 1000;
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
      fd_ = fd;
      break;
    }
    last_error = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) {
    throw BridgeError("cannot connect to bridge at " + endpoint.host + ":" + port + ": " + last_error);
  }
}

TcpLineChannel::~TcpLineChannel() {
  if (fd_ >= 0) ::close(fd_);
}

std::string TcpLineChannel::exchange(const std::string& request_line) {
  const std::string out = request_line + "\n";
  std::size_t sent = 0;
  while (sent < out.size()) {
    const ssize_t n = ::send(fd_, out.data() + sent, out.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) throw BridgeError(std::string("bridge send failed: ") + std::strerror(errno));
    sent += static_cast<std::size_t>(n);
  }
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    char chunk[4096];
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n == 0) throw BridgeError("bridge closed the connection");
    if (n < 0) throw BridgeError(std::string("bridge receive failed: ") + std::strerror(errno));
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

// ----------------------------------------------------------------------------

RecordingChannel::RecordingChannel(std::unique_ptr<LineChannel> inner, const std::string& fixture_path)
    : inner_(std::move(inner)), out_(fixture_path, std::ios::binary | std::ios::app) {
  if (!out_) throw BridgeError("cannot open fixture for writing: " + fixture_path);
}

std::string RecordingChannel::exchange(const std::string& request_line) {
  std::string response = inner_->exchange(request_line);
  ojson entry;
  entry["request"] = request_line;
  entry["response"] = response;
  out_ << entry.dump() << '\n';
  out_.flush();
  return response;
}

ReplayChannel::ReplayChannel(const std::string& fixture_path) {
  std::ifstream in(fixture_path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open bridge fixture: " + fixture_path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto entry = ojson::parse(line);
      exchanges_.emplace_back(entry.at("request").get<std::string>(), entry.at("response").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw BridgeError("malformed fixture line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string ReplayChannel::exchange(const std::string& request_line) {
  if (next_ >= exchanges_.size()) throw BridgeError("fixture exhausted after " + std::to_string(next_) + " exchanges");
  const auto& [expected, response] = exchanges_[next_];
  if (request_line != expected) {
    throw BridgeError("request " + std::to_string(next_ + 1) + " differs from fixture\n  expected: " + expected +
                      "\n  actual:   " + request_line);
  }
  ++next_;
  return response;
}

std::unique_ptr<LineChannel> channel_from_env() {
  const char* addr = std::getenv(kAddressEnv);
  if (!addr || !*addr) return nullptr;
  const std::string value = addr;
  if (value.rfind("replay:", 0) == 0) return std::make_unique<ReplayChannel>(value.substr(7));
  return std::make_unique<TcpLineChannel>(parse_endpoint(value));
}

// ----------------------------------------------------------------------------

BridgeClient::BridgeClient(std::unique_ptr<LineChannel> channel) : channel_(std::move(channel)) {
  if (!channel_) throw ContractViolation("BridgeClient needs a channel");
}

ojson BridgeClient::call(const std::string& op, ojson payload) {
  std::lock_guard lock(mutex_);
  const std::uint64_t id = next_id_++;
  ojson request;
  request["id"] = id;
  request["op"] = op;
  request["payload"] = std::move(payload);
  const std::string line = channel_->exchange(request.dump());

  ojson response;
  try {
    response = ojson::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw BridgeError("malformed bridge response to " + op + ": " + e.what());
  }
  if (!response.is_object() || !response.contains("id") || !response.contains("ok")) {
    throw BridgeError("bridge response to " + op + " lacks id/ok fields");
  }
  if (response["id"] != request["id"]) {
    throw BridgeError("bridge response id " + response["id"].dump() + " does not echo request id " +
                      std::to_string(id));
  }
  if (!response["ok"].get<bool>()) {
    std::string code = "error", message = "unspecified bridge error";
    if (response.contains("error")) {
      const auto& err = response["error"];
      if (err.is_string()) {
        message = err.get<std::string>();
      } else if (err.is_object()) {
        code = err.value("code", code);
        message = err.value("message", message);
      }
    }
    if (code == "not_found") throw NotFoundError(op + ": " + message);
    throw BridgeError(op + " failed (" + code + "): " + message);
  }
  return response.contains("payload") ? response["payload"] : ojson::object();
}

namespace {

template <typename F>
auto checked(const std::string& op, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw BridgeError("unexpected " + op + " payload: " + e.what());
  } catch (const ContractViolation& e) {
    throw BridgeError("invalid " + op + " payload: " + e.what());
  }
}

Embedding embedding_from(const ojson& values) { return Embedding(values.get<std::vector<double>>()); }

}  // namespace

BridgeInfo BridgeClient::hello() {
  const auto p = call("hello", ojson::object());
  return checked("hello", [&] {
    BridgeInfo info;
    info.version = p.at("version").get<std::string>();
    info.hidden_dim = p.at("hidden_dim").get<std::size_t>();
    info.vocab_size = p.at("vocab_size").get<std::size_t>();
    info.tokenizer = p.value("tokenizer", std::string());
    info.specials = SpecialTokens{p.at("sos_id").get<TokenId>(), p.at("eos_id").get<TokenId>(),
                                  p.at("pad_id").get<TokenId>()};
    if (info.version != kProtocolVersion) {
      throw BridgeError("bridge speaks protocol version " + info.version + ", expected " + kProtocolVersion);
    }
    if (info.hidden_dim == 0 || info.vocab_size == 0) throw BridgeError("bridge reported zero dimensions");
    return info;
  });
}

std::vector<RemoteCandidate> BridgeClient::lm_propose(std::span<const TokenId> prefix, int k) {
  ojson payload;
  payload["prefix_ids"] = std::vector<TokenId>(prefix.begin(), prefix.end());
  payload["k"] = k;
  const auto p = call("lm_propose", std::move(payload));
  return checked("lm_propose", [&] {
    std::vector<RemoteCandidate> out;
    for (const auto& c : p.at("candidates")) {
      out.push_back(RemoteCandidate{c.at("id").get<TokenId>(), c.at("surface").get<std::string>(),
                                    c.at("confidence").get<double>(), c.at("rep").get<std::vector<double>>()});
    }
    return out;
  });
}

std::vector<double> BridgeClient::image_text_logits(const std::string& image, const std::vector<std::string>& texts) {
  ojson payload;
  payload["image"] = image;
  payload["texts"] = texts;
  const auto p = call("image_text_logits", std::move(payload));
  return checked("image_text_logits", [&] {
    auto logits = p.at("logits").get<std::vector<double>>();
    if (logits.size() != texts.size()) {
      throw BridgeError("image_text_logits returned " + std::to_string(logits.size()) + " logits for " +
                        std::to_string(texts.size()) + " texts");
    }
    return logits;
  });
}

Embedding BridgeClient::encode_text(const std::string& text) {
  const auto p = call("encode_text", ojson{{"text", text}});
  return checked("encode_text", [&] { return embedding_from(p.at("embedding")); });
}

Embedding BridgeClient::encode_image(const std::string& image) {
  const auto p = call("encode_image", ojson{{"image", image}});
  return checked("encode_image", [&] { return embedding_from(p.at("embedding")); });
}

std::string BridgeClient::register_image(const std::string& path) {
  const auto p = call("register_image", ojson{{"path", path}});
  return checked("register_image", [&] { return p.at("handle").get<std::string>(); });
}

// ----------------------------------------------------------------------------

RemoteLanguageModel::RemoteLanguageModel(BridgeClient& client) : client_(&client), info_(client.hello()) {}

Token RemoteLanguageModel::token(TokenId id) const {
  std::lock_guard lock(mutex_);
  auto it = surfaces_.find(id);
  if (it == surfaces_.end()) {
    if (id == info_.specials.sos || id == info_.specials.eos || id == info_.specials.pad) return Token{id, ""};
    throw NotFoundError("surface of token " + std::to_string(id) + " has not been seen");
  }
  return Token{id, it->second};
}

std::string RemoteLanguageModel::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == info_.specials.sos || id == info_.specials.eos || id == info_.specials.pad) continue;
    out += token(id).surface;
  }
  return out;
}

std::vector<double> RemoteLanguageModel::next_token_probs(std::span<const TokenId>) const {
  throw BridgeError("the bridge protocol does not expose full next-token distributions");
}

CandidateSet RemoteLanguageModel::propose(const GenerationState& state, int k) const {
  if (k < 1) throw ContractViolation("propose: k must be >= 1");
  const auto prefix = state.prefix();
  if (prefix.empty()) throw ContractViolation("propose: empty prefix");
  const int asked = static_cast<int>(std::min(static_cast<std::size_t>(k), info_.vocab_size));
  const auto remote = client_->lm_propose(prefix, asked);
  if (remote.size() != static_cast<std::size_t>(asked)) {
    throw BridgeError("lm_propose returned " + std::to_string(remote.size()) + " candidates, expected " +
                      std::to_string(asked));
  }
  std::vector<Candidate> cands;
  {
    std::lock_guard lock(mutex_);
    for (const auto& c : remote) {
      if (c.rep.size() != info_.hidden_dim) {
        throw BridgeError("candidate rep has dim " + std::to_string(c.rep.size()) + ", bridge announced " +
                          std::to_string(info_.hidden_dim));
      }
      surfaces_[c.id] = c.surface;
    }
  }
  for (const auto& c : remote) cands.push_back(Candidate{Token{c.id, c.surface}, c.confidence, Embedding(c.rep)});
  try {
    CandidateSet set(std::move(cands), k);
    set.mark_clamped(static_cast<std::size_t>(k) > info_.vocab_size);
    return set;
  } catch (const ContractViolation& e) {
    throw BridgeError(std::string("invalid lm_propose candidates: ") + e.what());
  }
}

RemoteScorer::RemoteScorer(BridgeClient& client, const LanguageModel& lm) : client_(&client), lm_(&lm) {}

std::vector<double> RemoteScorer::image_text_logits(const ImageHandle& image,
                                                    std::span<const std::vector<TokenId>> texts) const {
  if (texts.empty()) return {};
  std::vector<std::string> strings;
  for (const auto& t : texts) {
    if (t.empty()) throw ContractViolation("image_text_logits: empty text");
    strings.push_back(lm_->detokenize(t));
  }
  return client_->image_text_logits(image.id, strings);
}

Embedding RemoteScorer::encode_text(std::span<const TokenId> text) const {
  return client_->encode_text(lm_->detokenize(text));
}

Embedding RemoteScorer::encode_image(const ImageHandle& image) const { return client_->encode_image(image.id); }

}  // namespace magic::bridge
