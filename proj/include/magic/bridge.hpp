#pragma once

// Client side of the newline-delimited JSON protocol spoken by a remote model
// adapter. Requests are {"id", "op", "payload"}; responses are
// {"id", "ok", "payload"} or {"id", "ok": false, "error": {"code", "message"}}.

#include <cstdint>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "magic/core.hpp"

namespace magic::bridge {

inline constexpr const char* kProtocolVersion = "1";
inline constexpr const char* kAddressEnv = "MAGIC_BRIDGE_ADDR";

/// Transport, protocol or remote-side failure.
class BridgeError : public Error {
 public:
  using Error::Error;
};

/// Sends one request line and returns the matching response line. Lines carry
/// no trailing newline.
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual std::string exchange(const std::string& request_line) = 0;
};

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};

/// Accepts "host:port" or "tcp://host:port".
Endpoint parse_endpoint(const std::string& address);

/// Blocking TCP connection with one in-flight request.
class TcpLineChannel : public LineChannel {
 public:
  explicit TcpLineChannel(const Endpoint& endpoint, int timeout_ms = 30000);
  ~TcpLineChannel() override;
  TcpLineChannel(const TcpLineChannel&) = delete;
  TcpLineChannel& operator=(const TcpLineChannel&) = delete;

  std::string exchange(const std::string& request_line) override;

 private:
  int fd_ = -1;
  std::string buffer_;
};

/// Forwards to `inner` and appends each exchange to a fixture file as
/// {"request": "<line>", "response": "<line>"}.
class RecordingChannel : public LineChannel {
 public:
  RecordingChannel(std::unique_ptr<LineChannel> inner, const std::string& fixture_path);
  std::string exchange(const std::string& request_line) override;

 private:
  std::unique_ptr<LineChannel> inner_;
  std::ofstream out_;
};

/// Serves responses from a recorded fixture. Each request must match the
/// recorded request byte for byte, in order.
class ReplayChannel : public LineChannel {
 public:
  explicit ReplayChannel(const std::string& fixture_path);
  std::string exchange(const std::string& request_line) override;
  std::size_t remaining() const { return exchanges_.size() - next_; }

 private:
  std::vector<std::pair<std::string, std::string>> exchanges_;
  std::size_t next_ = 0;
};

/// Channel for MAGIC_BRIDGE_ADDR: "replay:<fixture>" replays a fixture, anything
/// else is a TCP endpoint. Returns nullptr when the variable is unset or empty.
std::unique_ptr<LineChannel> channel_from_env();

struct BridgeInfo {
  std::string version;
  std::size_t hidden_dim = 0;
  std::size_t vocab_size = 0;
  std::string tokenizer;
  SpecialTokens specials;
};

struct RemoteCandidate {
  TokenId id = 0;
  std::string surface;
  double confidence = 0.0;
  std::vector<double> rep;
};

/// Typed operations over a channel. Remote errors with code "not_found" raise
/// NotFoundError; everything else raises BridgeError.
class BridgeClient {
 public:
  explicit BridgeClient(std::unique_ptr<LineChannel> channel);

  BridgeInfo hello();
  std::vector<RemoteCandidate> lm_propose(std::span<const TokenId> prefix, int k);
  std::vector<double> image_text_logits(const std::string& image, const std::vector<std::string>& texts);
  Embedding encode_text(const std::string& text);
  Embedding encode_image(const std::string& image);
  std::string register_image(const std::string& path);

  /// Number of requests sent so far.
  std::uint64_t requests() const { return next_id_ - 1; }

 private:
  nlohmann::ordered_json call(const std::string& op, nlohmann::ordered_json payload);

  std::unique_ptr<LineChannel> channel_;
  std::uint64_t next_id_ = 1;
  std::mutex mutex_;
};

/// LanguageModel backed by the remote adapter. Token surfaces are learned
/// from proposals; detokenize concatenates them verbatim. The full next-token
/// distribution is not part of the protocol, so next_token_probs throws
/// BridgeError and only the top-k based methods can run remotely.
class RemoteLanguageModel : public LanguageModel {
 public:
  explicit RemoteLanguageModel(BridgeClient& client);

  const BridgeInfo& info() const { return info_; }

  std::size_t vocab_size() const override { return info_.vocab_size; }
  SpecialTokens specials() const override { return info_.specials; }
  Token token(TokenId id) const override;
  std::string detokenize(std::span<const TokenId> ids) const override;
  std::vector<double> next_token_probs(std::span<const TokenId> prefix) const override;
  CandidateSet propose(const GenerationState& state, int k) const override;

 private:
  BridgeClient* client_;
  BridgeInfo info_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<TokenId, std::string> surfaces_;
};

/// Image-text scorer and encoders backed by the remote adapter. Texts cross
/// the boundary as detokenized strings from `lm`.
class RemoteScorer : public ImageTextScorer, public TextEncoder, public ImageEncoder {
 public:
  RemoteScorer(BridgeClient& client, const LanguageModel& lm);

  std::vector<double> image_text_logits(const ImageHandle& image,
                                        std::span<const std::vector<TokenId>> texts) const override;
  Embedding encode_text(std::span<const TokenId> text) const override;
  Embedding encode_image(const ImageHandle& image) const override;

 private:
  BridgeClient* client_;
  const LanguageModel* lm_;
};

}  // namespace magic::bridge
