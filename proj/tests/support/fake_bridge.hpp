#pragma once

// In-process stand-in for the remote model adapter. It answers the JSON-lines
// protocol from a toy world and a small NeuralLm, either directly through
// respond() or over a loopback TCP socket.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "magic/bridge.hpp"
#include "magic/neural_lm.hpp"
#include "magic/toy_world.hpp"

namespace testsupport {

/// A 6-image world and an untrained 1-layer LM; fully deterministic.
struct FakeModels {
  magic::toy::World world;
  magic::lm::Checkpoint checkpoint;
};
FakeModels make_fake_models();

class FakeBridge {
 public:
  /// Image files registered by relative path are resolved against `image_dir`.
  /// A file's content (trimmed) names the world image it depicts.
  FakeBridge(FakeModels models, std::string image_dir);
  ~FakeBridge();
  FakeBridge(const FakeBridge&) = delete;
  FakeBridge& operator=(const FakeBridge&) = delete;

  /// Handles one request line and returns the response line.
  std::string respond(const std::string& request_line);

  /// Starts listening on 127.0.0.1 with an ephemeral port; returns the port.
  std::uint16_t listen();
  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

  /// Fail every image_text_logits request after the first `n` with code "internal".
  void fail_scoring_after(int n) { fail_after_ = n; }
  std::size_t distinct_images() const;
  std::size_t requests_served() const { return served_; }

  const magic::toy::World& world() const { return models_.world; }

 private:
  void accept_loop();
  void serve(int fd);

  FakeModels models_;
  std::string image_dir_;
  std::unique_ptr<magic::toy::ToyScorer> scorer_;
  std::unique_ptr<magic::lm::NeuralLm> lm_;

  mutable std::mutex mutex_;
  std::map<std::string, std::string> handle_by_content_;
  std::map<std::string, std::string> image_by_handle_;
  std::atomic<int> fail_after_{-1};
  std::atomic<int> scoring_calls_{0};
  std::atomic<std::size_t> served_{0};

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::vector<std::thread> workers_;
  std::vector<int> client_fds_;
};

/// LineChannel that calls FakeBridge::respond directly.
class DirectChannel : public magic::bridge::LineChannel {
 public:
  explicit DirectChannel(FakeBridge& bridge) : bridge_(&bridge) {}
  std::string exchange(const std::string& request_line) override { return bridge_->respond(request_line); }

 private:
  FakeBridge* bridge_;
};

/// Fixed client session used to record and replay the golden fixture: hello,
/// two registrations (one duplicate), a MAGIC caption per image, both
/// encoders and a lookup of an unknown handle. Returns a transcript of the
/// client-side results, one line per observation.
std::vector<std::string> run_fixture_session(std::unique_ptr<magic::bridge::LineChannel> channel);

/// Image paths as sent by the session (relative to the fixture directory).
const std::vector<std::string>& fixture_image_paths();

}  // namespace testsupport
