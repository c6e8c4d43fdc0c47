#pragma once

// Server and client sides of an authentication session over TCP.
//
// Per connection: HELLO(user id) -> PARAMS -> l+1 commit-reveal steps ->
// DECISION. At every step each side sends its COMMIT, waits for the peer's
// COMMIT, and only then sends its REVEAL, so no plaintext action for step t
// is on the wire before both commitments are.

#include <atomic>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <openssl/rand.h>

#include "ami/engine.hpp"
#include "ami/error.hpp"
#include "ami/hypo.hpp"
#include "ami/net/frame.hpp"
#include "ami/net/socket.hpp"
#include "ami/pdt.hpp"
#include "ami/rl.hpp"

namespace ami::net {

inline Nonce random_nonce() {
  Nonce n{};
  if (RAND_bytes(n.data(), static_cast<int>(n.size())) != 1) fail(ErrorKind::invalid_state, "RAND_bytes failed");
  return n;
}

/// SHA-256(key || "confirm").
inline Digest confirmation_tag(const SessionKey& key) {
  return Sha256().update(key.bytes).update(std::string_view("confirm")).finish();
}

namespace detail {

/// Receives a frame of the expected type. A peer ERROR frame aborts the session.
inline Frame expect(Socket& sock, FrameType type, Millis timeout) {
  Frame f = sock.recv_frame(timeout);
  if (f.type == FrameType::error) fail(ErrorKind::protocol_violation, "peer aborted: " + frame_text(f));
  if (f.type != type)
    fail(ErrorKind::protocol_violation,
         "unexpected frame type " + std::to_string(static_cast<int>(f.type)) + " (wanted " +
             std::to_string(static_cast<int>(type)) + ")");
  return f;
}

inline void send_error_quietly(Socket& sock, const std::string& message) {
  try {
    sock.send_frame(text_frame(FrameType::error, message.substr(0, 1024)), Millis{1000});
  } catch (const Error&) {
  }
}

/// One commit-reveal step. Returns the peer's verified action.
inline Action exchange_step(Socket& sock, Action own, int n_actions, Millis timeout) {
  const Nonce nonce = random_nonce();
  sock.send_frame(commit_frame(commit(own, nonce)), timeout);
  const Digest peer_commit = parse_commit(expect(sock, FrameType::commit, timeout));
  sock.send_frame(reveal_frame({own, nonce}), timeout);
  const Reveal peer = parse_reveal(expect(sock, FrameType::reveal, timeout));
  if (!valid_action(peer.action, n_actions))
    fail(ErrorKind::protocol_violation, "peer revealed out-of-range action " + std::to_string(peer.action.value));
  if (commit(peer.action, peer.nonce) != peer_commit)
    fail(ErrorKind::protocol_violation, "reveal does not match commitment");
  return peer.action;
}

}  // namespace detail

using Registry = std::map<std::string, std::shared_ptr<const Pdt>>;

/// Builds the server's agent for a session with the given user's model.
using ServerPolicy = std::function<std::shared_ptr<const Agent>(const std::shared_ptr<const Pdt>& legit)>;

inline ServerPolicy pdt_server_policy(std::shared_ptr<const Pdt> server_model) {
  require(server_model != nullptr, "server policy needs a model");
  auto agent = std::make_shared<const PdtAgent>(std::move(server_model));
  return [agent](const std::shared_ptr<const Pdt>&) -> std::shared_ptr<const Agent> { return agent; };
}

inline ServerPolicy probe_server_policy(std::shared_ptr<const ProbePolicy> policy, PolicyMode mode) {
  require(policy != nullptr, "server policy needs a probe policy");
  return [policy, mode](const std::shared_ptr<const Pdt>& legit) -> std::shared_ptr<const Agent> {
    return std::make_shared<const ProbeAgent>(policy, legit, mode);
  };
}

struct ServerConfig {
  Endpoint listen{"127.0.0.1", 0};
  Registry registry;
  ServerPolicy policy;
  int l = 200;
  double alpha = kDefaultAlpha;
  int null_samples = kDefaultNullSamples;
  Millis timeout = kDefaultTimeout;
  std::uint64_t seed = 1;
  bool force_accept = false;  // send a confirmation tag regardless of the test outcome
};

struct SessionRecord {
  std::string user;
  std::optional<InteractionHistory> history;  // absent when the session aborted before PARAMS
  AuthVerdict verdict;
  bool accepted = false;
  std::optional<SessionKey> key;
  std::string error;  // non-empty when the session aborted
};

class Server {
 public:
  using Observer = std::function<void(const SessionRecord&)>;

  explicit Server(ServerConfig cfg, Observer on_session = {})
      : cfg_(std::move(cfg)), observer_(std::move(on_session)) {
    require(!cfg_.registry.empty(), "user registry is empty");
    require(static_cast<bool>(cfg_.policy), "server policy is missing");
    require(cfg_.l >= 0, "interaction length must be non-negative");
    require(cfg_.alpha > 0.0 && cfg_.alpha < 1.0, "alpha must lie in (0,1)");
    require(cfg_.null_samples >= 1, "null sample count must be positive");
    for (const auto& [user, model] : cfg_.registry) require(model != nullptr, "registry model missing for " + user);
  }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;
  ~Server() { stop(); }

  void start() {
    require(!running_.load(), "server already running");
    listener_ = std::make_unique<Listener>(cfg_.listen);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  std::uint16_t port() const { return listener_ ? listener_->port() : 0; }

  /// Stops accepting and waits for in-flight sessions to finish.
  void stop() {
    if (!running_.exchange(false)) return;
    if (acceptor_.joinable()) acceptor_.join();
    std::lock_guard lock(mutex_);
    for (auto& s : sessions_)
      if (s.thread.joinable()) s.thread.join();
    sessions_.clear();
    listener_.reset();
  }

  std::uint64_t sessions_started() const { return counter_.load(); }

  /// Runs one session on an already-connected socket.
  SessionRecord handle(Socket sock, Rng& rng) const {
    SessionRecord rec;
    try {
      run_session(sock, rng, rec);
    } catch (const Error& e) {
      rec.error = e.what();
      rec.accepted = false;
      if (e.kind() != ErrorKind::io_error) detail::send_error_quietly(sock, e.what());
    }
    sock.close();
    return rec;
  }

 private:
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };

  void accept_loop() {
    while (running_.load()) {
      auto sock = listener_->accept(Millis{50});
      reap();
      if (!sock) continue;
      const std::uint64_t id = counter_.fetch_add(1);
      auto done = std::make_shared<std::atomic<bool>>(false);
      std::thread t([this, s = std::move(*sock), id, done]() mutable {
        try {
          Rng rng(derive_seed(cfg_.seed, id));
          const SessionRecord rec = handle(std::move(s), rng);
          if (observer_) observer_(rec);
        } catch (...) {
          // A failing observer must not take the acceptor down.
        }
        done->store(true);
      });
      std::lock_guard lock(mutex_);
      sessions_.push_back({std::move(t), done});
    }
  }

  void reap() {
    std::lock_guard lock(mutex_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (it->done->load()) {
        it->thread.join();
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void run_session(Socket& sock, Rng& rng, SessionRecord& rec) const {
    const Frame hello = detail::expect(sock, FrameType::hello, cfg_.timeout);
    rec.user = frame_text(hello);
    const auto found = cfg_.registry.find(rec.user);
    if (found == cfg_.registry.end()) fail(ErrorKind::invalid_parameter, "unknown user '" + rec.user + "'");
    const auto& legit = found->second;
    const auto agent = cfg_.policy(legit);
    const int n = legit->n_actions();
    require(agent->n_actions() == n, "server policy does not match the user's action count");

    sock.send_frame(params_frame({static_cast<std::uint16_t>(n), static_cast<std::uint32_t>(cfg_.l),
                                  static_cast<std::uint16_t>(legit->depth()), kProtocolVersion}),
                    cfg_.timeout);

    rec.history.emplace(n);
    auto& history = *rec.history;
    for (int t = 0; t <= cfg_.l; ++t) {
      const Action own = agent->next_action({history.server_actions(), history.client_actions()}, rng);
      const Action peer = detail::exchange_step(sock, own, n, cfg_.timeout);
      history.append(own, peer);
    }

    rec.verdict = hypothesis_test(history, *legit, cfg_.alpha, cfg_.null_samples, rng);
    rec.accepted = rec.verdict.accept || cfg_.force_accept;
    Decision decision{rec.accepted, std::nullopt};
    if (rec.accepted) {
      rec.key = derive_key(history, *legit);
      decision.tag = confirmation_tag(*rec.key);
    }
    sock.send_frame(decision_frame(decision), cfg_.timeout);
  }

  ServerConfig cfg_;
  Observer observer_;
  std::unique_ptr<Listener> listener_;
  std::thread acceptor_;
  std::atomic<bool> running_{false};
  std::atomic<std::uint64_t> counter_{0};
  mutable std::mutex mutex_;
  std::list<Worker> sessions_;
};

enum class ClientOutcome { accepted, rejected, key_mismatch };

inline const char* to_string(ClientOutcome o) {
  switch (o) {
    case ClientOutcome::accepted: return "accepted";
    case ClientOutcome::rejected: return "rejected";
    case ClientOutcome::key_mismatch: return "key_mismatch";
  }
  return "?";
}

struct ClientResult {
  ClientOutcome outcome = ClientOutcome::rejected;
  std::optional<SessionKey> key;
  InteractionHistory history;
  Params params;
};

/// Client side. `agent` chooses the actions; `key_model` (usually the same
/// tree) derives the session key. A null key_model skips key derivation.
inline ClientResult client_authenticate(const Endpoint& server, const std::string& user, const Agent& agent,
                                        const Pdt* key_model, Rng& rng, Millis timeout = kDefaultTimeout) {
  require(!user.empty(), "user id is empty");
  Socket sock = connect_to(server, timeout);
  try {
    sock.send_frame(text_frame(FrameType::hello, user), timeout);
    const Params params = parse_params(detail::expect(sock, FrameType::params, timeout));
    if (params.version != kProtocolVersion)
      fail(ErrorKind::unsupported_version, "server speaks protocol version " + std::to_string(params.version));
    if (params.n_actions != agent.n_actions())
      fail(ErrorKind::protocol_violation, "server action count " + std::to_string(params.n_actions) +
                                              " does not match the client's " + std::to_string(agent.n_actions()));
    if (key_model && (key_model->n_actions() != params.n_actions || key_model->depth() != params.depth))
      fail(ErrorKind::protocol_violation, "client model dimensions do not match the server's parameters");

    InteractionHistory history(params.n_actions);
    for (std::uint64_t t = 0; t <= params.l; ++t) {
      const Action own = agent.next_action({history.client_actions(), history.server_actions()}, rng);
      if (!valid_action(own, params.n_actions))
        fail(ErrorKind::protocol_violation, "client produced action " + std::to_string(own.value));
      const Action peer = detail::exchange_step(sock, own, params.n_actions, timeout);
      history.append(peer, own);
    }
    const Decision decision = parse_decision(detail::expect(sock, FrameType::decision, timeout));
    ClientResult out{ClientOutcome::rejected, std::nullopt, std::move(history), params};
    if (!decision.accept) return out;
    out.outcome = ClientOutcome::accepted;
    if (key_model) {
      const SessionKey key = derive_key(out.history, *key_model);
      if (!decision.tag || *decision.tag != confirmation_tag(key)) {
        out.outcome = ClientOutcome::key_mismatch;
      } else {
        out.key = key;
      }
    }
    return out;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::io_error && e.kind() != ErrorKind::timeout) detail::send_error_quietly(sock, e.what());
    throw;
  }
}

inline ClientResult client_authenticate(const Endpoint& server, const std::string& user,
                                        std::shared_ptr<const Pdt> model, Rng& rng,
                                        Millis timeout = kDefaultTimeout) {
  require(model != nullptr, "client model is missing");
  const PdtAgent agent(model);
  return client_authenticate(server, user, agent, model.get(), rng, timeout);
}

}  // namespace ami::net
