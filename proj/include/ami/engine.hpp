#pragma once

// The l-step interaction between a server and a client, and the session key
// both sides derive from the finished transcript.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ami/error.hpp"
#include "ami/pdt.hpp"
#include "ami/rng.hpp"
#include "ami/sha256.hpp"

namespace ami {

struct Step {
  Action server;
  Action client;
  friend bool operator==(const Step&, const Step&) = default;
};

/// H_l = (s_0, c_0, ..., s_l, c_l), kept as two parallel sequences so either
/// side can be viewed as a contiguous span.
class InteractionHistory {
 public:
  explicit InteractionHistory(int n_actions) : n_(n_actions) {
    require(n_actions >= 2, "n_actions must be at least 2");
  }

  void append(Action server, Action client) {
    require(valid_action(server, n_) && valid_action(client, n_), "history action out of range");
    server_.push_back(server);
    client_.push_back(client);
  }

  int n_actions() const { return n_; }
  std::size_t size() const { return server_.size(); }
  bool empty() const { return server_.empty(); }
  Step step(std::size_t t) const { return {server_.at(t), client_.at(t)}; }

  std::span<const Action> server_actions() const { return server_; }
  std::span<const Action> client_actions() const { return client_; }
  TranscriptView view() const { return {server_, client_}; }

  InteractionHistory prefix(std::size_t length) const {
    InteractionHistory out(n_);
    length = std::min(length, size());
    out.server_.assign(server_.begin(), server_.begin() + static_cast<std::ptrdiff_t>(length));
    out.client_.assign(client_.begin(), client_.begin() + static_cast<std::ptrdiff_t>(length));
    return out;
  }

  friend bool operator==(const InteractionHistory&, const InteractionHistory&) = default;

 private:
  int n_;
  std::vector<Action> server_;
  std::vector<Action> client_;
};

/// What an agent sees before choosing its action at step t: both sides'
/// actions for steps 0..t-1.
struct AgentView {
  std::span<const Action> own;
  std::span<const Action> opponent;
};

class Agent {
 public:
  virtual ~Agent() = default;
  virtual int n_actions() const = 0;
  virtual Action next_action(const AgentView& view, Rng& rng) const = 0;
};

/// An agent acting from a tree traversed by its opponent's recent actions.
class PdtAgent final : public Agent {
 public:
  explicit PdtAgent(std::shared_ptr<const Pdt> model) : model_(std::move(model)) {
    require(model_ != nullptr, "PdtAgent needs a model");
  }

  int n_actions() const override { return model_->n_actions(); }
  Action next_action(const AgentView& view, Rng& rng) const override {
    return model_->sample_action(view.opponent, rng);
  }
  const Pdt& model() const { return *model_; }
  const std::shared_ptr<const Pdt>& shared_model() const { return model_; }

 private:
  std::shared_ptr<const Pdt> model_;
};

/// Runs steps t = 0..l. Both actions at t are chosen from the history strictly
/// before t, so neither side sees the other's current choice.
inline InteractionHistory run_interaction(const Agent& server, const Agent& client, int l,
                                          Rng& rng_s, Rng& rng_c) {
  require(l >= 0, "interaction length must be non-negative");
  const int n = server.n_actions();
  require(client.n_actions() == n, "server and client disagree on the action count");
  InteractionHistory history(n);
  for (int t = 0; t <= l; ++t) {
    const Action s = server.next_action({history.server_actions(), history.client_actions()}, rng_s);
    const Action c = client.next_action({history.client_actions(), history.server_actions()}, rng_c);
    if (!valid_action(s, n))
      fail(ErrorKind::protocol_violation, "server produced action " + std::to_string(s.value));
    if (!valid_action(c, n))
      fail(ErrorKind::protocol_violation, "client produced action " + std::to_string(c.value));
    history.append(s, c);
  }
  return history;
}

struct SessionKey {
  Digest bytes{};
  friend bool operator==(const SessionKey&, const SessionKey&) = default;
  std::string hex() const { return to_hex(bytes); }
};

/// round(p * 2^32) for each client action's model probability, as 8-byte
/// big-endian words, hashed with SHA-256.
inline SessionKey derive_key(const InteractionHistory& history, const Pdt& model) {
  require(history.n_actions() == model.n_actions(), "model does not match history action count");
  Sha256 hash;
  const auto server = history.server_actions();
  const auto client = history.client_actions();
  for (std::size_t t = 0; t < history.size(); ++t) {
    const double p = model.action_distribution(server.first(t))[client[t].index()];
    const auto q = static_cast<std::uint64_t>(std::llround(std::ldexp(p, 32)));
    std::array<std::uint8_t, 8> word{};
    for (int i = 0; i < 8; ++i) word[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(q >> (56 - 8 * i));
    hash.update(word);
  }
  return {hash.finish()};
}

/// Header of a transcript file.
struct TranscriptMeta {
  int n_actions = 0;
  int l = 0;
  std::optional<std::uint64_t> seed_server;
  std::optional<std::uint64_t> seed_client;
};

inline void write_transcript(std::ostream& out, const InteractionHistory& history,
                             const TranscriptMeta& meta = {}) {
  nlohmann::json header = {{"n", history.n_actions()}, {"l", static_cast<int>(history.size()) - 1}};
  if (meta.seed_server) header["seed_s"] = *meta.seed_server;
  if (meta.seed_client) header["seed_c"] = *meta.seed_client;
  out << header.dump() << '\n';
  for (std::size_t t = 0; t < history.size(); ++t) {
    const auto st = history.step(t);
    out << nlohmann::json{{"t", t}, {"s", st.server.value}, {"c", st.client.value}}.dump() << '\n';
  }
}

inline InteractionHistory read_transcript(std::istream& in, TranscriptMeta* meta_out = nullptr) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::parse_error, "transcript is empty");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, std::string("transcript header: ") + e.what());
  }
  if (!header.contains("n") || !header["n"].is_number_integer())
    fail(ErrorKind::parse_error, "transcript header field 'n' missing");
  if (!header.contains("l") || !header["l"].is_number_integer())
    fail(ErrorKind::parse_error, "transcript header field 'l' missing");
  TranscriptMeta meta;
  meta.n_actions = header["n"].get<int>();
  meta.l = header["l"].get<int>();
  if (header.contains("seed_s")) meta.seed_server = header["seed_s"].get<std::uint64_t>();
  if (header.contains("seed_c")) meta.seed_client = header["seed_c"].get<std::uint64_t>();
  if (meta.n_actions < 2) fail(ErrorKind::parse_error, "transcript header field 'n' must be at least 2");
  InteractionHistory history(meta.n_actions);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse_error, std::string("transcript step: ") + e.what());
    }
    for (const char* key : {"t", "s", "c"})
      if (!row.contains(key) || !row[key].is_number_integer())
        fail(ErrorKind::parse_error, std::string("transcript step field '") + key + "' missing");
    if (row["t"].get<std::size_t>() != history.size())
      fail(ErrorKind::parse_error, "transcript field 't' out of sequence");
    const Action s(row["s"].get<int>());
    const Action c(row["c"].get<int>());
    if (!valid_action(s, meta.n_actions) || !valid_action(c, meta.n_actions))
      fail(ErrorKind::parse_error, "transcript action out of range");
    history.append(s, c);
  }
  if (static_cast<int>(history.size()) != meta.l + 1)
    fail(ErrorKind::parse_error, "transcript has " + std::to_string(history.size()) +
                                     " steps, header says l=" + std::to_string(meta.l));
  if (meta_out) *meta_out = meta;
  return history;
}

inline void save_transcript(const std::filesystem::path& path, const InteractionHistory& history,
                            const TranscriptMeta& meta = {}) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path.string());
  write_transcript(out, history, meta);
}

inline InteractionHistory load_transcript(const std::filesystem::path& path, TranscriptMeta* meta = nullptr) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io_error, "cannot read " + path.string());
  return read_transcript(in, meta);
}

}  // namespace ami
