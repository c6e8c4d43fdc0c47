#pragma once

// Wire format: u32 big-endian length (payload size + 1), one type byte, payload.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ami/error.hpp"
#include "ami/pdt.hpp"
#include "ami/sha256.hpp"

namespace ami::net {

enum class FrameType : std::uint8_t {
  hello = 0x01,
  params = 0x02,
  commit = 0x03,
  reveal = 0x04,
  decision = 0x05,
  error = 0x7F,
};

inline bool known_frame_type(std::uint8_t t) {
  return (t >= 0x01 && t <= 0x05) || t == 0x7F;
}

inline constexpr std::size_t kMaxPayload = 64 * 1024;
inline constexpr std::size_t kHeaderSize = 5;
inline constexpr std::uint16_t kProtocolVersion = 1;

using Nonce = std::array<std::uint8_t, 16>;

struct Frame {
  FrameType type = FrameType::error;
  std::vector<std::uint8_t> payload;
  friend bool operator==(const Frame&, const Frame&) = default;
};

namespace detail {

inline void put_be(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = bytes - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_be(std::span<const std::uint8_t> in, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v = (v << 8) | in[offset + static_cast<std::size_t>(i)];
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  if (f.payload.size() > kMaxPayload) fail(ErrorKind::invalid_parameter, "frame payload exceeds 64 KiB");
  if (!known_frame_type(static_cast<std::uint8_t>(f.type))) fail(ErrorKind::invalid_parameter, "unknown frame type");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + f.payload.size());
  detail::put_be(out, f.payload.size() + 1, 4);
  out.push_back(static_cast<std::uint8_t>(f.type));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

enum class DecodeStatus { ok, incomplete, malformed };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::incomplete;
  Frame frame;
  std::size_t consumed = 0;
  std::string error;
};

/// Decodes the frame at the start of `bytes`, if one is complete.
inline DecodeResult try_decode_frame(std::span<const std::uint8_t> bytes) {
  DecodeResult r;
  if (bytes.size() < 4) return r;
  const auto length = detail::get_be(bytes, 0, 4);
  if (length == 0) {
    r.status = DecodeStatus::malformed;
    r.error = "zero frame length";
    return r;
  }
  if (length - 1 > kMaxPayload) {
    r.status = DecodeStatus::malformed;
    r.error = "frame payload exceeds 64 KiB";
    return r;
  }
  if (bytes.size() < 4 + length) return r;
  if (!known_frame_type(bytes[4])) {
    r.status = DecodeStatus::malformed;
    r.error = "unknown frame type " + std::to_string(bytes[4]);
    return r;
  }
  r.status = DecodeStatus::ok;
  r.frame.type = static_cast<FrameType>(bytes[4]);
  r.frame.payload.assign(bytes.begin() + 5, bytes.begin() + static_cast<std::ptrdiff_t>(4 + length));
  r.consumed = static_cast<std::size_t>(4 + length);
  return r;
}

/// Decodes a buffer holding exactly one frame.
inline Frame decode_frame(std::span<const std::uint8_t> bytes) {
  auto r = try_decode_frame(bytes);
  if (r.status == DecodeStatus::malformed) fail(ErrorKind::protocol_violation, r.error);
  if (r.status == DecodeStatus::incomplete) fail(ErrorKind::protocol_violation, "truncated frame");
  if (r.consumed != bytes.size()) fail(ErrorKind::protocol_violation, "trailing bytes after frame");
  return std::move(r.frame);
}

struct Params {
  std::uint16_t n_actions = 0;
  std::uint32_t l = 0;
  std::uint16_t depth = 0;
  std::uint16_t version = kProtocolVersion;
  friend bool operator==(const Params&, const Params&) = default;
};

inline Frame params_frame(const Params& p) {
  Frame f{FrameType::params, {}};
  detail::put_be(f.payload, p.n_actions, 2);
  detail::put_be(f.payload, p.l, 4);
  detail::put_be(f.payload, p.depth, 2);
  detail::put_be(f.payload, p.version, 2);
  return f;
}

inline Params parse_params(const Frame& f) {
  if (f.type != FrameType::params || f.payload.size() != 10)
    fail(ErrorKind::protocol_violation, "malformed PARAMS frame");
  return {static_cast<std::uint16_t>(detail::get_be(f.payload, 0, 2)),
          static_cast<std::uint32_t>(detail::get_be(f.payload, 2, 4)),
          static_cast<std::uint16_t>(detail::get_be(f.payload, 6, 2)),
          static_cast<std::uint16_t>(detail::get_be(f.payload, 8, 2))};
}

/// SHA-256(action byte || nonce).
inline Digest commit(Action action, const Nonce& nonce) {
  if (action.value < 1 || action.value > 255) fail(ErrorKind::invalid_parameter, "action does not fit in a byte");
  const std::array<std::uint8_t, 1> a{static_cast<std::uint8_t>(action.value)};
  return Sha256().update(a).update(nonce).finish();
}

inline Frame commit_frame(const Digest& d) { return {FrameType::commit, std::vector<std::uint8_t>(d.begin(), d.end())}; }

inline Digest parse_commit(const Frame& f) {
  if (f.type != FrameType::commit || f.payload.size() != 32) fail(ErrorKind::protocol_violation, "malformed COMMIT frame");
  Digest d{};
  std::copy(f.payload.begin(), f.payload.end(), d.begin());
  return d;
}

struct Reveal {
  Action action;
  Nonce nonce{};
};

inline Frame reveal_frame(const Reveal& r) {
  Frame f{FrameType::reveal, {static_cast<std::uint8_t>(r.action.value)}};
  f.payload.insert(f.payload.end(), r.nonce.begin(), r.nonce.end());
  return f;
}

inline Reveal parse_reveal(const Frame& f) {
  if (f.type != FrameType::reveal || f.payload.size() != 17) fail(ErrorKind::protocol_violation, "malformed REVEAL frame");
  Reveal r{Action(f.payload[0]), {}};
  std::copy(f.payload.begin() + 1, f.payload.end(), r.nonce.begin());
  return r;
}

struct Decision {
  bool accept = false;
  std::optional<Digest> tag;
};

inline Frame decision_frame(const Decision& d) {
  Frame f{FrameType::decision, {static_cast<std::uint8_t>(d.accept ? 1 : 0)}};
  if (d.tag) f.payload.insert(f.payload.end(), d.tag->begin(), d.tag->end());
  return f;
}

inline Decision parse_decision(const Frame& f) {
  if (f.type != FrameType::decision || (f.payload.size() != 1 && f.payload.size() != 33) || f.payload[0] > 1)
    fail(ErrorKind::protocol_violation, "malformed DECISION frame");
  Decision d{f.payload[0] == 1, std::nullopt};
  if (f.payload.size() == 33) {
    Digest tag{};
    std::copy(f.payload.begin() + 1, f.payload.end(), tag.begin());
    d.tag = tag;
  }
  return d;
}

inline Frame text_frame(FrameType type, const std::string& text) {
  return {type, std::vector<std::uint8_t>(text.begin(), text.end())};
}

inline std::string frame_text(const Frame& f) { return {f.payload.begin(), f.payload.end()}; }

}  // namespace ami::net
