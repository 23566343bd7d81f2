#pragma once

// Shared plumbing: fixed-size ids, error codes, a small expected-style
// Result, and big-endian byte buffer readers/writers used by every wire
// format in the project.

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace ecbr {

using Bytes = std::vector<std::uint8_t>;
using ByteSpan = std::span<const std::uint8_t>;

using Id16 = std::array<std::uint8_t, 16>;
using Key32 = std::array<std::uint8_t, 32>;
using Hash32 = std::array<std::uint8_t, 32>;
using Sig64 = std::array<std::uint8_t, 64>;
using Nonce12 = std::array<std::uint8_t, 12>;
using Tag16 = std::array<std::uint8_t, 16>;

enum class errc {
  // filter grammar / encoding
  syntax_error,
  unsupported_operator,
  unsatisfiable_filter,
  malformed_encoding,
  invalid_argument,
  // containment index
  duplicate_filter_id,
  unknown_filter_id,
  // envelope
  unknown_key,
  counter_exhausted,
  bad_signature,
  bad_tag,
  context_mismatch,
  malformed_envelope,
  incomplete_handshake,
  // enclave boundary
  too_large,
  unreachable_target,
  // provisioning
  malformed_scf,
  unknown_measurement,
  channel_error,
  // sealed bundle
  symlink_rejected,
  io_error,
  bad_header_sig,
  bad_manifest,
  chunk_mac_mismatch,
  unknown_path,
  not_customizable,
  path_collision,
  // broker
  not_owner,
  frame_too_large,
  malformed_frame,
  not_provisioned,
  // bench
  infeasible_spec,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::syntax_error: return "syntax_error";
    case errc::unsupported_operator: return "unsupported_operator";
    case errc::unsatisfiable_filter: return "unsatisfiable_filter";
    case errc::malformed_encoding: return "malformed_encoding";
    case errc::invalid_argument: return "invalid_argument";
    case errc::duplicate_filter_id: return "duplicate_filter_id";
    case errc::unknown_filter_id: return "unknown_filter_id";
    case errc::unknown_key: return "unknown_key";
    case errc::counter_exhausted: return "counter_exhausted";
    case errc::bad_signature: return "bad_signature";
    case errc::bad_tag: return "bad_tag";
    case errc::context_mismatch: return "context_mismatch";
    case errc::malformed_envelope: return "malformed_envelope";
    case errc::incomplete_handshake: return "incomplete_handshake";
    case errc::too_large: return "too_large";
    case errc::unreachable_target: return "unreachable_target";
    case errc::malformed_scf: return "malformed_scf";
    case errc::unknown_measurement: return "unknown_measurement";
    case errc::channel_error: return "channel_error";
    case errc::symlink_rejected: return "symlink_rejected";
    case errc::io_error: return "io_error";
    case errc::bad_header_sig: return "bad_header_sig";
    case errc::bad_manifest: return "bad_manifest";
    case errc::chunk_mac_mismatch: return "chunk_mac_mismatch";
    case errc::unknown_path: return "unknown_path";
    case errc::not_customizable: return "not_customizable";
    case errc::path_collision: return "path_collision";
    case errc::not_owner: return "not_owner";
    case errc::frame_too_large: return "frame_too_large";
    case errc::malformed_frame: return "malformed_frame";
    case errc::not_provisioned: return "not_provisioned";
    case errc::infeasible_spec: return "infeasible_spec";
  }
  return "unknown";
}

struct Error {
  errc code;
  std::string message;
  // byte offset into the parsed text, when the error came from a parser
  std::size_t position = npos;
  // chunk index, when the error came from bundle chunk verification
  std::int64_t chunk_index = -1;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::string to_string() const {
    std::string s = errc_name(code);
    if (!message.empty()) {
      s += ": ";
      s += message;
    }
    if (position != npos) s += " (at byte " + std::to_string(position) + ")";
    if (chunk_index >= 0) s += " (chunk " + std::to_string(chunk_index) + ")";
    return s;
  }
};

inline Error make_error(errc c, std::string msg = {}) { return Error{c, std::move(msg)}; }

template <typename T>
class [[nodiscard]] Result {
 public:
  Result(T value) : v_(std::move(value)) {}
  Result(Error err) : v_(std::move(err)) {}

  bool ok() const { return std::holds_alternative<T>(v_); }
  explicit operator bool() const { return ok(); }

  T& value() & { return std::get<T>(v_); }
  const T& value() const& { return std::get<T>(v_); }
  T&& value() && { return std::get<T>(std::move(v_)); }

  const Error& error() const { return std::get<Error>(v_); }

 private:
  std::variant<T, Error> v_;
};

template <>
class [[nodiscard]] Result<void> {
 public:
  Result() = default;
  Result(Error err) : err_(std::move(err)) {}

  bool ok() const { return !err_.has_value(); }
  explicit operator bool() const { return ok(); }
  const Error& error() const { return *err_; }

 private:
  std::optional<Error> err_;
};

// ---------------------------------------------------------------------------
// Big-endian byte buffer IO. All wire formats in the project use network
// byte order and explicit lengths; nothing here depends on host endianness.

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }

  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
    buf_.push_back(static_cast<std::uint8_t>(v));
  }

  void u32(std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8)
      buf_.push_back(static_cast<std::uint8_t>(v >> shift));
  }

  void u64(std::uint64_t v) {
    for (int shift = 56; shift >= 0; shift -= 8)
      buf_.push_back(static_cast<std::uint8_t>(v >> shift));
  }

  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

  void raw(ByteSpan data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

  void raw(const std::string& s) {
    raw(ByteSpan(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

  template <std::size_t N>
  void raw(const std::array<std::uint8_t, N>& a) {
    raw(ByteSpan(a.data(), a.size()));
  }

  std::size_t size() const { return buf_.size(); }
  const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(ByteSpan data) : data_(data) {}

  bool u8(std::uint8_t& out) {
    if (remaining() < 1) return false;
    out = data_[pos_++];
    return true;
  }

  bool u16(std::uint16_t& out) {
    if (remaining() < 2) return false;
    out = static_cast<std::uint16_t>((data_[pos_] << 8) | data_[pos_ + 1]);
    pos_ += 2;
    return true;
  }

  bool u32(std::uint32_t& out) {
    if (remaining() < 4) return false;
    out = 0;
    for (int i = 0; i < 4; ++i) out = (out << 8) | data_[pos_++];
    return true;
  }

  bool u64(std::uint64_t& out) {
    if (remaining() < 8) return false;
    out = 0;
    for (int i = 0; i < 8; ++i) out = (out << 8) | data_[pos_++];
    return true;
  }

  bool i64(std::int64_t& out) {
    std::uint64_t u = 0;
    if (!u64(u)) return false;
    std::memcpy(&out, &u, sizeof(out));
    return true;
  }

  bool raw(std::uint8_t* out, std::size_t n) {
    if (remaining() < n) return false;
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
    return true;
  }

  template <std::size_t N>
  bool raw(std::array<std::uint8_t, N>& out) {
    return raw(out.data(), N);
  }

  bool str(std::string& out, std::size_t n) {
    if (remaining() < n) return false;
    out.assign(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return true;
  }

  bool bytes(Bytes& out, std::size_t n) {
    if (remaining() < n) return false;
    out.assign(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
               data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return true;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  ByteSpan data_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------

inline std::string to_hex(ByteSpan data) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(data.size() * 2);
  for (std::uint8_t b : data) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

template <std::size_t N>
std::string to_hex(const std::array<std::uint8_t, N>& a) {
  return to_hex(ByteSpan(a.data(), a.size()));
}

inline std::optional<Bytes> from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) return std::nullopt;
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  Bytes out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int hi = nibble(hex[i]), lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    out.push_back(static_cast<std::uint8_t>((hi << 4) | lo));
  }
  return out;
}

template <std::size_t N>
std::optional<std::array<std::uint8_t, N>> array_from_hex(std::string_view hex) {
  auto bytes = from_hex(hex);
  if (!bytes || bytes->size() != N) return std::nullopt;
  std::array<std::uint8_t, N> out{};
  std::memcpy(out.data(), bytes->data(), N);
  return out;
}

// Valid UTF-8 check (RFC 3629: no surrogates, no overlong forms, max U+10FFFF).
inline bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  const auto* p = reinterpret_cast<const std::uint8_t*>(s.data());
  while (i < s.size()) {
    std::uint8_t b = p[i];
    if (b < 0x80) {
      ++i;
    } else if ((b >> 5) == 0x6) {  // 110xxxxx
      if (i + 1 >= s.size() || (p[i + 1] & 0xc0) != 0x80 || b < 0xc2) return false;
      i += 2;
    } else if ((b >> 4) == 0xe) {  // 1110xxxx
      if (i + 2 >= s.size() || (p[i + 1] & 0xc0) != 0x80 || (p[i + 2] & 0xc0) != 0x80)
        return false;
      std::uint32_t cp = ((b & 0x0fu) << 12) | ((p[i + 1] & 0x3fu) << 6) | (p[i + 2] & 0x3fu);
      if (cp < 0x800 || (cp >= 0xd800 && cp <= 0xdfff)) return false;
      i += 3;
    } else if ((b >> 3) == 0x1e) {  // 11110xxx
      if (i + 3 >= s.size() || (p[i + 1] & 0xc0) != 0x80 || (p[i + 2] & 0xc0) != 0x80 ||
          (p[i + 3] & 0xc0) != 0x80)
        return false;
      std::uint32_t cp = ((b & 0x07u) << 18) | ((p[i + 1] & 0x3fu) << 12) |
                         ((p[i + 2] & 0x3fu) << 6) | (p[i + 3] & 0x3fu);
      if (cp < 0x10000 || cp > 0x10ffff) return false;
      i += 4;
    } else {
      return false;
    }
  }
  return true;
}

}  // namespace ecbr
