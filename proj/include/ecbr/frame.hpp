#pragma once

// Broker wire protocol: length-prefixed frames over TCP.
//
//   u32 length (big-endian) | u8 type | payload
//
// length = payload size + 1 and is capped at 1 MiB; anything larger is
// refused before the body is read, bounding what ever gets copied toward
// the enclave. Types 1-4 and 7 carry sealed envelopes (or, for PROVISION,
// the provisioning handshake messages); HELLO carries the session key
// agreement.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <string>
#include <utility>

#include "ecbr/common.hpp"
#include "ecbr/provisioning.hpp"

namespace ecbr {

enum class FrameType : std::uint8_t {
  hello = 0,
  subscribe = 1,
  unsubscribe = 2,
  publish = 3,
  deliver = 4,
  ack = 5,
  error = 6,
  provision = 7,
};

inline constexpr std::uint32_t kMaxFrameLen = 1u << 20;  // length field cap

struct Frame {
  FrameType type = FrameType::error;
  Bytes payload;
};

inline Bytes encode_frame(FrameType type, ByteSpan payload) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(payload.size() + 1));
  w.u8(static_cast<std::uint8_t>(type));
  w.raw(payload);
  return w.take();
}

// ACK payload: echoed op type, status, reason code, matched count, id.
struct AckPayload {
  FrameType op = FrameType::ack;
  bool accepted = true;
  std::uint8_t reason = 0;  // errc cast to u8 when rejected
  std::uint32_t matched = 0;
  Id16 ref_id{};

  Bytes encode() const {
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(op));
    w.u8(accepted ? 0 : 1);
    w.u8(reason);
    w.u32(matched);
    w.raw(ref_id);
    return w.take();
  }

  static Result<AckPayload> decode(ByteSpan bytes) {
    ByteReader r(bytes);
    AckPayload a;
    std::uint8_t op = 0, status = 0;
    if (!r.u8(op) || !r.u8(status) || !r.u8(a.reason) || !r.u32(a.matched) ||
        !r.raw(a.ref_id) || !r.at_end())
      return make_error(errc::malformed_frame, "bad ack payload");
    a.op = static_cast<FrameType>(op);
    a.accepted = status == 0;
    return a;
  }
};

inline Bytes encode_error_payload(errc reason, const std::string& message) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(reason));
  w.raw(message);
  return w.take();
}

// ---------------------------------------------------------------------------
// Blocking framed socket. Optionally captures raw bytes in both directions
// so harnesses can scan exactly what crossed the wire.

class FrameSocket {
 public:
  FrameSocket() = default;
  explicit FrameSocket(int fd) : fd_(fd) {}
  FrameSocket(const FrameSocket&) = delete;
  FrameSocket& operator=(const FrameSocket&) = delete;
  FrameSocket(FrameSocket&& other) noexcept { *this = std::move(other); }
  FrameSocket& operator=(FrameSocket&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = other.fd_;
      capture_ = other.capture_;
      rx_capture_ = std::move(other.rx_capture_);
      tx_capture_ = std::move(other.tx_capture_);
      other.fd_ = -1;
    }
    return *this;
  }
  ~FrameSocket() { close(); }

  static Result<FrameSocket> connect(const std::string& host, std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return make_error(errc::channel_error, "socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      return make_error(errc::channel_error, "bad address " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      return make_error(errc::channel_error, "connect to " + host + " failed");
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return FrameSocket(fd);
  }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  void enable_capture() { capture_ = true; }
  const Bytes& rx_capture() const { return rx_capture_; }
  const Bytes& tx_capture() const { return tx_capture_; }

  Result<void> send(FrameType type, ByteSpan payload) {
    Bytes wire = encode_frame(type, payload);
    if (capture_) tx_capture_.insert(tx_capture_.end(), wire.begin(), wire.end());
    return send_all(wire);
  }

  // Blocks until a whole frame arrives. A frame whose declared length
  // exceeds the cap is reported without reading its body.
  Result<Frame> recv(int timeout_ms = -1) {
    std::uint8_t header[4];
    if (auto r = recv_exact(header, 4, timeout_ms); !r) return r.error();
    std::uint32_t length = (std::uint32_t(header[0]) << 24) | (std::uint32_t(header[1]) << 16) |
                           (std::uint32_t(header[2]) << 8) | std::uint32_t(header[3]);
    if (length == 0) return make_error(errc::malformed_frame, "zero-length frame");
    if (length > kMaxFrameLen)
      return make_error(errc::frame_too_large,
                        "declared frame length " + std::to_string(length));
    Bytes body(length);
    if (auto r = recv_exact(body.data(), body.size(), timeout_ms); !r) return r.error();
    Frame f;
    if (body[0] > 7) return make_error(errc::malformed_frame, "unknown frame type");
    f.type = static_cast<FrameType>(body[0]);
    f.payload.assign(body.begin() + 1, body.end());
    return f;
  }

  void shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  Result<void> send_all(ByteSpan data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
      ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) return make_error(errc::channel_error, "send failed");
      sent += static_cast<std::size_t>(n);
    }
    return {};
  }

  Result<void> recv_exact(std::uint8_t* out, std::size_t n, int timeout_ms) {
    std::size_t got = 0;
    while (got < n) {
      if (timeout_ms >= 0) {
        pollfd pfd{fd_, POLLIN, 0};
        int pr = ::poll(&pfd, 1, timeout_ms);
        if (pr == 0) return make_error(errc::channel_error, "recv timeout");
        if (pr < 0) return make_error(errc::channel_error, "poll failed");
      }
      ssize_t r = ::read(fd_, out + got, n - got);
      if (r == 0) return make_error(errc::channel_error, "connection closed");
      if (r < 0) return make_error(errc::channel_error, "read failed");
      if (capture_) rx_capture_.insert(rx_capture_.end(), out + got, out + got + r);
      got += static_cast<std::size_t>(r);
    }
    return {};
  }

  int fd_ = -1;
  bool capture_ = false;
  Bytes rx_capture_;
  Bytes tx_capture_;
};

// Channel adapter: provisioning handshake messages ride PROVISION frames.
class FrameChannel : public Channel {
 public:
  explicit FrameChannel(FrameSocket& socket) : socket_(socket) {}

  // A message already read by the caller (the broker reads the first
  // PROVISION frame before deciding to run the handshake).
  void push_pending(Bytes msg) { pending_ = std::move(msg); }

  Result<void> send(ByteSpan bytes) override {
    return socket_.send(FrameType::provision, bytes);
  }

  Result<Bytes> recv() override {
    if (pending_) {
      Bytes msg = std::move(*pending_);
      pending_.reset();
      return msg;
    }
    auto frame = socket_.recv();
    if (!frame) return frame.error();
    if (frame.value().type != FrameType::provision)
      return make_error(errc::channel_error, "expected PROVISION frame");
    return frame.value().payload;
  }

 private:
  FrameSocket& socket_;
  std::optional<Bytes> pending_;
};

}  // namespace ecbr
