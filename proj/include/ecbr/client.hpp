#pragma once

// Client-side broker session: the hello key agreement, sealed subscribe /
// unsubscribe / publish, and delivery decryption. Also the remote SCF
// request used by enclaves provisioning over the wire.

#include <deque>
#include <map>
#include <string>
#include <utility>

#include "ecbr/enclave.hpp"
#include "ecbr/frame.hpp"
#include "ecbr/provisioning.hpp"

namespace ecbr {

struct AckInfo {
  bool accepted = false;
  errc reason = errc::invalid_argument;
  std::uint32_t matched = 0;
  Id16 ref_id{};
};

class BrokerClient {
 public:
  BrokerClient(SigningIdentity ident, Id16 broker_id, Key32 broker_verify_key)
      : ident_(std::move(ident)), ring_(ident_), broker_id_(broker_id) {
    ring_.add_peer(broker_id, broker_verify_key);
    authorized_[broker_id] = broker_verify_key;
  }

  const SigningIdentity& identity() const { return ident_; }
  KeyRing& ring() { return ring_; }
  FrameSocket& socket() { return socket_; }

  Result<void> connect(const std::string& host, std::uint16_t port, bool capture = false) {
    auto sock = FrameSocket::connect(host, port);
    if (!sock) return sock.error();
    socket_ = std::move(sock).value();
    if (capture) socket_.enable_capture();
    return hello();
  }

  // Establishes the session key with the enclave behind the broker.
  Result<void> hello() {
    EphemeralKey eph = EphemeralKey::generate();
    Bytes m1 = make_hello(ident_, eph, kSessionHelloDomain).encode();
    if (auto r = socket_.send(FrameType::hello, m1); !r) return r.error();
    auto reply = recv_expected(FrameType::hello);
    if (!reply) return reply.error();
    auto m2 = verify_hello(reply.value(), authorized_, kSessionHelloDomain, m1);
    if (!m2) return m2.error();
    if (m2.value().sender_id != broker_id_)
      return make_error(errc::bad_signature, "unexpected broker identity");
    auto shared = x25519_shared(eph.secret_key, m2.value().ephemeral_pub);
    if (!shared) return shared.error();
    auto session = derive_session_key(session_transcript(m1, reply.value(), shared.value()));
    if (!session) return session.error();
    session_key_id_ = session.value().key_id;
    ring_.add_symmetric_key(session_key_id_, session.value().key);
    return {};
  }

  Result<AckInfo> subscribe(const std::string& filter_text, const Id16& filter_id) {
    SubscribePayload payload{ident_.id, filter_id, filter_text};
    auto env = seal(ring_, session_key_id_, Context::sub, payload.encode());
    if (!env) return env.error();
    if (auto r = socket_.send(FrameType::subscribe, env.value().encode()); !r)
      return r.error();
    return await_ack(FrameType::subscribe);
  }

  Result<AckInfo> unsubscribe(const Id16& filter_id) {
    UnsubscribePayload payload{filter_id};
    auto env = seal(ring_, session_key_id_, Context::sub, payload.encode());
    if (!env) return env.error();
    if (auto r = socket_.send(FrameType::unsubscribe, env.value().encode()); !r)
      return r.error();
    return await_ack(FrameType::unsubscribe);
  }

  Result<AckInfo> publish(const Publication& p) {
    auto env = seal(ring_, session_key_id_, Context::pub, encode_publication(p));
    if (!env) return env.error();
    if (auto r = socket_.send(FrameType::publish, env.value().encode()); !r)
      return r.error();
    return await_ack(FrameType::publish);
  }

  // Next decrypted delivery; DELIVER frames that arrived while waiting for
  // acks are queued and consumed first.
  Result<Publication> next_delivery(int timeout_ms) {
    while (pending_deliveries_.empty()) {
      auto frame = socket_.recv(timeout_ms);
      if (!frame) return frame.error();
      if (frame.value().type == FrameType::deliver) {
        pending_deliveries_.push_back(std::move(frame.value().payload));
      } else if (frame.value().type == FrameType::error) {
        return make_error(errc::channel_error, "broker error frame");
      }
      // stray acks while draining deliveries are ignored
    }
    Bytes envelope = std::move(pending_deliveries_.front());
    pending_deliveries_.pop_front();
    raw_deliveries_.push_back(envelope);
    auto plaintext = open_bytes(ring_, envelope, Context::pub);
    if (!plaintext) return plaintext.error();
    return decode_publication(plaintext.value());
  }

  std::size_t pending_delivery_count() const { return pending_deliveries_.size(); }
  const std::vector<Bytes>& raw_deliveries() const { return raw_deliveries_; }

  // Remote SCF request: the provisioning handshake over PROVISION frames.
  Result<StartupConfig> request_scf_remote(const Hash32& measurement,
                                           const SigningIdentity& provisioner_ident) {
    std::map<Id16, Key32> authorized{{ident_.id, ident_.verify_key},
                                     {provisioner_ident.id, provisioner_ident.verify_key}};
    FrameChannel channel(socket_);
    return request_scf(channel, ident_, authorized, measurement);
  }

  void close() { socket_.close(); }

 private:
  Result<Bytes> recv_expected(FrameType type, int timeout_ms = 5000) {
    for (;;) {
      auto frame = socket_.recv(timeout_ms);
      if (!frame) return frame.error();
      if (frame.value().type == type) return std::move(frame.value().payload);
      if (frame.value().type == FrameType::deliver) {
        pending_deliveries_.push_back(std::move(frame.value().payload));
        continue;
      }
      if (frame.value().type == FrameType::error) {
        auto& p = frame.value().payload;
        errc reason = p.empty() ? errc::channel_error : static_cast<errc>(p[0]);
        return make_error(reason, "broker error frame");
      }
      return make_error(errc::malformed_frame, "unexpected frame type");
    }
  }

  Result<AckInfo> await_ack(FrameType op, int timeout_ms = 5000) {
    auto payload = recv_expected(FrameType::ack, timeout_ms);
    if (!payload) return payload.error();
    auto ack = AckPayload::decode(payload.value());
    if (!ack) return ack.error();
    if (ack.value().op != op)
      return make_error(errc::malformed_frame, "ack for a different operation");
    AckInfo info;
    info.accepted = ack.value().accepted;
    info.reason = static_cast<errc>(ack.value().reason);
    info.matched = ack.value().matched;
    info.ref_id = ack.value().ref_id;
    return info;
  }

  SigningIdentity ident_;
  KeyRing ring_;
  Id16 broker_id_{};
  std::map<Id16, Key32> authorized_;
  Id16 session_key_id_{};
  FrameSocket socket_;
  std::deque<Bytes> pending_deliveries_;
  std::vector<Bytes> raw_deliveries_;
};

}  // namespace ecbr
