#pragma once

// Startup-configuration provisioning.
//
// A startup config (SCF) carries stream keys, the hash and key of a
// protected file tree's manifest, arguments, and environment variables. The
// provisioner releases an SCF only to a client whose measurement is
// registered, over a mutually authenticated, confidential channel:
//
//   M1  client hello   (identity, ephemeral X25519 key, signature)
//   M2  server hello   (identity, ephemeral key, signature binding M1)
//        -> both sides derive the session key from the transcript
//   M3  sealed measurement        (envelope, context "scf")
//   M4  sealed grant or refusal   (envelope, context "scf")
//
// Refusals are a fixed-shape frame: an observer, or an unverified client,
// learns nothing about the table beyond "no".
//
// The same hello exchange establishes pub/sub session keys between clients
// and the broker's enclave; only the domain labels differ.

#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ecbr/common.hpp"
#include "ecbr/envelope.hpp"

namespace ecbr {

// ---------------------------------------------------------------------------
// StartupConfig
//
// Binary layout (big-endian): u8 version; u16 n_streams; per stream:
// u8 label_len, label, 32B key; 32B manifest_hash; 32B manifest_key;
// u16 n_args; per arg: u16 len, bytes; u16 n_env; per env: u16 klen, key,
// u16 vlen, value.

inline constexpr std::uint8_t kScfVersion = 1;
inline constexpr std::size_t kMaxScfBytes = 64 * 1024;

struct StartupConfig {
  std::map<std::string, Key32> stream_keys;
  Hash32 manifest_hash{};
  Key32 manifest_key{};
  std::vector<std::string> args;
  std::map<std::string, std::string> env;

  friend bool operator==(const StartupConfig& a, const StartupConfig& b) {
    return a.stream_keys == b.stream_keys && a.manifest_hash == b.manifest_hash &&
           a.manifest_key == b.manifest_key && a.args == b.args && a.env == b.env;
  }
};

inline Result<Bytes> encode_scf(const StartupConfig& scf) {
  ByteWriter w;
  w.u8(kScfVersion);
  w.u16(static_cast<std::uint16_t>(scf.stream_keys.size()));
  for (const auto& [label, key] : scf.stream_keys) {
    if (label.size() > 255)
      return make_error(errc::malformed_scf, "stream label too long");
    w.u8(static_cast<std::uint8_t>(label.size()));
    w.raw(label);
    w.raw(key);
  }
  w.raw(scf.manifest_hash);
  w.raw(scf.manifest_key);
  w.u16(static_cast<std::uint16_t>(scf.args.size()));
  for (const auto& arg : scf.args) {
    if (arg.size() > UINT16_MAX) return make_error(errc::malformed_scf, "argument too long");
    w.u16(static_cast<std::uint16_t>(arg.size()));
    w.raw(arg);
  }
  w.u16(static_cast<std::uint16_t>(scf.env.size()));
  for (const auto& [k, v] : scf.env) {
    if (k.size() > UINT16_MAX || v.size() > UINT16_MAX)
      return make_error(errc::malformed_scf, "environment entry too long");
    w.u16(static_cast<std::uint16_t>(k.size()));
    w.raw(k);
    w.u16(static_cast<std::uint16_t>(v.size()));
    w.raw(v);
  }
  if (w.size() > kMaxScfBytes) return make_error(errc::malformed_scf, "SCF exceeds 64 KiB");
  return w.take();
}

inline Result<StartupConfig> decode_scf(ByteSpan bytes) {
  auto malformed = [](std::string m) { return make_error(errc::malformed_scf, std::move(m)); };
  if (bytes.size() > kMaxScfBytes) return malformed("SCF exceeds 64 KiB");
  ByteReader r(bytes);
  std::uint8_t version = 0;
  if (!r.u8(version)) return malformed("empty SCF");
  if (version != kScfVersion) return malformed("unsupported version");

  StartupConfig scf;
  std::uint16_t n_streams = 0;
  if (!r.u16(n_streams)) return malformed("truncated stream count");
  std::string prev;
  for (std::uint16_t i = 0; i < n_streams; ++i) {
    std::uint8_t len = 0;
    std::string label;
    Key32 key{};
    if (!r.u8(len) || !r.str(label, len) || !r.raw(key)) return malformed("truncated stream key");
    if (i > 0 && !(prev < label)) return malformed("stream labels not sorted");
    prev = label;
    scf.stream_keys.emplace(std::move(label), key);
  }
  if (!r.raw(scf.manifest_hash) || !r.raw(scf.manifest_key))
    return malformed("truncated manifest keys");

  std::uint16_t n_args = 0;
  if (!r.u16(n_args)) return malformed("truncated arg count");
  for (std::uint16_t i = 0; i < n_args; ++i) {
    std::uint16_t len = 0;
    std::string arg;
    if (!r.u16(len) || !r.str(arg, len)) return malformed("truncated argument");
    scf.args.push_back(std::move(arg));
  }

  std::uint16_t n_env = 0;
  if (!r.u16(n_env)) return malformed("truncated env count");
  prev.clear();
  for (std::uint16_t i = 0; i < n_env; ++i) {
    std::uint16_t klen = 0, vlen = 0;
    std::string k, v;
    if (!r.u16(klen) || !r.str(k, klen) || !r.u16(vlen) || !r.str(v, vlen))
      return malformed("truncated env entry");
    if (i > 0 && !(prev < k)) return malformed("env keys not sorted");
    prev = k;
    scf.env.emplace(std::move(k), std::move(v));
  }
  if (!r.at_end()) return malformed("trailing bytes");
  return scf;
}

struct ExpectedIdentity {
  Hash32 measurement{};
  StartupConfig scf;
};

class ProvisionerTable {
 public:
  void add(const Hash32& measurement, StartupConfig scf) {
    table_[measurement] = std::move(scf);
  }

  const StartupConfig* find(const Hash32& measurement) const {
    auto it = table_.find(measurement);
    return it == table_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return table_.size(); }

 private:
  std::map<Hash32, StartupConfig> table_;
};

// ---------------------------------------------------------------------------
// Hello exchange (mutual authentication + session key agreement)

inline constexpr std::uint8_t kHelloVersion = 1;
inline constexpr std::size_t kHelloBytes = 1 + 16 + 32 + 64;

struct HelloMsg {
  Id16 sender_id{};
  Key32 ephemeral_pub{};
  Sig64 signature{};

  Bytes encode() const {
    ByteWriter w;
    w.u8(kHelloVersion);
    w.raw(sender_id);
    w.raw(ephemeral_pub);
    w.raw(signature);
    return w.take();
  }

  static Result<HelloMsg> decode(ByteSpan bytes) {
    if (bytes.size() != kHelloBytes)
      return make_error(errc::malformed_frame, "bad hello length");
    ByteReader r(bytes);
    std::uint8_t version = 0;
    HelloMsg msg;
    if (!r.u8(version) || version != kHelloVersion)
      return make_error(errc::malformed_frame, "unsupported hello version");
    r.raw(msg.sender_id);
    r.raw(msg.ephemeral_pub);
    r.raw(msg.signature);
    return msg;
  }
};

namespace detail {

inline Bytes hello_sig_input(std::string_view domain, const HelloMsg& msg, ByteSpan bound) {
  ByteWriter w;
  w.raw(std::string(domain));
  w.u8(kHelloVersion);
  w.raw(msg.sender_id);
  w.raw(msg.ephemeral_pub);
  w.raw(bound);
  return w.take();
}

}  // namespace detail

// The initiator's hello stands alone; the responder's hello signs the
// initiator's bytes as well, which ties the pair to this exchange.
inline HelloMsg make_hello(const SigningIdentity& ident, const EphemeralKey& eph,
                           std::string_view domain, ByteSpan bound_peer_hello = {}) {
  HelloMsg msg;
  msg.sender_id = ident.id;
  msg.ephemeral_pub = eph.public_key;
  msg.signature =
      sign_detached(ident.sign_key, detail::hello_sig_input(domain, msg, bound_peer_hello));
  return msg;
}

inline Result<HelloMsg> verify_hello(ByteSpan bytes, const std::map<Id16, Key32>& authorized,
                                     std::string_view domain, ByteSpan bound_peer_hello = {}) {
  auto msg = HelloMsg::decode(bytes);
  if (!msg) return msg.error();
  auto it = authorized.find(msg.value().sender_id);
  if (it == authorized.end())
    return make_error(errc::unknown_key, "unknown identity " + to_hex(msg.value().sender_id));
  Bytes input = detail::hello_sig_input(domain, msg.value(), bound_peer_hello);
  if (!verify_detached(it->second, input, msg.value().signature))
    return make_error(errc::bad_signature, "hello signature verification failed");
  return msg;
}

// transcript = initiator hello || responder hello || DH shared secret
inline Bytes session_transcript(ByteSpan initiator_hello, ByteSpan responder_hello,
                                const Key32& shared) {
  ByteWriter w;
  w.raw(initiator_hello);
  w.raw(responder_hello);
  w.raw(shared);
  return w.take();
}

// ---------------------------------------------------------------------------
// Channel abstraction. TCP deployments move these frames inside PROVISION
// frames; tests use the in-memory pair below and capture everything that
// "hits the wire".

class Channel {
 public:
  virtual ~Channel() = default;
  virtual Result<void> send(ByteSpan bytes) = 0;
  virtual Result<Bytes> recv() = 0;
};

// Blocking in-process duplex channel. Both ends may run on different
// threads; recv blocks until a message arrives or the pair is closed.
class InMemoryChannelPair {
 public:
  class End : public Channel {
   public:
    End(InMemoryChannelPair* pair, bool a_side) : pair_(pair), a_side_(a_side) {}

    Result<void> send(ByteSpan bytes) override {
      std::lock_guard lock(pair_->mu_);
      if (pair_->closed_) return make_error(errc::channel_error, "channel closed");
      auto& q = a_side_ ? pair_->to_b_ : pair_->to_a_;
      q.emplace_back(bytes.begin(), bytes.end());
      pair_->wire_.insert(pair_->wire_.end(), bytes.begin(), bytes.end());
      pair_->cv_.notify_all();
      return {};
    }

    Result<Bytes> recv() override {
      std::unique_lock lock(pair_->mu_);
      auto& q = a_side_ ? pair_->to_a_ : pair_->to_b_;
      pair_->cv_.wait(lock, [&] { return !q.empty() || pair_->closed_; });
      if (q.empty()) return make_error(errc::channel_error, "channel closed");
      Bytes msg = std::move(q.front());
      q.pop_front();
      return msg;
    }

   private:
    InMemoryChannelPair* pair_;
    bool a_side_;
  };

  InMemoryChannelPair() : a_(this, true), b_(this, false) {}

  Channel& a() { return a_; }
  Channel& b() { return b_; }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

  // Every byte either side sent, in order. Test harnesses scan this.
  Bytes wire_capture() const {
    std::lock_guard lock(mu_);
    return wire_;
  }

 private:
  friend class End;
  End a_;
  End b_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool closed_ = false;
  std::deque<Bytes> to_a_;
  std::deque<Bytes> to_b_;
  Bytes wire_;
};

// ---------------------------------------------------------------------------
// SCF request/serve

inline constexpr std::string_view kProvisionHelloDomain = "ecbr.provision.hello";
inline constexpr std::size_t kScfRefusalBytes = 64;

namespace detail {

inline Bytes scf_refusal_frame() { return Bytes(kScfRefusalBytes, 0); }

inline Bytes scf_grant_frame(ByteSpan scf_bytes) {
  Bytes out;
  out.reserve(1 + scf_bytes.size());
  out.push_back(1);
  out.insert(out.end(), scf_bytes.begin(), scf_bytes.end());
  return out;
}

}  // namespace detail

// Client side: run the handshake, present `measurement`, return the SCF.
inline Result<StartupConfig> request_scf(Channel& channel, const SigningIdentity& ident,
                                         const std::map<Id16, Key32>& authorized,
                                         const Hash32& measurement) {
  EphemeralKey eph = EphemeralKey::generate();
  Bytes m1 = make_hello(ident, eph, kProvisionHelloDomain).encode();
  if (auto r = channel.send(m1); !r) return r.error();

  auto m2_bytes = channel.recv();
  if (!m2_bytes) return m2_bytes.error();
  auto m2 = verify_hello(m2_bytes.value(), authorized, kProvisionHelloDomain, m1);
  if (!m2) return m2.error();

  auto shared = x25519_shared(eph.secret_key, m2.value().ephemeral_pub);
  if (!shared) return shared.error();
  auto session = derive_session_key(session_transcript(m1, m2_bytes.value(), shared.value()));
  if (!session) return session.error();

  KeyRing ring(ident);
  ring.add_peer(m2.value().sender_id, authorized.at(m2.value().sender_id));
  ring.add_symmetric_key(session.value().key_id, session.value().key);

  Bytes request(measurement.begin(), measurement.end());
  auto m3 = seal(ring, session.value().key_id, Context::scf, request);
  if (!m3) return m3.error();
  if (auto r = channel.send(m3.value().encode()); !r) return r.error();

  auto m4_bytes = channel.recv();
  if (!m4_bytes) return m4_bytes.error();
  auto m4 = SealedEnvelope::decode(m4_bytes.value());
  if (!m4) return m4.error();
  auto reply = open(ring, m4.value(), Context::scf);
  if (!reply) return reply.error();
  const Bytes& frame = reply.value();
  if (frame.empty()) return make_error(errc::channel_error, "empty provisioning reply");
  if (frame[0] == 0) return make_error(errc::unknown_measurement, "SCF release refused");
  return decode_scf(ByteSpan(frame.data() + 1, frame.size() - 1));
}

// Server side: serve exactly one handshake. Unknown measurements get the
// fixed-shape refusal; the SCF is never serialized, sealed, or sent in that
// case.
inline Result<void> serve_provision_once(Channel& channel, const SigningIdentity& ident,
                                         const std::map<Id16, Key32>& authorized,
                                         const ProvisionerTable& table) {
  auto m1_bytes = channel.recv();
  if (!m1_bytes) return m1_bytes.error();
  auto m1 = verify_hello(m1_bytes.value(), authorized, kProvisionHelloDomain);
  if (!m1) return m1.error();

  EphemeralKey eph = EphemeralKey::generate();
  HelloMsg m2 = make_hello(ident, eph, kProvisionHelloDomain, m1_bytes.value());
  Bytes m2_bytes = m2.encode();
  if (auto r = channel.send(m2_bytes); !r) return r.error();

  auto shared = x25519_shared(eph.secret_key, m1.value().ephemeral_pub);
  if (!shared) return shared.error();
  auto session = derive_session_key(session_transcript(m1_bytes.value(), m2_bytes, shared.value()));
  if (!session) return session.error();

  KeyRing ring(ident);
  ring.add_peer(m1.value().sender_id, authorized.at(m1.value().sender_id));
  ring.add_symmetric_key(session.value().key_id, session.value().key);

  auto m3_bytes = channel.recv();
  if (!m3_bytes) return m3_bytes.error();
  auto request = open_bytes(ring, m3_bytes.value(), Context::scf);
  if (!request) return request.error();
  if (request.value().size() != sizeof(Hash32))
    return make_error(errc::malformed_frame, "bad measurement length");
  Hash32 measurement{};
  std::memcpy(measurement.data(), request.value().data(), measurement.size());

  Bytes reply_frame;
  const StartupConfig* scf = table.find(measurement);
  if (scf == nullptr) {
    reply_frame = detail::scf_refusal_frame();
  } else {
    auto encoded = encode_scf(*scf);
    if (!encoded) return encoded.error();
    reply_frame = detail::scf_grant_frame(encoded.value());
  }
  auto m4 = seal(ring, session.value().key_id, Context::scf, reply_frame);
  if (!m4) return m4.error();
  return channel.send(m4.value().encode());
}

// Whole exchange over an in-memory channel: the form used at broker startup
// when the provisioner is colocated with the broker.
inline Result<StartupConfig> handshake(const Hash32& client_measurement,
                                       const ProvisionerTable& table,
                                       const SigningIdentity& client_ident,
                                       const SigningIdentity& provisioner_ident,
                                       InMemoryChannelPair& channel) {
  std::map<Id16, Key32> authorized{{client_ident.id, client_ident.verify_key},
                                   {provisioner_ident.id, provisioner_ident.verify_key}};
  std::thread server([&] {
    auto served = serve_provision_once(channel.b(), provisioner_ident, authorized, table);
    (void)served;  // the client observes failures through its own end
    channel.close();
  });
  auto scf = request_scf(channel.a(), client_ident, authorized, client_measurement);
  server.join();
  return scf;
}

}  // namespace ecbr
