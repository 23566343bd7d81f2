#pragma once

// Authenticated envelopes: the only form in which publications,
// subscriptions, and provisioning payloads exist outside the enclave.
//
// Every envelope is AEAD-encrypted under a shared symmetric key and signed
// by the sender's identity key. The context label ("pub", "sub" or "scf")
// is bound into both the AEAD associated data and the signature, so an
// envelope sealed for one purpose can never be opened as another.
//
// Primitive choices sit behind a fixed size contract (32-byte keys, 12-byte
// nonces, 16-byte tags, 64-byte signatures): ChaCha20-Poly1305 (IETF),
// Ed25519, and BLAKE2b via libsodium.

#include <sodium.h>

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "ecbr/common.hpp"

namespace ecbr {

inline void crypto_init() {
  if (sodium_init() < 0) throw std::runtime_error("libsodium initialization failed");
}

enum class Context : std::uint8_t { pub = 0, sub = 1, scf = 2 };

inline std::string_view context_label(Context c) {
  switch (c) {
    case Context::pub: return "pub";
    case Context::sub: return "sub";
    case Context::scf: return "scf";
  }
  return "";
}

// ---------------------------------------------------------------------------
// Hashing helpers (BLAKE2b). The optional key doubles as a domain separator.

inline Hash32 hash32(ByteSpan data) {
  Hash32 out{};
  crypto_generichash(out.data(), out.size(), data.data(), data.size(), nullptr, 0);
  return out;
}

inline Hash32 keyed_hash32(ByteSpan key, ByteSpan data) {
  Hash32 out{};
  crypto_generichash(out.data(), out.size(), data.data(), data.size(), key.data(), key.size());
  return out;
}

inline Hash32 domain_hash32(std::string_view domain, ByteSpan data) {
  return keyed_hash32(ByteSpan(reinterpret_cast<const std::uint8_t*>(domain.data()),
                               domain.size()),
                      data);
}

inline Id16 truncate16(const Hash32& h) {
  Id16 out{};
  std::memcpy(out.data(), h.data(), out.size());
  return out;
}

// ---------------------------------------------------------------------------
// Identities and keys

struct SigningIdentity {
  Id16 id{};
  Key32 verify_key{};                      // Ed25519 public key
  std::array<std::uint8_t, 64> sign_key{};  // Ed25519 secret key

  static SigningIdentity generate() {
    crypto_init();
    SigningIdentity ident;
    randombytes_buf(ident.id.data(), ident.id.size());
    crypto_sign_keypair(ident.verify_key.data(), ident.sign_key.data());
    return ident;
  }

  static SigningIdentity generate_with_id(Id16 id) {
    SigningIdentity ident = generate();
    ident.id = id;
    return ident;
  }
};

inline Sig64 sign_detached(const std::array<std::uint8_t, 64>& sign_key, ByteSpan msg) {
  Sig64 sig{};
  crypto_sign_detached(sig.data(), nullptr, msg.data(), msg.size(), sign_key.data());
  return sig;
}

inline bool verify_detached(const Key32& verify_key, ByteSpan msg, const Sig64& sig) {
  return crypto_sign_verify_detached(sig.data(), msg.data(), msg.size(), verify_key.data()) == 0;
}

// Keys known to one endpoint: its own signing identity, peers' verify keys,
// and shared symmetric keys with per-key send counters. Counters make nonce
// reuse structurally impossible; the ring is confined to one connection
// handler and never serialized.
class KeyRing {
 public:
  KeyRing() = default;
  explicit KeyRing(SigningIdentity local) : local_(std::move(local)) {
    peers_[local_.id] = local_.verify_key;
  }

  const SigningIdentity& local() const { return local_; }

  void add_peer(const Id16& id, const Key32& verify_key) { peers_[id] = verify_key; }

  std::optional<Key32> peer_key(const Id16& id) const {
    auto it = peers_.find(id);
    if (it == peers_.end()) return std::nullopt;
    return it->second;
  }

  void add_symmetric_key(const Id16& key_id, const Key32& key, std::uint64_t counter = 0) {
    keys_[key_id] = SymKey{key, counter};
  }

  bool has_key(const Id16& key_id) const { return keys_.count(key_id) > 0; }

  std::optional<Key32> symmetric_key(const Id16& key_id) const {
    auto it = keys_.find(key_id);
    if (it == keys_.end()) return std::nullopt;
    return it->second.key;
  }

  Result<std::uint64_t> next_counter(const Id16& key_id) {
    auto it = keys_.find(key_id);
    if (it == keys_.end()) return make_error(errc::unknown_key, to_hex(key_id));
    if (it->second.counter == UINT64_MAX)
      return make_error(errc::counter_exhausted, "nonce space exhausted for key");
    return it->second.counter++;
  }

 private:
  struct SymKey {
    Key32 key{};
    std::uint64_t counter = 0;
  };

  SigningIdentity local_;
  std::map<Id16, Key32> peers_;
  std::map<Id16, SymKey> keys_;
};

// ---------------------------------------------------------------------------
// SealedEnvelope
//
// Wire layout (big-endian):
//   u8 version(=1) | u8 context | 16B key_id | 12B nonce | 16B sender_id |
//   u32 ct_len | ciphertext | 16B tag | 64B signature
// Total = 130 + ct_len bytes.

inline constexpr std::uint8_t kEnvelopeVersion = 1;
inline constexpr std::size_t kEnvelopeOverhead = 130;

struct SealedEnvelope {
  Context context = Context::pub;
  Id16 key_id{};
  Nonce12 nonce{};
  Id16 sender_id{};
  Bytes ciphertext;
  Tag16 tag{};
  Sig64 signature{};

  Bytes encode() const {
    ByteWriter w;
    w.u8(kEnvelopeVersion);
    w.u8(static_cast<std::uint8_t>(context));
    w.raw(key_id);
    w.raw(nonce);
    w.raw(sender_id);
    w.u32(static_cast<std::uint32_t>(ciphertext.size()));
    w.raw(ciphertext);
    w.raw(tag);
    w.raw(signature);
    return w.take();
  }

  static Result<SealedEnvelope> decode(ByteSpan bytes) {
    auto malformed = [](std::string m) { return make_error(errc::malformed_envelope, std::move(m)); };
    ByteReader r(bytes);
    std::uint8_t version = 0, ctx = 0;
    if (!r.u8(version)) return malformed("empty envelope");
    if (version != kEnvelopeVersion) return malformed("unsupported version");
    if (!r.u8(ctx)) return malformed("truncated context");
    if (ctx > 2) return malformed("unknown context");
    SealedEnvelope env;
    env.context = static_cast<Context>(ctx);
    std::uint32_t ct_len = 0;
    if (!r.raw(env.key_id) || !r.raw(env.nonce) || !r.raw(env.sender_id) || !r.u32(ct_len))
      return malformed("truncated header");
    if (r.remaining() != ct_len + sizeof(Tag16) + sizeof(Sig64))
      return malformed("length mismatch");
    if (!r.bytes(env.ciphertext, ct_len) || !r.raw(env.tag) || !r.raw(env.signature))
      return malformed("truncated body");
    return env;
  }
};

namespace detail {

inline Bytes envelope_ad(Context context, const Id16& sender_id) {
  ByteWriter w;
  w.raw(std::string(context_label(context)));
  w.raw(sender_id);
  return w.take();
}

inline Bytes envelope_sig_input(const SealedEnvelope& env) {
  ByteWriter w;
  w.raw(env.key_id);
  w.raw(env.nonce);
  w.raw(env.ciphertext);
  w.raw(env.tag);
  w.raw(env.sender_id);
  w.raw(std::string(context_label(env.context)));
  return w.take();
}

}  // namespace detail

inline Result<SealedEnvelope> seal(KeyRing& ring, const Id16& key_id, Context context,
                                   ByteSpan plaintext) {
  crypto_init();
  auto key = ring.symmetric_key(key_id);
  if (!key) return make_error(errc::unknown_key, to_hex(key_id));
  auto counter = ring.next_counter(key_id);
  if (!counter) return counter.error();

  SealedEnvelope env;
  env.context = context;
  env.key_id = key_id;
  env.sender_id = ring.local().id;
  // nonce = 4-byte sender salt || 8-byte big-endian counter
  std::memcpy(env.nonce.data(), env.sender_id.data(), 4);
  std::uint64_t c = counter.value();
  for (int i = 0; i < 8; ++i) env.nonce[4 + i] = static_cast<std::uint8_t>(c >> (8 * (7 - i)));

  Bytes ad = detail::envelope_ad(context, env.sender_id);
  env.ciphertext.resize(plaintext.size());
  unsigned long long maclen = 0;
  crypto_aead_chacha20poly1305_ietf_encrypt_detached(
      env.ciphertext.data(), env.tag.data(), &maclen, plaintext.data(), plaintext.size(),
      ad.data(), ad.size(), nullptr, env.nonce.data(), key->data());

  env.signature = sign_detached(ring.local().sign_key, detail::envelope_sig_input(env));
  return env;
}

// Verification order: sender signature, then AEAD tag, then context. The
// order is observable only through which error comes back.
inline Result<Bytes> open(const KeyRing& ring, const SealedEnvelope& env,
                          Context expected_context) {
  crypto_init();
  auto verify_key = ring.peer_key(env.sender_id);
  if (!verify_key) return make_error(errc::unknown_key, "unknown sender " + to_hex(env.sender_id));
  Bytes sig_input = detail::envelope_sig_input(env);
  if (!verify_detached(*verify_key, sig_input, env.signature))
    return make_error(errc::bad_signature, "envelope signature verification failed");

  auto key = ring.symmetric_key(env.key_id);
  if (!key) return make_error(errc::unknown_key, "unknown key " + to_hex(env.key_id));
  Bytes ad = detail::envelope_ad(env.context, env.sender_id);
  Bytes plaintext(env.ciphertext.size());
  if (crypto_aead_chacha20poly1305_ietf_decrypt_detached(
          plaintext.data(), nullptr, env.ciphertext.data(), env.ciphertext.size(),
          env.tag.data(), ad.data(), ad.size(), env.nonce.data(), key->data()) != 0)
    return make_error(errc::bad_tag, "AEAD authentication failed");

  if (env.context != expected_context)
    return make_error(errc::context_mismatch,
                      std::string("sealed as '") + std::string(context_label(env.context)) +
                          "', expected '" + std::string(context_label(expected_context)) + "'");
  return plaintext;
}

inline Result<Bytes> open_bytes(const KeyRing& ring, ByteSpan envelope_bytes,
                                Context expected_context) {
  auto env = SealedEnvelope::decode(envelope_bytes);
  if (!env) return env.error();
  return open(ring, env.value(), expected_context);
}

// ---------------------------------------------------------------------------
// Session key derivation. Both handshake endpoints feed the same transcript
// (hello messages plus the Diffie-Hellman shared secret) and obtain the same
// key id and key.

struct SessionKey {
  Id16 key_id{};
  Key32 key{};
};

inline Result<SessionKey> derive_session_key(ByteSpan transcript) {
  if (transcript.empty())
    return make_error(errc::incomplete_handshake, "empty handshake transcript");
  SessionKey out;
  out.key = domain_hash32("ecbr.session.key", transcript);
  out.key_id = truncate16(domain_hash32("ecbr.session.kid", transcript));
  return out;
}

// X25519 ephemeral agreement used by the handshakes.
struct EphemeralKey {
  Key32 public_key{};
  Key32 secret_key{};

  static EphemeralKey generate() {
    crypto_init();
    EphemeralKey k;
    randombytes_buf(k.secret_key.data(), k.secret_key.size());
    crypto_scalarmult_base(k.public_key.data(), k.secret_key.data());
    return k;
  }
};

inline Result<Key32> x25519_shared(const Key32& secret, const Key32& peer_public) {
  Key32 out{};
  if (crypto_scalarmult(out.data(), secret.data(), peer_public.data()) != 0)
    return make_error(errc::channel_error, "invalid peer public key");
  return out;
}

}  // namespace ecbr
