#include "ecbr/provisioning.hpp"

#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"

using namespace ecbr;
using namespace ecbr::test;

namespace {

StartupConfig sample_scf(Rng& rng, std::size_t env_count = 2) {
  StartupConfig scf;
  auto random_key = [&] {
    Key32 k{};
    for (auto& b : k) b = static_cast<std::uint8_t>(rng());
    return k;
  };
  scf.stream_keys["stdin"] = random_key();
  scf.stream_keys["stdout"] = random_key();
  for (auto& b : scf.manifest_hash) b = static_cast<std::uint8_t>(rng());
  scf.manifest_key = random_key();
  scf.args = {"--mode", "router"};
  for (std::size_t i = 0; i < env_count; ++i)
    scf.env["VAR_" + std::to_string(i)] = "value-" + std::to_string(rng() % 1000);
  return scf;
}

struct Parties {
  SigningIdentity client = SigningIdentity::generate_with_id(make_id(0xC1));
  SigningIdentity server = SigningIdentity::generate_with_id(make_id(0x51));
  std::map<Id16, Key32> authorized{{client.id, client.verify_key},
                                   {server.id, server.verify_key}};
};

}  // namespace

TEST_CASE("SCF encoding round-trips", "[provisioning]") {
  Rng rng(1);

  SECTION("minimal: one stream key, no args or env") {
    StartupConfig scf;
    scf.stream_keys["io"] = Key32{};
    auto bytes = encode_scf(scf);
    REQUIRE(bytes.ok());
    auto back = decode_scf(bytes.value());
    REQUIRE(back.ok());
    CHECK(back.value() == scf);
  }

  SECTION("100 env vars round-trip bit-exactly") {
    StartupConfig scf = sample_scf(rng, 100);
    auto bytes = encode_scf(scf);
    REQUIRE(bytes.ok());
    auto back = decode_scf(bytes.value());
    REQUIRE(back.ok());
    CHECK(back.value() == scf);
    CHECK(encode_scf(back.value()).value() == bytes.value());
  }

  SECTION("random SCFs round-trip") {
    for (int i = 0; i < 200; ++i) {
      StartupConfig scf = sample_scf(rng, rng() % 20);
      auto bytes = encode_scf(scf);
      REQUIRE(bytes.ok());
      auto back = decode_scf(bytes.value());
      REQUIRE(back.ok());
      CHECK(back.value() == scf);
    }
  }
}

TEST_CASE("SCF decode rejects malformed input", "[provisioning]") {
  Rng rng(2);
  StartupConfig scf = sample_scf(rng);
  Bytes bytes = encode_scf(scf).value();

  for (std::size_t len = 0; len < bytes.size(); ++len) {
    auto r = decode_scf(ByteSpan(bytes.data(), len));
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::malformed_scf);
  }
  Bytes trailing = bytes;
  trailing.push_back(0);
  CHECK(decode_scf(trailing).error().code == errc::malformed_scf);
  Bytes bad_version = bytes;
  bad_version[0] = 9;
  CHECK(decode_scf(bad_version).error().code == errc::malformed_scf);
}

TEST_CASE("registered measurement receives its SCF", "[provisioning]") {
  Rng rng(3);
  Parties p;
  StartupConfig scf = sample_scf(rng);
  Hash32 measurement = hash32(Bytes{1, 2, 3});
  ProvisionerTable table;
  table.add(measurement, scf);

  InMemoryChannelPair channel;
  auto got = handshake(measurement, table, p.client, p.server, channel);
  REQUIRE(got.ok());
  CHECK(got.value() == scf);

  // sealed transport: no SCF secret appears on the wire even on success
  Bytes wire = channel.wire_capture();
  CHECK_FALSE(contains_bytes(wire, ByteSpan(scf.manifest_key.data(), 32)));
  for (const auto& [label, key] : scf.stream_keys) {
    (void)label;
    CHECK_FALSE(contains_bytes(wire, ByteSpan(key.data(), 32)));
  }
}

TEST_CASE("unknown measurement is refused with a constant-shape frame", "[provisioning]") {
  Rng rng(4);
  Parties p;
  StartupConfig big = sample_scf(rng, 50);
  StartupConfig small = sample_scf(rng, 0);
  Hash32 registered = hash32(Bytes{9});
  Hash32 wrong = hash32(Bytes{8});

  auto refusal_len = [&](const StartupConfig& scf) {
    ProvisionerTable table;
    table.add(registered, scf);
    InMemoryChannelPair channel;
    auto got = handshake(wrong, table, p.client, p.server, channel);
    REQUIRE_FALSE(got.ok());
    CHECK(got.error().code == errc::unknown_measurement);
    Bytes wire = channel.wire_capture();
    CHECK_FALSE(contains_bytes(wire, ByteSpan(scf.manifest_key.data(), 32)));
    for (const auto& [label, key] : scf.stream_keys) {
      (void)label;
      CHECK_FALSE(contains_bytes(wire, ByteSpan(key.data(), 32)));
    }
    return wire.size();
  };

  // refusal shape is independent of what the table holds
  CHECK(refusal_len(big) == refusal_len(small));
}

TEST_CASE("one-byte measurement difference releases nothing", "[provisioning]") {
  Rng rng(5);
  Parties p;
  StartupConfig scf = sample_scf(rng);
  Hash32 measurement = hash32(Bytes{42});
  ProvisionerTable table;
  table.add(measurement, scf);

  Hash32 off_by_one = measurement;
  off_by_one[7] ^= 1;
  InMemoryChannelPair channel;
  auto got = handshake(off_by_one, table, p.client, p.server, channel);
  REQUIRE_FALSE(got.ok());
  CHECK(got.error().code == errc::unknown_measurement);
  Bytes encoded_scf = encode_scf(scf).value();
  CHECK_FALSE(contains_bytes(channel.wire_capture(), encoded_scf));
}

TEST_CASE("replayed sealed SCF does not open in a new session", "[provisioning]") {
  Rng rng(6);
  Parties p;
  StartupConfig scf = sample_scf(rng);
  Hash32 measurement = hash32(Bytes{77});
  ProvisionerTable table;
  table.add(measurement, scf);

  // session A: record the sealed grant (last server message on the wire)
  InMemoryChannelPair session_a;
  REQUIRE(handshake(measurement, table, p.client, p.server, session_a).ok());

  // extract the final envelope from the capture: scan backwards for a
  // decodable envelope
  Bytes wire = session_a.wire_capture();
  Bytes old_grant;
  for (std::size_t start = 0; start < wire.size(); ++start) {
    ByteSpan tail(wire.data() + start, wire.size() - start);
    auto env = SealedEnvelope::decode(tail);
    if (env.ok() && env.value().context == Context::scf) {
      old_grant.assign(tail.begin(), tail.end());
      // keep scanning: we want the LAST one (the grant, not the request)
    }
  }
  REQUIRE_FALSE(old_grant.empty());

  // session B: fresh ephemerals, fresh session key
  EphemeralKey eph = EphemeralKey::generate();
  Bytes m1 = make_hello(p.client, eph, kProvisionHelloDomain).encode();
  InMemoryChannelPair session_b;
  std::thread server([&] {
    auto served = serve_provision_once(session_b.b(), p.server, p.authorized, table);
    CHECK(served.ok());
    session_b.close();
  });
  REQUIRE(session_b.a().send(m1).ok());
  auto m2_bytes = session_b.a().recv();
  REQUIRE(m2_bytes.ok());
  auto m2 = verify_hello(m2_bytes.value(), p.authorized, kProvisionHelloDomain, m1);
  REQUIRE(m2.ok());
  auto shared = x25519_shared(eph.secret_key, m2.value().ephemeral_pub);
  auto session = derive_session_key(session_transcript(m1, m2_bytes.value(), shared.value()));
  REQUIRE(session.ok());
  KeyRing ring(p.client);
  ring.add_peer(p.server.id, p.server.verify_key);
  ring.add_symmetric_key(session.value().key_id, session.value().key);

  // inject the old grant instead of completing the new exchange
  auto replayed = open_bytes(ring, old_grant, Context::scf);
  REQUIRE_FALSE(replayed.ok());
  CHECK(replayed.error().code == errc::unknown_key);  // session key differs

  // cleanly finish the pending server exchange
  auto m3 = seal(ring, session.value().key_id, Context::scf,
                 Bytes(measurement.begin(), measurement.end()));
  REQUIRE(m3.ok());
  REQUIRE(session_b.a().send(m3.value().encode()).ok());
  REQUIRE(session_b.a().recv().ok());
  server.join();
}

TEST_CASE("hello from an unknown identity is rejected", "[provisioning]") {
  Parties p;
  SigningIdentity mallory = SigningIdentity::generate_with_id(make_id(0xBAD));
  EphemeralKey eph = EphemeralKey::generate();
  Bytes m1 = make_hello(mallory, eph, kProvisionHelloDomain).encode();
  auto r = verify_hello(m1, p.authorized, kProvisionHelloDomain);
  REQUIRE_FALSE(r.ok());
  CHECK(r.error().code == errc::unknown_key);

  // a forged signature under a known identity also fails
  HelloMsg forged = make_hello(mallory, eph, kProvisionHelloDomain);
  forged.sender_id = p.client.id;
  auto r2 = verify_hello(forged.encode(), p.authorized, kProvisionHelloDomain);
  REQUIRE_FALSE(r2.ok());
  CHECK(r2.error().code == errc::bad_signature);
}

TEST_CASE("empty transcript cannot derive a session key", "[provisioning]") {
  auto r = derive_session_key({});
  REQUIRE_FALSE(r.ok());
  CHECK(r.error().code == errc::incomplete_handshake);
}
