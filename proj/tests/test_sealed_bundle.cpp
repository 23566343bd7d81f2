#include "ecbr/sealed_bundle.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"

using namespace ecbr;
using namespace ecbr::test;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;

  TempDir() {
    path = fs::temp_directory_path() /
           ("ecbr-test-" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void write(const fs::path& p, ByteSpan data) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
}

void write(const fs::path& p, const std::string& data) {
  write(p, ByteSpan(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
}

Bytes read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Key32 test_key(std::uint8_t fill) {
  Key32 k{};
  k.fill(fill);
  return k;
}

}  // namespace

TEST_CASE("single tiny file bundle round-trips", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "x.txt", std::string("!"));
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x11);

  auto manifest = protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey);
  REQUIRE(manifest.ok());
  REQUIRE(manifest.value().files.size() == 1);
  CHECK(manifest.value().files[0].chunk_macs.size() == 1);  // 1 byte -> 1 chunk

  BundleCredential cred{mkey, creator.verify_key};
  auto loaded = verify_and_load(bundle.path, "x.txt", cred);
  REQUIRE(loaded.ok());
  CHECK(loaded.value() == Bytes{'!'});
  CHECK(verify_all(bundle.path, cred).ok());
}

TEST_CASE("chunk counts follow ceil arithmetic", "[bundle]") {
  TempDir tree, bundle;
  constexpr std::uint32_t kChunk = 1024;
  write(tree.path / "exact.bin", Bytes(2 * kChunk, 0xAA));
  write(tree.path / "plus1.bin", Bytes(2 * kChunk + 1, 0xBB));
  write(tree.path / "empty.bin", Bytes{});
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x22);

  auto manifest =
      protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey, kChunk);
  REQUIRE(manifest.ok());
  CHECK(manifest.value().find("exact.bin")->chunk_macs.size() == 2);
  CHECK(manifest.value().find("plus1.bin")->chunk_macs.size() == 3);
  CHECK(manifest.value().find("empty.bin")->chunk_macs.size() == 0);

  BundleCredential cred{mkey, creator.verify_key};
  CHECK(verify_and_load(bundle.path, "empty.bin", cred).value().empty());
  CHECK(verify_and_load(bundle.path, "plus1.bin", cred).value().size() == 2 * kChunk + 1);
}

TEST_CASE("random trees round-trip byte-exactly", "[bundle][property]") {
  Rng rng(0xB0B);
  for (int round = 0; round < 3; ++round) {
    TempDir tree, bundle;
    std::map<std::string, Bytes> expected;
    std::size_t n_files = 20 + rng() % 30;
    for (std::size_t i = 0; i < n_files; ++i) {
      std::string rel = (rng() % 2 ? "sub/dir" + std::to_string(rng() % 3) + "/" : "") +
                        "f" + std::to_string(i) + ".bin";
      std::size_t len = static_cast<std::size_t>(rng() % (256 * 1024));
      if (i == 0) len = 1 << 20;  // one large file per tree
      Bytes content(len);
      for (auto& b : content) b = static_cast<std::uint8_t>(rng());
      write(tree.path / rel, content);
      expected[rel] = std::move(content);
    }
    SigningIdentity creator = SigningIdentity::generate();
    Key32 mkey = test_key(0x33);
    BundleMode mode = round % 2 ? BundleMode::signed_only : BundleMode::encrypted;
    auto manifest = protect(tree.path, bundle.path, mode, creator, mkey);
    REQUIRE(manifest.ok());
    REQUIRE(manifest.value().files.size() == expected.size());

    BundleCredential cred{mkey, creator.verify_key};
    for (const auto& [rel, content] : expected) {
      auto loaded = verify_and_load(bundle.path, rel, cred);
      REQUIRE(loaded.ok());
      CHECK(loaded.value() == content);
    }
  }
}

TEST_CASE("symlinks are rejected", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "real.txt", std::string("data"));
  std::error_code ec;
  fs::create_symlink(tree.path / "real.txt", tree.path / "link.txt", ec);
  if (ec) return;  // filesystem without symlink support
  auto r = protect(tree.path, bundle.path, BundleMode::signed_only,
                   SigningIdentity::generate());
  REQUIRE_FALSE(r.ok());
  CHECK(r.error().code == errc::symlink_rejected);
}

TEST_CASE("unknown path is reported", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "a.txt", std::string("a"));
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x44);
  REQUIRE(protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey).ok());
  auto r = verify_and_load(bundle.path, "missing.txt", BundleCredential{mkey, {}});
  REQUIRE_FALSE(r.ok());
  CHECK(r.error().code == errc::unknown_path);
}

TEST_CASE("bit flips in encrypted chunks name the damaged chunk", "[bundle]") {
  TempDir tree, bundle;
  constexpr std::uint32_t kChunk = 512;
  write(tree.path / "f.bin", Bytes(3 * kChunk - 17, 0x3C));
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x55);
  REQUIRE(protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey, kChunk).ok());

  fs::path data_file = bundle.path / "data" / "f.bin.enc";
  Bytes original = read_all(data_file);
  const std::size_t stored_chunk = kChunk + 16;

  for (std::size_t byte = 0; byte < original.size(); byte += 97) {
    Bytes mutated = original;
    mutated[byte] ^= 0x01;
    write(data_file, mutated);
    auto r = verify_and_load(bundle.path, "f.bin", BundleCredential{mkey, {}});
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::chunk_mac_mismatch);
    CHECK(r.error().chunk_index == static_cast<std::int64_t>(byte / stored_chunk));
  }
  write(data_file, original);
  CHECK(verify_and_load(bundle.path, "f.bin", BundleCredential{mkey, {}}).ok());
}

TEST_CASE("swapped chunks are detected via the bound index", "[bundle]") {
  TempDir tree, bundle;
  constexpr std::uint32_t kChunk = 256;
  Bytes content(4 * kChunk, 0);
  for (std::size_t i = 0; i < content.size(); ++i)
    content[i] = static_cast<std::uint8_t>(i / kChunk);
  write(tree.path / "f.bin", content);
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x66);
  REQUIRE(protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey, kChunk).ok());

  fs::path data_file = bundle.path / "data" / "f.bin.enc";
  Bytes stored = read_all(data_file);
  const std::size_t sc = kChunk + 16;
  // swap stored chunks 1 and 2
  Bytes swapped = stored;
  std::copy(stored.begin() + 2 * sc, stored.begin() + 3 * sc, swapped.begin() + sc);
  std::copy(stored.begin() + sc, stored.begin() + 2 * sc, swapped.begin() + 2 * sc);
  write(data_file, swapped);

  auto r = verify_and_load(bundle.path, "f.bin", BundleCredential{mkey, {}});
  REQUIRE_FALSE(r.ok());
  CHECK(r.error().code == errc::chunk_mac_mismatch);
  CHECK(r.error().chunk_index == 1);
}

TEST_CASE("signed-only bundles detect modification and forged re-MACs", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "app.cfg", std::string("threshold=10\n"));
  SigningIdentity creator = SigningIdentity::generate();
  REQUIRE(protect(tree.path, bundle.path, BundleMode::signed_only, creator).ok());
  BundleCredential cred{{}, creator.verify_key};
  REQUIRE(verify_all(bundle.path, cred).ok());

  SECTION("plain modification fails the chunk MAC") {
    write(bundle.path / "data" / "app.cfg", std::string("threshold=99\n"));
    auto r = verify_and_load(bundle.path, "app.cfg", cred);
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::chunk_mac_mismatch);
  }

  SECTION("re-MACed manifest without the creator key fails the header") {
    // the attacker can recompute MACs (keys are derivable from the plaintext
    // manifest) but cannot re-sign the header
    auto loaded = load_manifest(bundle.path, cred);
    REQUIRE(loaded.ok());
    ProtectionManifest forged_manifest = loaded.value().second;
    std::string payload = "threshold=99\n";
    write(bundle.path / "data" / "app.cfg", payload);
    ManifestFile& entry = forged_manifest.files[0];
    entry.file_len = payload.size();
    Bytes pb(payload.begin(), payload.end());
    Key32 fkey = forged_manifest.file_key("app.cfg");
    entry.chunk_macs = {bundle_detail::chunk_mac(
        fkey, bundle_detail::path_digest("app.cfg"), 0, pb)};
    write(bundle.path / "manifest.signed", forged_manifest.encode());

    auto r = verify_and_load(bundle.path, "app.cfg", cred);
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::bad_manifest);  // digest no longer matches

    // forging the header digest too still fails: no creator signing key
    auto header_bytes = read_all(bundle.path / "header.bin");
    auto header = BundleHeader::decode(header_bytes);
    REQUIRE(header.ok());
    BundleHeader forged_header = header.value();
    forged_header.manifest_digest = hash32(forged_manifest.encode());
    write(bundle.path / "header.bin", forged_header.encode());
    auto r2 = verify_and_load(bundle.path, "app.cfg", cred);
    REQUIRE_FALSE(r2.ok());
    CHECK(r2.error().code == errc::bad_header_sig);
  }
}

TEST_CASE("customize appends files under a new signature", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "base.txt", std::string("base"));
  SigningIdentity creator = SigningIdentity::generate();
  REQUIRE(protect(tree.path, bundle.path, BundleMode::signed_only, creator).ok());

  SigningIdentity customizer = SigningIdentity::generate();
  REQUIRE(customize(bundle.path, {{"added/extra.txt", Bytes{'h', 'i'}}}, customizer).ok());

  // old creator key no longer validates; the customizer's does
  CHECK(verify_all(bundle.path, BundleCredential{{}, creator.verify_key}).error().code ==
        errc::bad_header_sig);
  BundleCredential cred{{}, customizer.verify_key};
  REQUIRE(verify_all(bundle.path, cred).ok());
  CHECK(verify_and_load(bundle.path, "base.txt", cred).value() ==
        Bytes{'b', 'a', 's', 'e'});
  CHECK(verify_and_load(bundle.path, "added/extra.txt", cred).value() == Bytes{'h', 'i'});

  SECTION("path collisions are rejected") {
    auto r = customize(bundle.path, {{"base.txt", Bytes{'x'}}}, customizer);
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::path_collision);
  }
}

TEST_CASE("encrypted bundles cannot be customized", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "a.txt", std::string("a"));
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x77);
  REQUIRE(protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey).ok());
  auto r = customize(bundle.path, {{"b.txt", Bytes{'b'}}}, creator);
  REQUIRE_FALSE(r.ok());
  CHECK(r.error().code == errc::not_customizable);
}

TEST_CASE("verifying one file reads nothing else", "[bundle]") {
  TempDir tree, bundle;
  write(tree.path / "one.bin", Bytes(1000, 1));
  write(tree.path / "two.bin", Bytes(1000, 2));
  write(tree.path / "three.bin", Bytes(1000, 3));
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x88);
  REQUIRE(protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey).ok());

  std::vector<std::string> trace;
  REQUIRE(verify_and_load(bundle.path, "two.bin", BundleCredential{mkey, {}}, &trace).ok());
  CHECK(trace == std::vector<std::string>{"header.bin", "manifest.sealed",
                                          "data/two.bin.enc"});
}

TEST_CASE("every single-bit flip across a small bundle is detected", "[bundle][property]") {
  TempDir tree, bundle;
  constexpr std::uint32_t kChunk = 128;
  write(tree.path / "s.bin", Bytes(300, 0x5F));
  SigningIdentity creator = SigningIdentity::generate();
  Key32 mkey = test_key(0x99);
  REQUIRE(protect(tree.path, bundle.path, BundleMode::encrypted, creator, mkey, kChunk).ok());
  BundleCredential cred{mkey, creator.verify_key};
  REQUIRE(verify_all(bundle.path, cred).ok());

  for (const char* rel : {"header.bin", "manifest.sealed", "data/s.bin.enc"}) {
    fs::path target = bundle.path / rel;
    Bytes original = read_all(target);
    std::size_t total_bits = original.size() * 8;
    REQUIRE(total_bits <= 4096 * 8);
    for (std::size_t bit = 0; bit < total_bits; ++bit) {
      Bytes mutated = original;
      mutated[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
      write(target, mutated);
      auto r = verify_all(bundle.path, cred);
      INFO(rel << " bit " << bit);
      REQUIRE_FALSE(r.ok());
      if (std::string(rel) == "header.bin") {
        CHECK(r.error().code == errc::bad_header_sig);
      } else if (std::string(rel) == "manifest.sealed") {
        CHECK(r.error().code == errc::bad_manifest);
      } else {
        CHECK(r.error().code == errc::chunk_mac_mismatch);
      }
    }
    write(target, original);
    REQUIRE(verify_all(bundle.path, cred).ok());
  }
}
