#pragma once

// File-system protection for plain file trees.
//
// protect() walks a tree and emits a bundle directory:
//
//   header.bin            version, mode, creator key, manifest digest, sig
//   manifest.sealed|signed
//   data/<path>[.enc]     chunked file payloads
//
// Every file is split into fixed-size chunks; each chunk carries a 32-byte
// keyed MAC recorded in the manifest, and in Encrypted mode is additionally
// AEAD-encrypted under a per-file key with the chunk index and a path digest
// bound as associated data, so chunks cannot be reordered or spliced across
// files. Per-file keys derive from one bundle master key and the path, so
// the manifest stays small.
//
// SignedOnly bundles leave file bytes readable and the manifest plaintext
// but signed: integrity without confidentiality, which is what makes later
// customization (adding files, re-signing) possible.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ecbr/common.hpp"
#include "ecbr/envelope.hpp"

namespace ecbr {

enum class BundleMode : std::uint8_t { encrypted = 0, signed_only = 1 };

inline constexpr std::uint32_t kDefaultChunkSize = 64 * 1024;
inline constexpr std::uint8_t kBundleVersion = 1;

// ---------------------------------------------------------------------------
// Manifest

struct ManifestFile {
  std::string path;  // relative, '/'-separated, no '..'
  std::uint64_t file_len = 0;
  std::vector<Hash32> chunk_macs;
};

struct ProtectionManifest {
  Key32 master_key{};
  std::uint32_t chunk_size = kDefaultChunkSize;
  std::vector<ManifestFile> files;  // path-sorted

  Key32 file_key(const std::string& path) const {
    Bytes input(path.begin(), path.end());
    return domain_hash32("ecbr.bundle.filekey", keyed_hash32(master_key, input));
  }

  const ManifestFile* find(const std::string& path) const {
    for (const auto& f : files)
      if (f.path == path) return &f;
    return nullptr;
  }

  Bytes encode() const {
    ByteWriter w;
    w.u8(kBundleVersion);
    w.raw(master_key);
    w.u32(chunk_size);
    w.u32(static_cast<std::uint32_t>(files.size()));
    for (const auto& f : files) {
      w.u16(static_cast<std::uint16_t>(f.path.size()));
      w.raw(f.path);
      w.u64(f.file_len);
      w.u32(static_cast<std::uint32_t>(f.chunk_macs.size()));
      for (const auto& mac : f.chunk_macs) w.raw(mac);
    }
    return w.take();
  }

  static Result<ProtectionManifest> decode(ByteSpan bytes) {
    auto bad = [](std::string m) { return make_error(errc::bad_manifest, std::move(m)); };
    ByteReader r(bytes);
    ProtectionManifest m;
    std::uint8_t version = 0;
    if (!r.u8(version) || version != kBundleVersion) return bad("unsupported version");
    std::uint32_t n_files = 0;
    if (!r.raw(m.master_key) || !r.u32(m.chunk_size) || !r.u32(n_files))
      return bad("truncated manifest");
    if (m.chunk_size == 0) return bad("zero chunk size");
    std::string prev;
    for (std::uint32_t i = 0; i < n_files; ++i) {
      ManifestFile f;
      std::uint16_t path_len = 0;
      std::uint32_t n_macs = 0;
      if (!r.u16(path_len) || !r.str(f.path, path_len) || !r.u64(f.file_len) || !r.u32(n_macs))
        return bad("truncated file entry");
      if (f.path.empty() || f.path.front() == '/' || f.path.find("..") != std::string::npos)
        return bad("bad path '" + f.path + "'");
      if (i > 0 && !(prev < f.path)) return bad("paths not sorted or duplicated");
      prev = f.path;
      std::uint64_t expected =
          (f.file_len + m.chunk_size - 1) / m.chunk_size;
      if (n_macs != expected) return bad("chunk count mismatch for '" + f.path + "'");
      f.chunk_macs.resize(n_macs);
      for (auto& mac : f.chunk_macs)
        if (!r.raw(mac)) return bad("truncated MAC list");
      m.files.push_back(std::move(f));
    }
    if (!r.at_end()) return bad("trailing bytes");
    return m;
  }
};

// ---------------------------------------------------------------------------
// Header

struct BundleHeader {
  std::uint8_t version = kBundleVersion;
  BundleMode mode = BundleMode::encrypted;
  Key32 creator_pub{};
  Hash32 manifest_digest{};
  Sig64 signature{};

  static Bytes sig_input(const Hash32& digest, BundleMode mode) {
    ByteWriter w;
    w.raw(digest);
    w.u8(static_cast<std::uint8_t>(mode));
    return w.take();
  }

  Bytes encode() const {
    ByteWriter w;
    w.u8(version);
    w.u8(static_cast<std::uint8_t>(mode));
    w.raw(creator_pub);
    w.raw(manifest_digest);
    w.raw(signature);
    return w.take();
  }

  static Result<BundleHeader> decode(ByteSpan bytes) {
    auto bad = [](std::string m) { return make_error(errc::bad_header_sig, std::move(m)); };
    ByteReader r(bytes);
    BundleHeader h;
    std::uint8_t mode = 0;
    if (!r.u8(h.version) || h.version != kBundleVersion) return bad("unsupported version");
    if (!r.u8(mode) || mode > 1) return bad("unknown mode");
    h.mode = static_cast<BundleMode>(mode);
    if (!r.raw(h.creator_pub) || !r.raw(h.manifest_digest) || !r.raw(h.signature) || !r.at_end())
      return bad("truncated header");
    return h;
  }
};

// ---------------------------------------------------------------------------

namespace bundle_detail {

namespace fs = std::filesystem;

inline Hash32 path_digest(const std::string& path) {
  return domain_hash32("ecbr.bundle.path", Bytes(path.begin(), path.end()));
}

inline Bytes chunk_context(const Hash32& pd, std::uint64_t index) {
  ByteWriter w;
  w.raw(pd);
  w.u64(index);
  return w.take();
}

inline Hash32 chunk_mac(const Key32& file_key, const Hash32& pd, std::uint64_t index,
                        ByteSpan chunk) {
  ByteWriter w;
  w.raw(pd);
  w.u64(index);
  w.raw(chunk);
  return keyed_hash32(file_key, w.bytes());
}

inline Nonce12 chunk_nonce(std::uint64_t index) {
  Nonce12 n{};
  for (int i = 0; i < 8; ++i) n[4 + i] = static_cast<std::uint8_t>(index >> (8 * (7 - i)));
  return n;
}

inline Result<Bytes> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return make_error(errc::io_error, "cannot open " + p.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) return make_error(errc::io_error, "read failed for " + p.string());
  return data;
}

inline Result<void> write_file(const fs::path& p, ByteSpan data) {
  std::error_code ec;
  fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) return make_error(errc::io_error, "cannot create " + p.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) return make_error(errc::io_error, "write failed for " + p.string());
  return {};
}

inline Id16 manifest_key_id(const Key32& manifest_key) {
  return truncate16(domain_hash32("ecbr.bundle.manifest.kid",
                                  ByteSpan(manifest_key.data(), manifest_key.size())));
}

inline Id16 creator_envelope_id(const Key32& creator_pub) {
  return truncate16(domain_hash32("ecbr.bundle.creator",
                                  ByteSpan(creator_pub.data(), creator_pub.size())));
}

// MAC and (in encrypted mode) AEAD-seal one file's chunks. Returns the
// on-disk payload and fills the manifest entry's MAC list.
inline Bytes protect_file(const ProtectionManifest& manifest, ManifestFile& entry,
                          ByteSpan plaintext, BundleMode mode) {
  const Key32 fkey = manifest.file_key(entry.path);
  const Hash32 pd = path_digest(entry.path);
  const std::uint32_t chunk_size = manifest.chunk_size;
  Bytes out;
  entry.chunk_macs.clear();
  std::uint64_t n_chunks = (plaintext.size() + chunk_size - 1) / chunk_size;
  for (std::uint64_t i = 0; i < n_chunks; ++i) {
    std::size_t off = static_cast<std::size_t>(i) * chunk_size;
    std::size_t len = std::min<std::size_t>(chunk_size, plaintext.size() - off);
    ByteSpan chunk(plaintext.data() + off, len);
    if (mode == BundleMode::signed_only) {
      entry.chunk_macs.push_back(chunk_mac(fkey, pd, i, chunk));
      out.insert(out.end(), chunk.begin(), chunk.end());
    } else {
      Bytes ct(len);
      Tag16 tag{};
      unsigned long long maclen = 0;
      Bytes ad = chunk_context(pd, i);
      Nonce12 nonce = chunk_nonce(i);
      crypto_aead_chacha20poly1305_ietf_encrypt_detached(ct.data(), tag.data(), &maclen,
                                                         chunk.data(), chunk.size(), ad.data(),
                                                         ad.size(), nullptr, nonce.data(),
                                                         fkey.data());
      entry.chunk_macs.push_back(chunk_mac(fkey, pd, i, ct));
      out.insert(out.end(), ct.begin(), ct.end());
      out.insert(out.end(), tag.begin(), tag.end());
    }
  }
  return out;
}

}  // namespace bundle_detail

// ---------------------------------------------------------------------------
// protect / verify / customize

struct BundleCredential {
  std::optional<Key32> manifest_key;          // required for encrypted bundles
  std::optional<Key32> expected_creator_pub;  // pin the signer when known
};

inline Result<ProtectionManifest> protect(const std::filesystem::path& tree_root,
                                          const std::filesystem::path& bundle_dir,
                                          BundleMode mode, const SigningIdentity& creator,
                                          const std::optional<Key32>& manifest_key = {},
                                          std::uint32_t chunk_size = kDefaultChunkSize) {
  namespace fs = std::filesystem;
  using namespace bundle_detail;
  crypto_init();
  if (mode == BundleMode::encrypted && !manifest_key)
    return make_error(errc::invalid_argument, "encrypted mode needs a manifest key");
  if (!fs::is_directory(tree_root))
    return make_error(errc::io_error, "not a directory: " + tree_root.string());

  ProtectionManifest manifest;
  manifest.chunk_size = chunk_size;
  randombytes_buf(manifest.master_key.data(), manifest.master_key.size());

  std::vector<std::string> paths;
  for (auto it = fs::recursive_directory_iterator(tree_root,
                                                  fs::directory_options::none);
       it != fs::recursive_directory_iterator(); ++it) {
    if (it->is_symlink())
      return make_error(errc::symlink_rejected, it->path().string());
    if (!it->is_regular_file()) continue;
    paths.push_back(fs::relative(it->path(), tree_root).generic_string());
  }
  std::sort(paths.begin(), paths.end());

  std::error_code ec;
  fs::create_directories(bundle_dir / "data", ec);

  for (const auto& rel : paths) {
    auto plaintext = read_file(tree_root / rel);
    if (!plaintext) return plaintext.error();
    ManifestFile entry;
    entry.path = rel;
    entry.file_len = plaintext.value().size();
    Bytes payload = protect_file(manifest, entry, plaintext.value(), mode);
    fs::path out = bundle_dir / "data" /
                   (mode == BundleMode::encrypted ? rel + ".enc" : rel);
    if (auto w = write_file(out, payload); !w) return w.error();
    manifest.files.push_back(std::move(entry));
  }

  Bytes manifest_bytes = manifest.encode();
  Hash32 digest = hash32(manifest_bytes);

  if (mode == BundleMode::encrypted) {
    SigningIdentity sealer = creator;
    sealer.id = creator_envelope_id(creator.verify_key);
    KeyRing ring(sealer);
    Id16 kid = manifest_key_id(*manifest_key);
    ring.add_symmetric_key(kid, *manifest_key);
    auto env = seal(ring, kid, Context::scf, manifest_bytes);
    if (!env) return env.error();
    if (auto w = write_file(bundle_dir / "manifest.sealed", env.value().encode()); !w)
      return w.error();
  } else {
    if (auto w = write_file(bundle_dir / "manifest.signed", manifest_bytes); !w)
      return w.error();
  }

  BundleHeader header;
  header.mode = mode;
  header.creator_pub = creator.verify_key;
  header.manifest_digest = digest;
  header.signature = sign_detached(creator.sign_key, BundleHeader::sig_input(digest, mode));
  if (auto w = write_file(bundle_dir / "header.bin", header.encode()); !w) return w.error();
  return manifest;
}

// Header + manifest verification shared by the loaders. io_trace, when
// given, records every bundle-relative path that was read.
inline Result<std::pair<BundleHeader, ProtectionManifest>> load_manifest(
    const std::filesystem::path& bundle_dir, const BundleCredential& cred,
    std::vector<std::string>* io_trace = nullptr) {
  using namespace bundle_detail;
  crypto_init();
  auto header_bytes = read_file(bundle_dir / "header.bin");
  if (!header_bytes)
    return make_error(errc::bad_header_sig, "missing header: " + header_bytes.error().message);
  if (io_trace) io_trace->push_back("header.bin");
  auto header = BundleHeader::decode(header_bytes.value());
  if (!header) return header.error();
  if (cred.expected_creator_pub && *cred.expected_creator_pub != header.value().creator_pub)
    return make_error(errc::bad_header_sig, "creator key does not match the pinned key");
  if (!verify_detached(header.value().creator_pub,
                       BundleHeader::sig_input(header.value().manifest_digest,
                                               header.value().mode),
                       header.value().signature))
    return make_error(errc::bad_header_sig, "header signature verification failed");

  Bytes manifest_bytes;
  if (header.value().mode == BundleMode::encrypted) {
    if (!cred.manifest_key)
      return make_error(errc::bad_manifest, "encrypted bundle needs the manifest key");
    auto sealed = read_file(bundle_dir / "manifest.sealed");
    if (!sealed) return make_error(errc::bad_manifest, "missing sealed manifest");
    if (io_trace) io_trace->push_back("manifest.sealed");
    KeyRing ring{SigningIdentity::generate()};
    ring.add_peer(creator_envelope_id(header.value().creator_pub),
                  header.value().creator_pub);
    ring.add_symmetric_key(manifest_key_id(*cred.manifest_key), *cred.manifest_key);
    auto opened = open_bytes(ring, sealed.value(), Context::scf);
    if (!opened)
      return make_error(errc::bad_manifest,
                        "manifest envelope rejected: " + opened.error().to_string());
    manifest_bytes = std::move(opened).value();
  } else {
    auto plain = read_file(bundle_dir / "manifest.signed");
    if (!plain) return make_error(errc::bad_manifest, "missing signed manifest");
    if (io_trace) io_trace->push_back("manifest.signed");
    manifest_bytes = std::move(plain).value();
  }

  if (hash32(manifest_bytes) != header.value().manifest_digest)
    return make_error(errc::bad_manifest, "manifest digest mismatch");
  auto manifest = ProtectionManifest::decode(manifest_bytes);
  if (!manifest) return manifest.error();
  return std::make_pair(header.value(), std::move(manifest).value());
}

inline Result<Bytes> verify_and_load(const std::filesystem::path& bundle_dir,
                                     const std::string& path, const BundleCredential& cred,
                                     std::vector<std::string>* io_trace = nullptr) {
  using namespace bundle_detail;
  auto loaded = load_manifest(bundle_dir, cred, io_trace);
  if (!loaded) return loaded.error();
  const auto& [header, manifest] = loaded.value();

  const ManifestFile* entry = manifest.find(path);
  if (entry == nullptr) return make_error(errc::unknown_path, path);

  const bool encrypted = header.mode == BundleMode::encrypted;
  std::string rel = "data/" + path + (encrypted ? ".enc" : "");
  auto payload = read_file(bundle_dir / rel);
  if (!payload) return payload.error();
  if (io_trace) io_trace->push_back(rel);

  const Key32 fkey = manifest.file_key(path);
  const Hash32 pd = path_digest(path);
  const std::uint64_t n_chunks = entry->chunk_macs.size();
  const std::uint64_t stored_chunk =
      static_cast<std::uint64_t>(manifest.chunk_size) + (encrypted ? 16 : 0);

  std::uint64_t expected_size = 0;
  if (n_chunks > 0) {
    std::uint64_t last_len = entry->file_len - (n_chunks - 1) * manifest.chunk_size;
    expected_size = (n_chunks - 1) * stored_chunk + last_len + (encrypted ? 16 : 0);
  }
  if (payload.value().size() != expected_size) {
    Error e = make_error(errc::chunk_mac_mismatch, "stored size mismatch for " + path);
    e.chunk_index = 0;
    return e;
  }

  Bytes plaintext;
  plaintext.reserve(entry->file_len);
  std::size_t off = 0;
  for (std::uint64_t i = 0; i < n_chunks; ++i) {
    std::uint64_t remaining = entry->file_len - i * manifest.chunk_size;
    std::size_t len = static_cast<std::size_t>(
        std::min<std::uint64_t>(manifest.chunk_size, remaining));
    ByteSpan chunk(payload.value().data() + off, len);
    if (chunk_mac(fkey, pd, i, chunk) != entry->chunk_macs[i]) {
      Error e = make_error(errc::chunk_mac_mismatch, path);
      e.chunk_index = static_cast<std::int64_t>(i);
      return e;
    }
    if (encrypted) {
      Tag16 tag{};
      std::memcpy(tag.data(), payload.value().data() + off + len, tag.size());
      Bytes ad = chunk_context(pd, i);
      Nonce12 nonce = chunk_nonce(i);
      Bytes pt(len);
      if (crypto_aead_chacha20poly1305_ietf_decrypt_detached(
              pt.data(), nullptr, chunk.data(), chunk.size(), tag.data(), ad.data(), ad.size(),
              nonce.data(), fkey.data()) != 0) {
        Error e = make_error(errc::chunk_mac_mismatch, "chunk decryption failed: " + path);
        e.chunk_index = static_cast<std::int64_t>(i);
        return e;
      }
      plaintext.insert(plaintext.end(), pt.begin(), pt.end());
      off += len + tag.size();
    } else {
      plaintext.insert(plaintext.end(), chunk.begin(), chunk.end());
      off += len;
    }
  }
  return plaintext;
}

inline Result<void> verify_all(const std::filesystem::path& bundle_dir,
                               const BundleCredential& cred) {
  auto loaded = load_manifest(bundle_dir, cred);
  if (!loaded) return loaded.error();
  for (const auto& f : loaded.value().second.files) {
    auto r = verify_and_load(bundle_dir, f.path, cred);
    if (!r) return r.error();
    if (r.value().size() != f.file_len)
      return make_error(errc::bad_manifest, "length mismatch for " + f.path);
  }
  return {};
}

struct AddedFile {
  std::string path;
  Bytes content;
};

// Appends files to a SignedOnly bundle and re-signs it with a (possibly
// new) creator key. Existing entries and their MACs stay untouched.
inline Result<void> customize(const std::filesystem::path& bundle_dir,
                              const std::vector<AddedFile>& additions,
                              const SigningIdentity& new_creator) {
  using namespace bundle_detail;
  auto header_bytes = read_file(bundle_dir / "header.bin");
  if (!header_bytes) return make_error(errc::bad_header_sig, "missing header");
  auto header_peek = BundleHeader::decode(header_bytes.value());
  if (!header_peek) return header_peek.error();
  if (header_peek.value().mode == BundleMode::encrypted)
    return make_error(errc::not_customizable, "encrypted bundles cannot be customized");
  auto loaded = load_manifest(bundle_dir, BundleCredential{});
  if (!loaded) return loaded.error();
  auto [header, manifest] = std::move(loaded).value();

  for (const auto& add : additions) {
    if (add.path.empty() || add.path.front() == '/' ||
        add.path.find("..") != std::string::npos)
      return make_error(errc::invalid_argument, "bad path '" + add.path + "'");
    if (manifest.find(add.path) != nullptr)
      return make_error(errc::path_collision, add.path);
    ManifestFile entry;
    entry.path = add.path;
    entry.file_len = add.content.size();
    Bytes payload = protect_file(manifest, entry, add.content, BundleMode::signed_only);
    if (auto w = write_file(bundle_dir / "data" / add.path, payload); !w) return w.error();
    manifest.files.push_back(std::move(entry));
  }
  std::sort(manifest.files.begin(), manifest.files.end(),
            [](const ManifestFile& a, const ManifestFile& b) { return a.path < b.path; });

  Bytes manifest_bytes = manifest.encode();
  Hash32 digest = hash32(manifest_bytes);
  if (auto w = write_file(bundle_dir / "manifest.signed", manifest_bytes); !w)
    return w.error();

  BundleHeader new_header;
  new_header.mode = BundleMode::signed_only;
  new_header.creator_pub = new_creator.verify_key;
  new_header.manifest_digest = digest;
  new_header.signature =
      sign_detached(new_creator.sign_key,
                    BundleHeader::sig_input(digest, BundleMode::signed_only));
  return write_file(bundle_dir / "header.bin", new_header.encode());
}

}  // namespace ecbr
