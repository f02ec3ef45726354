#pragma once

#include <sodium.h>

#include <cstring>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "aggsim/common.hpp"

namespace aggsim {

/// Ciphertext families. PrivateKeyTransform is the signature-with-message-
/// recovery envelope: "encrypting with a private key" produces it and
/// "decrypting with the public key" verifies and returns the message.
enum class Scheme : char {
  Symmetric = 's',
  PublicKey = 'p',
  PrivateKeyTransform = 't',
};

struct SymmetricKey {
  std::string key_id;  // κ identifier
  Bytes key_bytes;

  bool operator==(const SymmetricKey&) const = default;
};

struct PublicKey {
  Bytes bytes;

  bool operator==(const PublicKey&) const = default;
};

struct SecretKey {
  Bytes bytes;

  bool operator==(const SecretKey&) const = default;
};

struct KeyPair {
  std::string iota;  // names the pair; DID documents reference it
  PublicKey pub;
  SecretKey sec;
};

struct Digest {
  Bytes bytes;

  bool operator==(const Digest&) const = default;
  std::string hex() const { return hex_encode(bytes); }
};

struct Ciphertext {
  Scheme scheme = Scheme::Symmetric;
  Bytes payload;

  bool operator==(const Ciphertext&) const = default;

  /// Single-byte tag + payload, used when a ciphertext is nested inside
  /// another cryptographic operation.
  Bytes wire() const {
    Bytes out;
    out.reserve(payload.size() + 1);
    out.push_back(static_cast<std::uint8_t>(scheme));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
  }

  static Ciphertext from_wire(const Bytes& w) {
    if (w.empty()) raise(Errc::DecryptionFailure, "empty ciphertext wire form");
    char tag = static_cast<char>(w[0]);
    if (tag != 's' && tag != 'p' && tag != 't')
      raise(Errc::DecryptionFailure, "unknown ciphertext scheme tag");
    return Ciphertext{static_cast<Scheme>(tag), Bytes(w.begin() + 1, w.end())};
  }

  /// Text form for embedding in JSON documents and transactions.
  std::string encode() const {
    return std::string(1, static_cast<char>(scheme)) + ":" +
           base64_encode(payload);
  }

  static Ciphertext decode(const std::string& text) {
    if (text.size() < 2 || text[1] != ':')
      raise(Errc::DecryptionFailure, "malformed ciphertext encoding");
    char tag = text[0];
    if (tag != 's' && tag != 'p' && tag != 't')
      raise(Errc::DecryptionFailure, "unknown ciphertext scheme tag");
    auto payload = base64_decode(std::string_view(text).substr(2));
    if (!payload) raise(Errc::DecryptionFailure, "bad base64 in ciphertext");
    return Ciphertext{static_cast<Scheme>(tag), std::move(*payload)};
  }
};

/// Maps key identifiers ι to public keys. Verification may be handed an ι
/// instead of a key; the directory resolves it first.
class KeyDirectory {
 public:
  void register_key(const std::string& iota, const PublicKey& pk) {
    keys_[iota] = pk;
  }

  std::optional<PublicKey> find(const std::string& iota) const {
    auto it = keys_.find(iota);
    if (it == keys_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::map<std::string, PublicKey> keys_;
};

/// Cryptography provider. Stateless after construction: operations that
/// need randomness take an explicit Rng stream, so concurrent use and
/// deterministic replay both come for free.
class CryptoProvider {
 public:
  virtual ~CryptoProvider() = default;

  virtual std::string name() const = 0;
  virtual std::size_t digest_length() const = 0;

  virtual SymmetricKey gen_symmetric(Rng& rng) const = 0;
  virtual KeyPair gen_keypair(Rng& rng) const = 0;

  /// Fresh key from OS entropy.
  SymmetricKey gen_symmetric() const {
    Rng rng(entropy_seed());
    return gen_symmetric(rng);
  }
  /// Reproducible key from a caller seed.
  SymmetricKey gen_symmetric(std::uint64_t seed) const {
    Rng rng(seed);
    return gen_symmetric(rng);
  }
  KeyPair gen_keypair() const {
    Rng rng(entropy_seed());
    return gen_keypair(rng);
  }
  KeyPair gen_keypair(std::uint64_t seed) const {
    Rng rng(seed);
    return gen_keypair(rng);
  }

  /// W(pk): fixed-length digest-derived ledger address.
  virtual std::string wallet_address(const PublicKey& pk) const = 0;

  virtual Ciphertext sign_recover(const Bytes& obj, const SecretKey& sk) const = 0;
  /// Returns the signed object; throws RecoveryFailure on a wrong key or a
  /// tampered envelope.
  virtual Bytes verify_recover(const Ciphertext& sig, const PublicKey& pk) const = 0;

  virtual Ciphertext encrypt(const Bytes& obj, const SymmetricKey& key, Rng& rng) const = 0;
  /// Hybrid public-key encryption; handles arbitrary lengths.
  virtual Ciphertext encrypt(const Bytes& obj, const PublicKey& pk, Rng& rng) const = 0;
  virtual Bytes decrypt(const Ciphertext& ct, const SymmetricKey& key) const = 0;
  virtual Bytes decrypt(const Ciphertext& ct, const SecretKey& sk) const = 0;

  virtual Digest hash(const Bytes& obj) const = 0;

  /// ι-addressed verification: resolve the identifier, then verify.
  Bytes verify_recover(const Ciphertext& sig, const std::string& iota,
                       const KeyDirectory& dir) const {
    auto pk = dir.find(iota);
    if (!pk) raise(Errc::RecoveryFailure, "unknown key identifier " + iota);
    return verify_recover(sig, *pk);
  }

  static std::uint64_t entropy_seed() {
    std::uint64_t s;
    randombytes_buf(&s, sizeof s);
    return s;
  }

 protected:
  static void ensure_sodium() {
    if (sodium_init() < 0)
      throw std::runtime_error("libsodium initialization failed");
  }
};

namespace detail {

inline Bytes generichash(const Bytes& data, std::string_view domain,
                         std::size_t out_len = 32) {
  Bytes out(out_len);
  crypto_generichash(out.data(), out.size(), data.data(), data.size(),
                     reinterpret_cast<const unsigned char*>(domain.data()),
                     std::min<std::size_t>(domain.size(),
                                           crypto_generichash_KEYBYTES_MAX));
  return out;
}

inline std::string key_identifier(const Bytes& pk_bytes) {
  return "key:" + hex_encode(generichash(pk_bytes, "aggsim.iota", 8));
}

}  // namespace detail

/// Production provider: Ed25519 signatures in combined mode (the verify
/// step recovers the message), X25519 sealed boxes derived from the same
/// pair for public-key encryption, XSalsa20-Poly1305 secretboxes for
/// symmetric encryption, BLAKE2b-256 for hashing. All ciphertexts are
/// authenticated; any mutation fails hard at decrypt.
class SodiumProvider final : public CryptoProvider {
 public:
  SodiumProvider() { ensure_sodium(); }

  std::string name() const override { return "sodium"; }
  std::size_t digest_length() const override { return 32; }

  SymmetricKey gen_symmetric(Rng& rng) const override {
    Bytes key = rng.bytes(crypto_secretbox_KEYBYTES);
    return SymmetricKey{
        "sym:" + hex_encode(detail::generichash(key, "aggsim.kid", 8)),
        std::move(key)};
  }

  KeyPair gen_keypair(Rng& rng) const override {
    Bytes seed = rng.bytes(crypto_sign_SEEDBYTES);
    Bytes pk(crypto_sign_PUBLICKEYBYTES), sk(crypto_sign_SECRETKEYBYTES);
    crypto_sign_seed_keypair(pk.data(), sk.data(), seed.data());
    KeyPair pair;
    pair.iota = detail::key_identifier(pk);
    pair.pub = PublicKey{std::move(pk)};
    pair.sec = SecretKey{std::move(sk)};
    return pair;
  }

  std::string wallet_address(const PublicKey& pk) const override {
    return hex_encode(detail::generichash(pk.bytes, "aggsim.addr", 20));
  }

  Ciphertext sign_recover(const Bytes& obj, const SecretKey& sk) const override {
    if (sk.bytes.size() != crypto_sign_SECRETKEYBYTES)
      raise(Errc::RecoveryFailure, "bad secret key length");
    Bytes sm(crypto_sign_BYTES + obj.size());
    unsigned long long smlen = 0;
    crypto_sign(sm.data(), &smlen, obj.data(), obj.size(), sk.bytes.data());
    sm.resize(smlen);
    return Ciphertext{Scheme::PrivateKeyTransform, std::move(sm)};
  }

  Bytes verify_recover(const Ciphertext& sig, const PublicKey& pk) const override {
    if (sig.scheme != Scheme::PrivateKeyTransform)
      raise(Errc::RecoveryFailure, "ciphertext is not a signature envelope");
    if (pk.bytes.size() != crypto_sign_PUBLICKEYBYTES)
      raise(Errc::RecoveryFailure, "bad public key length");
    if (sig.payload.size() < crypto_sign_BYTES)
      raise(Errc::RecoveryFailure, "signature envelope too short");
    Bytes out(sig.payload.size() - crypto_sign_BYTES);
    unsigned long long outlen = 0;
    if (crypto_sign_open(out.empty() ? nullptr : out.data(), &outlen,
                         sig.payload.data(), sig.payload.size(),
                         pk.bytes.data()) != 0)
      raise(Errc::RecoveryFailure, "signature verification failed");
    out.resize(outlen);
    return out;
  }

  Ciphertext encrypt(const Bytes& obj, const SymmetricKey& key, Rng& rng) const override {
    if (key.key_bytes.size() != crypto_secretbox_KEYBYTES)
      raise(Errc::DecryptionFailure, "bad symmetric key length");
    Bytes nonce = rng.bytes(crypto_secretbox_NONCEBYTES);
    Bytes ct(crypto_secretbox_MACBYTES + obj.size());
    crypto_secretbox_easy(ct.data(), obj.data(), obj.size(), nonce.data(),
                          key.key_bytes.data());
    Bytes payload = std::move(nonce);
    payload.insert(payload.end(), ct.begin(), ct.end());
    return Ciphertext{Scheme::Symmetric, std::move(payload)};
  }

  Ciphertext encrypt(const Bytes& obj, const PublicKey& pk, Rng& rng) const override {
    Bytes curve_pk = ed_pk_to_curve(pk);
    // Ephemeral pair from the caller's stream keeps sealed boxes replayable
    // under a fixed seed.
    Bytes eseed = rng.bytes(crypto_box_SEEDBYTES);
    Bytes epk(crypto_box_PUBLICKEYBYTES), esk(crypto_box_SECRETKEYBYTES);
    crypto_box_seed_keypair(epk.data(), esk.data(), eseed.data());
    Bytes nonce = seal_nonce(epk, curve_pk);
    Bytes ct(crypto_box_MACBYTES + obj.size());
    if (crypto_box_easy(ct.data(), obj.data(), obj.size(), nonce.data(),
                        curve_pk.data(), esk.data()) != 0)
      raise(Errc::DecryptionFailure, "public-key encryption failed");
    Bytes payload = std::move(epk);
    payload.insert(payload.end(), ct.begin(), ct.end());
    return Ciphertext{Scheme::PublicKey, std::move(payload)};
  }

  Bytes decrypt(const Ciphertext& ct, const SymmetricKey& key) const override {
    if (ct.scheme != Scheme::Symmetric)
      raise(Errc::DecryptionFailure, "scheme mismatch: expected symmetric");
    if (key.key_bytes.size() != crypto_secretbox_KEYBYTES)
      raise(Errc::DecryptionFailure, "bad symmetric key length");
    if (ct.payload.size() < crypto_secretbox_NONCEBYTES + crypto_secretbox_MACBYTES)
      raise(Errc::DecryptionFailure, "ciphertext too short");
    const auto* nonce = ct.payload.data();
    const auto* body = ct.payload.data() + crypto_secretbox_NONCEBYTES;
    std::size_t body_len = ct.payload.size() - crypto_secretbox_NONCEBYTES;
    Bytes out(body_len - crypto_secretbox_MACBYTES);
    if (crypto_secretbox_open_easy(out.empty() ? nullptr : out.data(), body,
                                   body_len, nonce, key.key_bytes.data()) != 0)
      raise(Errc::DecryptionFailure, "symmetric decryption failed");
    return out;
  }

  Bytes decrypt(const Ciphertext& ct, const SecretKey& sk) const override {
    if (ct.scheme != Scheme::PublicKey)
      raise(Errc::DecryptionFailure, "scheme mismatch: expected public-key");
    if (sk.bytes.size() != crypto_sign_SECRETKEYBYTES)
      raise(Errc::DecryptionFailure, "bad secret key length");
    if (ct.payload.size() < crypto_box_PUBLICKEYBYTES + crypto_box_MACBYTES)
      raise(Errc::DecryptionFailure, "ciphertext too short");
    Bytes curve_sk(crypto_scalarmult_curve25519_BYTES);
    if (crypto_sign_ed25519_sk_to_curve25519(curve_sk.data(), sk.bytes.data()) != 0)
      raise(Errc::DecryptionFailure, "secret key conversion failed");
    // The Ed25519 secret key embeds its public half; recover it to rebuild
    // the sealing nonce.
    PublicKey embedded{Bytes(sk.bytes.end() - crypto_sign_PUBLICKEYBYTES,
                             sk.bytes.end())};
    Bytes curve_pk = ed_pk_to_curve(embedded);
    Bytes epk(ct.payload.begin(), ct.payload.begin() + crypto_box_PUBLICKEYBYTES);
    Bytes nonce = seal_nonce(epk, curve_pk);
    const auto* body = ct.payload.data() + crypto_box_PUBLICKEYBYTES;
    std::size_t body_len = ct.payload.size() - crypto_box_PUBLICKEYBYTES;
    Bytes out(body_len - crypto_box_MACBYTES);
    if (crypto_box_open_easy(out.empty() ? nullptr : out.data(), body, body_len,
                             nonce.data(), epk.data(), curve_sk.data()) != 0)
      raise(Errc::DecryptionFailure, "public-key decryption failed");
    return out;
  }

  Digest hash(const Bytes& obj) const override {
    return Digest{detail::generichash(obj, "", digest_length())};
  }

 private:
  static Bytes ed_pk_to_curve(const PublicKey& pk) {
    if (pk.bytes.size() != crypto_sign_PUBLICKEYBYTES)
      raise(Errc::DecryptionFailure, "bad public key length");
    Bytes curve(crypto_scalarmult_curve25519_BYTES);
    if (crypto_sign_ed25519_pk_to_curve25519(curve.data(), pk.bytes.data()) != 0)
      raise(Errc::DecryptionFailure, "public key conversion failed");
    return curve;
  }

  static Bytes seal_nonce(const Bytes& epk, const Bytes& rpk) {
    Bytes material = epk;
    material.insert(material.end(), rpk.begin(), rpk.end());
    return detail::generichash(material, "aggsim.nonce",
                               crypto_box_NONCEBYTES);
  }
};

/// Deterministic test provider. Structurally faithful (wrong keys and
/// tampered payloads fail detectably, roundtrips hold) but built from a
/// keyed hash only, so it is fast and NOT secure. Useful for large
/// randomized suites and golden traces.
class MockProvider final : public CryptoProvider {
 public:
  MockProvider() { ensure_sodium(); }

  std::string name() const override { return "mock"; }
  std::size_t digest_length() const override { return 32; }

  SymmetricKey gen_symmetric(Rng& rng) const override {
    Bytes key = rng.bytes(32);
    return SymmetricKey{"sym:" + hex_encode(h(key, "kid", 8)), std::move(key)};
  }

  KeyPair gen_keypair(Rng& rng) const override {
    Bytes sk = rng.bytes(32);
    Bytes pk = h(sk, "pk");
    KeyPair pair;
    pair.iota = detail::key_identifier(pk);
    pair.pub = PublicKey{std::move(pk)};
    pair.sec = SecretKey{std::move(sk)};
    return pair;
  }

  std::string wallet_address(const PublicKey& pk) const override {
    return hex_encode(detail::generichash(pk.bytes, "aggsim.addr", 20));
  }

  Ciphertext sign_recover(const Bytes& obj, const SecretKey& sk) const override {
    Bytes pk = h(sk.bytes, "pk");
    Bytes tagged = pk;
    tagged.insert(tagged.end(), obj.begin(), obj.end());
    Bytes tag = h(tagged, "sig");
    Bytes payload = std::move(tag);
    payload.insert(payload.end(), obj.begin(), obj.end());
    return Ciphertext{Scheme::PrivateKeyTransform, std::move(payload)};
  }

  Bytes verify_recover(const Ciphertext& sig, const PublicKey& pk) const override {
    if (sig.scheme != Scheme::PrivateKeyTransform)
      raise(Errc::RecoveryFailure, "ciphertext is not a signature envelope");
    if (sig.payload.size() < 32)
      raise(Errc::RecoveryFailure, "signature envelope too short");
    Bytes obj(sig.payload.begin() + 32, sig.payload.end());
    Bytes tagged = pk.bytes;
    tagged.insert(tagged.end(), obj.begin(), obj.end());
    Bytes expect = h(tagged, "sig");
    if (sodium_memcmp(expect.data(), sig.payload.data(), 32) != 0)
      raise(Errc::RecoveryFailure, "signature verification failed");
    return obj;
  }

  Ciphertext encrypt(const Bytes& obj, const SymmetricKey& key, Rng& rng) const override {
    return Ciphertext{Scheme::Symmetric,
                      seal(obj, key.key_bytes, rng.bytes(16))};
  }

  Ciphertext encrypt(const Bytes& obj, const PublicKey& pk, Rng& rng) const override {
    Bytes salt = rng.bytes(16);
    Bytes kek = wrap_key(pk.bytes, salt);
    Bytes payload = salt;
    Bytes inner = seal(obj, kek, rng.bytes(16));
    payload.insert(payload.end(), inner.begin(), inner.end());
    return Ciphertext{Scheme::PublicKey, std::move(payload)};
  }

  Bytes decrypt(const Ciphertext& ct, const SymmetricKey& key) const override {
    if (ct.scheme != Scheme::Symmetric)
      raise(Errc::DecryptionFailure, "scheme mismatch: expected symmetric");
    return open(ct.payload, key.key_bytes);
  }

  Bytes decrypt(const Ciphertext& ct, const SecretKey& sk) const override {
    if (ct.scheme != Scheme::PublicKey)
      raise(Errc::DecryptionFailure, "scheme mismatch: expected public-key");
    if (ct.payload.size() < 16)
      raise(Errc::DecryptionFailure, "ciphertext too short");
    Bytes salt(ct.payload.begin(), ct.payload.begin() + 16);
    Bytes kek = wrap_key(h(sk.bytes, "pk"), salt);
    return open(Bytes(ct.payload.begin() + 16, ct.payload.end()), kek);
  }

  Digest hash(const Bytes& obj) const override {
    return Digest{h(obj, "hash", digest_length())};
  }

 private:
  static Bytes h(const Bytes& data, std::string_view label,
                 std::size_t len = 32) {
    return detail::generichash(data, std::string("aggsim.mock.") +
                                         std::string(label), len);
  }

  static Bytes wrap_key(const Bytes& pk, const Bytes& salt) {
    Bytes material = pk;
    material.insert(material.end(), salt.begin(), salt.end());
    return h(material, "kek");
  }

  // nonce(16) || mac(32) || xor-stream body
  static Bytes seal(const Bytes& obj, const Bytes& key, Bytes nonce) {
    Bytes body = obj;
    xor_stream(body, key, nonce);
    Bytes mac = mac_of(key, nonce, body);
    Bytes out = std::move(nonce);
    out.insert(out.end(), mac.begin(), mac.end());
    out.insert(out.end(), body.begin(), body.end());
    return out;
  }

  static Bytes open(const Bytes& payload, const Bytes& key) {
    if (payload.size() < 48)
      raise(Errc::DecryptionFailure, "ciphertext too short");
    Bytes nonce(payload.begin(), payload.begin() + 16);
    Bytes mac(payload.begin() + 16, payload.begin() + 48);
    Bytes body(payload.begin() + 48, payload.end());
    Bytes expect = mac_of(key, nonce, body);
    if (sodium_memcmp(expect.data(), mac.data(), 32) != 0)
      raise(Errc::DecryptionFailure, "authentication failed");
    xor_stream(body, key, nonce);
    return body;
  }

  static Bytes mac_of(const Bytes& key, const Bytes& nonce, const Bytes& body) {
    Bytes material = key;
    material.insert(material.end(), nonce.begin(), nonce.end());
    material.insert(material.end(), body.begin(), body.end());
    return h(material, "mac");
  }

  static void xor_stream(Bytes& body, const Bytes& key, const Bytes& nonce) {
    Bytes block;
    Bytes counter_material = key;
    counter_material.insert(counter_material.end(), nonce.begin(), nonce.end());
    counter_material.resize(counter_material.size() + 8, 0);
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (i % 32 == 0) {
        std::uint64_t ctr = i / 32;
        std::memcpy(counter_material.data() + counter_material.size() - 8,
                    &ctr, 8);
        block = h(counter_material, "stream");
      }
      body[i] ^= block[i % 32];
    }
  }
};

inline std::unique_ptr<CryptoProvider> make_provider(const std::string& name) {
  if (name == "sodium" || name == "real")
    return std::make_unique<SodiumProvider>();
  if (name == "mock" || name == "deterministic")
    return std::make_unique<MockProvider>();
  raise(Errc::ConfigError, "unknown crypto provider '" + name + "'");
}

}  // namespace aggsim
