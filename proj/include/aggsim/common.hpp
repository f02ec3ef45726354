#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace aggsim {

using Bytes = std::vector<std::uint8_t>;

inline Bytes to_bytes(std::string_view s) {
  return Bytes(s.begin(), s.end());
}

inline std::string to_string(const Bytes& b) {
  return std::string(b.begin(), b.end());
}

inline std::string hex_encode(const Bytes& b) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(b.size() * 2);
  for (auto byte : b) {
    out.push_back(digits[byte >> 4]);
    out.push_back(digits[byte & 0x0f]);
  }
  return out;
}

inline std::optional<Bytes> hex_decode(std::string_view s) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (s.size() % 2 != 0) return std::nullopt;
  Bytes out;
  out.reserve(s.size() / 2);
  for (std::size_t i = 0; i < s.size(); i += 2) {
    int hi = nibble(s[i]), lo = nibble(s[i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    out.push_back(static_cast<std::uint8_t>((hi << 4) | lo));
  }
  return out;
}

inline std::string base64_encode(const Bytes& in) {
  static constexpr char tbl[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= in.size(); i += 3) {
    std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
  }
  if (i + 1 == in.size()) {
    std::uint32_t v = in[i] << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == in.size()) {
    std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::optional<Bytes> base64_decode(std::string_view s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (s.size() % 4 != 0) return std::nullopt;
  Bytes out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int pad = 0;
    std::uint32_t v = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      char c = s[i + j];
      if (c == '=') {
        if (i + 4 != s.size() || j < 2) return std::nullopt;
        ++pad;
        v <<= 6;
        continue;
      }
      if (pad > 0) return std::nullopt;
      int d = val(c);
      if (d < 0) return std::nullopt;
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    // Only canonical encodings: bits covered by padding must be zero,
    // otherwise distinct strings would decode to the same bytes.
    if ((pad == 1 && (v & 0xffu) != 0) || (pad == 2 && (v & 0xffffu) != 0))
      return std::nullopt;
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

/// Error codes shared across the library. Protocol verdicts reuse a subset
/// as stable reason strings.
enum class Errc {
  MalformedTransaction,
  LedgerRejection,
  DuplicateDid,
  UnknownDid,
  UnknownProperty,
  UnresolvableIssuer,
  UnresolvableDid,
  RecoveryFailure,
  DecryptionFailure,
  InvalidScatterDegree,
  MissingPartition,
  InsufficientLocations,
  UploadFailure,
  LocationUnreachable,
  WrongTransactionKind,
  SchemaViolation,
  UnknownFieldInPsi,
  InvalidSpecification,
  EndorsementRejected,
  StagingUnreachable,
  PortClosed,
  NonceMismatch,
  VerificationFailure,
  AllSourcesRejected,
  InvalidRequest,
  ConfigError,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::MalformedTransaction: return "MalformedTransaction";
    case Errc::LedgerRejection: return "LedgerRejection";
    case Errc::DuplicateDid: return "DuplicateDid";
    case Errc::UnknownDid: return "UnknownDid";
    case Errc::UnknownProperty: return "UnknownProperty";
    case Errc::UnresolvableIssuer: return "UnresolvableIssuer";
    case Errc::UnresolvableDid: return "UnresolvableDid";
    case Errc::RecoveryFailure: return "RecoveryFailure";
    case Errc::DecryptionFailure: return "DecryptionFailure";
    case Errc::InvalidScatterDegree: return "InvalidScatterDegree";
    case Errc::MissingPartition: return "MissingPartition";
    case Errc::InsufficientLocations: return "InsufficientLocations";
    case Errc::UploadFailure: return "UploadFailure";
    case Errc::LocationUnreachable: return "LocationUnreachable";
    case Errc::WrongTransactionKind: return "WrongTransactionKind";
    case Errc::SchemaViolation: return "SchemaViolation";
    case Errc::UnknownFieldInPsi: return "UnknownFieldInPsi";
    case Errc::InvalidSpecification: return "InvalidSpecification";
    case Errc::EndorsementRejected: return "EndorsementRejected";
    case Errc::StagingUnreachable: return "StagingUnreachable";
    case Errc::PortClosed: return "PortClosed";
    case Errc::NonceMismatch: return "NonceMismatch";
    case Errc::VerificationFailure: return "VerificationFailure";
    case Errc::AllSourcesRejected: return "AllSourcesRejected";
    case Errc::InvalidRequest: return "InvalidRequest";
    case Errc::ConfigError: return "ConfigError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) {
  throw Error(code, what);
}

/// Exact rational in (0,1), used for the consensus threshold so the
/// finalization inequality never goes through floating point.
struct Rational {
  std::int64_t num = 1;
  std::int64_t den = 2;

  constexpr bool valid() const { return den > 0 && num > 0 && num < den; }
};

/// Parses "2/3" style strings.
inline std::optional<Rational> parse_rational(std::string_view s) {
  auto slash = s.find('/');
  if (slash == std::string_view::npos) return std::nullopt;
  try {
    Rational r{std::stoll(std::string(s.substr(0, slash))),
               std::stoll(std::string(s.substr(slash + 1)))};
    if (!r.valid()) return std::nullopt;
    return r;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

/// Small deterministic generator (splitmix64). Every actor and the
/// scheduler own an independent stream derived from the scenario seed, so
/// interleaving never perturbs key material.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound) { return next() % bound; }

  void fill(Bytes& out) {
    for (std::size_t i = 0; i < out.size(); i += 8) {
      std::uint64_t v = next();
      for (std::size_t j = 0; j < 8 && i + j < out.size(); ++j)
        out[i + j] = static_cast<std::uint8_t>(v >> (8 * j));
    }
  }

  Bytes bytes(std::size_t n) {
    Bytes out(n);
    fill(out);
    return out;
  }

 private:
  std::uint64_t state_;
};

}  // namespace aggsim
