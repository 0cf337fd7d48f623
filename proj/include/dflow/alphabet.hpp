#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dflow/error.hpp"

namespace dflow {

// A categorical state in one dimension. Data tokens are 0..S-1; when the
// alphabet carries a mask symbol its code is S, so data arrays never reindex.
using Token = int;
using TokenSequence = std::vector<Token>;

// Evaluations involving rates or posteriors clamp time into
// [kTimeEps, 1 - kTimeEps]; the closed forms degenerate at the endpoints.
inline constexpr double kTimeEps = 1e-3;

inline double clamp_time(double t, double eps = kTimeEps) {
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::TimeDomain, "time outside [0, 1]");
  if (t < eps) return eps;
  if (t > 1.0 - eps) return 1.0 - eps;
  return t;
}

struct Alphabet {
  int size_S = 2;
  bool mask_enabled = false;

  Alphabet() = default;
  Alphabet(int s, bool mask) : size_S(s), mask_enabled(mask) {
    if (s < 2) fail(ErrorCode::InvalidAlphabet, "alphabet needs at least 2 data states");
  }

  int mask_code() const {
    if (!mask_enabled) fail(ErrorCode::InvalidAlphabet, "alphabet has no mask symbol");
    return size_S;
  }

  // Number of representable states: S data tokens plus the mask if enabled.
  int num_states() const { return size_S + (mask_enabled ? 1 : 0); }

  bool is_mask(Token tok) const { return mask_enabled && tok == size_S; }

  bool valid_token(Token tok) const { return tok >= 0 && tok < num_states(); }

  void check_token(Token tok) const {
    if (!valid_token(tok)) {
      fail(ErrorCode::InvalidAlphabet,
           "token " + std::to_string(tok) + " outside alphabet of " +
               std::to_string(num_states()) + " states");
    }
  }

  void check_sequence(const TokenSequence& seq, bool allow_mask = true) const {
    if (seq.empty()) fail(ErrorCode::BadInput, "empty token sequence");
    for (Token tok : seq) {
      check_token(tok);
      if (!allow_mask && is_mask(tok))
        fail(ErrorCode::InvalidAlphabet, "mask token not allowed here");
    }
  }

  bool operator==(const Alphabet&) const = default;
};

// Mixed-radix index of a sequence over num_states symbols, dimension 0 most
// significant. Used by enumeration oracles and histogram code.
inline std::size_t encode_state(const TokenSequence& seq, int num_states) {
  std::size_t idx = 0;
  for (Token tok : seq) idx = idx * static_cast<std::size_t>(num_states) + static_cast<std::size_t>(tok);
  return idx;
}

inline TokenSequence decode_state(std::size_t idx, int dims, int num_states) {
  TokenSequence seq(static_cast<std::size_t>(dims));
  for (int d = dims - 1; d >= 0; --d) {
    seq[static_cast<std::size_t>(d)] = static_cast<Token>(idx % static_cast<std::size_t>(num_states));
    idx /= static_cast<std::size_t>(num_states);
  }
  return seq;
}

inline std::size_t state_space_size(int dims, int num_states) {
  std::size_t n = 1;
  for (int d = 0; d < dims; ++d) {
    if (n > (static_cast<std::size_t>(1) << 60) / static_cast<std::size_t>(num_states))
      fail(ErrorCode::Capacity, "state space too large to index");
    n *= static_cast<std::size_t>(num_states);
  }
  return n;
}

}  // namespace dflow
