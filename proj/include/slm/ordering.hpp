#pragma once

// Spiral generation orderings.
//
// A sentence of T tokens is extended with [EOL] at position 0 and [EOR] at
// position T+1. An ordering is a permutation of {0, ..., T+1} whose every
// prefix is a contiguous interval: generation starts anywhere and grows the
// current segment one neighbour at a time, left or right, until both end
// markers are placed.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "slm/random.hpp"
#include "slm/tokens.hpp"

namespace slm {

enum class Direction : std::uint8_t { Left, Right };

// "-" for Left, "+" for Right.
char direction_symbol(Direction d);
Direction parse_direction(char symbol);

inline Direction opposite(Direction d) {
  return d == Direction::Left ? Direction::Right : Direction::Left;
}

// Immutable, always-valid ordering over extended positions.
class SpiralOrdering {
 public:
  // Throws PreconditionError unless is_valid_ordering(positions, length).
  SpiralOrdering(std::vector<int> positions, int length);

  int length() const { return length_; }
  std::size_t size() const { return positions_.size(); }
  std::span<const int> positions() const { return positions_; }
  int operator[](std::size_t i) const { return positions_[i]; }

  bool operator==(const SpiralOrdering&) const = default;
  auto operator<=>(const SpiralOrdering&) const = default;

 private:
  std::vector<int> positions_;
  int length_ = 0;
};

bool is_valid_ordering(std::span<const int> z, int length);

SpiralOrdering l2r_ordering(int length);
SpiralOrdering r2l_ordering(int length);

inline constexpr int kMaxEnumerationLength = 10;
inline constexpr int kMaxCountLength = 62;

// All valid orderings in lexicographic order. Throws SizeLimitError when
// length > kMaxEnumerationLength.
std::vector<SpiralOrdering> enumerate_orderings(int length);

// Exact number of valid orderings, 2^(length+1).
std::uint64_t count_orderings(int length);

// Decodes T+1 end-removal choices into an ordering. Starting from the
// interval [0, T+1], each choice removes the named end; the survivor is
// appended and the removal list reversed. This is a bijection between
// {Left, Right}^(T+1) and the valid orderings.
SpiralOrdering ordering_from_removal_bits(int length,
                                          std::span<const Direction> bits);

SpiralOrdering sample_uniform_ordering(int length, Rng& rng);

// Inclusive range of extended positions that must be generated first, in
// left-to-right order.
struct PositionSpan {
  int first = 0;
  int last = 0;
};

// Starts with the span, then draws uniformly among its valid completions.
SpiralOrdering sample_constrained_ordering(int length, PositionSpan span,
                                           Rng& rng);

// Maps i -> T+1-i.
SpiralOrdering mirror(const SpiralOrdering& z);

struct DirectedToken {
  TokenId token = kPadId;
  // Side on which the next element attaches.
  Direction direction = Direction::Right;

  bool operator==(const DirectedToken&) const = default;
};

// The <token, next-direction> rewrite of a sentence under an ordering.
class ReformedSequence {
 public:
  ReformedSequence() = default;
  explicit ReformedSequence(std::vector<DirectedToken> elements)
      : elements_(std::move(elements)) {}

  std::span<const DirectedToken> elements() const { return elements_; }
  std::size_t size() const { return elements_.size(); }
  const DirectedToken& operator[](std::size_t i) const { return elements_[i]; }

  bool operator==(const ReformedSequence&) const = default;

 private:
  std::vector<DirectedToken> elements_;
};

ReformedSequence reform(std::span<const TokenId> tokens,
                        const SpiralOrdering& z);

struct RestoredSentence {
  std::vector<TokenId> tokens;
  SpiralOrdering ordering;
};

// Inverse of reform. Throws MalformedSequenceError when an element attaches
// beyond an already placed end marker, an end marker arrives on the wrong
// side, or either end marker is missing or repeated.
RestoredSentence restore(std::span<const DirectedToken> elements);
inline RestoredSentence restore(const ReformedSequence& x) {
  return restore(x.elements());
}

// Trace text: space-separated "token/dir" items with the final item printed
// without a direction, e.g. "b/+ c/+ [EOR]/- a/- [EOL]".
using TokenNamer = std::function<std::string(TokenId)>;
using TokenLookup = std::function<TokenId(std::string_view)>;

std::string format_trace(std::span<const DirectedToken> elements,
                         const TokenNamer& name_of);
inline std::string format_trace(const ReformedSequence& x,
                                const TokenNamer& name_of) {
  return format_trace(x.elements(), name_of);
}

// The final item may carry a direction or not; either way the parsed element
// gets Right, the serialization convention.
ReformedSequence parse_trace(std::string_view text, const TokenLookup& id_of);

}  // namespace slm
