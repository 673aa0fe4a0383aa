#include "slm/ordering.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

#include "slm/error.hpp"

namespace slm {

char direction_symbol(Direction d) { return d == Direction::Left ? '-' : '+'; }

Direction parse_direction(char symbol) {
  switch (symbol) {
    case '-':
      return Direction::Left;
    case '+':
      return Direction::Right;
    default:
      throw MalformedSequenceError(std::string("unknown direction symbol '") +
                                   symbol + "'");
  }
}

bool is_valid_ordering(std::span<const int> z, int length) {
  if (length < 0 || z.size() != static_cast<std::size_t>(length) + 2) {
    return false;
  }
  const int last = length + 1;
  if (z[0] < 0 || z[0] > last) return false;
  int lo = z[0];
  int hi = z[0];
  for (std::size_t i = 1; i < z.size(); ++i) {
    if (z[i] == lo - 1) {
      lo = z[i];
    } else if (z[i] == hi + 1) {
      hi = z[i];
    } else {
      return false;
    }
  }
  return lo == 0 && hi == last;
}

SpiralOrdering::SpiralOrdering(std::vector<int> positions, int length)
    : positions_(std::move(positions)), length_(length) {
  if (!is_valid_ordering(positions_, length_)) {
    throw PreconditionError("not a valid spiral ordering for length " +
                            std::to_string(length_));
  }
}

SpiralOrdering l2r_ordering(int length) {
  if (length < 0) throw PreconditionError("negative sentence length");
  std::vector<int> z(static_cast<std::size_t>(length) + 2);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<int>(i);
  return SpiralOrdering(std::move(z), length);
}

SpiralOrdering r2l_ordering(int length) {
  if (length < 0) throw PreconditionError("negative sentence length");
  std::vector<int> z(static_cast<std::size_t>(length) + 2);
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = length + 1 - static_cast<int>(i);
  }
  return SpiralOrdering(std::move(z), length);
}

namespace {

void extend_all(int length, int lo, int hi, std::vector<int>& prefix,
                std::vector<SpiralOrdering>& out) {
  if (lo == 0 && hi == length + 1) {
    out.emplace_back(prefix, length);
    return;
  }
  if (lo > 0) {
    prefix.push_back(lo - 1);
    extend_all(length, lo - 1, hi, prefix, out);
    prefix.pop_back();
  }
  if (hi < length + 1) {
    prefix.push_back(hi + 1);
    extend_all(length, lo, hi + 1, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace

std::vector<SpiralOrdering> enumerate_orderings(int length) {
  if (length < 0) throw PreconditionError("negative sentence length");
  if (length > kMaxEnumerationLength) {
    throw SizeLimitError("enumeration limited to length " +
                         std::to_string(kMaxEnumerationLength) + ", got " +
                         std::to_string(length));
  }
  std::vector<SpiralOrdering> out;
  out.reserve(std::size_t{1} << (length + 1));
  std::vector<int> prefix;
  for (int start = 0; start <= length + 1; ++start) {
    prefix.assign(1, start);
    extend_all(length, start, start, prefix, out);
  }
  return out;
}

std::uint64_t count_orderings(int length) {
  if (length < 0) throw PreconditionError("negative sentence length");
  if (length > kMaxCountLength) {
    throw SizeLimitError("ordering count overflows 64 bits for length " +
                         std::to_string(length));
  }
  return std::uint64_t{1} << (length + 1);
}

SpiralOrdering ordering_from_removal_bits(int length,
                                          std::span<const Direction> bits) {
  if (length < 0) throw PreconditionError("negative sentence length");
  if (bits.size() != static_cast<std::size_t>(length) + 1) {
    throw PreconditionError("expected length+1 removal choices");
  }
  int lo = 0;
  int hi = length + 1;
  std::vector<int> removed;
  removed.reserve(bits.size() + 1);
  for (Direction bit : bits) {
    if (bit == Direction::Left) {
      removed.push_back(lo++);
    } else {
      removed.push_back(hi--);
    }
  }
  removed.push_back(lo);
  std::reverse(removed.begin(), removed.end());
  return SpiralOrdering(std::move(removed), length);
}

SpiralOrdering sample_uniform_ordering(int length, Rng& rng) {
  if (length < 0) throw PreconditionError("negative sentence length");
  std::vector<Direction> bits(static_cast<std::size_t>(length) + 1);
  for (auto& b : bits) b = fair_bit(rng) ? Direction::Right : Direction::Left;
  return ordering_from_removal_bits(length, bits);
}

SpiralOrdering sample_constrained_ordering(int length, PositionSpan span,
                                           Rng& rng) {
  if (length < 0) throw PreconditionError("negative sentence length");
  if (span.first < 0 || span.last > length + 1 || span.first > span.last) {
    throw PreconditionError("start span [" + std::to_string(span.first) +
                            ", " + std::to_string(span.last) +
                            "] outside extended positions of length " +
                            std::to_string(length));
  }
  std::vector<int> z;
  z.reserve(static_cast<std::size_t>(length) + 2);
  for (int p = span.first; p <= span.last; ++p) z.push_back(p);

  // Every completion interleaves the remaining left and right positions;
  // drawing each next side with probability proportional to what is left on
  // it is uniform over interleavings.
  int lo = span.first;
  int hi = span.last;
  std::uint64_t left = static_cast<std::uint64_t>(span.first);
  std::uint64_t right = static_cast<std::uint64_t>(length + 1 - span.last);
  while (left + right > 0) {
    if (uniform_below(rng, left + right) < left) {
      z.push_back(--lo);
      --left;
    } else {
      z.push_back(++hi);
      --right;
    }
  }
  return SpiralOrdering(std::move(z), length);
}

SpiralOrdering mirror(const SpiralOrdering& z) {
  std::vector<int> out(z.positions().begin(), z.positions().end());
  for (int& p : out) p = z.length() + 1 - p;
  return SpiralOrdering(std::move(out), z.length());
}

ReformedSequence reform(std::span<const TokenId> tokens,
                        const SpiralOrdering& z) {
  const int length = static_cast<int>(tokens.size());
  if (z.length() != length) {
    throw PreconditionError("ordering length " + std::to_string(z.length()) +
                            " does not match sentence length " +
                            std::to_string(length));
  }
  auto token_at = [&](int p) -> TokenId {
    if (p == 0) return kEolId;
    if (p == length + 1) return kEorId;
    return tokens[static_cast<std::size_t>(p - 1)];
  };
  std::vector<DirectedToken> out;
  out.reserve(z.size());
  int lo = z[0];
  for (std::size_t i = 0; i < z.size(); ++i) {
    Direction d = Direction::Right;
    if (i + 1 < z.size() && z[i + 1] < lo) d = Direction::Left;
    if (i + 1 < z.size()) lo = std::min(lo, z[i + 1]);
    out.push_back({token_at(z[i]), d});
  }
  return ReformedSequence(std::move(out));
}

RestoredSentence restore(std::span<const DirectedToken> elements) {
  if (elements.size() < 2) {
    throw MalformedSequenceError("reformed sequence needs at least [EOL] and "
                                 "[EOR]");
  }
  std::deque<TokenId> segment;
  std::vector<int> offsets;  // relative slot of each element
  offsets.reserve(elements.size());
  bool eol = false;
  bool eor = false;
  int lo = 0;
  int hi = 0;

  auto place = [&](TokenId t, bool first, Direction side) {
    if (t == kPadId) throw MalformedSequenceError("padding inside trace");
    if (t == kEolId) {
      if (eol) throw MalformedSequenceError("[EOL] appears twice");
      if (!first && side != Direction::Left) {
        throw MalformedSequenceError("[EOL] attached on the right");
      }
      eol = true;
    } else if (t == kEorId) {
      if (eor) throw MalformedSequenceError("[EOR] appears twice");
      if (!first && side != Direction::Right) {
        throw MalformedSequenceError("[EOR] attached on the left");
      }
      eor = true;
    }
  };

  place(elements[0].token, true, Direction::Right);
  segment.push_back(elements[0].token);
  offsets.push_back(0);
  for (std::size_t i = 1; i < elements.size(); ++i) {
    const Direction side = elements[i - 1].direction;
    const TokenId t = elements[i].token;
    if (side == Direction::Left && eol) {
      throw MalformedSequenceError("element " + std::to_string(i) +
                                   " attaches left of [EOL]");
    }
    if (side == Direction::Right && eor) {
      throw MalformedSequenceError("element " + std::to_string(i) +
                                   " attaches right of [EOR]");
    }
    place(t, false, side);
    if (side == Direction::Left) {
      segment.push_front(t);
      offsets.push_back(--lo);
    } else {
      segment.push_back(t);
      offsets.push_back(++hi);
    }
  }
  if (!eol || !eor) {
    throw MalformedSequenceError(std::string("missing ") +
                                 (!eol ? "[EOL]" : "[EOR]"));
  }
  std::vector<TokenId> tokens(segment.begin() + 1, segment.end() - 1);
  std::vector<int> z(offsets.size());
  std::transform(offsets.begin(), offsets.end(), z.begin(),
                 [lo](int o) { return o - lo; });
  const int length = static_cast<int>(tokens.size());
  return {std::move(tokens), SpiralOrdering(std::move(z), length)};
}

std::string format_trace(std::span<const DirectedToken> elements,
                         const TokenNamer& name_of) {
  std::string out;
  for (std::size_t i = 0; i < elements.size(); ++i) {
    if (i > 0) out += ' ';
    out += name_of(elements[i].token);
    if (i + 1 < elements.size()) {
      out += '/';
      out += direction_symbol(elements[i].direction);
    }
  }
  return out;
}

ReformedSequence parse_trace(std::string_view text, const TokenLookup& id_of) {
  std::vector<std::string> items;
  std::istringstream in{std::string(text)};
  for (std::string item; in >> item;) items.push_back(std::move(item));
  if (items.empty()) throw MalformedSequenceError("empty trace");

  std::vector<DirectedToken> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string& item = items[i];
    const bool last = i + 1 == items.size();
    const auto slash = item.rfind('/');
    const bool has_dir = slash != std::string::npos && slash > 0 &&
                         slash + 2 == item.size() &&
                         (item.back() == '+' || item.back() == '-');
    if (!has_dir && !last) {
      throw MalformedSequenceError("trace item '" + item +
                                   "' lacks a direction");
    }
    const std::string_view token =
        has_dir ? std::string_view(item).substr(0, slash) : item;
    const Direction d = has_dir && !last ? parse_direction(item.back())
                                         : Direction::Right;
    out.push_back({id_of(token), d});
  }
  return ReformedSequence(std::move(out));
}

}  // namespace slm
