#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace kw {

// Positive-or-zero rational kept in lowest terms; used for the budget factor b.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational make(std::int64_t num, std::int64_t den);
  // Accepts "p/q", an integer, or a decimal literal such as "0.25".
  static Rational parse(std::string_view text);
  // Best approximation with denominator <= 1e6.
  static Rational from_double(double value);

  double to_double() const { return double(num) / double(den); }
  std::string str() const;

  // round-half-up of this * count, computed exactly.
  std::int64_t scaled_round(std::int64_t count) const;

  friend bool operator==(const Rational&, const Rational&) = default;
};

}  // namespace kw
