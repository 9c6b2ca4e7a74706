#include "kw/rational.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kw {

Rational Rational::make(std::int64_t num, std::int64_t den) {
  if (den == 0) throw std::invalid_argument("rational with zero denominator");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
  return Rational{num / g, den / g};
}

namespace {
std::int64_t parse_int(std::string_view s, std::string_view whole) {
  if (s.empty()) throw std::invalid_argument("malformed rational: '" + std::string(whole) + "'");
  std::int64_t v = 0;
  for (char ch : s) {
    if (ch < '0' || ch > '9') throw std::invalid_argument("malformed rational: '" + std::string(whole) + "'");
    v = v * 10 + (ch - '0');
    if (v > (std::int64_t(1) << 40)) throw std::invalid_argument("rational out of range: '" + std::string(whole) + "'");
  }
  return v;
}
}  // namespace

Rational Rational::parse(std::string_view text) {
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
  };
  const std::string_view t = trim(text);
  if (auto slash = t.find('/'); slash != std::string_view::npos)
    return make(parse_int(trim(t.substr(0, slash)), text), parse_int(trim(t.substr(slash + 1)), text));
  if (auto dot = t.find('.'); dot != std::string_view::npos) {
    const std::string_view frac = t.substr(dot + 1);
    if (frac.size() > 9) throw std::invalid_argument("too many decimals in rational: '" + std::string(text) + "'");
    std::int64_t den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
    const std::int64_t ip = dot == 0 ? 0 : parse_int(t.substr(0, dot), text);
    const std::int64_t fp = frac.empty() ? 0 : parse_int(frac, text);
    return make(ip * den + fp, den);
  }
  return make(parse_int(t, text), 1);
}

Rational Rational::from_double(double value) {
  if (!std::isfinite(value) || value < 0) throw std::invalid_argument("budget must be a finite non-negative number");
  // continued fraction expansion
  std::int64_t p0 = 0, q0 = 1, p1 = 1, q1 = 0;
  double x = value;
  for (int iter = 0; iter < 64; ++iter) {
    const double a = std::floor(x);
    if (a > 1e12) break;
    const auto ai = std::int64_t(a);
    const std::int64_t p2 = ai * p1 + p0, q2 = ai * q1 + q0;
    if (q2 > 1000000) break;
    p0 = p1;
    q0 = q1;
    p1 = p2;
    q1 = q2;
    const double rem = x - a;
    if (rem < 1e-12) break;
    x = 1.0 / rem;
  }
  return make(p1, q1);
}

std::string Rational::str() const {
  if (den == 1) return std::to_string(num);
  return std::to_string(num) + "/" + std::to_string(den);
}

std::int64_t Rational::scaled_round(std::int64_t count) const {
  // floor((2 * num * count + den) / (2 * den))
  const std::int64_t twice = 2 * num * count + den;
  return twice / (2 * den);
}

}  // namespace kw
