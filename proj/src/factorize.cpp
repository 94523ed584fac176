#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ntlab/corpus.hpp"

namespace ntlab {

std::string to_string(u128 n) {
  if (n == 0) return "0";
  std::string s;
  while (n > 0) {
    s.push_back(char('0' + int(n % 10)));
    n /= 10;
  }
  std::reverse(s.begin(), s.end());
  return s;
}

u128 parse_u128(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("empty integer");
  u128 n = 0;
  const u128 max = ~u128(0);
  for (char c : text) {
    if (c < '0' || c > '9') throw std::invalid_argument("not a decimal integer: " + std::string(text));
    const unsigned d = unsigned(c - '0');
    if (n > (max - d) / 10) throw std::invalid_argument("integer overflows 128 bits: " + std::string(text));
    n = n * 10 + d;
  }
  return n;
}

u128 Factorization::value() const {
  u128 v = 1;
  for (const auto& [p, a] : factors)
    for (unsigned i = 0; i < a; ++i) v *= p;
  return v;
}

std::vector<std::uint32_t> primes_up_to(std::uint64_t limit) {
  std::vector<std::uint32_t> primes;
  if (limit < 2) return primes;
  std::vector<bool> composite(limit + 1, false);
  for (std::uint64_t i = 2; i <= limit; ++i) {
    if (composite[i]) continue;
    primes.push_back(std::uint32_t(i));
    for (std::uint64_t j = i * i; j <= limit; j += i) composite[j] = true;
  }
  return primes;
}

SpfSieve::SpfSieve(std::uint32_t limit) : limit_(limit), spf_(std::size_t(limit) + 1, 0) {
  for (std::uint64_t i = 2; i <= limit; ++i) {
    if (spf_[i] == 0) {
      spf_[i] = std::uint32_t(i);
      primes_.push_back(std::uint32_t(i));
    }
    for (std::uint32_t p : primes_) {
      const std::uint64_t m = p * i;
      if (p > spf_[i] || m > limit) break;
      spf_[m] = p;
    }
  }
}

namespace {

constexpr u128 kTwo64 = u128(1) << 64;

u128 addmod(u128 a, u128 b, u128 m) { return a >= m - b ? a - (m - b) : a + b; }

u128 mulmod(u128 a, u128 b, u128 m) {
  a %= m;
  b %= m;
  if (m <= kTwo64) return (a * b) % m;  // both < 2^64, product fits
  u128 r = 0;
  while (b > 0) {
    if (b & 1) r = addmod(r, a, m);
    a = addmod(a, a, m);
    b >>= 1;
  }
  return r;
}

u128 powmod(u128 base, u128 e, u128 m) {
  u128 r = 1 % m;
  base %= m;
  while (e > 0) {
    if (e & 1) r = mulmod(r, base, m);
    base = mulmod(base, base, m);
    e >>= 1;
  }
  return r;
}

u128 gcd(u128 a, u128 b) {
  while (b != 0) {
    const u128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

u128 pollard_rho(u128 n) {
  if (n % 2 == 0) return 2;
  for (u128 c = 1;; ++c) {
    // Brent's variant with batched gcd.
    u128 y = 2, x = 2, ys = 2, q = 1, g = 1;
    const u128 batch = 128;
    u128 r = 1;
    auto f = [&](u128 v) { return addmod(mulmod(v, v, n), c, n); };
    do {
      x = y;
      for (u128 i = 0; i < r; ++i) y = f(y);
      u128 k = 0;
      do {
        ys = y;
        for (u128 i = 0; i < std::min(batch, r - k); ++i) {
          y = f(y);
          q = mulmod(q, x > y ? x - y : y - x, n);
        }
        g = gcd(q, n);
        k += batch;
      } while (k < r && g == 1);
      r *= 2;
    } while (g == 1);
    if (g == n) {
      do {
        ys = f(ys);
        g = gcd(x > ys ? x - ys : ys - x, n);
      } while (g == 1);
    }
    if (g != n) return g;
  }
}

void collect_prime_factors(u128 n, std::vector<u128>& out) {
  if (n == 1) return;
  if (is_probable_prime(n)) {
    out.push_back(n);
    return;
  }
  const u128 d = pollard_rho(n);
  collect_prime_factors(d, out);
  collect_prime_factors(n / d, out);
}

const SpfSieve& default_sieve() {
  static const SpfSieve sieve(1u << 20);
  return sieve;
}

}  // namespace

bool is_probable_prime(u128 n) {
  if (n < 2) return false;
  static constexpr unsigned kBases[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71};
  for (unsigned p : kBases) {
    if (n == p) return true;
    if (n % p == 0) return false;
  }
  u128 d = n - 1;
  unsigned s = 0;
  while ((d & 1) == 0) {
    d >>= 1;
    ++s;
  }
  // The first 13 bases are deterministic below 3.3e24; the rest make larger
  // inputs overwhelmingly unlikely to be misclassified.
  for (unsigned a : kBases) {
    u128 x = powmod(a, d, n);
    if (x == 1 || x == n - 1) continue;
    bool composite = true;
    for (unsigned r = 1; r < s; ++r) {
      x = mulmod(x, x, n);
      if (x == n - 1) {
        composite = false;
        break;
      }
    }
    if (composite) return false;
  }
  return true;
}

Factorization factorize(u128 n, const SpfSieve& sieve) {
  if (n < 2) throw std::domain_error("factorize: n must be >= 2, got " + to_string(n));
  Factorization f;
  auto push = [&f](u128 p) {
    if (!f.factors.empty() && f.factors.back().prime == p)
      ++f.factors.back().exponent;
    else
      f.factors.push_back({p, 1});
  };
  if (sieve.covers(n)) {
    auto m = std::uint32_t(n);
    while (m > 1) {
      const std::uint32_t p = sieve.smallest_factor(m);
      push(p);
      m /= p;
    }
    return f;
  }
  for (std::uint32_t p : sieve.primes()) {
    if (u128(p) * p > n) break;
    while (n % p == 0) {
      push(p);
      n /= p;
    }
  }
  if (n > 1) {
    std::vector<u128> rest;
    collect_prime_factors(n, rest);
    std::sort(rest.begin(), rest.end());
    for (u128 p : rest) push(p);
  }
  return f;
}

Factorization factorize(u128 n) { return factorize(n, default_sieve()); }

}  // namespace ntlab
