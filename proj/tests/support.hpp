#pragma once

#include <cmath>
#include <string>

#include "qkdnet/core.hpp"
#include "qkdnet/crypto.hpp"
#include "qkdnet/kms.hpp"
#include "qkdnet/netsim.hpp"

namespace qkdnet::test {

inline NodeId node(const std::string& domain, const std::string& name) { return {domain, name}; }

inline seclevel::SecurityExpr its(std::set<std::string> sc = {}) {
  return seclevel::SecurityExpr(seclevel::SecurityLabel(seclevel::Base::ITS, std::move(sc)));
}
inline seclevel::SecurityExpr mc(std::set<std::string> sc = {}) {
  return seclevel::SecurityExpr(seclevel::SecurityLabel(seclevel::Base::MC, std::move(sc)));
}

inline KeyEntry make_entry(RandomSource& rng, const NodeId& peer, const std::string& supplier,
                           std::size_t len = 32, std::int64_t start = netsim::kEpochSeconds,
                           std::int64_t end = netsim::kEpochSeconds + 86400) {
  return KeyEntry{KeyId::random(rng), KeyMaterial::random(rng, len), peer, supplier,
                  {start, end}, its()};
}

// Wilson-Hilferty normal approximation of the chi-square upper tail; an
// oracle independent of the library implementation.
inline double wilson_hilferty_p(double stat, double dof) {
  const double z = (std::cbrt(stat / dof) - (1.0 - 2.0 / (9.0 * dof))) / std::sqrt(2.0 / (9.0 * dof));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

// Pearson statistic computed directly from raw bytes.
inline double pearson_uniform(ByteView data) {
  double counts[256] = {};
  for (auto b : data) counts[b] += 1;
  const double e = static_cast<double>(data.size()) / 256.0;
  double s = 0;
  for (double c : counts) s += (c - e) * (c - e) / e;
  return s;
}

}  // namespace qkdnet::test
