#pragma once

#include <compare>
#include <cstdint>
#include <initializer_list>
#include <set>
#include <string>
#include <vector>

namespace qkdnet::seclevel {

/// Base security level. Ordering is meaningful: ITS is stronger than MC.
enum class Base : std::uint8_t { MC = 0, ITS = 1 };

std::string to_string(Base b);
Base base_from_string(const std::string& s);

/// One atom of the label algebra: a base level minus a set of side channels.
/// Side-channel tags are opaque; they are only compared for equality.
struct SecurityLabel {
  Base base = Base::MC;
  std::set<std::string> side_channels;

  SecurityLabel() = default;
  SecurityLabel(Base b, std::set<std::string> sc);

  // X dominates Y iff X.base >= Y.base and X.side_channels is a subset of
  // Y.side_channels.
  bool dominates(const SecurityLabel& other) const;

  std::string to_string() const;

  auto operator<=>(const SecurityLabel&) const = default;
  bool operator==(const SecurityLabel&) const = default;
};

/// A union of atoms, always held in normal form: at most one atom per base
/// (same-base atoms merge by intersecting their side channels) and no atom
/// dominated by another.
class SecurityExpr {
 public:
  explicit SecurityExpr(SecurityLabel atom);
  static SecurityExpr from_atoms(std::vector<SecurityLabel> atoms);

  const std::vector<SecurityLabel>& atoms() const { return atoms_; }

  // Every atom of `other` is dominated by some atom of this expression.
  bool dominates(const SecurityExpr& other) const;

  std::string to_string() const;

  bool operator==(const SecurityExpr&) const = default;

 private:
  SecurityExpr() = default;
  std::vector<SecurityLabel> atoms_;  // strongest first
};

std::vector<SecurityLabel> normalize(std::vector<SecurityLabel> atoms);

/// Parallel key generation: union of the individual levels.
SecurityExpr parallel(const SecurityExpr& a, const SecurityExpr& b);

/// Serial key generation: intersection of the individual levels. For unions
/// the intersection is distributed over all atom pairs; this extends the
/// single-atom rule and is not covered by the two-row table it generalizes.
SecurityExpr serial(const SecurityExpr& a, const SecurityExpr& b);

/// Authenticating a QKD link with a PQC signature caps it at MC.
SecurityLabel label_with_pqc_auth(const SecurityLabel& qkd_label);

}  // namespace qkdnet::seclevel
