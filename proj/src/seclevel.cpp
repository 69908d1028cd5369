#include "qkdnet/seclevel.hpp"

#include <algorithm>
#include <iterator>
#include <map>

#include "qkdnet/errors.hpp"

namespace qkdnet::seclevel {

std::string to_string(Base b) { return b == Base::ITS ? "ITS" : "MC"; }

Base base_from_string(const std::string& s) {
  if (s == "ITS") return Base::ITS;
  if (s == "MC") return Base::MC;
  throw ValidationError("base", "expected ITS or MC, got '" + s + "'");
}

SecurityLabel::SecurityLabel(Base b, std::set<std::string> sc)
    : base(b), side_channels(std::move(sc)) {
  for (const auto& tag : side_channels)
    if (tag.empty()) throw ValidationError("side_channels", "empty tag");
}

bool SecurityLabel::dominates(const SecurityLabel& other) const {
  return base >= other.base &&
         std::includes(other.side_channels.begin(), other.side_channels.end(),
                       side_channels.begin(), side_channels.end());
}

std::string SecurityLabel::to_string() const {
  std::string out = seclevel::to_string(base) + " \\ {";
  bool first = true;
  for (const auto& t : side_channels) {
    if (!first) out += ", ";
    out += t;
    first = false;
  }
  return out + "}";
}

std::vector<SecurityLabel> normalize(std::vector<SecurityLabel> atoms) {
  if (atoms.empty()) throw ValidationError("atoms", "expression needs at least one atom");
  // (B \ X) u (B \ Y) = B \ (X n Y)
  std::map<Base, std::set<std::string>> merged;
  for (auto& a : atoms) {
    auto [it, fresh] = merged.try_emplace(a.base, a.side_channels);
    if (!fresh) {
      std::set<std::string> common;
      std::set_intersection(it->second.begin(), it->second.end(), a.side_channels.begin(),
                            a.side_channels.end(), std::inserter(common, common.end()));
      it->second = std::move(common);
    }
  }
  // Against a bounded adversary the MC atom only adds what the ITS atom lacks,
  // so its side channels reduce to those shared with the ITS atom. This keeps
  // the normal form unique.
  auto its = merged.find(Base::ITS);
  auto mc = merged.find(Base::MC);
  if (its != merged.end() && mc != merged.end()) {
    std::set<std::string> common;
    std::set_intersection(its->second.begin(), its->second.end(), mc->second.begin(),
                          mc->second.end(), std::inserter(common, common.end()));
    if (common == its->second)
      merged.erase(mc);
    else
      mc->second = std::move(common);
  }
  std::vector<SecurityLabel> out;
  for (auto it = merged.rbegin(); it != merged.rend(); ++it) out.emplace_back(it->first, it->second);
  return out;
}

SecurityExpr::SecurityExpr(SecurityLabel atom) : atoms_{std::move(atom)} {}

SecurityExpr SecurityExpr::from_atoms(std::vector<SecurityLabel> atoms) {
  SecurityExpr e;
  e.atoms_ = normalize(std::move(atoms));
  return e;
}

bool SecurityExpr::dominates(const SecurityExpr& other) const {
  return std::all_of(other.atoms_.begin(), other.atoms_.end(), [&](const SecurityLabel& y) {
    return std::any_of(atoms_.begin(), atoms_.end(),
                       [&](const SecurityLabel& x) { return x.dominates(y); });
  });
}

std::string SecurityExpr::to_string() const {
  if (atoms_.size() == 1) return atoms_.front().to_string();
  std::string out;
  for (std::size_t i = 0; i < atoms_.size(); ++i) {
    if (i) out += " ∪ ";
    out += "(" + atoms_[i].to_string() + ")";
  }
  return out;
}

SecurityExpr parallel(const SecurityExpr& a, const SecurityExpr& b) {
  std::vector<SecurityLabel> atoms = a.atoms();
  atoms.insert(atoms.end(), b.atoms().begin(), b.atoms().end());
  return SecurityExpr::from_atoms(std::move(atoms));
}

SecurityExpr serial(const SecurityExpr& a, const SecurityExpr& b) {
  std::vector<SecurityLabel> atoms;
  for (const auto& x : a.atoms()) {
    for (const auto& y : b.atoms()) {
      std::set<std::string> sc = x.side_channels;
      sc.insert(y.side_channels.begin(), y.side_channels.end());
      atoms.emplace_back(std::min(x.base, y.base), std::move(sc));
    }
  }
  return SecurityExpr::from_atoms(std::move(atoms));
}

SecurityLabel label_with_pqc_auth(const SecurityLabel& qkd_label) {
  return {Base::MC, qkd_label.side_channels};
}

}  // namespace qkdnet::seclevel
