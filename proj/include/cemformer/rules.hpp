#pragma once

// Contradicting-scenario rules.
//
// A rule pairs a maneuver with a ternary context pattern over {0, 1, *}. A
// prediction of that maneuver is contradicted whenever the sample's binary
// context matches the pattern. Rule files are line oriented:
//
//   # comment
//   left_lane_change : 1**
//
// Blank lines and text after '#' are ignored.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cem::rules {

/// go_straight, left_lane_change, left_turn, right_lane_change, right_turn
const std::vector<std::string>& default_maneuvers();

/// Bit order: leftmost_lane, rightmost_lane, near_intersection.
constexpr std::size_t kDefaultContextDim = 3;

struct ContextVector {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  /// "011" style rendering.
  std::string str() const;
  static ContextVector from_string(std::string_view s);
  bool operator==(const ContextVector&) const = default;
};

struct ContextPattern {
  std::string symbols;

  std::size_t size() const { return symbols.size(); }
  bool operator==(const ContextPattern&) const = default;
};

struct ScenarioRule {
  std::size_t maneuver = 0;
  ContextPattern pattern;
  bool operator==(const ScenarioRule&) const = default;
};

struct ScenarioSet {
  std::vector<std::string> class_names;
  std::size_t context_dim = kDefaultContextDim;
  std::vector<ScenarioRule> rules;

  bool empty() const { return rules.empty(); }
  std::size_t size() const { return rules.size(); }
  bool operator==(const ScenarioSet&) const = default;
};

/// The six rules listed for the in-cabin/road dataset.
ScenarioSet default_ruleset();

/// Order-preserving parse. Throws ParseError on unknown maneuver, wrong
/// pattern length, illegal symbol, malformed line or duplicate rule.
ScenarioSet parse_rules(std::string_view text, const std::vector<std::string>& class_names,
                        std::size_t context_dim = kDefaultContextDim);

ScenarioSet load_rules(const std::string& path, const std::vector<std::string>& class_names,
                       std::size_t context_dim = kDefaultContextDim);

/// Canonical text form; parse_rules(serialize(s)) == s.
std::string serialize(const ScenarioSet& set);

/// True iff every non-wildcard symbol equals the corresponding bit.
/// Throws ContractError on length mismatch.
bool matches(const ContextPattern& pattern, const ContextVector& c);

/// True iff some rule for `maneuver` matches c.
bool contradicts(const ScenarioSet& set, std::size_t maneuver, const ContextVector& c);

/// All 2^d contexts in binary counting order, first bit most significant.
std::vector<ContextVector> all_contexts(std::size_t d);

struct ClassCoverage {
  std::size_t maneuver = 0;
  std::vector<ContextVector> contradicted;
  bool unsatisfiable = false;
};

struct RulesetReport {
  std::vector<std::string> problems;
  /// One entry per class referenced by at least one rule.
  std::vector<ClassCoverage> classes;

  bool ok() const { return problems.empty(); }
  bool any_unsatisfiable() const;
};

/// Report-only validation: rule class range, pattern length and symbols, and
/// per-class contradicted contexts by enumeration of all 2^d contexts.
RulesetReport validate_ruleset(const ScenarioSet& set, const std::vector<std::string>& class_names,
                               std::size_t context_dim);

}  // namespace cem::rules
