#include "cemformer/rules.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "cemformer/error.hpp"

namespace cem::rules {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

const std::vector<std::string>& default_maneuvers() {
  static const std::vector<std::string> names{"go_straight", "left_lane_change", "left_turn",
                                              "right_lane_change", "right_turn"};
  return names;
}

std::string ContextVector::str() const {
  std::string s;
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

ContextVector ContextVector::from_string(std::string_view s) {
  ContextVector c;
  for (char ch : s) {
    if (ch != '0' && ch != '1') throw ContractError("context bit must be 0 or 1, got '" + std::string(1, ch) + "'");
    c.bits.push_back(ch == '1' ? 1 : 0);
  }
  return c;
}

ScenarioSet default_ruleset() {
  static constexpr std::string_view kText =
      "left_lane_change : 1**\n"
      "right_lane_change : *1*\n"
      "left_turn : 01*\n"
      "right_turn : 10*\n"
      "left_turn : **0\n"
      "right_turn : **0\n";
  return parse_rules(kText, default_maneuvers(), kDefaultContextDim);
}

ScenarioSet parse_rules(std::string_view text, const std::vector<std::string>& class_names,
                        std::size_t context_dim) {
  ScenarioSet set{class_names, context_dim, {}};
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;

    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    const auto colon = line.find(':');
    if (colon == std::string_view::npos) throw ParseError(line_no, "expected '<maneuver> : <pattern>'");
    const auto name = trim(line.substr(0, colon));
    const auto pattern = trim(line.substr(colon + 1));

    const auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) throw ParseError(line_no, "unknown maneuver '" + std::string(name) + "'");
    if (pattern.size() != context_dim)
      throw ParseError(line_no, "pattern '" + std::string(pattern) + "' has length " +
                                    std::to_string(pattern.size()) + ", expected " +
                                    std::to_string(context_dim));
    for (char ch : pattern)
      if (ch != '0' && ch != '1' && ch != '*')
        throw ParseError(line_no, "illegal pattern symbol '" + std::string(1, ch) + "'");

    ScenarioRule rule{static_cast<std::size_t>(it - class_names.begin()), ContextPattern{std::string(pattern)}};
    if (std::find(set.rules.begin(), set.rules.end(), rule) != set.rules.end())
      throw ParseError(line_no, "duplicate rule '" + std::string(name) + " : " + std::string(pattern) + "'");
    set.rules.push_back(std::move(rule));
  }
  return set;
}

ScenarioSet load_rules(const std::string& path, const std::vector<std::string>& class_names,
                       std::size_t context_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, "cannot open rule file");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_rules(buf.str(), class_names, context_dim);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ": " + e.what());
  }
}

std::string serialize(const ScenarioSet& set) {
  std::string out;
  for (const auto& r : set.rules) out += set.class_names.at(r.maneuver) + " : " + r.pattern.symbols + "\n";
  return out;
}

bool matches(const ContextPattern& pattern, const ContextVector& c) {
  if (pattern.size() != c.size())
    throw ContractError("pattern '" + pattern.symbols + "' has length " + std::to_string(pattern.size()) +
                        " but context has " + std::to_string(c.size()) + " bits");
  for (std::size_t i = 0; i < c.size(); ++i) {
    const char s = pattern.symbols[i];
    if (s == '*') continue;
    if ((s == '1') != (c.bits[i] != 0)) return false;
  }
  return true;
}

bool contradicts(const ScenarioSet& set, std::size_t maneuver, const ContextVector& c) {
  return std::any_of(set.rules.begin(), set.rules.end(),
                     [&](const ScenarioRule& r) { return r.maneuver == maneuver && matches(r.pattern, c); });
}

std::vector<ContextVector> all_contexts(std::size_t d) {
  std::vector<ContextVector> out;
  const std::size_t n = std::size_t{1} << d;
  out.reserve(n);
  for (std::size_t v = 0; v < n; ++v) {
    ContextVector c;
    for (std::size_t i = 0; i < d; ++i) c.bits.push_back(static_cast<std::uint8_t>((v >> (d - 1 - i)) & 1u));
    out.push_back(std::move(c));
  }
  return out;
}

bool RulesetReport::any_unsatisfiable() const {
  return std::any_of(classes.begin(), classes.end(), [](const ClassCoverage& c) { return c.unsatisfiable; });
}

RulesetReport validate_ruleset(const ScenarioSet& set, const std::vector<std::string>& class_names,
                               std::size_t context_dim) {
  RulesetReport report;
  std::vector<const ScenarioRule*> valid;
  for (std::size_t i = 0; i < set.rules.size(); ++i) {
    const auto& r = set.rules[i];
    const std::string where = "rule " + std::to_string(i + 1) + ": ";
    if (r.maneuver >= class_names.size()) {
      report.problems.push_back(where + "class index " + std::to_string(r.maneuver) + " out of range");
      continue;
    }
    if (r.pattern.size() != context_dim) {
      report.problems.push_back(where + "pattern length " + std::to_string(r.pattern.size()) + ", expected " +
                                std::to_string(context_dim));
      continue;
    }
    if (r.pattern.symbols.find_first_not_of("01*") != std::string::npos) {
      report.problems.push_back(where + "illegal symbol in '" + r.pattern.symbols + "'");
      continue;
    }
    valid.push_back(&r);
  }

  const auto contexts = all_contexts(context_dim);
  for (std::size_t cls = 0; cls < class_names.size(); ++cls) {
    if (std::none_of(valid.begin(), valid.end(), [cls](const ScenarioRule* r) { return r->maneuver == cls; }))
      continue;
    ClassCoverage cov{cls, {}, false};
    for (const auto& c : contexts)
      if (std::any_of(valid.begin(), valid.end(),
                      [&](const ScenarioRule* r) { return r->maneuver == cls && matches(r->pattern, c); }))
        cov.contradicted.push_back(c);
    cov.unsatisfiable = cov.contradicted.size() == contexts.size();
    report.classes.push_back(std::move(cov));
  }
  return report;
}

}  // namespace cem::rules
