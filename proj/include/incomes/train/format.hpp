#pragma once

#include <vector>

#include "incomes/gist/pool.hpp"

namespace incomes {

/// Token that separates lines of context.
inline constexpr int kNewlineToken = 0;

/// Edits joined by newlines, then one blank line. Empty for no edits, so a
/// conditioned input without edits is exactly the bare example.
inline std::vector<int> context_prefix(const std::vector<const EditRecord*>& edits) {
  std::vector<int> out;
  if (edits.empty()) return out;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    if (i) out.push_back(kNewlineToken);
    out.insert(out.end(), edits[i]->tokens.begin(), edits[i]->tokens.end());
  }
  out.push_back(kNewlineToken);
  out.push_back(kNewlineToken);
  return out;
}

/// Shared by the teacher's conditioned pass and the in-context baseline.
inline std::vector<int> conditioned_input(const std::vector<const EditRecord*>& edits, const std::vector<int>& tokens) {
  std::vector<int> out = context_prefix(edits);
  out.insert(out.end(), tokens.begin(), tokens.end());
  return out;
}

inline std::vector<const EditRecord*> select_edits(const std::vector<EditRecord>& edits,
                                                   const std::vector<std::size_t>& idx) {
  std::vector<const EditRecord*> out;
  for (auto i : idx) {
    if (i >= edits.size()) throw IndexError("select_edits: index " + std::to_string(i) + " out of range");
    out.push_back(&edits[i]);
  }
  return out;
}

}  // namespace incomes
