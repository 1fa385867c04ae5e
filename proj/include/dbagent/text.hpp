#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dbagent::text {

std::string_view trim(std::string_view s);
bool is_blank(std::string_view s);

/// Replaces CR/LF with spaces so the value fits on one rendered line.
std::string single_line(std::string_view s);

/// Answer normalizer used by EM scoring and the factory judge:
/// ASCII-lowercase, trim, collapse whitespace runs to one space, strip
/// trailing punctuation (. , ; : ! ?). Articles are kept.
std::string normalize_answer(std::string_view s);

/// Splits a `a|b|c` gold answer string; elements are trimmed, empties dropped.
std::vector<std::string> split_answers(std::string_view joined);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// True when `needle` occurs in `haystack` on word boundaries. Both sides are
/// expected to be normalized already.
bool contains_phrase(std::string_view haystack, std::string_view needle);

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::vector<std::string> split(std::string_view s, char delim);

}  // namespace dbagent::text
