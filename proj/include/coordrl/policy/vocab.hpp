#pragma once

#include <cstddef>
#include <optional>
#include <string>

namespace coordrl {

/// Token layout: ZOOM, ANSWER_1..ANSWER_K, PAD. The PAD slot stands for any
/// invalid emission and ends an episode as a format violation.
struct Vocabulary {
  std::size_t num_answers = 4;

  static constexpr std::size_t zoom = 0;
  std::size_t answer(std::size_t k) const { return 1 + k; }
  std::size_t pad() const { return num_answers + 1; }
  std::size_t size() const { return num_answers + 2; }

  bool is_answer(std::size_t token) const { return token >= 1 && token <= num_answers; }
  std::optional<std::size_t> answer_index(std::size_t token) const {
    if (!is_answer(token)) return std::nullopt;
    return token - 1;
  }

  std::string name(std::size_t token) const {
    if (token == zoom) return "ZOOM";
    if (is_answer(token)) return "ANSWER_" + std::to_string(token);
    return "PAD";
  }
};

}  // namespace coordrl
