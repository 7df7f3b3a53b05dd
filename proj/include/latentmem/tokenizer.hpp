#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace latentmem {

// Fixed character-level vocabulary: six specials followed by printable ASCII
// 32..126. Uncovered characters encode as the replacement character.
class Tokenizer {
 public:
  static constexpr int pad_id = 0;
  static constexpr int bos_id = 1;
  static constexpr int eos_id = 2;
  static constexpr int sep_id = 3;
  static constexpr int traj_id = 4;
  static constexpr int step_id = 5;
  static constexpr int first_char_id = 6;
  static constexpr int vocab_size = first_char_id + 95;  // 101
  static constexpr char replacement_char = '?';

  static bool covered(char c) { return c >= 32 && c <= 126; }

  static int char_to_id(char c) {
    if (!covered(c)) c = replacement_char;
    return first_char_id + (c - 32);
  }

  static bool is_special(int id) { return id >= 0 && id < first_char_id; }

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(char_to_id(c));
    return ids;
  }

  // Specials carry no surface form and are skipped.
  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (is_special(id)) continue;
      if (id < 0 || id >= vocab_size) continue;
      out.push_back(static_cast<char>(32 + (id - first_char_id)));
    }
    return out;
  }
};

}  // namespace latentmem
