#pragma once

// Word/character hybrid text vocabulary for the synthetic caption grammar.
// Known words map to single ids; anything else is spelled out with one id per
// printable ASCII character.

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ovis/embedding.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

class Vocabulary {
 public:
  static constexpr std::string_view kImageMarker = "<image>";

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<image>", "<unk>"}) add(s);
    for (const char* s :
         {"'s",      "caption", ":",       "?",      ".",       ",",      "describe", "the",
          "image",   "how",     "many",    "what",   "color",   "shape",  "where",    "is",
          "are",     "there",   "a",       "in",     "and",     "object", "objects",  "red",
          "green",   "blue",    "square",  "circle", "cross",   "squares", "circles", "crosses",
          "top",     "bottom",  "left",    "right",  "large",   "small",  "nothing",  "size",
          "of",      "0",       "1",       "2",      "3",       "4"}) {
      add(s);
    }
    char_base_ = static_cast<int>(words_.size());
    for (int c = 33; c <= 126; ++c) words_.push_back(std::string(1, static_cast<char>(c)));
  }

  SpecialTokens special() const { return {0, 1, 2, 3}; }
  int unk() const { return 4; }
  std::size_t size() const { return words_.size(); }

  int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
      if (std::isspace(static_cast<unsigned char>(text[i]))) {
        ++i;
        continue;
      }
      if (text.substr(i, kImageMarker.size()) == kImageMarker) {
        ids.push_back(special().image);
        i += kImageMarker.size();
        continue;
      }
      if (text.substr(i, 2) == "'s") {
        ids.push_back(id("'s"));
        i += 2;
        continue;
      }
      if (is_punct(text[i])) {
        push_word(ids, text.substr(i, 1));
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) &&
             !is_punct(text[j]) && text[j] != '<' && text.substr(j, 2) != "'s") {
        ++j;
      }
      if (j == i) ++j;  // lone '<' or similar
      push_word(ids, text.substr(i, j - i));
      i = j;
    }
    return ids;
  }

  // Words separated by spaces; reserved ids other than <image> are skipped.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    bool prev_char = false;
    for (int t : ids) {
      if (t < 0 || static_cast<std::size_t>(t) >= words_.size()) continue;
      if (t < 5 && t != special().image) continue;
      const bool is_char = t >= char_base_;
      if (!out.empty() && !(is_char && prev_char)) out += ' ';
      out += words_[static_cast<std::size_t>(t)];
      prev_char = is_char;
    }
    return out;
  }

 private:
  static bool is_punct(char c) { return c == ':' || c == '?' || c == '.' || c == ','; }

  void add(const std::string& w) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  void push_word(std::vector<int>& ids, std::string_view w) const {
    if (int known = id(w); known >= 0 && known >= 5) {
      ids.push_back(known);
      return;
    }
    for (char c : w) {
      const auto uc = static_cast<unsigned char>(c);
      ids.push_back(uc >= 33 && uc <= 126 ? char_base_ + (uc - 33) : unk());
    }
  }

  std::vector<std::string> words_;
  std::map<std::string, int> index_;
  int char_base_ = 0;
};

}  // namespace ovis
