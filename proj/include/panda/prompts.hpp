#pragma once

// Hard context prompts (count, sequential, individual, overall) and the
// word-level vocabulary used by the text encoder.

#include <json.hpp>

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "panda/segmenter.hpp"

namespace panda {

std::string ordinal(int i);
std::string count_prompt(int m);
std::string sequential_prompt(int i);
std::string individual_prompt(int i, std::string_view action_text);

struct ContextPromptSet {
  int m = 0;
  std::string count_prompt;
  std::vector<std::string> sequential_prompts;
  std::vector<std::string> individual_prompts;
  std::string overall_prompt;
};

ContextPromptSet build_prompt_set(const std::vector<SubInstruction>& subs);
ContextPromptSet build_prompt_set(const std::vector<std::string>& sub_instruction_texts);

nlohmann::json to_json(const ContextPromptSet& set);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;

  Vocabulary();

  // Reserved tokens, every template word (ordinals and counts up to ten
  // included), then corpus words in first-seen order.
  static Vocabulary build(const std::vector<std::string>& corpus);
  static Vocabulary from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& token);

  std::map<std::string, int, std::less<>> ids_;
  std::vector<std::string> tokens_;
};

// [cls] words... [sep], truncated to keep the trailing [sep], then padded.
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, int max_len);

}  // namespace panda
