#include "panda/prompts.hpp"

#include <array>
#include <cctype>

#include "panda/errors.hpp"

namespace panda {

namespace {

constexpr std::array<const char*, 10> kOrdinals = {"first", "second", "third", "fourth", "fifth",
                                                   "sixth", "seventh", "eighth", "ninth", "tenth"};

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string ordinal(int i) {
  if (i < 1) throw ParameterError("ordinal needs i >= 1, got " + std::to_string(i));
  if (i <= static_cast<int>(kOrdinals.size())) return kOrdinals[static_cast<std::size_t>(i - 1)];
  return std::to_string(i) + "th";
}

std::string count_prompt(int m) {
  if (m < 1) throw ParameterError("count prompt needs M >= 1, got " + std::to_string(m));
  return "this instruction contains " + std::to_string(m) + " actions";
}

std::string sequential_prompt(int i) { return "this is the " + ordinal(i) + " action"; }

std::string individual_prompt(int i, std::string_view action_text) {
  const auto first = action_text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) throw ParameterError("individual prompt needs a nonempty action");
  const auto last = action_text.find_last_not_of(" \t\r\n");
  return ordinal(i) + ", perform the action " + lower(action_text.substr(first, last - first + 1));
}

ContextPromptSet build_prompt_set(const std::vector<SubInstruction>& subs) {
  if (subs.empty()) throw ParameterError("prompt set needs at least one sub-instruction");
  ContextPromptSet set;
  set.m = static_cast<int>(subs.size());
  set.count_prompt = count_prompt(set.m);
  for (std::size_t k = 0; k < subs.size(); ++k) {
    const int expected = static_cast<int>(k + 1);
    if (subs[k].index != expected) {
      throw ParameterError("sub-instruction ordinals must run 1..M; position " + std::to_string(expected) +
                           " has ordinal " + std::to_string(subs[k].index));
    }
    set.sequential_prompts.push_back(sequential_prompt(expected));
    set.individual_prompts.push_back(individual_prompt(expected, subs[k].text));
    if (k > 0) set.overall_prompt += ", ";
    set.overall_prompt += set.individual_prompts.back();
  }
  return set;
}

ContextPromptSet build_prompt_set(const std::vector<std::string>& sub_instruction_texts) {
  std::vector<SubInstruction> subs;
  for (std::size_t k = 0; k < sub_instruction_texts.size(); ++k) {
    subs.push_back(SubInstruction{static_cast<int>(k + 1), sub_instruction_texts[k], {}});
  }
  return build_prompt_set(subs);
}

nlohmann::json to_json(const ContextPromptSet& set) {
  return nlohmann::json{{"M", set.m},
                        {"count_prompt", set.count_prompt},
                        {"sequential_prompts", set.sequential_prompts},
                        {"individual_prompts", set.individual_prompts},
                        {"overall_prompt", set.overall_prompt}};
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* t : {"[pad]", "[unk]", "[cls]", "[sep]"}) add(t);
}

void Vocabulary::add(const std::string& token) {
  if (ids_.count(token)) return;
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus) {
  Vocabulary v;
  std::vector<std::string> templates = {count_prompt(1), sequential_prompt(1),
                                        individual_prompt(1, "x")};
  for (int i = 1; i <= static_cast<int>(kOrdinals.size()); ++i) {
    templates.push_back(ordinal(i));
    templates.push_back(std::to_string(i));
  }
  for (const auto& t : templates) {
    for (const auto& w : tokenize_words(t)) {
      if (w != "x") v.add(w);
    }
  }
  for (const auto& text : corpus) {
    for (const auto& w : tokenize_words(text)) v.add(w);
  }
  return v;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw LoadError("vocabulary must be a JSON object");
  std::vector<std::string> tokens(j.size());
  std::vector<bool> seen(j.size(), false);
  for (const auto& [tok, idj] : j.items()) {
    if (!idj.is_number_integer()) throw LoadError("vocabulary id for '" + tok + "' is not an integer");
    const auto id = idj.get<long long>();
    if (id < 0 || id >= static_cast<long long>(j.size()) || seen[static_cast<std::size_t>(id)]) {
      throw LoadError("vocabulary ids must be dense and unique");
    }
    seen[static_cast<std::size_t>(id)] = true;
    tokens[static_cast<std::size_t>(id)] = tok;
  }
  Vocabulary base;
  for (int id = 0; id < base.size(); ++id) {
    if (static_cast<std::size_t>(id) >= tokens.size() || tokens[static_cast<std::size_t>(id)] != base.token(id)) {
      throw LoadError("vocabulary reserved ids are not [pad]=0 [unk]=1 [cls]=2 [sep]=3");
    }
  }
  Vocabulary v;
  for (const auto& t : tokens) v.add(t);
  return v;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
  return j;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.find(token) != ids_.end(); }

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, int max_len) {
  if (max_len < 3) throw ParameterError("tokenize needs max_len >= 3");
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(max_len));
  ids.push_back(Vocabulary::kCls);
  for (const auto& w : tokenize_words(text)) {
    if (static_cast<int>(ids.size()) == max_len - 1) break;
    ids.push_back(vocab.id(w));
  }
  ids.push_back(Vocabulary::kSep);
  ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
  return ids;
}

}  // namespace panda
