#include "panda/segmenter.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "panda/errors.hpp"

namespace panda {

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, ch);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return tokens;
}

Instruction Instruction::from_text(std::string text) {
  auto tokens = tokenize_words(text);
  if (tokens.empty()) throw ParseError("instruction text is empty");
  return Instruction{std::move(text), std::move(tokens)};
}

bool is_delimiter(std::string_view token) { return token == "." || token == "," || token == "and"; }

namespace {

struct Fragment {
  std::vector<std::string> tokens;
  std::string lead;  // delimiter that preceded this fragment ("" for the first)
};

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

// Glues b onto a. A standalone "and" between them is kept so the merged text
// still reads as one clause.
void append_fragment(std::vector<std::string>& a, const std::vector<std::string>& b,
                     const std::string& joiner) {
  if (joiner == "and") a.push_back("and");
  a.insert(a.end(), b.begin(), b.end());
}

}  // namespace

std::vector<SubInstruction> split_instruction(const Instruction& instruction,
                                              const SegmenterOptions& options) {
  if (instruction.tokens.empty()) throw ParseError("instruction has no tokens");

  std::vector<Fragment> frags;
  Fragment cur;
  std::string pending;
  for (const auto& tok : instruction.tokens) {
    if (is_delimiter(tok)) {
      if (!cur.tokens.empty()) {
        frags.push_back(std::move(cur));
        cur = Fragment{};
        pending.clear();
      }
      // "and" wins over punctuation when both separate the same pair of
      // fragments (", and").
      if (pending.empty() || tok == "and") pending = tok;
      continue;
    }
    if (cur.tokens.empty()) cur.lead = frags.empty() ? "" : pending;
    cur.tokens.push_back(tok);
  }
  if (!cur.tokens.empty()) frags.push_back(std::move(cur));
  if (frags.empty()) throw ParseError("instruction consists only of delimiters");

  const auto min_len = static_cast<std::size_t>(std::max(1, options.min_fragment_tokens));
  bool changed = true;
  while (changed && frags.size() > 1) {
    changed = false;
    for (std::size_t i = 0; i < frags.size(); ++i) {
      if (frags[i].tokens.size() >= min_len) continue;
      if (i == 0) {
        std::vector<std::string> merged = frags[0].tokens;
        append_fragment(merged, frags[1].tokens, frags[1].lead);
        frags[1].tokens = std::move(merged);
        frags[1].lead = "";
        frags.erase(frags.begin());
      } else {
        append_fragment(frags[i - 1].tokens, frags[i].tokens, frags[i].lead);
        frags.erase(frags.begin() + static_cast<std::ptrdiff_t>(i));
      }
      changed = true;
      break;
    }
  }

  std::vector<SubInstruction> out;
  out.reserve(frags.size());
  for (std::size_t i = 0; i < frags.size(); ++i) {
    out.push_back(SubInstruction{static_cast<int>(i + 1), join(frags[i].tokens), frags[i].tokens});
  }
  return out;
}

std::vector<Range> uniform_chunks(int m, int path_length) {
  if (m < 1) throw AlignmentError("need at least one sub-instruction");
  if (path_length < m) {
    throw AlignmentError("path of length " + std::to_string(path_length) + " cannot hold " +
                         std::to_string(m) + " sub-paths");
  }
  std::vector<Range> out;
  const int base = path_length / m;
  const int extra = path_length % m;
  int at = 0;
  for (int i = 0; i < m; ++i) {
    const int len = base + (i < extra ? 1 : 0);
    out.push_back(Range{at, at + len});
    at += len;
  }
  return out;
}

void validate_chunks(const std::vector<Range>& chunks, int path_length) {
  if (chunks.empty()) throw ValidationError("no chunks");
  int expect = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const Range& r = chunks[i];
    if (r.end <= r.start) {
      throw ValidationError("chunk " + std::to_string(i) + " [" + std::to_string(r.start) + "," +
                            std::to_string(r.end) + ") is empty");
    }
    if (r.start < expect) {
      throw ValidationError("chunk " + std::to_string(i) + " overlaps its predecessor");
    }
    if (r.start > expect) {
      throw ValidationError("gap before chunk " + std::to_string(i) + " at " + std::to_string(expect));
    }
    expect = r.end;
  }
  if (expect != path_length) {
    throw ValidationError("chunks cover [0," + std::to_string(expect) + ") but the path has length " +
                          std::to_string(path_length));
  }
}

std::vector<AlignedPair> pair_subpaths(const std::vector<SubInstruction>& subs, int path_length,
                                       const std::optional<std::vector<Range>>& chunks) {
  std::vector<Range> ranges;
  if (chunks) {
    validate_chunks(*chunks, path_length);
    if (chunks->size() != subs.size()) {
      throw ValidationError(std::to_string(chunks->size()) + " chunks for " +
                            std::to_string(subs.size()) + " sub-instructions");
    }
    ranges = *chunks;
  } else {
    ranges = uniform_chunks(static_cast<int>(subs.size()), path_length);
  }
  std::vector<AlignedPair> out;
  out.reserve(subs.size());
  for (std::size_t i = 0; i < subs.size(); ++i) out.push_back(AlignedPair{subs[i], ranges[i]});
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Range> parse_chunks(const nlohmann::json& j) {
  if (!j.is_array()) throw ValidationError("chunk_view must be an array");
  std::vector<Range> out;
  for (const auto& c : j) {
    if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() || !c[1].is_number_integer()) {
      throw ValidationError("chunk_view entries must be [start, end] integer pairs");
    }
    out.push_back(Range{c[0].get<int>(), c[1].get<int>()});
  }
  return out;
}

}  // namespace

LoadedDataset parse_dataset(std::istream& in) {
  LoadedDataset out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto warn = [&](const std::string& why) {
      out.warnings.push_back("line " + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      warn(std::string("invalid JSON: ") + e.what());
      continue;
    }
    if (!j.is_object()) {
      warn("not a JSON object");
      continue;
    }
    if (!j.contains("instruction") || !j["instruction"].is_string()) {
      warn("missing string field \"instruction\"");
      continue;
    }
    if (!j.contains("path") || !j["path"].is_array()) {
      warn("missing array field \"path\"");
      continue;
    }
    try {
      DatasetRecord rec;
      rec.line = lineno;
      rec.instruction = Instruction::from_text(j["instruction"].get<std::string>());
      rec.path = j["path"];
      if (j.contains("chunk_view") && !j["chunk_view"].is_null()) {
        auto chunks = parse_chunks(j["chunk_view"]);
        validate_chunks(chunks, static_cast<int>(rec.path.size()));
        rec.chunks = std::move(chunks);
      }
      rec.raw = std::move(j);
      out.records.push_back(std::move(rec));
    } catch (const Error& e) {
      warn(e.what());
    }
  }
  return out;
}

LoadedDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset '" + path + "'");
  LoadedDataset ds = parse_dataset(in);
  if (ds.records.empty()) throw DatasetError("dataset '" + path + "' has no valid records");
  return ds;
}

nlohmann::json segment_record(const DatasetRecord& record, const SegmenterOptions& options) {
  auto subs = split_instruction(record.instruction, options);
  auto pairs = pair_subpaths(subs, static_cast<int>(record.path.size()), record.chunks);
  nlohmann::json out = record.raw;
  nlohmann::json texts = nlohmann::json::array();
  nlohmann::json aligned = nlohmann::json::array();
  for (const auto& p : pairs) {
    texts.push_back(p.sub_instruction.text);
    aligned.push_back({p.subpath.start, p.subpath.end});
  }
  out["sub_instructions"] = std::move(texts);
  out["aligned"] = std::move(aligned);
  return out;
}

}  // namespace panda
