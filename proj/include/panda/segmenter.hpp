#pragma once

// Instruction segmentation into ordinal sub-instructions and pairing of each
// fragment with a contiguous sub-path of viewpoints.

#include <json.hpp>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace panda {

// Lowercased whitespace tokenization with every ASCII punctuation character
// split into its own token.
std::vector<std::string> tokenize_words(std::string_view text);

struct Instruction {
  std::string text;
  std::vector<std::string> tokens;

  // Throws ParseError for empty or whitespace-only text.
  static Instruction from_text(std::string text);
};

struct SubInstruction {
  int index = 0;  // 1-based
  std::string text;
  std::vector<std::string> tokens;
};

// Half-open viewpoint range [start, end).
struct Range {
  int start = 0;
  int end = 0;

  friend bool operator==(const Range&, const Range&) = default;
};

struct AlignedPair {
  SubInstruction sub_instruction;
  Range subpath;
};

struct SegmenterOptions {
  int min_fragment_tokens = 2;
};

bool is_delimiter(std::string_view token);

std::vector<SubInstruction> split_instruction(const Instruction& instruction,
                                              const SegmenterOptions& options = {});

// M near-equal contiguous ranges over [0, path_length); the remainder goes to
// the earliest ranges.
std::vector<Range> uniform_chunks(int m, int path_length);

// Throws ValidationError unless `chunks` is ordered, non-empty per range,
// non-overlapping and covers [0, path_length) exactly.
void validate_chunks(const std::vector<Range>& chunks, int path_length);

std::vector<AlignedPair> pair_subpaths(const std::vector<SubInstruction>& subs, int path_length,
                                       const std::optional<std::vector<Range>>& chunks = std::nullopt);

struct DatasetRecord {
  int line = 0;
  Instruction instruction;
  nlohmann::json path;
  std::optional<std::vector<Range>> chunks;
  nlohmann::json raw;  // the full source object, extra fields included
};

struct LoadedDataset {
  std::vector<DatasetRecord> records;
  std::vector<std::string> warnings;
};

// One JSON object per line with `instruction`, `path` and optional
// `chunk_view`. Malformed lines are skipped with a warning naming the line.
LoadedDataset load_dataset(const std::string& path);
LoadedDataset parse_dataset(std::istream& in);

// `record` plus `sub_instructions` and `aligned` ranges.
nlohmann::json segment_record(const DatasetRecord& record, const SegmenterOptions& options = {});

}  // namespace panda
