#pragma once

#include <string>
#include <vector>

#include "latmem/model.hpp"

namespace latmem {

// Base-vocabulary word ids used by the synthetic task families. Everything
// the tasks emit stays strictly below Vocabulary::base_size.
namespace tok {
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPeriod = 2;
inline constexpr int kNewline = 3;
inline constexpr int kAskCount = 4;
inline constexpr int kAskRetrieve = 5;
inline constexpr int kAskRule = 6;
inline constexpr int kColor0 = 8;     // 6 colors
inline constexpr int kNumColors = 6;
inline constexpr int kDigit0 = 16;    // counts 0..16
inline constexpr int kNumDigits = 17;
inline constexpr int kRow0 = 40;      // 4 rows / 4 cols
inline constexpr int kCol0 = 44;
inline constexpr int kGlyph0 = 48;    // 8 glyph classes
inline constexpr int kNumGlyphs = 8;
inline constexpr int kAttr0 = 56;     // 8 semantic attributes
}  // namespace tok

enum class TaskFamily { Count, Retrieve, RuleLookup, Mixed };
TaskFamily task_family_from_string(const std::string& s);
const char* to_string(TaskFamily f);

// Fixed glyph-class -> attribute mapping shared by all rule-lookup
// instances of a run.
struct RuleBook {
  int version = 1;
  std::array<int, tok::kNumGlyphs> attribute_of;  // glyph class -> attr index

  static RuleBook v1();
};

struct TaskInstance {
  TaskFamily family;
  uint64_t seed = 0;
  std::string task_id;
  Image image;
  std::vector<int> instruction;  // starts with BOS, ends with PERIOD
  std::vector<int> answer;       // without the trailing EOS
  // underlying glyph grid, cell-major (class, color) pairs
  std::vector<int> cell_class;
  std::vector<int> cell_color;
};

TaskInstance sample_task(TaskFamily family, uint64_t seed,
                         const ModelConfig& cfg,
                         const RuleBook& rules = RuleBook::v1());

// Exact match scores 1; otherwise token-level F1 in [0, 1). `generated`
// are the discrete base-vocabulary tokens up to (excluding) EOS.
double score_tokens(const std::vector<int>& generated,
                    const TaskInstance& instance);

// independent F1 used nowhere else; exposed for testing
double token_f1(const std::vector<int>& generated,
                const std::vector<int>& reference);

// line format: family seed hex-grid instruction answer (reproducibility)
std::string dump_task_line(const TaskInstance& t);

}  // namespace latmem
