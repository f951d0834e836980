#include "latmem/tasks.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "latmem/rng.hpp"

namespace latmem {

namespace {

// 4x4 glyph bitmaps, row-major from the top-left bit
constexpr uint16_t kGlyphBits[tok::kNumGlyphs] = {
    0xFFFF,  // solid block
    0xF99F,  // hollow box
    0x8421,  // main diagonal
    0x1248,  // anti-diagonal
    0x6FF6,  // plus
    0xF0F0,  // horizontal stripes
    0xAAAA,  // vertical stripes
    0xA5A5,  // checker
};

constexpr double kPalette[tok::kNumColors][3] = {
    {1.0, 0.1, 0.1}, {0.1, 1.0, 0.1}, {0.1, 0.1, 1.0},
    {1.0, 1.0, 0.1}, {1.0, 0.1, 1.0}, {0.1, 1.0, 1.0},
};

void render(TaskInstance& t, const ModelConfig& cfg) {
  const int g = cfg.patch_grid;
  const int cell = cfg.image_size / g;
  t.image.size = cfg.image_size;
  t.image.channels = cfg.channels;
  t.image.data.assign(
      static_cast<size_t>(cfg.image_size) * cfg.image_size * cfg.channels,
      0.0);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      const uint16_t bits = kGlyphBits[t.cell_class[r * g + c]];
      const double* rgb = kPalette[t.cell_color[r * g + c]];
      for (int y = 0; y < cell; ++y) {
        for (int x = 0; x < cell; ++x) {
          // glyph bitmaps are 4x4; stretch when cells are larger
          const int by = y * 4 / cell, bx = x * 4 / cell;
          if (!(bits >> (15 - (by * 4 + bx)) & 1)) continue;
          for (int ch = 0; ch < std::min(3, cfg.channels); ++ch)
            t.image.at(r * cell + y, c * cell + x, ch) = rgb[ch];
        }
      }
    }
  }
}

}  // namespace

TaskFamily task_family_from_string(const std::string& s) {
  if (s == "count") return TaskFamily::Count;
  if (s == "retrieve") return TaskFamily::Retrieve;
  if (s == "rule") return TaskFamily::RuleLookup;
  if (s == "mixed") return TaskFamily::Mixed;
  throw std::runtime_error("unknown task family '" + s + "'");
}

const char* to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::Count: return "count";
    case TaskFamily::Retrieve: return "retrieve";
    case TaskFamily::RuleLookup: return "rule";
    case TaskFamily::Mixed: return "mixed";
  }
  return "?";
}

RuleBook RuleBook::v1() {
  // fixed permutation: each attribute names exactly one glyph class
  return RuleBook{1, {3, 0, 5, 1, 7, 2, 6, 4}};
}

TaskInstance sample_task(TaskFamily family, uint64_t seed,
                         const ModelConfig& cfg, const RuleBook& rules) {
  const int g = cfg.patch_grid;
  const int cells = g * g;
  if (cells + 1 > tok::kNumDigits)
    throw std::runtime_error("sample_task: grid too large for digit words");

  TaskInstance t;
  t.family = family;
  t.seed = seed;
  t.task_id = std::string(to_string(family)) + "-" + std::to_string(seed);
  Rng rng(Rng::derive(seed, 0x7a5c + static_cast<uint64_t>(family)));

  t.cell_class.resize(cells);
  t.cell_color.resize(cells);
  for (int i = 0; i < cells; ++i) {
    t.cell_class[i] = static_cast<int>(rng.below(tok::kNumGlyphs));
    t.cell_color[i] = static_cast<int>(rng.below(tok::kNumColors));
  }

  auto retrieve_part = [&](std::vector<int>& instr, std::vector<int>& ans) {
    const int r = static_cast<int>(rng.below(g));
    const int c = static_cast<int>(rng.below(g));
    instr.insert(instr.end(),
                 {tok::kAskRetrieve, tok::kRow0 + r, tok::kCol0 + c,
                  tok::kPeriod});
    ans.push_back(tok::kGlyph0 + t.cell_class[r * g + c]);
  };
  auto rule_part = [&](std::vector<int>& instr, std::vector<int>& ans) {
    // pick a target class, make sure it is in the image; the rulebook is a
    // permutation, so the matching class is unique by construction
    const int target = static_cast<int>(rng.below(tok::kNumGlyphs));
    const int slot = static_cast<int>(rng.below(cells));
    t.cell_class[slot] = target;
    instr.insert(instr.end(),
                 {tok::kAskRule, tok::kAttr0 + rules.attribute_of[target],
                  tok::kPeriod});
    ans.push_back(tok::kGlyph0 + target);
  };

  t.instruction.push_back(tok::kBos);
  switch (family) {
    case TaskFamily::Count: {
      const int color = static_cast<int>(rng.below(tok::kNumColors));
      t.instruction.insert(t.instruction.end(),
                           {tok::kAskCount, tok::kColor0 + color,
                            tok::kPeriod});
      const int n = static_cast<int>(
          std::count(t.cell_color.begin(), t.cell_color.end(), color));
      t.answer.push_back(tok::kDigit0 + n);
      break;
    }
    case TaskFamily::Retrieve:
      retrieve_part(t.instruction, t.answer);
      break;
    case TaskFamily::RuleLookup:
      rule_part(t.instruction, t.answer);
      break;
    case TaskFamily::Mixed: {
      retrieve_part(t.instruction, t.answer);
      t.answer.push_back(tok::kPeriod);
      rule_part(t.instruction, t.answer);
      break;
    }
  }
  render(t, cfg);
  return t;
}

double token_f1(const std::vector<int>& generated,
                const std::vector<int>& reference) {
  if (generated.empty() || reference.empty())
    return generated.empty() && reference.empty() ? 1.0 : 0.0;
  std::map<int, int> ref_counts;
  for (int tkn : reference) ++ref_counts[tkn];
  int overlap = 0;
  for (int tkn : generated) {
    auto it = ref_counts.find(tkn);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / generated.size();
  const double recall = static_cast<double>(overlap) / reference.size();
  return 2.0 * precision * recall / (precision + recall);
}

double score_tokens(const std::vector<int>& generated,
                    const TaskInstance& instance) {
  std::vector<int> trimmed;
  for (int tkn : generated) {
    if (tkn == tok::kEos) break;
    trimmed.push_back(tkn);
  }
  if (trimmed == instance.answer) return 1.0;
  return token_f1(trimmed, instance.answer);
}

std::string dump_task_line(const TaskInstance& t) {
  std::ostringstream os;
  os << to_string(t.family) << ' ' << t.seed << ' ';
  for (size_t i = 0; i < t.cell_class.size(); ++i)
    os << (i ? "," : "") << t.cell_class[i] << ':' << t.cell_color[i];
  os << " i=";
  for (size_t i = 0; i < t.instruction.size(); ++i)
    os << (i ? "," : "") << t.instruction[i];
  os << " a=";
  for (size_t i = 0; i < t.answer.size(); ++i)
    os << (i ? "," : "") << t.answer[i];
  return os.str();
}

}  // namespace latmem
