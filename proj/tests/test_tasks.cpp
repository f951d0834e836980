#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "latmem/tasks.hpp"

using namespace latmem;

namespace {

ModelConfig cfg_default() { return ModelConfig{}; }

// independent copies of the renderer's glyph bitmaps and palette, used only
// to decode images back into symbols
constexpr uint16_t kOracleBits[8] = {0xFFFF, 0xF99F, 0x8421, 0x1248,
                                     0x6FF6, 0xF0F0, 0xAAAA, 0xA5A5};
constexpr double kOraclePalette[6][3] = {
    {1.0, 0.1, 0.1}, {0.1, 1.0, 0.1}, {0.1, 0.1, 1.0},
    {1.0, 1.0, 0.1}, {1.0, 0.1, 1.0}, {0.1, 1.0, 1.0},
};

bool pixel_lit(const Image& img, int y, int x) {
  for (int c = 0; c < img.channels; ++c)
    if (img.at(y, x, c) > 0.05) return true;
  return false;
}

// reads back (class, color) of a cell straight from the pixels
std::pair<int, int> decode_cell(const Image& img, int r, int c) {
  uint16_t bits = 0;
  double rgb[3] = {0, 0, 0};
  bool have_color = false;
  for (int by = 0; by < 4; ++by)
    for (int bx = 0; bx < 4; ++bx) {
      const int y = r * 4 + by, x = c * 4 + bx;
      if (!pixel_lit(img, y, x)) continue;
      bits |= static_cast<uint16_t>(1u << (15 - (by * 4 + bx)));
      if (!have_color) {
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = img.at(y, x, ch);
        have_color = true;
      }
    }
  int cls = -1;
  for (int g = 0; g < 8; ++g)
    if (kOracleBits[g] == bits) cls = g;
  int color = -1;
  for (int k = 0; k < 6; ++k) {
    bool match = true;
    for (int ch = 0; ch < 3; ++ch)
      if (std::fabs(rgb[ch] - kOraclePalette[k][ch]) > 0.2) match = false;
    if (match) color = k;
  }
  return {cls, color};
}

}  // namespace

TEST_CASE("sample_task: identical (family, seed) gives identical instances") {
  auto cfg = cfg_default();
  auto a = sample_task(TaskFamily::Count, 7, cfg);
  auto b = sample_task(TaskFamily::Count, 7, cfg);
  CHECK(a.instruction == b.instruction);
  CHECK(a.answer == b.answer);
  CHECK(a.image.data == b.image.data);
  CHECK(a.task_id == b.task_id);
}

TEST_CASE("count: answer equals a brute-force pixel scan") {
  auto cfg = cfg_default();
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto t = sample_task(TaskFamily::Count, seed, cfg);
    const int color_tok = t.instruction[2];
    const int target_color = color_tok - tok::kColor0;
    int found = 0;
    for (int r = 0; r < cfg.patch_grid; ++r)
      for (int c = 0; c < cfg.patch_grid; ++c)
        if (decode_cell(t.image, r, c).second == target_color) ++found;
    REQUIRE(t.answer.size() == 1);
    CHECK(t.answer[0] == tok::kDigit0 + found);
  }
}

TEST_CASE("retrieve: answer equals the glyph decoded from the pixels") {
  auto cfg = cfg_default();
  for (uint64_t seed = 100; seed < 120; ++seed) {
    auto t = sample_task(TaskFamily::Retrieve, seed, cfg);
    const int r = t.instruction[2] - tok::kRow0;
    const int c = t.instruction[3] - tok::kCol0;
    auto [cls, color] = decode_cell(t.image, r, c);
    REQUIRE(cls >= 0);
    CHECK(t.answer[0] == tok::kGlyph0 + cls);
  }
}

TEST_CASE("rule-lookup: answer equals an independent rulebook join") {
  auto cfg = cfg_default();
  auto rules = RuleBook::v1();
  for (uint64_t seed = 200; seed < 220; ++seed) {
    auto t = sample_task(TaskFamily::RuleLookup, seed, cfg, rules);
    const int attr = t.instruction[2] - tok::kAttr0;
    // join: classes present in the grid whose attribute matches
    std::set<int> matches;
    for (int r = 0; r < cfg.patch_grid; ++r)
      for (int c = 0; c < cfg.patch_grid; ++c) {
        auto [cls, color] = decode_cell(t.image, r, c);
        REQUIRE(cls >= 0);
        if (rules.attribute_of[cls] == attr) matches.insert(cls);
      }
    REQUIRE(matches.size() == 1);
    CHECK(t.answer[0] == tok::kGlyph0 + *matches.begin());
  }
}

TEST_CASE("mixed: two sub-answers separated by the delimiter") {
  auto cfg = cfg_default();
  auto t = sample_task(TaskFamily::Mixed, 31, cfg);
  REQUIRE(t.answer.size() == 3);
  CHECK(t.answer[1] == tok::kPeriod);
  CHECK(t.answer[0] >= tok::kGlyph0);
  CHECK(t.answer[2] >= tok::kGlyph0);
}

TEST_CASE("answers stay inside the base vocabulary") {
  auto cfg = cfg_default();
  for (auto fam : {TaskFamily::Count, TaskFamily::Retrieve,
                   TaskFamily::RuleLookup, TaskFamily::Mixed})
    for (uint64_t seed = 0; seed < 10; ++seed) {
      auto t = sample_task(fam, seed, cfg);
      for (int a : t.answer) CHECK(a < cfg.vocab_size);
      for (int i : t.instruction) CHECK(i < cfg.vocab_size);
    }
}

TEST_CASE("score: oracle answer scores exactly 1 on every family") {
  auto cfg = cfg_default();
  for (auto fam : {TaskFamily::Count, TaskFamily::Retrieve,
                   TaskFamily::RuleLookup, TaskFamily::Mixed}) {
    auto t = sample_task(fam, 55, cfg);
    auto with_eos = t.answer;
    with_eos.push_back(tok::kEos);
    CHECK(score_tokens(with_eos, t) == 1.0);
    CHECK(score_tokens(t.answer, t) == 1.0);
  }
}

TEST_CASE("score: empty output scores 0") {
  auto cfg = cfg_default();
  auto t = sample_task(TaskFamily::Retrieve, 3, cfg);
  CHECK(score_tokens({}, t) == 0.0);
  CHECK(score_tokens({tok::kEos}, t) == 0.0);
}

TEST_CASE("score: partial overlap matches an independent F1 script") {
  auto cfg = cfg_default();
  auto t = sample_task(TaskFamily::Mixed, 77, cfg);
  REQUIRE(t.answer.size() == 3);
  // keep only the first sub-answer
  std::vector<int> partial = {t.answer[0]};
  const double s = score_tokens(partial, t);

  // independent multiset F1
  int overlap = 0;
  std::vector<int> ref = t.answer;
  for (int g : partial) {
    auto it = std::find(ref.begin(), ref.end(), g);
    if (it != ref.end()) {
      ref.erase(it);
      ++overlap;
    }
  }
  const double prec = static_cast<double>(overlap) / partial.size();
  const double rec = static_cast<double>(overlap) / t.answer.size();
  const double f1 =
      overlap ? 2 * prec * rec / (prec + rec) : 0.0;
  CHECK(s == doctest::Approx(f1).epsilon(1e-12));
  CHECK(s < 1.0);
}

TEST_CASE("answers vary across seeds, so blind guessing stays at chance") {
  auto cfg = cfg_default();
  std::set<std::vector<int>> distinct;
  for (uint64_t seed = 0; seed < 50; ++seed)
    distinct.insert(sample_task(TaskFamily::Retrieve, seed, cfg).answer);
  CHECK(distinct.size() >= 4);
}

TEST_CASE("unknown family string is an error") {
  CHECK_THROWS(task_family_from_string("trivia"));
  CHECK(task_family_from_string("mixed") == TaskFamily::Mixed);
}

TEST_CASE("task dump line is deterministic and self-describing") {
  auto cfg = cfg_default();
  auto t = sample_task(TaskFamily::Count, 9, cfg);
  auto line = dump_task_line(t);
  CHECK(line == dump_task_line(t));
  CHECK(line.find("count 9 ") == 0);
  CHECK(line.find("a=") != std::string::npos);
}
