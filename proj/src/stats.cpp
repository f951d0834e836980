#include "latmem/stats.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace latmem {

namespace {

int bin_of(int step, int length) {
  if (length <= 0) return 0;
  const double rel = static_cast<double>(step) / length;
  return std::min(kPositionBins - 1,
                  std::max(0, static_cast<int>(rel * kPositionBins)));
}

struct ScanRecord {
  MemoryKind kind;
  int step;
};

void accumulate(InvocationStats& s, const std::vector<ScanRecord>& recs,
                int output_len) {
  ++s.total_samples;
  bool any_short = false, any_long = false;
  for (const auto& r : recs) {
    if (r.kind == MemoryKind::Short) {
      ++s.invocations_short;
      ++s.hist_short[bin_of(r.step, output_len)];
      any_short = true;
    } else {
      ++s.invocations_long;
      ++s.hist_long[bin_of(r.step, output_len)];
      any_long = true;
    }
  }
  if (any_short) ++s.samples_short;
  if (any_long) ++s.samples_long;
}

}  // namespace

InvocationStats scan_trajectories(const std::vector<Trajectory>& ts) {
  InvocationStats s;
  for (const auto& t : ts) {
    std::vector<ScanRecord> recs;
    for (const auto& r : t.invocations)
      if (!r.skipped) recs.push_back({r.kind, r.step_index});
    accumulate(s, recs, static_cast<int>(t.generated_tokens().size()));
  }
  return s;
}

InvocationStats scan_dump_stream(std::istream& in) {
  InvocationStats s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      int output_len = 0;
      for (const auto& e : j.at("elements"))
        if (e.contains("t")) ++output_len;
      std::vector<ScanRecord> recs;
      for (const auto& r : j.at("invocations")) {
        if (r.at("skipped").get<bool>()) continue;
        recs.push_back({memory_kind_from_string(r.at("kind")),
                        r.at("step").get<int>()});
      }
      accumulate(s, recs, output_len);
    } catch (const std::exception&) {
      ++s.malformed_lines;
    }
  }
  return s;
}

std::vector<double> gaussian_smooth(const std::vector<double>& xs,
                                    double sigma_bins) {
  if (sigma_bins <= 0.0) return xs;
  const int n = static_cast<int>(xs.size());
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma_bins)));
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double wsum = 0.0, acc = 0.0;
    for (int k = -radius; k <= radius; ++k) {
      const int j = i + k;
      if (j < 0 || j >= n) continue;  // truncated kernel at the edges
      const double w =
          std::exp(-0.5 * (k / sigma_bins) * (k / sigma_bins));
      wsum += w;
      acc += w * xs[j];
    }
    out[i] = acc / wsum;
  }
  return out;
}

std::string stats_to_csv(const InvocationStats& s, double smooth_sigma_bins) {
  std::vector<double> hs(s.hist_short.begin(), s.hist_short.end());
  std::vector<double> hl(s.hist_long.begin(), s.hist_long.end());
  auto ss = gaussian_smooth(hs, smooth_sigma_bins);
  auto sl = gaussian_smooth(hl, smooth_sigma_bins);

  std::ostringstream os;
  os.precision(12);
  os << "metric,value\n"
     << "samples," << s.total_samples << '\n'
     << "ratio_short," << s.ratio_short() << '\n'
     << "ratio_long," << s.ratio_long() << '\n'
     << "invocations_short," << s.invocations_short << '\n'
     << "invocations_long," << s.invocations_long << '\n'
     << "malformed_lines," << s.malformed_lines << '\n'
     << "bin,rel_pos,count_short,count_long,smooth_short,smooth_long\n";
  for (int i = 0; i < kPositionBins; ++i)
    os << i << ',' << (i + 0.5) / kPositionBins << ',' << s.hist_short[i]
       << ',' << s.hist_long[i] << ',' << ss[i] << ',' << sl[i] << '\n';
  return os.str();
}

std::string stats_to_svg(const InvocationStats& s, double smooth_sigma_bins) {
  std::vector<double> hs(s.hist_short.begin(), s.hist_short.end());
  std::vector<double> hl(s.hist_long.begin(), s.hist_long.end());
  auto ss = gaussian_smooth(hs, smooth_sigma_bins);
  auto sl = gaussian_smooth(hl, smooth_sigma_bins);
  double peak = 1.0;
  for (int i = 0; i < kPositionBins; ++i)
    peak = std::max({peak, ss[i], sl[i], hs[i], hl[i]});

  const int w = 400, h = 240, pad = 30;
  auto px = [&](int i) {
    return pad + (w - 2 * pad) * (i + 0.5) / kPositionBins;
  };
  auto py = [&](double v) { return h - pad - (h - 2 * pad) * v / peak; };
  auto polyline = [&](const std::vector<double>& ys, const char* color) {
    std::ostringstream os;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (int i = 0; i < kPositionBins; ++i)
      os << px(i) << ',' << py(ys[i]) << ' ';
    os << "\"/>\n";
    return os.str();
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad
     << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n"
     << polyline(ss, "#c33") << polyline(sl, "#33c")
     << "<text x=\"" << pad << "\" y=\"" << pad / 2
     << "\" font-size=\"10\">invocation relative position (red=short, "
        "blue=long)</text>\n"
     << "</svg>\n";
  return os.str();
}

}  // namespace latmem
