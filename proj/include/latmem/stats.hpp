#pragma once

#include <array>
#include <istream>
#include <string>
#include <vector>

#include "latmem/decode.hpp"

namespace latmem {

inline constexpr int kPositionBins = 20;

// Per-kind invocation frequency and where in the output invocations land
// (invocation step divided by output token count, binned over [0, 1]).
struct InvocationStats {
  long total_samples = 0;
  long samples_short = 0;       // samples with >= 1 formed short invocation
  long samples_long = 0;
  long invocations_short = 0;   // formed invocations in total
  long invocations_long = 0;
  std::array<long, kPositionBins> hist_short{};
  std::array<long, kPositionBins> hist_long{};
  int malformed_lines = 0;

  double ratio_short() const {
    return total_samples ? static_cast<double>(samples_short) / total_samples
                         : 0.0;
  }
  double ratio_long() const {
    return total_samples ? static_cast<double>(samples_long) / total_samples
                         : 0.0;
  }
};

InvocationStats scan_trajectories(const std::vector<Trajectory>& ts);
// one JSON object per line (trajectory_to_json); bad lines are skipped and
// counted
InvocationStats scan_dump_stream(std::istream& in);

// discrete kernel smoothing; sigma in units of bins
std::vector<double> gaussian_smooth(const std::vector<double>& xs,
                                    double sigma_bins);

std::string stats_to_csv(const InvocationStats& s,
                         double smooth_sigma_bins = 1.0);
std::string stats_to_svg(const InvocationStats& s,
                         double smooth_sigma_bins = 1.0);

}  // namespace latmem
