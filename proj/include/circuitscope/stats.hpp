#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace circuitscope {

// p-th percentile (0..100) by linear interpolation between order statistics:
// rank p/100 * (n-1) in the sorted values.
double percentile(std::vector<double> values, double p);

// series[unit][step] -> bands[step][probe]; every unit must cover every step.
std::vector<std::vector<double>> percentile_bands(const std::vector<std::vector<double>>& series,
                                                  std::span<const double> probes);

double mean_of(std::span<const double> values);
double median_of(std::vector<double> values);

// Worker count: CIRCUITSCOPE_THREADS when set to a positive integer,
// otherwise the hardware concurrency (at least 1).
std::size_t thread_count();

// Runs fn(i) for i in [0, n) on up to thread_count() threads. Each index runs
// exactly once; callers write results into per-index slots so output order
// does not depend on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace circuitscope
