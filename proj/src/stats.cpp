#include "circuitscope/stats.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

#include "circuitscope/error.hpp"

namespace circuitscope {

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw InputError("percentile of an empty series");
  if (!(p >= 0.0 && p <= 100.0)) throw InputError("percentile " + std::to_string(p) + " outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<std::vector<double>> percentile_bands(const std::vector<std::vector<double>>& series,
                                                  std::span<const double> probes) {
  if (series.empty()) throw InputError("percentile_bands: no units");
  const std::size_t steps = series.front().size();
  if (steps == 0) throw InputError("percentile_bands: empty series");
  for (const auto& s : series) {
    if (s.size() != steps) throw InputError("percentile_bands: units cover different numbers of steps");
  }
  std::vector<std::vector<double>> out(steps);
  std::vector<double> column(series.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t u = 0; u < series.size(); ++u) column[u] = series[u][t];
    for (double p : probes) out[t].push_back(percentile(column, p));
  }
  return out;
}

double mean_of(std::span<const double> values) {
  if (values.empty()) throw InputError("mean of an empty series");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double median_of(std::vector<double> values) { return percentile(std::move(values), 50.0); }

std::size_t thread_count() {
  if (const char* env = std::getenv("CIRCUITSCOPE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace circuitscope
