#pragma once

// Chunked parallel_for over an index range. Bodies write to slots indexed
// by the loop variable, so results are identical for any thread count.

#include <algorithm>
#include <thread>
#include <vector>

namespace mfcl {

struct Parallelism {
  static int& threads() {
    static int value = 0;  // 0 = hardware concurrency
    return value;
  }
  static int effective() {
    const int req = threads();
    if (req > 0) return req;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
  }
};

template <class Body>
void parallel_for(int begin, int end, Body&& body, int threads = 0) {
  const int n = end - begin;
  if (n <= 0) return;
  int t = threads > 0 ? threads : Parallelism::effective();
  t = std::min(t, n);
  if (t <= 1) {
    for (int i = begin; i < end; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t);
  const int chunk = (n + t - 1) / t;
  for (int w = 0; w < t; ++w) {
    const int lo = begin + w * chunk;
    const int hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (int i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace mfcl
