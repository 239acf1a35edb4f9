#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace ncmi {

// Correctly rounded sum of doubles via a non-overlapping partials expansion
// (Shewchuk). The result is the exact real sum rounded once, so it does not
// depend on the order terms were added in. Used where bit-identical results
// under sample reordering are part of the contract.
class ExactSum {
 public:
  void add(double x) {
    std::size_t used = 0;
    for (std::size_t j = 0; j < partials_.size(); ++j) {
      double y = partials_[j];
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[used++] = lo;
      x = hi;
    }
    partials_.resize(used);
    partials_.push_back(x);
  }

  double value() const {
    // Round the expansion once, with the half-ulp correction so the result
    // is the correctly rounded exact sum.
    if (partials_.empty()) return 0.0;
    std::size_t n = partials_.size();
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      const double yr = hi - x;
      lo = y - yr;
      if (lo != 0.0) break;
    }
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

  void reset() { partials_.clear(); }

 private:
  std::vector<double> partials_;
};

}  // namespace ncmi
