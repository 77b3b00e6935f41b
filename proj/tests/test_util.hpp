#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <span>
#include <vector>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "capsl/rng.hpp"
#include "capsl/tensor.hpp"

namespace capsl::testutil {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("capsl_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <class T>
Tensor<T> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  auto m = matrix<T>(r, c);
  for (auto& v : m.data) v = static_cast<T>(scale * rng.normal());
  return m;
}

template <class T>
Tensor<T> unit_rows(Tensor<T> m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (auto v : m.row(i)) s += static_cast<double>(v) * static_cast<double>(v);
    const double inv = 1.0 / std::sqrt(s);
    for (auto& v : m.row(i)) v = static_cast<T>(v * inv);
  }
  return m;
}

// Central finite differences of f with respect to every entry of x.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Largest entrywise |a - n| / max(|a|, |n|), with magnitudes below `floor`
// compared on an absolute scale.
inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-7) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace capsl::testutil
