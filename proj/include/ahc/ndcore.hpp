#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace ahc {

using Vec = std::vector<double>;

// Row-major dense matrix. Problem sizes here are tiny (feature dim 64, code
// dims <= 16), so no blocking, no BLAS, no sparsity.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

bool all_finite(const Vec& v);
bool all_finite(const Mat& m);

// y = W x + b with W of shape |b| x |x|. Throws on dimension mismatch.
Vec linear_forward(const Vec& x, const Mat& w, const Vec& b);

// (1/n) * sum (a_i - b_i)^2. Throws on length mismatch or empty input.
double mse(const Vec& a, const Vec& b);

// Central-difference gradient of a scalar function, one coordinate at a time.
// This is the numerical oracle every analytic backward pass in the project is
// validated against; it must stay independent of those backward passes.
Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& p,
                     double step = 1e-4);

// p' = p - lr * g, elementwise. Pure: inputs are not modified.
Vec sgd_step(const Vec& params, const Vec& grads, double lr);
Mat sgd_step(const Mat& params, const Mat& grads, double lr);

// Worst per-coordinate relative error |a_i - b_i| / max(|a_i|, |b_i|),
// skipping coordinates where both magnitudes fall below `floor` (the noise
// floor of a central difference).
double max_rel_error(const Vec& a, const Vec& b, double floor = 1e-8);

// Deterministic seed-splitting: mixes a base seed with a stream tag and up to
// two indices so that training, evaluation, and sampling streams never share
// state (splitmix64 finalizer on each ingredient).
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          std::uint64_t a = 0, std::uint64_t b = 0);

// Hand-rolled draws instead of std::uniform_int_distribution /
// std::normal_distribution: the standard leaves their value sequences
// unspecified, and reports must be reproducible byte-for-byte from a seed
// regardless of the standard library in use.

// Unbiased integer in [0, n). Throws if n == 0.
std::uint64_t bounded_uniform(std::mt19937_64& rng, std::uint64_t n);

// Uniform double in [0, 1) with 53 random bits.
double uniform_unit(std::mt19937_64& rng);

// Standard normal via Box-Muller (cosine branch only).
double standard_normal(std::mt19937_64& rng);

// In-place Fisher-Yates using bounded_uniform.
template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(bounded_uniform(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace ahc
