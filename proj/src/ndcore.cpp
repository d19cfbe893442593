#include "ahc/ndcore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ahc {

bool all_finite(const Vec& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const Mat& m) { return all_finite(m.data); }

Vec linear_forward(const Vec& x, const Mat& w, const Vec& b) {
  if (w.cols != x.size() || w.rows != b.size()) {
    throw std::invalid_argument(
        "linear_forward: dimension mismatch (W is " + std::to_string(w.rows) + "x" +
        std::to_string(w.cols) + ", x has " + std::to_string(x.size()) + ", b has " +
        std::to_string(b.size()) + ")");
  }
  Vec y(b);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* row = w.data.data() + i * w.cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) acc += row[j] * x[j];
    y[i] += acc;
  }
  return y;
}

double mse(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("mse: length mismatch (" + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw std::invalid_argument("mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& p,
                     double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_grad: step must be > 0");
  Vec grad(p.size(), 0.0);
  Vec probe = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    probe[i] = p[i] + step;
    const double up = f(probe);
    probe[i] = p[i] - step;
    const double down = f(probe);
    probe[i] = p[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::runtime_error("finite_diff_grad: non-finite evaluation at coordinate " +
                               std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

Vec sgd_step(const Vec& params, const Vec& grads, double lr) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("sgd_step: shape mismatch (" +
                                std::to_string(params.size()) + " params vs " +
                                std::to_string(grads.size()) + " grads)");
  }
  Vec out(params);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * grads[i];
  return out;
}

Mat sgd_step(const Mat& params, const Mat& grads, double lr) {
  if (!params.same_shape(grads)) {
    throw std::invalid_argument("sgd_step: matrix shape mismatch");
  }
  Mat out(params);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= lr * grads.data[i];
  return out;
}

double max_rel_error(const Vec& a, const Vec& b, double floor) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("max_rel_error: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ma = std::abs(a[i]);
    const double mb = std::abs(b[i]);
    if (ma < floor && mb < floor) continue;
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(ma, mb));
  }
  return worst;
}

namespace {
std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t a,
                          std::uint64_t b) {
  std::uint64_t h = mix64(base);
  for (unsigned char c : tag) h = mix64(h ^ c);
  h = mix64(h ^ a);
  return mix64(h ^ b);
}

std::uint64_t bounded_uniform(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("bounded_uniform: n must be > 0");
  // Reject the low sliver so the accepted range is an exact multiple of n.
  const std::uint64_t threshold = (0 - n) % n;  // == 2^64 mod n
  std::uint64_t x = rng();
  while (x < threshold) x = rng();
  return x % n;
}

double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

}  // namespace ahc
