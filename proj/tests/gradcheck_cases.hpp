#pragma once

// Case generators for the finite-difference gradient suite. Each op family
// gets its own generator, step size, and a degeneracy screen: cases whose
// smallest nonzero analytic gradient entry falls below min_grad are
// resampled, because central differences cannot resolve near-zero components
// of an otherwise well-scaled gradient out of float32 storage noise.

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "km/random.hpp"
#include "km/tensor.hpp"

namespace kmtest {

using km::Rng;
using km::Tensor;

struct GradCase {
  std::function<Tensor(const std::vector<Tensor>&)> f;
  std::vector<Tensor> inputs;
};

struct OpSpec {
  std::string name;
  double eps;
  double tol;
  double min_grad;  // 0 disables the screen
  std::function<GradCase(Rng&)> make;
};

inline Tensor urand(std::vector<int64_t> shape, double lo, double hi, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = static_cast<km::real>(lo + (hi - lo) * rng.next_double());
  return t;
}

// sign * U(lo, hi): magnitudes bounded away from zero, mixed signs.
inline Tensor srand_(std::vector<int64_t> shape, double lo, double hi, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) {
    double mag = lo + (hi - lo) * rng.next_double();
    v = static_cast<km::real>(rng.next_below(2) ? mag : -mag);
  }
  return t;
}

inline bool is_degenerate(const GradCase& c, double min_grad) {
  if (min_grad <= 0) return false;
  for (auto t : c.inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = c.f(c.inputs);
  km::backward(loss);
  for (const auto& t : c.inputs) {
    if (!t.has_grad()) continue;
    for (km::real g : t.grad()) {
      double a = std::fabs(static_cast<double>(g));
      if (a != 0.0 && a < min_grad) return true;
    }
  }
  return false;
}

inline GradCase accepted_case(const OpSpec& spec, uint64_t index) {
  for (uint64_t salt = 0; salt < 500; ++salt) {
    Rng rng(km::hash_string(spec.name) ^ km::mix64(index * 1000003ULL + salt));
    GradCase c = spec.make(rng);
    if (!is_degenerate(c, spec.min_grad)) return c;
  }
  throw std::runtime_error("gradcheck generator for " + spec.name +
                           " rejected 500 candidates; screen too strict");
}

// Rows with spread bounded below (alternating-sign magnitudes), so the
// layer-norm denominator cannot collapse and blow up FD truncation error.
inline Tensor spread_rows(int64_t r, int64_t c, Rng& rng) {
  Tensor t = Tensor::zeros({r, c});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double mag = 1.0 + 0.5 * rng.next_double();
      t.data()[static_cast<size_t>(i * c + j)] =
          static_cast<km::real>(j % 2 == 0 ? mag : -mag);
    }
  return t;
}

inline std::vector<OpSpec> grad_cases() {
  using km::kGradCheckEps;
  using km::kGradCheckTol;
  const bool f64 = sizeof(km::real) == 8;
  const double kExactTol = f64 ? 1e-10 : 5e-7;
  const double kCurvedEps = f64 ? kGradCheckEps : 1.2e-2;
  const double kLinearEps = f64 ? kGradCheckEps : 2.4e-2;
  const double kGeluEps = f64 ? kGradCheckEps : 3e-3;

  std::vector<OpSpec> specs;

  specs.push_back({"sum", kGradCheckEps, 1e-10, 0.0, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(4));
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[](const std::vector<Tensor>& in) { return km::sum(in[0]); },
                                     {x}};
                   }});

  // mean's analytic gradient 1/n is itself rounded to storage width, so it
  // gets the data-movement tolerance rather than sum's near-zero one.
  specs.push_back({"mean", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(4));
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[](const std::vector<Tensor>& in) { return km::mean(in[0]); },
                                     {x}};
                   }});

  specs.push_back({"matmul", kLinearEps, kGradCheckTol, 0.3, [](Rng& rng) {
                     int64_t m = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t k = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
                     Tensor a = urand({m, k}, 0.5, 1.5, rng);
                     Tensor b = urand({k, n}, 0.5, 1.5, rng);
                     return GradCase{[](const std::vector<Tensor>& in) {
                                       return km::sum(km::matmul(in[0], in[1]));
                                     },
                                     {a, b}};
                   }});

  specs.push_back({"transpose", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(4));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(4));
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     Tensor w = srand_({c, r}, 0.5, 1.5, rng);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::transpose(in[0]), w);
                                     },
                                     {x}};
                   }});

  auto elemwise_pair = [](Rng& rng, bool positive_a) {
    int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
    int64_t c = 2 + static_cast<int64_t>(rng.next_below(3));
    Tensor a = positive_a ? urand({r, c}, 0.5, 1.5, rng) : srand_({r, c}, 0.5, 1.5, rng);
    Tensor b;
    switch (rng.next_below(4)) {
      case 0: b = srand_({r, c}, 0.5, 1.5, rng); break;
      case 1: b = srand_({1}, 0.5, 1.5, rng); break;
      case 2: b = srand_({c}, 0.5, 1.5, rng); break;
      default: b = srand_({r, 1}, 0.5, 1.5, rng); break;
    }
    Tensor w = urand({r, c}, 0.5, 1.5, rng);
    return std::make_tuple(a, b, w);
  };

  specs.push_back({"add", kLinearEps, kGradCheckTol, 0.2, [elemwise_pair](Rng& rng) {
                     auto [a, b, w] = elemwise_pair(rng, false);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::add(in[0], in[1]), w);
                                     },
                                     {a, b}};
                   }});

  specs.push_back({"sub", kLinearEps, kGradCheckTol, 0.2, [elemwise_pair](Rng& rng) {
                     auto [a, b, w] = elemwise_pair(rng, false);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::sub(in[0], in[1]), w);
                                     },
                                     {a, b}};
                   }});

  specs.push_back({"mul", kLinearEps, kGradCheckTol, 0.1, [elemwise_pair](Rng& rng) {
                     auto [a, b, w] = elemwise_pair(rng, true);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::mul(in[0], in[1]), w);
                                     },
                                     {a, b}};
                   }});

  specs.push_back({"scale", kLinearEps, kGradCheckTol, 0.2, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(3));
                     double k = (rng.next_below(2) ? 1.0 : -1.0) * (0.5 + 1.5 * rng.next_double());
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     Tensor w = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[w, k](const std::vector<Tensor>& in) {
                                       return km::dot(km::scale(in[0], k), w);
                                     },
                                     {x}};
                   }});

  specs.push_back({"dot", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(3));
                     Tensor a = srand_({r, c}, 0.5, 1.5, rng);
                     Tensor b = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[](const std::vector<Tensor>& in) {
                                       return km::dot(in[0], in[1]);
                                     },
                                     {a, b}};
                   }});

  specs.push_back({"take_rows", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t v = 3 + static_cast<int64_t>(rng.next_below(4));
                     int64_t d = 2 + static_cast<int64_t>(rng.next_below(3));
                     size_t len = 2 + rng.next_below(5);
                     std::vector<int> ids(len);
                     for (auto& id : ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(v)));
                     Tensor table = srand_({v, d}, 0.5, 1.5, rng);
                     Tensor w = srand_({static_cast<int64_t>(len), d}, 0.5, 1.5, rng);
                     return GradCase{[ids, w](const std::vector<Tensor>& in) {
                                       return km::dot(km::take_rows(in[0], ids), w);
                                     },
                                     {table}};
                   }});

  specs.push_back({"take_per_row", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(4));
                     int64_t c = 3 + static_cast<int64_t>(rng.next_below(4));
                     std::vector<int> ids(static_cast<size_t>(r));
                     for (auto& id : ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(c)));
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     Tensor w = srand_({r}, 0.5, 1.5, rng);
                     return GradCase{[ids, w](const std::vector<Tensor>& in) {
                                       return km::dot(km::take_per_row(in[0], ids), w);
                                     },
                                     {x}};
                   }});

  specs.push_back({"layer_norm", kCurvedEps, kGradCheckTol, 0.2, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(2));
                     int64_t c = 4 + static_cast<int64_t>(rng.next_below(4));
                     Tensor x = spread_rows(r, c, rng);
                     Tensor gain = srand_({c}, 0.5, 1.0, rng);
                     Tensor bias = urand({c}, -0.5, 0.5, rng);
                     Tensor w = urand({r, c}, 0.5, 1.5, rng);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::layer_norm(in[0], in[1], in[2]), w);
                                     },
                                     {x, gain, bias}};
                   }});

  specs.push_back({"layer_norm_sum", kCurvedEps, kGradCheckTol, 0.15, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(2));
                     int64_t c = 4 + static_cast<int64_t>(rng.next_below(4));
                     Tensor x = spread_rows(r, c, rng);
                     Tensor gain = srand_({c}, 0.5, 1.0, rng);
                     Tensor bias = urand({c}, -0.5, 0.5, rng);
                     return GradCase{[](const std::vector<Tensor>& in) {
                                       return km::sum(km::layer_norm(in[0], in[1], in[2]));
                                     },
                                     {x, gain, bias}};
                   }});

  specs.push_back({"gelu", kGeluEps, kGradCheckTol, 0.08, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(3));
                     Tensor x = urand({r, c}, -1.5, 1.5, rng);
                     Tensor w = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::gelu(in[0]), w);
                                     },
                                     {x}};
                   }});

  specs.push_back({"softmax", kCurvedEps, kGradCheckTol, 0.02, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(2));
                     int64_t c = 3;
                     double tau = rng.next_below(2) ? 1.0 : 2.0;
                     Tensor x = urand({r, c}, -0.3, 0.3, rng);
                     std::vector<int> ids(static_cast<size_t>(r));
                     for (auto& id : ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(c)));
                     return GradCase{[ids, tau](const std::vector<Tensor>& in) {
                                       return km::sum(km::take_per_row(km::softmax(in[0], tau), ids));
                                     },
                                     {x}};
                   }});

  specs.push_back({"softmax_weighted", kCurvedEps, kGradCheckTol, 0.05, [](Rng& rng) {
                     int64_t r = 2;
                     int64_t c = 3;
                     Tensor x = urand({r, c}, -0.3, 0.3, rng);
                     Tensor w = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::softmax(in[0], 1.0), w);
                                     },
                                     {x}};
                   }});

  specs.push_back({"log_softmax", kCurvedEps, kGradCheckTol, 0.1, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(2));
                     int64_t c = 3;
                     Tensor x = urand({r, c}, -0.3, 0.3, rng);
                     std::vector<int> ids(static_cast<size_t>(r));
                     for (auto& id : ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(c)));
                     return GradCase{[ids](const std::vector<Tensor>& in) {
                                       return km::sum(km::take_per_row(km::log_softmax(in[0]), ids));
                                     },
                                     {x}};
                   }});

  specs.push_back({"abs", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 2 + static_cast<int64_t>(rng.next_below(3));
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     Tensor w = srand_({r, c}, 0.5, 1.5, rng);
                     return GradCase{[w](const std::vector<Tensor>& in) {
                                       return km::dot(km::abs(in[0]), w);
                                     },
                                     {x}};
                   }});

  specs.push_back({"concat", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int axis = static_cast<int>(rng.next_below(2));
                     size_t nparts = 2 + rng.next_below(2);
                     int64_t shared = 2 + static_cast<int64_t>(rng.next_below(3));
                     std::vector<Tensor> parts;
                     int64_t total = 0;
                     for (size_t i = 0; i < nparts; ++i) {
                       int64_t extent = 1 + static_cast<int64_t>(rng.next_below(3));
                       total += extent;
                       parts.push_back(axis == 0 ? srand_({extent, shared}, 0.5, 1.5, rng)
                                                 : srand_({shared, extent}, 0.5, 1.5, rng));
                     }
                     Tensor w = axis == 0 ? srand_({total, shared}, 0.5, 1.5, rng)
                                          : srand_({shared, total}, 0.5, 1.5, rng);
                     return GradCase{[axis, w](const std::vector<Tensor>& in) {
                                       return km::dot(km::concat(in, axis), w);
                                     },
                                     parts};
                   }});

  specs.push_back({"slice", kGradCheckEps, kExactTol, 0.0, [](Rng& rng) {
                     int64_t r = 3 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 3 + static_cast<int64_t>(rng.next_below(3));
                     int64_t r0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(r - 1)));
                     int64_t r1 = r0 + 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(r - r0)));
                     int64_t c0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(c - 1)));
                     int64_t c1 = c0 + 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(c - c0)));
                     Tensor x = srand_({r, c}, 0.5, 1.5, rng);
                     Tensor w = srand_({r1 - r0, c1 - c0}, 0.5, 1.5, rng);
                     return GradCase{[r0, r1, c0, c1, w](const std::vector<Tensor>& in) {
                                       return km::dot(km::slice(in[0], r0, r1, c0, c1), w);
                                     },
                                     {x}};
                   }});

  // cross_entropy evaluates in double straight from its stored inputs, so
  // finite differences see almost no storage noise and a small step works.
  specs.push_back({"cross_entropy", f64 ? kGradCheckEps : 1e-3, kGradCheckTol, 2e-3,
                   [](Rng& rng) {
                     int64_t r = 2 + static_cast<int64_t>(rng.next_below(3));
                     int64_t c = 3 + static_cast<int64_t>(rng.next_below(3));
                     Tensor x = urand({r, c}, -1.0, 1.0, rng);
                     std::vector<int> targets(static_cast<size_t>(r));
                     for (auto& t : targets)
                       t = static_cast<int>(rng.next_below(static_cast<uint64_t>(c)));
                     return GradCase{[targets](const std::vector<Tensor>& in) {
                                       return km::cross_entropy(in[0], targets);
                                     },
                                     {x}};
                   }});

  specs.push_back({"kl_softmax", kCurvedEps, kGradCheckTol, 0.1, [](Rng& rng) {
                     int64_t r = 2;
                     int64_t c = 3;
                     Tensor a = urand({r, c}, -1.3, 1.3, rng);
                     Tensor b = urand({r, c}, -1.3, 1.3, rng);
                     return GradCase{[](const std::vector<Tensor>& in) {
                                       Tensor p = km::softmax(in[0], 1.0);
                                       return km::dot(
                                           p, km::sub(km::log_softmax(in[0]), km::log_softmax(in[1])));
                                     },
                                     {a, b}};
                   }});

  return specs;
}

}  // namespace kmtest
