#include "stcl/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "stcl/lal.hpp"
#include "stcl/ldl.hpp"

namespace stcl::ad {

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = u(rng);
  return Tensor(std::move(shape), std::move(d));
}

// Magnitudes in [lo, hi] with random sign; keeps abs/relu away from their kink.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = sign(rng) ? u(rng) : -u(rng);
  return Tensor(std::move(shape), std::move(d));
}

Tensor normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = n(rng);
  return Tensor(std::move(shape), std::move(d));
}

Var weighted(const Var& out, const Var& w) { return sum(mul(out, w)); }

using Unary = Var (*)(const Var&);

GradCase unary_case(std::string name, Shape shape, Unary op, double lo, double hi, bool signed_input) {
  GradCase c;
  c.name = std::move(name);
  c.make_inputs = [shape, lo, hi, signed_input](std::mt19937_64& rng) {
    Tensor x = signed_input ? away_from_zero(shape, rng, lo, hi) : uniform(shape, rng, lo, hi);
    return std::vector<Tensor>{x, uniform(shape, rng, -1.0, 1.0)};
  };
  c.fn = [op](Tape&, std::span<const Var> p) { return weighted(op(p[0]), p[1]); };
  return c;
}

std::vector<double> sorted_times(std::mt19937_64& rng, std::size_t n, double gap_lo, double gap_hi) {
  std::uniform_real_distribution<double> gap(gap_lo, gap_hi);
  std::vector<double> t{0.0};
  while (t.size() < n) t.push_back(t.back() + gap(rng));
  return t;
}

}  // namespace

std::vector<GradCase> op_cases() {
  std::vector<GradCase> cases;
  const Shape s{3, 4};

  auto binary = [&](std::string name, Var (*op)(const Var&, const Var&)) {
    GradCase c;
    c.name = std::move(name);
    // |a| dominates |b|, so a ± b and a·b stay clear of zero and the
    // gradient w.r.t. the weight is never vanishingly small.
    c.make_inputs = [s](std::mt19937_64& rng) {
      return std::vector<Tensor>{away_from_zero(s, rng, 0.5, 1.0), away_from_zero(s, rng, 0.05, 0.25),
                                 uniform(s, rng, -1, 1)};
    };
    c.fn = [op](Tape&, std::span<const Var> p) { return weighted(op(p[0], p[1]), p[2]); };
    cases.push_back(std::move(c));
  };
  binary("add", &add);
  binary("sub", &sub);
  binary("mul", &mul);

  {
    GradCase c;
    c.name = "scale";
    c.make_inputs = [s](std::mt19937_64& rng) {
      return std::vector<Tensor>{uniform(s, rng, -1, 1), uniform(s, rng, -1, 1)};
    };
    c.fn = [](Tape&, std::span<const Var> p) { return weighted(scale(p[0], -1.7), p[1]); };
    cases.push_back(std::move(c));
  }
  {
    GradCase c;
    c.name = "add_scalar";
    c.make_inputs = [s](std::mt19937_64& rng) {
      return std::vector<Tensor>{uniform(s, rng, -1, 1), uniform(s, rng, -1, 1)};
    };
    c.fn = [](Tape&, std::span<const Var> p) { return weighted(add_scalar(p[0], 0.3), p[1]); };
    cases.push_back(std::move(c));
  }
  {
    GradCase c;
    c.name = "matmul";
    c.make_inputs = [](std::mt19937_64& rng) {
      return std::vector<Tensor>{uniform({3, 4}, rng, -1, 1), uniform({4, 2}, rng, -1, 1),
                                 uniform({3, 2}, rng, -1, 1)};
    };
    c.fn = [](Tape&, std::span<const Var> p) { return weighted(matmul(p[0], p[1]), p[2]); };
    cases.push_back(std::move(c));
  }
  {
    GradCase c;
    c.name = "transpose";
    c.make_inputs = [](std::mt19937_64& rng) {
      return std::vector<Tensor>{uniform({3, 4}, rng, -1, 1), uniform({4, 3}, rng, -1, 1)};
    };
    c.fn = [](Tape&, std::span<const Var> p) { return weighted(transpose(p[0]), p[1]); };
    cases.push_back(std::move(c));
  }
  auto reduction = [&](std::string name, Var (*op)(const Var&)) {
    GradCase c;
    c.name = std::move(name);
    c.make_inputs = [s](std::mt19937_64& rng) {
      return std::vector<Tensor>{uniform(s, rng, -1, 1), uniform({}, rng, 0.5, 1.5)};
    };
    c.fn = [op](Tape&, std::span<const Var> p) { return mul(op(p[0]), p[1]); };
    cases.push_back(std::move(c));
  };
  reduction("sum", &sum);
  reduction("mean", &mean);
  reduction("squared_norm", &squared_norm);

  cases.push_back(unary_case("log", s, &log, 0.2, 2.0, false));
  cases.push_back(unary_case("abs", s, &abs, 0.05, 1.0, true));
  cases.push_back(unary_case("relu", s, &relu, 0.05, 1.0, true));
  cases.push_back(unary_case("tanh", s, &tanh, -2.0, 2.0, false));

  {
    GradCase c;
    c.name = "reshape";
    c.make_inputs = [](std::mt19937_64& rng) {
      return std::vector<Tensor>{uniform({3, 4}, rng, -1, 1), uniform({2, 6}, rng, -1, 1)};
    };
    c.fn = [](Tape&, std::span<const Var> p) { return weighted(reshape(p[0], {2, 6}), p[1]); };
    cases.push_back(std::move(c));
  }
  for (std::size_t axis : {0u, 1u}) {
    GradCase c;
    c.name = axis == 0 ? "concat_axis0" : "concat_axis1";
    c.make_inputs = [axis](std::mt19937_64& rng) {
      const Shape a{2, 3};
      const Shape b = axis == 0 ? Shape{4, 3} : Shape{2, 5};
      const Shape out = axis == 0 ? Shape{6, 3} : Shape{2, 8};
      return std::vector<Tensor>{uniform(a, rng, -1, 1), uniform(b, rng, -1, 1), uniform(out, rng, -1, 1)};
    };
    c.fn = [axis](Tape&, std::span<const Var> p) {
      const std::vector<Var> parts{p[0], p[1]};
      return weighted(concat(parts, axis), p[2]);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCase c;
    c.name = "cholesky";
    c.make_inputs = [](std::mt19937_64& rng) {
      const Tensor a = uniform({4, 4}, rng, -1, 1);
      const Tensor pd = stcl::add(stcl::matmul(a, a, false, true), Tensor::identity(4));
      return std::vector<Tensor>{pd, uniform({4, 4}, rng, -1, 1)};
    };
    // Perturbing one entry breaks symmetry, so factor the symmetric part.
    c.fn = [](Tape&, std::span<const Var> p) {
      const Var sym = scale(add(p[0], transpose(p[0])), 0.5);
      return weighted(cholesky(sym), p[1]);
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<GradCase> loss_cases() {
  std::vector<GradCase> cases;
  for (std::size_t t_count : {3u, 4u, 5u}) {
    GradCase c;
    c.name = "spatial_loss_T" + std::to_string(t_count);
    c.make_inputs = [t_count](std::mt19937_64& rng) {
      std::vector<Tensor> xs;
      for (std::size_t t = 0; t < t_count; ++t) xs.push_back(normal({3, 4, 4}, rng));
      return xs;
    };
    c.fn = [](Tape&, std::span<const Var> p) {
      lal::PatientLatents latents;
      latents["p"] = std::vector<Var>(p.begin(), p.end());
      return lal::spatial_loss(latents, lal::ShrinkageConfig{});
    };
    cases.push_back(std::move(c));
  }
  for (std::size_t t_count : {3u, 4u, 5u}) {
    GradCase c;
    c.name = "temporal_loss_T" + std::to_string(t_count);
    // Last input carries the grid times (gradient ignored by the loss).
    c.make_inputs = [t_count](std::mt19937_64& rng) {
      std::vector<Tensor> xs;
      for (std::size_t t = 0; t < t_count; ++t) xs.push_back(normal({3, 4, 4}, rng));
      const auto times = sorted_times(rng, t_count, 0.5, 3.0);
      xs.push_back(Tensor({t_count}, times));
      return xs;
    };
    c.fn = [t_count](Tape&, std::span<const Var> p) {
      const Tensor& tv = p[t_count].value();
      ldl::DenseTimeGrid grid;
      grid.times.assign(tv.begin(), tv.end());
      grid.provenance.assign(t_count, ldl::Provenance::Acquired);
      ldl::DenseLatentSeries series;
      series.latents.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(t_count));
      return ldl::temporal_loss(series, grid);
    };
    c.skip = [t_count](const std::vector<Tensor>& inputs) {
      const Tensor& tv = inputs[t_count];
      std::vector<std::vector<bool>> near_kink(t_count, std::vector<bool>(inputs[0].size(), false));
      for (std::size_t k = 1; k + 1 < t_count; ++k) {
        const auto terms = ldl::central_diff_d2(inputs[k - 1], inputs[k], inputs[k + 1], tv[k - 1], tv[k],
                                                tv[k + 1], ldl::kDefaultDelta);
        for (std::size_t i = 0; i < terms.d2.size(); ++i) {
          if (std::abs(terms.d2[i]) < 1e-8) {
            near_kink[k - 1][i] = near_kink[k][i] = near_kink[k + 1][i] = true;
          }
        }
      }
      return std::function<bool(std::size_t, std::size_t)>([near_kink, t_count](std::size_t p, std::size_t i) {
        return p >= t_count || near_kink[p][i];
      });
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<GradCheckOutcome> run_gradcheck_suite(double step, double tol, std::size_t trials,
                                                  std::uint64_t seed) {
  std::vector<GradCase> cases = op_cases();
  for (auto& c : loss_cases()) cases.push_back(std::move(c));
  std::vector<GradCheckOutcome> out;
  std::mt19937_64 rng(seed);
  for (const auto& c : cases) {
    GradCheckOutcome o;
    o.name = c.name;
    for (std::size_t t = 0; t < trials; ++t) {
      const auto inputs = c.make_inputs(rng);
      const auto report = gradient_check(c.fn, inputs, step, c.skip ? c.skip(inputs) : nullptr);
      o.worst = std::max(o.worst, report.worst());
      ++o.trials;
    }
    o.passed = o.worst <= tol;
    out.push_back(o);
  }
  return out;
}

}  // namespace stcl::ad
