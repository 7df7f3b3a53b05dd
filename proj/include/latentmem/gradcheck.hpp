#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "latentmem/common.hpp"
#include "latentmem/tensor.hpp"

namespace latentmem {

// Central finite differences against reverse-mode gradients at 64-bit.
// loss_fn must build a scalar from the given tensors using taped ops; it is
// called both with taped leaves (analytic pass) and plain values (fd passes).
using FdLossFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline double fd_max_rel_err(const std::vector<Tensor<double>>& inputs, const FdLossFn& loss_fn,
                             double h = 1e-5, int max_coords_per_input = 0, uint64_t seed = 12345) {
  Tape<double> tape;
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
  Tensor<double> loss = loss_fn(leaves);
  GradMap<double> gm = tape.backward(loss);

  Rng rng(mix_seed(seed, hash_str("fd-coords")));
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const int64_t n = inputs[i].numel();
    std::vector<int64_t> coords;
    if (max_coords_per_input <= 0 || n <= max_coords_per_input) {
      for (int64_t c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (int c = 0; c < max_coords_per_input; ++c)
        coords.push_back(static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n)));
    }
    for (int64_t c : coords) {
      std::vector<Tensor<double>> probe;
      probe.reserve(inputs.size());
      for (const auto& in : inputs) probe.push_back(in.clone());
      const double x0 = (*probe[i].data)[static_cast<size_t>(c)];
      (*probe[i].data)[static_cast<size_t>(c)] = x0 + h;
      const double lp = loss_fn(probe).value();
      (*probe[i].data)[static_cast<size_t>(c)] = x0 - h;
      const double lm = loss_fn(probe).value();
      const double fd = (lp - lm) / (2.0 * h);
      const double an = gm.contains(leaves[i].node) ? (*gm.at(leaves[i].node).data)[static_cast<size_t>(c)] : 0.0;
      const double denom = std::max(std::abs(fd) + std::abs(an), 1e-6);
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

struct FdReport {
  std::string name;
  double max_rel_err;
};

// Per-op gradient suite over small random shapes. Inputs that sit near a
// non-differentiable point (clamp edges, min ties) are nudged away first.
inline std::vector<FdReport> run_op_gradchecks(uint64_t seed) {
  std::vector<FdReport> reports;
  Rng rng(mix_seed(seed, hash_str("gradcheck-suite")));

  auto randn = [&rng](Shape s, double sd = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(s));
    for (double& v : *t.data) v = rng.normal() * sd;
    return t;
  };
  auto rand_const = [&randn](Shape s) {
    Tensor<double> t = randn(std::move(s));
    return t;
  };
  auto check = [&reports](const std::string& name, const std::vector<Tensor<double>>& ins, FdLossFn fn) {
    reports.push_back({name, fd_max_rel_err(ins, fn)});
  };
  // project to a scalar through a fixed random weighting so every output
  // coordinate carries gradient
  auto weighted_sum = [](const Tensor<double>& out, const Tensor<double>& w) {
    return sum(mul(out, w.detached()));
  };

  {
    Tensor<double> w = rand_const({4, 3});
    check("matmul", {randn({4, 5}), randn({5, 3})},
          [w, weighted_sum](const std::vector<Tensor<double>>& in) {
            return weighted_sum(matmul(in[0], in[1]), w);
          });
  }
  {
    Tensor<double> w = rand_const({4, 6});
    check("matmul_nt", {randn({4, 5}), randn({6, 5})},
          [w, weighted_sum](const std::vector<Tensor<double>>& in) {
            return weighted_sum(matmul_nt(in[0], in[1]), w);
          });
  }
  {
    Tensor<double> w = rand_const({3, 4});
    check("transpose2d", {randn({4, 3})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(transpose2d(in[0]), w);
    });
  }
  {
    Tensor<double> w = rand_const({3, 4});
    check("add", {randn({3, 4}), randn({3, 4})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(add(in[0], in[1]), w);
    });
    check("sub", {randn({3, 4}), randn({3, 4})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(sub(in[0], in[1]), w);
    });
    check("mul", {randn({3, 4}), randn({3, 4})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(mul(in[0], in[1]), w);
    });
  }
  {
    // keep the two operands separated so fd never crosses the tie
    Tensor<double> a = randn({3, 4}), b = randn({3, 4});
    for (int64_t i = 0; i < a.numel(); ++i)
      if (std::abs((*a.data)[static_cast<size_t>(i)] - (*b.data)[static_cast<size_t>(i)]) < 0.05)
        (*a.data)[static_cast<size_t>(i)] += 0.2;
    Tensor<double> w = rand_const({3, 4});
    check("min_elem", {a, b}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(min_elem(in[0], in[1]), w);
    });
  }
  {
    Tensor<double> w = rand_const({2, 5});
    check("scale", {randn({2, 5})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(scale(in[0], 1.7), w);
    });
  }
  {
    Tensor<double> w = rand_const({4, 3});
    check("add_bias_row", {randn({4, 3}), randn({3})},
          [w, weighted_sum](const std::vector<Tensor<double>>& in) {
            return weighted_sum(add_bias_row(in[0], in[1]), w);
          });
  }
  {
    Tensor<double> w = rand_const({3, 5});
    check("gelu", {randn({3, 5})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(gelu(in[0]), w);
    });
  }
  {
    Tensor<double> w = rand_const({3, 3});
    check("exp_elem", {randn({3, 3}, 0.5)}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(exp_elem(in[0]), w);
    });
  }
  {
    Tensor<double> x = randn({3, 4});
    for (double& v : *x.data) {
      if (std::abs(v - 1.0) < 0.1) v += 0.3;
      if (std::abs(v + 1.0) < 0.1) v -= 0.3;
    }
    Tensor<double> w = rand_const({3, 4});
    check("clamp", {x}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(clamp(in[0], -1.0, 1.0), w);
    });
  }
  {
    Tensor<double> w = rand_const({4, 6});
    check("layer_norm_lastdim", {randn({4, 6})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(layer_norm_lastdim(in[0]), w);
    });
    check("layer_norm_lastdim_affine", {randn({4, 6}), randn({6}, 0.5), randn({6}, 0.5)},
          [w, weighted_sum](const std::vector<Tensor<double>>& in) {
            return weighted_sum(layer_norm_lastdim(in[0], &in[1], &in[2]), w);
          });
  }
  {
    Tensor<double> w = rand_const({4, 3});
    std::vector<int> ids{2, 0, 2, 5};
    check("embedding_gather", {randn({6, 3})}, [w, weighted_sum, ids](const std::vector<Tensor<double>>& in) {
      return weighted_sum(embedding_gather(in[0], ids), w);
    });
  }
  {
    Tensor<double> w = rand_const({5, 3});
    check("concat_rows", {randn({2, 3}), randn({3, 3})},
          [w, weighted_sum](const std::vector<Tensor<double>>& in) {
            return weighted_sum(concat_rows(in[0], in[1]), w);
          });
  }
  {
    Tensor<double> w = rand_const({2, 3});
    check("slice_rows", {randn({5, 3})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(slice_rows(in[0], 1, 3), w);
    });
  }
  {
    Tensor<double> w = rand_const({3, 5});
    check("concat_cols", {randn({3, 2}), randn({3, 3})},
          [w, weighted_sum](const std::vector<Tensor<double>>& in) {
            return weighted_sum(concat_cols(std::vector<Tensor<double>>{in[0], in[1]}), w);
          });
  }
  {
    Tensor<double> w = rand_const({3, 2});
    check("slice_cols", {randn({3, 5})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(slice_cols(in[0], 2, 4), w);
    });
  }
  {
    check("sum", {randn({3, 4})}, [](const std::vector<Tensor<double>>& in) { return sum(in[0]); });
    check("mean", {randn({3, 4})}, [](const std::vector<Tensor<double>>& in) { return mean(in[0]); });
  }
  {
    Tensor<double> w = rand_const({3, 6});
    check("softmax_lastdim", {randn({3, 6})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(softmax_lastdim(in[0]), w);
    });
    check("log_softmax_lastdim", {randn({3, 6})}, [w, weighted_sum](const std::vector<Tensor<double>>& in) {
      return weighted_sum(log_softmax_lastdim(in[0]), w);
    });
  }
  {
    Tensor<double> w = rand_const({4});
    std::vector<int> idx{1, 0, 3, 2};
    check("pick_per_row", {randn({4, 5})}, [w, weighted_sum, idx](const std::vector<Tensor<double>>& in) {
      return weighted_sum(pick_per_row(in[0], idx), w);
    });
  }
  {
    std::vector<int> targets{3, 0, 6, 1};
    check("cross_entropy_from_logits", {randn({4, 7})},
          [targets](const std::vector<Tensor<double>>& in) {
            return cross_entropy_from_logits(in[0], targets);
          });
  }
  return reports;
}

}  // namespace latentmem
