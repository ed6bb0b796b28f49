#include "testdg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace testdg {

namespace {

double squared_distance(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

void require_compatible(const EmbeddingSet& a, const EmbeddingSet& b, const char* op) {
  if (a.empty() || b.empty()) {
    throw std::invalid_argument(std::string(op) + ": sets must be non-empty");
  }
  if (a.dim() != b.dim()) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch");
  }
}

}  // namespace

EmbeddingSet::EmbeddingSet(RealArray matrix, std::vector<std::int64_t> source_ids)
    : matrix_(std::move(matrix)), source_ids_(std::move(source_ids)) {
  if (matrix_.rank() != 2) {
    throw std::invalid_argument("EmbeddingSet: matrix must be rank 2");
  }
  dim_ = matrix_.extent(1);
  if (source_ids_.size() != matrix_.extent(0)) {
    throw std::invalid_argument("EmbeddingSet: one source id per vector required");
  }
  ensure_finite(matrix_, "EmbeddingSet");
}

void EmbeddingSet::push_back(std::span<const double> v, std::int64_t source_id) {
  if (dim_ == 0 && size() == 0) {
    dim_ = v.size();
    matrix_ = RealArray({0, dim_});
  }
  if (v.size() != dim_) {
    throw std::invalid_argument("EmbeddingSet::push_back: dimension mismatch");
  }
  std::vector<double> data(matrix_.data(), matrix_.data() + matrix_.numel());
  data.insert(data.end(), v.begin(), v.end());
  matrix_ = RealArray::from_values({size() + 1, dim_}, std::move(data));
  source_ids_.push_back(source_id);
  ensure_finite(matrix_, "EmbeddingSet::push_back");
}

void EmbeddingSet::set_vector(std::size_t i, std::span<const double> v) {
  if (v.size() != dim_) {
    throw std::invalid_argument("EmbeddingSet::set_vector: dimension mismatch");
  }
  std::copy(v.begin(), v.end(), matrix_.row(i).begin());
  ensure_finite(matrix_, "EmbeddingSet::set_vector");
}

EmbeddingSet EmbeddingSet::subset(const std::vector<std::size_t>& indices) const {
  EmbeddingSet out(dim_);
  for (std::size_t i : indices) {
    if (i >= size()) throw std::invalid_argument("EmbeddingSet::subset: index out of range");
    out.push_back(vector(i), source_id(i));
  }
  return out;
}

double rbf_kernel(std::span<const double> x, std::span<const double> y,
                  const KernelConfig& cfg) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("rbf_kernel: length mismatch");
  }
  if (!(cfg.gamma > 0.0)) throw std::invalid_argument("rbf_kernel: gamma must be > 0");
  return std::exp(-cfg.gamma * squared_distance(x, y));
}

double mmd_squared(const EmbeddingSet& f, const EmbeddingSet& p,
                   const KernelConfig& cfg) {
  require_compatible(f, p, "mmd_squared");
  const double nf = static_cast<double>(f.size());
  const double np = static_cast<double>(p.size());

  double kff = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < f.size(); ++j) {
      kff += rbf_kernel(f.vector(i), f.vector(j), cfg);
    }
  }
  double kfp = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) {
      kfp += rbf_kernel(f.vector(i), p.vector(j), cfg);
    }
  }
  double kpp = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) {
      kpp += rbf_kernel(p.vector(i), p.vector(j), cfg);
    }
  }
  return kff / (nf * nf) - 2.0 * kfp / (nf * np) + kpp / (np * np);
}

double selection_score(const EmbeddingSet& f, const EmbeddingSet& p,
                       const KernelConfig& cfg) {
  if (f.empty()) throw std::invalid_argument("selection_score: reference set empty");
  if (p.empty()) return 0.0;
  if (f.dim() != p.dim()) {
    throw std::invalid_argument("selection_score: dimension mismatch");
  }
  const double nf = static_cast<double>(f.size());
  const double np = static_cast<double>(p.size());

  double kfp = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) {
      kfp += rbf_kernel(f.vector(i), p.vector(j), cfg);
    }
  }
  double kpp = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) {
      kpp += rbf_kernel(p.vector(i), p.vector(j), cfg);
    }
  }
  return 2.0 * kfp / (nf * np) - kpp / (np * np);
}

std::vector<std::size_t> greedy_select_indices(const EmbeddingSet& f, std::size_t n,
                                               const KernelConfig& cfg) {
  if (n == 0) throw std::invalid_argument("greedy_select: n must be >= 1");
  const std::size_t m = f.size();
  if (n > m) throw std::invalid_argument("greedy_select: n exceeds set size");

  // column sums sum_{x in F} k(x, c) per candidate, reused every round
  std::vector<double> cross_sum(m, 0.0);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < m; ++i) {
      cross_sum[c] += rbf_kernel(f.vector(i), f.vector(c), cfg);
    }
  }

  const double nf = static_cast<double>(m);
  std::vector<bool> selected(m, false);
  std::vector<double> pair_sum(m, 0.0);  // sum_{p selected} k(p, c)
  std::vector<std::size_t> picks;
  picks.reserve(n);

  double total_cross = 0.0;  // sum over selected of cross_sum
  double total_pair = 0.0;   // sum_{p,p' selected} k(p, p')

  for (std::size_t round = 0; round < n; ++round) {
    const double np = static_cast<double>(round + 1);
    double best_score = -std::numeric_limits<double>::infinity();
    std::size_t best = m;
    for (std::size_t c = 0; c < m; ++c) {
      if (selected[c]) continue;
      double cross = total_cross + cross_sum[c];
      double pair = total_pair + 2.0 * pair_sum[c] + 1.0;  // k(c,c) = 1
      double score = 2.0 * cross / (nf * np) - pair / (np * np);
      bool better = score > best_score;
      if (!better && score == best_score && best < m) {
        // deterministic tie-break: lowest source id, then lowest position
        better = f.source_id(c) < f.source_id(best);
      }
      if (better) {
        best_score = score;
        best = c;
      }
    }
    selected[best] = true;
    picks.push_back(best);
    total_cross += cross_sum[best];
    total_pair += 2.0 * pair_sum[best] + 1.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (!selected[c]) pair_sum[c] += rbf_kernel(f.vector(best), f.vector(c), cfg);
    }
  }
  return picks;
}

EmbeddingSet greedy_select(const EmbeddingSet& f, std::size_t n,
                           const KernelConfig& cfg) {
  return f.subset(greedy_select_indices(f, n, cfg));
}

double chamfer_distance(const EmbeddingSet& a, const EmbeddingSet& b) {
  require_compatible(a, b, "chamfer_distance");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b.size(); ++j) {
      best = std::min(best, squared_distance(a.vector(i), b.vector(j)));
    }
    total += best;
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) {
      best = std::min(best, squared_distance(b.vector(j), a.vector(i)));
    }
    total += best;
  }
  return total;
}

Var chamfer(const Var& a, const Var& b) {
  const RealArray& av = a->value;
  const RealArray& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(1)) {
    throw std::invalid_argument("chamfer: rank-2 operands with equal dim required");
  }
  const std::size_t m = av.extent(0), n = bv.extent(0), d = av.extent(1);
  if (m == 0 || n == 0) throw std::invalid_argument("chamfer: sets must be non-empty");

  std::vector<std::size_t> nearest_in_b(m), nearest_in_a(n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double s = squared_distance(av.row(i), bv.row(j));
      if (s < best) {
        best = s;
        arg = j;
      }
    }
    nearest_in_b[i] = arg;
    total += best;
  }
  for (std::size_t j = 0; j < n; ++j) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < m; ++i) {
      double s = squared_distance(bv.row(j), av.row(i));
      if (s < best) {
        best = s;
        arg = i;
      }
    }
    nearest_in_a[j] = arg;
    total += best;
  }

  auto backprop = [nearest_in_b = std::move(nearest_in_b),
                   nearest_in_a = std::move(nearest_in_a), m, n, d](Node& self) {
    Var a = self.parents[0];
    Var b = self.parents[1];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t j = nearest_in_b[i];
      for (std::size_t k = 0; k < d; ++k) {
        double diff = a->value.at(i, k) - b->value.at(j, k);
        if (a->requires_grad) a->grad.at(i, k) += g * 2.0 * diff;
        if (b->requires_grad) b->grad.at(j, k) -= g * 2.0 * diff;
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t i = nearest_in_a[j];
      for (std::size_t k = 0; k < d; ++k) {
        double diff = b->value.at(j, k) - a->value.at(i, k);
        if (b->requires_grad) b->grad.at(j, k) += g * 2.0 * diff;
        if (a->requires_grad) a->grad.at(i, k) -= g * 2.0 * diff;
      }
    }
  };
  return detail::make_node(RealArray::scalar(total), {a, b}, backprop, "chamfer");
}

KernelConfig median_heuristic_gamma(const EmbeddingSet& f) {
  if (f.size() < 2) {
    throw std::invalid_argument("median_heuristic_gamma: at least two vectors required");
  }
  std::vector<double> sq;
  sq.reserve(f.size() * (f.size() - 1) / 2);
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = i + 1; j < f.size(); ++j) {
      sq.push_back(squared_distance(f.vector(i), f.vector(j)));
    }
  }
  std::sort(sq.begin(), sq.end());
  double median;
  const std::size_t k = sq.size();
  if (k % 2 == 1) {
    median = sq[k / 2];
  } else {
    median = 0.5 * (sq[k / 2 - 1] + sq[k / 2]);
  }
  KernelConfig cfg;
  cfg.gamma = median > 0.0 ? 1.0 / (2.0 * median) : 1.0;
  return cfg;
}

}  // namespace testdg
