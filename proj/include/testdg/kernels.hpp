#ifndef TESTDG_KERNELS_HPP
#define TESTDG_KERNELS_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "testdg/array.hpp"
#include "testdg/autodiff.hpp"

namespace testdg {

struct KernelConfig {
  double gamma = 1.0;  // RBF bandwidth, > 0
};

// Ordered set of fixed-dimension embedding vectors with per-vector source
// identifiers (sample indices), kept so selection results are traceable and
// tie-breaking is deterministic.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  explicit EmbeddingSet(std::size_t dim) : dim_(dim), matrix_({0, dim}) {}
  EmbeddingSet(RealArray matrix, std::vector<std::int64_t> source_ids);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return matrix_.rank() == 2 ? matrix_.extent(0) : 0; }
  bool empty() const { return size() == 0; }

  std::span<const double> vector(std::size_t i) const { return matrix_.row(i); }
  std::int64_t source_id(std::size_t i) const { return source_ids_[i]; }
  const std::vector<std::int64_t>& source_ids() const { return source_ids_; }
  const RealArray& matrix() const { return matrix_; }

  void push_back(std::span<const double> v, std::int64_t source_id);
  void set_vector(std::size_t i, std::span<const double> v);
  EmbeddingSet subset(const std::vector<std::size_t>& indices) const;

 private:
  std::size_t dim_ = 0;
  RealArray matrix_;  // [size, dim]
  std::vector<std::int64_t> source_ids_;
};

// k(x, y) = exp(-gamma * ||x - y||^2), in (0, 1].
double rbf_kernel(std::span<const double> x, std::span<const double> y,
                  const KernelConfig& cfg);

// Biased V-statistic squared MMD between two non-empty sets (self terms
// included).
double mmd_squared(const EmbeddingSet& f, const EmbeddingSet& p,
                   const KernelConfig& cfg);

// Normalized monotone submodular score of a candidate prototype set P
// against the reference set F. selection_score({}) == 0 exactly.
double selection_score(const EmbeddingSet& f, const EmbeddingSet& p,
                       const KernelConfig& cfg);

// Greedily picks n elements of F maximizing the selection score; ties break
// toward the lowest source id, then the lowest position. Source ids are
// preserved in the result.
EmbeddingSet greedy_select(const EmbeddingSet& f, std::size_t n,
                           const KernelConfig& cfg);

// Indices (into F) of the greedy selection, in pick order.
std::vector<std::size_t> greedy_select_indices(const EmbeddingSet& f, std::size_t n,
                                               const KernelConfig& cfg);

// Symmetric sum of squared nearest-neighbour distances between two non-empty
// sets.
double chamfer_distance(const EmbeddingSet& a, const EmbeddingSet& b);

// Differentiable Chamfer distance over two rank-2 arrays ([m,d], [n,d]).
// Gradient routes through the first minimizing index on ties.
Var chamfer(const Var& a, const Var& b);

// gamma = 1 / (2 * median pairwise squared distance); 1 when the median is 0.
// Requires at least two vectors.
KernelConfig median_heuristic_gamma(const EmbeddingSet& f);

}  // namespace testdg

#endif
