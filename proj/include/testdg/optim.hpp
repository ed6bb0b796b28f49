#ifndef TESTDG_OPTIM_HPP
#define TESTDG_OPTIM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "testdg/autodiff.hpp"

namespace testdg {

enum class OptMode { sgd, adaptive_moment };

// Ordered, named collection of trainable leaves plus per-parameter moment
// buffers for the adaptive mode. Ordering is insertion order, so updates and
// serialization are deterministic.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var param;
    RealArray m;  // first moment, allocated on first adaptive step
    RealArray v;  // second moment
  };

  Var add(const std::string& name, RealArray init);
  // Registers an existing leaf (must be a parameter, i.e. requires_grad).
  Var add(const std::string& name, const Var& param);
  Var find(const std::string& name) const;  // null if absent

  void zero_grad();
  void set_requires_grad(bool enabled);

  // One in-place update from the accumulated gradients. lr must be > 0.
  void step(double lr, OptMode mode);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::uint64_t step_count() const { return step_count_; }

  // Bitwise snapshot of parameter values, for freeze-contract checks and
  // checkpoint round-trips.
  std::vector<RealArray> snapshot_values() const;
  void restore_values(const std::vector<RealArray>& values);
  bool bit_equal_values(const std::vector<RealArray>& values) const;

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  std::vector<Entry> entries_;
  std::uint64_t step_count_ = 0;
};

// Spec-level entry point; forwards to set.step(lr, mode).
void optimizer_step(ParamSet& params, double lr, OptMode mode);

}  // namespace testdg

#endif
