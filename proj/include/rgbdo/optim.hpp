#pragma once

// Robust nonlinear least squares on mixed state blocks.
//
// A problem is a list of ResidualBlocks over a State of blocks that are
// either Euclidean vectors (updated additively) or SE(3) poses (updated
// left-multiplicatively, tangent ordered [omega, nu]). Each residual
// evaluation returns the residual, one Jacobian per touched block, and an
// optional information matrix (inverse measurement covariance).
//
// Both solvers assemble dense normal equations
//     H = sum_k w_k J_k^T O_k J_k,   b = sum_k w_k J_k^T O_k r_k
// and step with dx = -H^-1 b (Levenberg-Marquardt additionally damps the
// diagonal and accepts only cost-decreasing steps). Robustness is iterated
// reweighting: the kernel weight w_k is computed from the residual norm at
// the start of each outer iteration and held fixed for that iteration's
// linear solve and step acceptance test.
//
// A residual may declare itself invalid for one iteration (pixel slid out
// of view, depth missing): it then contributes nothing to H, b, or the
// cost. Blocks that stay dropped for most of a solve are listed in the
// report diagnostics.
//
// Assembly always walks blocks in index order on one thread, so a solve is
// a deterministic function of its inputs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "rgbdo/common.hpp"
#include "rgbdo/lie.hpp"

namespace rgbdo::optim {

enum class BlockKind { kEuclidean, kSe3 };

class State {
 public:
  int add_euclidean(const Eigen::VectorXd& value, bool fixed = false) {
    if (value.size() == 0) throw InvalidArgument("State: empty euclidean block");
    Block b;
    b.kind = BlockKind::kEuclidean;
    b.vec = value;
    b.fixed = fixed;
    blocks_.push_back(std::move(b));
    return static_cast<int>(blocks_.size()) - 1;
  }

  int add_pose(const lie::Pose& pose, bool fixed = false) {
    Block b;
    b.kind = BlockKind::kSe3;
    b.pose = pose;
    b.fixed = fixed;
    blocks_.push_back(std::move(b));
    return static_cast<int>(blocks_.size()) - 1;
  }

  int block_count() const { return static_cast<int>(blocks_.size()); }

  BlockKind kind(int id) const { return block(id).kind; }
  bool fixed(int id) const { return block(id).fixed; }
  void set_fixed(int id, bool fixed) { block(id).fixed = fixed; }

  int tangent_dim(int id) const {
    const Block& b = block(id);
    return b.kind == BlockKind::kSe3 ? 6 : static_cast<int>(b.vec.size());
  }

  const Eigen::VectorXd& euclidean(int id) const {
    const Block& b = block(id);
    if (b.kind != BlockKind::kEuclidean) throw InvalidArgument("State: block is not euclidean");
    return b.vec;
  }
  Eigen::VectorXd& euclidean(int id) {
    Block& b = block(id);
    if (b.kind != BlockKind::kEuclidean) throw InvalidArgument("State: block is not euclidean");
    return b.vec;
  }
  const lie::Pose& pose(int id) const {
    const Block& b = block(id);
    if (b.kind != BlockKind::kSe3) throw InvalidArgument("State: block is not a pose");
    return b.pose;
  }
  lie::Pose& pose(int id) {
    Block& b = block(id);
    if (b.kind != BlockKind::kSe3) throw InvalidArgument("State: block is not a pose");
    return b.pose;
  }

  // Tangent dimension over free blocks and each free block's offset into
  // the stacked increment vector (-1 for fixed blocks).
  int free_dim() const {
    int n = 0;
    for (const Block& b : blocks_)
      if (!b.fixed) n += b.kind == BlockKind::kSe3 ? 6 : static_cast<int>(b.vec.size());
    return n;
  }
  std::vector<int> offsets() const {
    std::vector<int> off(blocks_.size(), -1);
    int n = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      if (blocks_[i].fixed) continue;
      off[i] = n;
      n += blocks_[i].kind == BlockKind::kSe3 ? 6 : static_cast<int>(blocks_[i].vec.size());
    }
    return off;
  }

  // Apply a stacked increment over the free blocks: euclidean blocks add,
  // pose blocks update on the left.
  void apply_increment(const Eigen::VectorXd& dx) {
    if (dx.size() != free_dim())
      throw InvalidArgument("State::apply_increment: dimension mismatch");
    int n = 0;
    for (Block& b : blocks_) {
      if (b.fixed) continue;
      if (b.kind == BlockKind::kSe3) {
        b.pose = lie::update_left(b.pose, lie::Vec6(dx.segment<6>(n)));
        n += 6;
      } else {
        b.vec += dx.segment(n, b.vec.size());
        n += static_cast<int>(b.vec.size());
      }
    }
  }

  // Perturb a single block regardless of its fixed flag (finite-difference
  // probing only; the solvers never move fixed blocks).
  void perturb_block(int id, const Eigen::VectorXd& delta) {
    Block& b = block(id);
    if (b.kind == BlockKind::kSe3) {
      if (delta.size() != 6) throw InvalidArgument("State::perturb_block: expected 6-vector");
      b.pose = lie::update_left(b.pose, lie::Vec6(delta));
    } else {
      if (delta.size() != b.vec.size())
        throw InvalidArgument("State::perturb_block: dimension mismatch");
      b.vec += delta;
    }
  }

 private:
  struct Block {
    BlockKind kind = BlockKind::kEuclidean;
    Eigen::VectorXd vec;
    lie::Pose pose;
    bool fixed = false;
  };

  Block& block(int id) {
    if (id < 0 || id >= block_count()) throw InvalidArgument("State: block id out of range");
    return blocks_[id];
  }
  const Block& block(int id) const {
    if (id < 0 || id >= block_count()) throw InvalidArgument("State: block id out of range");
    return blocks_[id];
  }

  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Robust kernels

enum class RobustKernel { kNone, kHuber, kTukey };

struct RobustLoss {
  RobustKernel kernel = RobustKernel::kNone;
  double param = 1.0;
};

// IRLS weight for a residual with Mahalanobis norm r >= 0. Weights are in
// (0, 1], continuous at the kernel threshold, and non-increasing in r.
inline double robust_weight(const RobustLoss& loss, double r) {
  if (r < 0.0) throw InvalidArgument("robust_weight: negative residual norm");
  switch (loss.kernel) {
    case RobustKernel::kNone:
      return 1.0;
    case RobustKernel::kHuber:
      return r <= loss.param ? 1.0 : loss.param / r;
    case RobustKernel::kTukey: {
      if (r > loss.param) return 0.0;
      const double q = r / loss.param;
      const double m = 1.0 - q * q;
      return m * m;
    }
  }
  throw InvalidArgument("robust_weight: unknown kernel");
}

// ---------------------------------------------------------------------------
// Residual blocks

struct ResidualEval {
  bool valid = true;
  Eigen::VectorXd r;
  std::vector<Eigen::MatrixXd> jacobians;  // one per touched block, rows = r.size()
  Eigen::MatrixXd information;             // inverse covariance; empty = identity
};

struct ResidualBlock {
  std::vector<int> block_ids;
  std::function<ResidualEval(const State&)> evaluate;
};

// ---------------------------------------------------------------------------
// Solver options / report

enum class Termination { kConvergedStep, kConvergedCost, kMaxIterations, kNumericFailure };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::kConvergedStep: return "CONVERGED_STEP";
    case Termination::kConvergedCost: return "CONVERGED_COST";
    case Termination::kMaxIterations: return "MAX_ITERATIONS";
    case Termination::kNumericFailure: return "NUMERIC_FAILURE";
  }
  return "?";
}

struct SolverOptions {
  int max_iterations = 50;
  double step_tolerance = 1e-8;
  double cost_tolerance = 1e-9;
  double lm_initial_lambda = 1e-4;
  double lm_up_factor = 10.0;
  double lm_down_factor = 10.0;
  double lm_max_lambda = 1e12;
  RobustLoss loss;

  void validate() const {
    if (max_iterations < 1) throw InvalidArgument("SolverOptions: max_iterations < 1");
    if (!(step_tolerance > 0.0) || !(cost_tolerance > 0.0))
      throw InvalidArgument("SolverOptions: tolerances must be positive");
    if (!(lm_initial_lambda > 0.0) || !(lm_up_factor > 1.0) || !(lm_down_factor > 1.0))
      throw InvalidArgument("SolverOptions: damping parameters out of range");
  }
};

struct IterationRecord {
  int iteration = 0;
  double lambda = 0.0;     // 0 for Gauss-Newton
  double cost_start = 0.0; // weighted cost at iteration start (this iteration's weights)
  double cost_end = 0.0;   // weighted cost of the applied step under the same weights
  double step_norm = 0.0;
  bool accepted = true;
};

struct SolveReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  Termination termination = Termination::kMaxIterations;
  std::vector<IterationRecord> trace;
  int residual_count = 0;
  double dropped_fraction = 0.0;          // mean fraction of invalid blocks per iteration
  std::vector<int> frequently_dropped;    // block indices invalid in > 50% of iterations
  bool degenerate = false;
  std::vector<std::string> notes;
  std::string failure_detail;

  // Costs of accepted steps, in order.
  std::vector<double> accepted_costs() const {
    std::vector<double> out;
    for (const IterationRecord& it : trace)
      if (it.accepted) out.push_back(it.cost_end);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Assembly

namespace detail {

struct Assembly {
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  double cost = 0.0;
  std::vector<double> weights;     // per block; frozen for the iteration
  std::vector<std::uint8_t> used;  // per block; 0 = dropped this evaluation
  int valid_count = 0;
};

// Evaluate all blocks at `state`. When `frozen_weights` is non-null the
// kernel weights are taken from it (candidate-cost evaluation); otherwise
// fresh weights are computed from the residual norms found here.
inline Assembly assemble(const std::vector<ResidualBlock>& blocks, const State& state,
                         const RobustLoss& loss, const std::vector<double>* frozen_weights,
                         bool build_system) {
  const std::vector<int> offsets = state.offsets();
  const int n = state.free_dim();
  Assembly out;
  if (build_system) {
    out.H = Eigen::MatrixXd::Zero(n, n);
    out.b = Eigen::VectorXd::Zero(n);
  }
  out.weights.assign(blocks.size(), 0.0);
  out.used.assign(blocks.size(), 0);

  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const ResidualBlock& blk = blocks[k];
    const ResidualEval ev = blk.evaluate(state);
    if (!ev.valid) continue;
    if (ev.r.size() == 0) throw InvalidArgument("ResidualBlock returned an empty residual");
    if (!ev.r.allFinite()) throw NumericError("ResidualBlock returned a non-finite residual");

    const bool identity_info = ev.information.size() == 0;
    if (!identity_info &&
        (ev.information.rows() != ev.r.size() || ev.information.cols() != ev.r.size()))
      throw InvalidArgument("ResidualBlock information has wrong dimensions");

    const Eigen::VectorXd wr = identity_info ? ev.r : Eigen::VectorXd(ev.information * ev.r);
    const double sq = ev.r.dot(wr);
    if (sq < -1e-12) throw InvalidArgument("ResidualBlock information is not positive definite");
    const double norm = std::sqrt(std::max(sq, 0.0));

    const double w = frozen_weights ? (*frozen_weights)[k] : robust_weight(loss, norm);
    out.weights[k] = w;
    out.used[k] = 1;
    ++out.valid_count;
    out.cost += w * sq;
    if (!build_system || w == 0.0) continue;

    if (ev.jacobians.size() != blk.block_ids.size())
      throw InvalidArgument("ResidualBlock jacobian count does not match touched blocks");

    for (std::size_t a = 0; a < blk.block_ids.size(); ++a) {
      const int ba = blk.block_ids[a];
      if (state.fixed(ba)) continue;
      const Eigen::MatrixXd& ja = ev.jacobians[a];
      if (ja.rows() != ev.r.size() || ja.cols() != state.tangent_dim(ba))
        throw InvalidArgument("ResidualBlock jacobian has wrong dimensions");
      const Eigen::MatrixXd wja = identity_info ? Eigen::MatrixXd(w * ja)
                                                : Eigen::MatrixXd(w * (ev.information * ja));
      out.b.segment(offsets[ba], ja.cols()).noalias() += wja.transpose() * ev.r;
      for (std::size_t c = 0; c < blk.block_ids.size(); ++c) {
        const int bc = blk.block_ids[c];
        if (state.fixed(bc)) continue;
        const Eigen::MatrixXd& jc = ev.jacobians[c];
        out.H.block(offsets[ba], offsets[bc], ja.cols(), jc.cols()).noalias() +=
            wja.transpose() * jc;
      }
    }
  }
  return out;
}

struct Factorization {
  bool ok = false;
  Eigen::VectorXd dx;
  std::string detail;
};

// Solve (H + lambda * diag(H)) dx = -b by LDLT. Diagonal entries that are
// exactly zero (a block dropped this iteration touches nothing) receive a
// small damping floor so the rest of the system stays solvable; the
// corresponding increment is zero since b is zero there too.
inline Factorization solve_damped(const Eigen::MatrixXd& H, const Eigen::VectorXd& b,
                                  double lambda) {
  Factorization out;
  Eigen::MatrixXd damped = H;
  const double max_diag = H.diagonal().cwiseAbs().maxCoeff();
  if (!(max_diag > 0.0) || !H.allFinite()) {
    out.detail = "normal equations are zero or non-finite";
    return out;
  }
  const double floor = 1e-12 * max_diag;
  for (int i = 0; i < H.rows(); ++i) {
    const double d = H(i, i) > floor ? H(i, i) : floor;
    damped(i, i) += lambda > 0.0 ? lambda * d : (H(i, i) > floor ? 0.0 : floor);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
  if (ldlt.info() != Eigen::Success) {
    out.detail = "LDLT factorization failed";
    return out;
  }
  const Eigen::VectorXd d = ldlt.vectorD();
  const double dmax = d.cwiseAbs().maxCoeff();
  const double dmin = d.minCoeff();
  if (!(dmax > 0.0) || dmin <= 0.0 || dmin < 1e-15 * dmax) {
    out.detail = "normal equations not positive definite (pivot ratio " +
                 std::to_string(dmax > 0.0 ? dmin / dmax : 0.0) + ")";
    return out;
  }
  out.dx = ldlt.solve(-b);
  if (!out.dx.allFinite()) {
    out.detail = "solution is non-finite";
    return out;
  }
  out.ok = true;
  return out;
}

inline void finish_drop_stats(SolveReport& report, const std::vector<std::vector<int>>& drops,
                              std::size_t block_count, int iterations) {
  if (iterations <= 0 || block_count == 0) return;
  std::vector<int> counts(block_count, 0);
  long total = 0;
  for (const std::vector<int>& d : drops)
    for (int idx : d) {
      ++counts[idx];
      ++total;
    }
  report.dropped_fraction =
      static_cast<double>(total) / (static_cast<double>(block_count) * iterations);
  for (std::size_t i = 0; i < block_count; ++i)
    if (2 * counts[i] > iterations) report.frequently_dropped.push_back(static_cast<int>(i));
}

}  // namespace detail

// One undamped normal-equation step at the current state (no robust
// reweighting unless a loss is passed). Throws NumericError when the system
// cannot be factorized.
inline Eigen::VectorXd solve_normal_equations(const std::vector<ResidualBlock>& blocks,
                                              const State& state, const RobustLoss& loss = {}) {
  const detail::Assembly asm_ = detail::assemble(blocks, state, loss, nullptr, true);
  if (asm_.valid_count == 0) throw InvalidArgument("solve_normal_equations: no valid residuals");
  const detail::Factorization f = detail::solve_damped(asm_.H, asm_.b, 0.0);
  if (!f.ok) throw NumericError("solve_normal_equations: " + f.detail);
  return f.dx;
}

struct NormalEquations {
  Eigen::MatrixXd H;  // J^T W J over the free parameters
  Eigen::VectorXd b;  // J^T W r
  double cost = 0.0;
  int valid_count = 0;
};

// The Gauss-Newton system at `state` without taking a step. The Hessian
// approximation doubles as the information matrix of the estimate, which is
// what measurement edges downstream want as their weight.
inline NormalEquations compute_normal_equations(const std::vector<ResidualBlock>& blocks,
                                                const State& state, const RobustLoss& loss = {}) {
  const detail::Assembly asm_ = detail::assemble(blocks, state, loss, nullptr, true);
  NormalEquations out;
  out.H = asm_.H;
  out.b = asm_.b;
  out.cost = asm_.cost;
  out.valid_count = asm_.valid_count;
  return out;
}

inline SolveReport gauss_newton(const std::vector<ResidualBlock>& blocks, State& state,
                                const SolverOptions& options = {}) {
  options.validate();
  SolveReport report;
  report.residual_count = static_cast<int>(blocks.size());
  std::vector<std::vector<int>> drops;

  double previous_cost = std::numeric_limits<double>::quiet_NaN();
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    const detail::Assembly asm_ =
        detail::assemble(blocks, state, options.loss, nullptr, true);
    drops.emplace_back();
    for (std::size_t k = 0; k < blocks.size(); ++k)
      if (!asm_.used[k]) drops.back().push_back(static_cast<int>(k));
    if (iter == 0) report.initial_cost = asm_.cost;
    report.final_cost = asm_.cost;

    if (asm_.valid_count == 0) {
      report.termination = Termination::kNumericFailure;
      report.failure_detail = "no valid residuals";
      report.iterations = iter;
      detail::finish_drop_stats(report, drops, blocks.size(), iter + 1);
      return report;
    }

    const detail::Factorization f = detail::solve_damped(asm_.H, asm_.b, 0.0);
    if (!f.ok) {
      report.termination = Termination::kNumericFailure;
      report.failure_detail = f.detail;
      report.iterations = iter;
      detail::finish_drop_stats(report, drops, blocks.size(), iter + 1);
      return report;
    }

    state.apply_increment(f.dx);
    report.iterations = iter + 1;

    // Cost after the step, under this iteration's weights.
    const detail::Assembly after =
        detail::assemble(blocks, state, options.loss, &asm_.weights, false);
    IterationRecord rec;
    rec.iteration = iter;
    rec.cost_start = asm_.cost;
    rec.cost_end = after.cost;
    rec.step_norm = f.dx.norm();
    report.trace.push_back(rec);
    report.final_cost = after.cost;

    if (rec.step_norm < options.step_tolerance) {
      report.termination = Termination::kConvergedStep;
      detail::finish_drop_stats(report, drops, blocks.size(), iter + 1);
      return report;
    }
    if (!std::isnan(previous_cost)) {
      const double denom = std::max(previous_cost, 1e-300);
      if (std::abs(previous_cost - after.cost) / denom < options.cost_tolerance) {
        report.termination = Termination::kConvergedCost;
        detail::finish_drop_stats(report, drops, blocks.size(), iter + 1);
        return report;
      }
    }
    previous_cost = after.cost;
  }
  report.termination = Termination::kMaxIterations;
  detail::finish_drop_stats(report, drops, blocks.size(), options.max_iterations);
  return report;
}

inline SolveReport levenberg_marquardt(const std::vector<ResidualBlock>& blocks, State& state,
                                       const SolverOptions& options = {}) {
  options.validate();
  SolveReport report;
  report.residual_count = static_cast<int>(blocks.size());
  std::vector<std::vector<int>> drops;

  double lambda = options.lm_initial_lambda;
  int iterations_done = 0;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    const detail::Assembly asm_ =
        detail::assemble(blocks, state, options.loss, nullptr, true);
    drops.emplace_back();
    for (std::size_t k = 0; k < blocks.size(); ++k)
      if (!asm_.used[k]) drops.back().push_back(static_cast<int>(k));
    if (iter == 0) report.initial_cost = asm_.cost;
    report.final_cost = asm_.cost;
    iterations_done = iter + 1;

    if (asm_.valid_count == 0) {
      report.termination = Termination::kNumericFailure;
      report.failure_detail = "no valid residuals";
      break;
    }

    // At a numerical optimum no strictly decreasing step exists and the
    // accept test below would push lambda to its ceiling. The estimated
    // Newton step |b| / max(diag H) tells the two situations apart: it is
    // tiny at an optimum and large for a genuinely stuck problem.
    const double max_diag = asm_.H.diagonal().cwiseAbs().maxCoeff();
    if (max_diag > 0.0 &&
        asm_.b.lpNorm<Eigen::Infinity>() / max_diag < options.step_tolerance) {
      report.termination = Termination::kConvergedStep;
      report.iterations = iterations_done;
      detail::finish_drop_stats(report, drops, blocks.size(), iterations_done);
      return report;
    }

    // Inner damping loop: raise lambda until a step reduces the cost under
    // this iteration's frozen weights.
    bool accepted = false;
    double step_norm = 0.0;
    double new_cost = asm_.cost;
    while (true) {
      const detail::Factorization f = detail::solve_damped(asm_.H, asm_.b, lambda);
      if (f.ok) {
        State candidate = state;
        candidate.apply_increment(f.dx);
        const detail::Assembly after =
            detail::assemble(blocks, candidate, options.loss, &asm_.weights, false);
        IterationRecord rec;
        rec.iteration = iter;
        rec.lambda = lambda;
        rec.cost_start = asm_.cost;
        rec.cost_end = after.cost;
        rec.step_norm = f.dx.norm();
        if (after.cost < asm_.cost) {
          rec.accepted = true;
          report.trace.push_back(rec);
          state = std::move(candidate);
          lambda = std::max(lambda / options.lm_down_factor, 1e-12);
          accepted = true;
          step_norm = rec.step_norm;
          new_cost = after.cost;
          break;
        }
        rec.accepted = false;
        report.trace.push_back(rec);
      }
      lambda *= options.lm_up_factor;
      if (lambda > options.lm_max_lambda) {
        report.termination = Termination::kNumericFailure;
        report.failure_detail = f.ok ? "damping ceiling reached without an accepted step"
                                     : "damping ceiling reached: " + f.detail;
        report.iterations = iterations_done;
        detail::finish_drop_stats(report, drops, blocks.size(), iterations_done);
        report.final_cost = asm_.cost;
        return report;
      }
    }

    report.final_cost = new_cost;
    if (step_norm < options.step_tolerance) {
      report.termination = Termination::kConvergedStep;
      report.iterations = iterations_done;
      detail::finish_drop_stats(report, drops, blocks.size(), iterations_done);
      return report;
    }
    const double denom = std::max(asm_.cost, 1e-300);
    if ((asm_.cost - new_cost) / denom < options.cost_tolerance) {
      report.termination = Termination::kConvergedCost;
      report.iterations = iterations_done;
      detail::finish_drop_stats(report, drops, blocks.size(), iterations_done);
      return report;
    }
  }
  report.iterations = iterations_done;
  if (report.termination != Termination::kNumericFailure)
    report.termination = Termination::kMaxIterations;
  detail::finish_drop_stats(report, drops, blocks.size(), iterations_done);
  return report;
}

// ---------------------------------------------------------------------------
// Jacobian verification

struct JacobianCheck {
  bool passed = false;
  bool evaluated = false;   // false when the residual was invalid at the state
  double max_rel_error = 0.0;
  int worst_block = -1;
  int worst_row = -1;
  int worst_col = -1;
};

// Compare analytic Jacobians against tangent-space central differences.
// The error measure is |J_fd - J| / max(1, |J_fd|, |J|) per entry.
inline JacobianCheck check_jacobian(const ResidualBlock& block, const State& state,
                                    double step = 1e-6, double tolerance = 1e-4) {
  JacobianCheck out;
  const ResidualEval base = block.evaluate(state);
  if (!base.valid) return out;
  if (base.jacobians.size() != block.block_ids.size())
    throw InvalidArgument("check_jacobian: jacobian count mismatch");
  out.evaluated = true;
  out.passed = true;

  for (std::size_t a = 0; a < block.block_ids.size(); ++a) {
    const int id = block.block_ids[a];
    const int dim = state.tangent_dim(id);
    const Eigen::MatrixXd& ja = base.jacobians[a];
    if (ja.rows() != base.r.size() || ja.cols() != dim)
      throw InvalidArgument("check_jacobian: jacobian has wrong dimensions");

    for (int c = 0; c < dim; ++c) {
      Eigen::VectorXd delta = Eigen::VectorXd::Zero(dim);

      delta(c) = step;
      State plus = state;
      plus.perturb_block(id, delta);
      const ResidualEval ep = block.evaluate(plus);

      delta(c) = -step;
      State minus = state;
      minus.perturb_block(id, delta);
      const ResidualEval em = block.evaluate(minus);

      if (!ep.valid || !em.valid) continue;  // residual left its domain; skip column
      const Eigen::VectorXd fd = (ep.r - em.r) / (2.0 * step);
      for (int row = 0; row < fd.size(); ++row) {
        const double scale = std::max({1.0, std::abs(fd(row)), std::abs(ja(row, c))});
        const double err = std::abs(fd(row) - ja(row, c)) / scale;
        if (err > out.max_rel_error) {
          out.max_rel_error = err;
          out.worst_block = static_cast<int>(a);
          out.worst_row = row;
          out.worst_col = c;
        }
      }
    }
  }
  out.passed = out.max_rel_error < tolerance;
  return out;
}

}  // namespace rgbdo::optim
