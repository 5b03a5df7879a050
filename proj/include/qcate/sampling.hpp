#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "qcate/data.hpp"
#include "qcate/rng.hpp"

namespace qcate {

// Observational sampling: keep row n of an RCT pool with probability
// G(t_n, x_n). The keep probability is covariate- and arm-dependent, which
// induces confounding in the kept subset while the closed-form induced
// propensity stays available as ground truth.

struct BiasingConfig {
    int layers = 1;  // hidden tanh layers, in {1, 2, 3}
    std::size_t target_est_size = 0;
    double target_treat_frac = 0.5;
    int hidden_width = 8;
    std::uint64_t seed = 0;
    // 0 < G < 1, strictly interior. The floor must stay tiny: a small
    // estimation target drawn from a large pool needs keep probabilities
    // well below 1%.
    double g_lo = 1e-4, g_hi = 0.98;
    double logit_scale = 1.0;
    double size_rel_tol = 0.02;
    double frac_abs_tol = 0.02;
    int bisect_iters = 60;
};

// Tiny dense MLP with tanh hidden layers and a linear output unit; weights
// drawn from a seeded standard normal.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::size_t in_dim, int width, int layers, rng::Stream& stream);
    double logit(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    std::size_t in_dim() const { return in_dim_; }

private:
    std::size_t in_dim_ = 0;
    std::vector<Eigen::MatrixXd> w_;
    std::vector<Eigen::VectorXd> b_;
    Eigen::VectorXd w_out_;
    double b_out_ = 0.0;
};

class BiasingFn {
public:
    // G(t, x) = clip(sigmoid(scale * mlp_t(x) + shift_t), g_lo, g_hi)
    double g(int t, const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    Eigen::VectorXd g_column(int t, const Eigen::MatrixXd& x) const;

    double shift(int arm) const { return arm == 1 ? shift1_ : shift0_; }
    double g_lo() const { return g_lo_; }
    double g_hi() const { return g_hi_; }

private:
    friend BiasingFn make_biasing_fn(const BiasingConfig&, const Dataset&);
    Mlp arm0_, arm1_;
    double scale_ = 1.0;
    double shift0_ = 0.0, shift1_ = 0.0;
    double g_lo_ = 1e-4, g_hi_ = 0.98;
};

// Calibrates per-arm shifts by bisection so the expected kept count matches
// target_est_size (2% relative) and the expected kept treated fraction
// matches target_treat_frac (0.02 absolute) on the pool. Throws
// CalibrationError naming the violated target when infeasible.
BiasingFn make_biasing_fn(const BiasingConfig& config, const Dataset& pool);

// Pr(T=1 | X=x, kept) = 1 / (1 + ((1-e1)/e1) * G(x,0)/G(x,1)).
double induced_propensity(const BiasingFn& g, double e1,
                          const Eigen::Ref<const Eigen::RowVectorXd>& x);

// Algorithm: draw K_n ~ Bernoulli(G(t_n, x_n)) independently per row, keep
// rows with K_n = 1. Output provenance is observational_sampled and carries
// the true induced propensity for diagnostics. Retries up to 3 times when
// everything is dropped.
//
// Besides the treatment assignment, keeping also tilts the covariate
// marginal: each arm's kept density is the pool density reweighted by that
// arm's keep probability over its mean. The tilted density itself is not
// computed anywhere; evaluation never needs it because the statistic is
// estimated directly on kept rows.
Dataset observational_sample(const Dataset& pool, const BiasingFn& g, std::uint64_t seed);

struct GridCell {
    std::size_t cell_index = 0;  // flattened setting index
    std::size_t size = 0;
    double treat_frac = 0.5;
    int layers = 1;
    int replicate = 0;
    std::uint64_t seed = 0;
};

// Full Cartesian product of settings x replicates, each with a distinct
// deterministic seed.
std::vector<GridCell> build_grid(const std::vector<std::size_t>& sizes,
                                 const std::vector<double>& treat_fracs,
                                 const std::vector<int>& layer_counts, int replicates,
                                 std::uint64_t master_seed);

}  // namespace qcate
