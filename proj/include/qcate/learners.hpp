#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qcate/data.hpp"
#include "qcate/qstat.hpp"

namespace qcate {

// ---------------------------------------------------------------------------
// Ridge regression (closed form, K-fold CV over a lambda grid)
// ---------------------------------------------------------------------------

struct LinearModel {
    Eigen::VectorXd weights;
    double intercept = 0.0;
    double lambda = 0.0;
    bool lambda_fallback = false;  // singular system at lambda=0

    double predict_one(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
        return x * weights + intercept;
    }
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

// 13 points, log-spaced over [1e-3, 1e3].
std::vector<double> default_lambda_grid();

struct RidgeOptions {
    std::vector<double> lambda_grid = default_lambda_grid();
    int folds = 5;
    bool intercept = true;
    // Leading design columns exempt from the penalty (the r-learner keeps its
    // constant-effect direction unpenalized).
    int unpenalized_leading = 0;
};

LinearModel fit_ridge_cv(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const RidgeOptions& opts = {});

// Single solve of the penalized normal equations at a fixed lambda.
LinearModel ridge_solve(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda,
                        bool intercept = true, int unpenalized_leading = 0);

// ---------------------------------------------------------------------------
// Logistic regression (IRLS) and the propensity model
// ---------------------------------------------------------------------------

struct PropensityModel {
    Eigen::VectorXd weights;
    double intercept = 0.0;
    double clip_lo = 0.05, clip_hi = 0.95;
    bool converged = true;

    double predict_one(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;  // clipped into [clip_lo, clip_hi]
};

PropensityModel fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                             double l2 = 1e-4, double clip_lo = 0.05, double clip_hi = 0.95,
                             int max_iter = 100);

inline PropensityModel fit_propensity(const Eigen::MatrixXd& x, const std::vector<int>& t,
                                      double clip_lo = 0.05, double clip_hi = 0.95) {
    return fit_logistic(x, t, 1e-4, clip_lo, clip_hi);
}

double logistic_log_likelihood(const PropensityModel& model, const Eigen::MatrixXd& x,
                               const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Cross-fitted nuisances
// ---------------------------------------------------------------------------

class NuisanceSet {
public:
    // Out-of-fold plug-in values aligned to the training dataset. The model
    // producing row i's values was never trained on row i.
    const NuisanceValues& oof() const { return oof_; }
    const std::vector<int>& fold_of() const { return fold_of_; }
    int folds() const { return folds_; }
    double e1() const { return e1_; }
    bool e_known_constant() const { return e_known_constant_; }
    std::uint64_t dataset_fingerprint() const { return dataset_fingerprint_; }

    // Fold-averaged predictions for new points (used on evaluation features
    // disjoint from the fitting data).
    NuisanceValues predict(const Eigen::MatrixXd& x) const;

private:
    friend NuisanceSet fit_nuisances(const Dataset&, int, std::uint64_t, const RidgeOptions&);

    struct FoldModels {
        LinearModel mu0, mu1, m;
        std::optional<PropensityModel> e;
    };
    std::vector<FoldModels> models_;
    std::vector<int> fold_of_;
    NuisanceValues oof_;
    int folds_ = 2;
    double e1_ = 0.5;
    bool e_known_constant_ = true;
    std::uint64_t dataset_fingerprint_ = 0;
};

// Cross-fitting with K folds (default 2). For data with a known constant
// design propensity, e(x) = e1 and no classifier is trained; otherwise a
// clipped logistic model is fit per fold.
NuisanceSet fit_nuisances(const Dataset& d, int folds = 2, std::uint64_t seed = 0,
                          const RidgeOptions& ridge = {});

// ---------------------------------------------------------------------------
// CATE estimation strategies
// ---------------------------------------------------------------------------

enum class Strategy {
    s_learner,
    s_learner_ext,
    t_learner,
    r_learner,
    dr_learner,
    constant_effect,
    zero,
    imported
};

const char* to_string(Strategy s);
// CLI names: s | s_ext | t | r | dr | const | zero (imported handled upstream).
Strategy strategy_from_string(const std::string& s);
bool strategy_needs_nuisances(Strategy s);

class CateEstimator {
public:
    Strategy strategy() const { return strategy_; }
    const std::string& id() const { return id_; }
    std::uint64_t seed() const { return seed_; }
    std::uint64_t dataset_fingerprint() const { return dataset_fingerprint_; }
    double constant_value() const { return constant_; }  // constant_effect only

    // Pure deterministic function of x after fitting. ArgumentError on
    // dimension mismatch or when called on an imported estimator.
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;

    // Imported estimators serve stored values by originating row id.
    Eigen::VectorXd predict_rows(const std::vector<std::size_t>& row_ids) const;
    bool is_imported() const { return strategy_ == Strategy::imported; }

private:
    friend CateEstimator fit_cate(Strategy, const Dataset&, const NuisanceSet*, std::uint64_t,
                                  const RidgeOptions&);
    friend CateEstimator from_predictions(const PredictionTable&, const Dataset&);

    Strategy strategy_ = Strategy::zero;
    std::string id_;
    std::uint64_t seed_ = 0;
    std::uint64_t dataset_fingerprint_ = 0;
    std::size_t dim_ = 0;

    LinearModel stacked_;          // s / s_ext (design: [x, t] or [x, t, x*t])
    LinearModel arm0_, arm1_;      // t-learner
    Eigen::VectorXd r_coef_;       // r-learner: tau(x) = c0 + c[1:]'x
    LinearModel dr_model_;         // dr-learner
    double constant_ = 0.0;        // constant_effect
    Eigen::VectorXd imported_;     // imported values in row order
    std::vector<std::size_t> imported_rows_;
};

// Nuisances must be aligned to the dataset for the r / dr / constant
// strategies. Throws DegenerateDesignError when sum (t - e)^2 = 0.
CateEstimator fit_cate(Strategy strategy, const Dataset& d, const NuisanceSet* nuisances,
                       std::uint64_t seed, const RidgeOptions& ridge = {});

CateEstimator from_predictions(const PredictionTable& table, const Dataset& d);

Eigen::VectorXd predict_cate(const CateEstimator& est, const Eigen::MatrixXd& x);

// ---------------------------------------------------------------------------
// Estimation losses (shared with the q-statistic identities)
// ---------------------------------------------------------------------------

// L_R = (1/N) sum [ (y - m) - (t - e) tau ]^2
double r_loss(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& y, const Eigen::VectorXd& m,
              const std::vector<int>& t, const Eigen::VectorXd& e_tilde);

// L_DR = (1/N) sum [ eta + gamma - tau ]^2
double dr_loss(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& eta_plus_gamma);

}  // namespace qcate
