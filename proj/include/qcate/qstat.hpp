#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "qcate/data.hpp"

namespace qcate {

// ---------------------------------------------------------------------------
// Per-sample transforms
// ---------------------------------------------------------------------------

// Horvitz-Thompson transform eta(x,t,y) = (t/e - (1-t)/(1-e)) * y.
// Its conditional mean equals the treatment effect at x.
double ht_transform(int t, double y, double e_at_x);

// q(x,t,y) = tau_hat(x)^2 - 2 * tau_hat(x) * eta(x,t,y).
double q_sample(double tau_hat_x, double eta);

// gamma(x,t) = (1 - t/e)*mu1(x) - (1 - (1-t)/(1-e))*mu0(x), the plug-in
// correction used by the doubly robust loss and variate.
double gamma_term(int t, double e_tilde, double mu1, double mu0);

// Per-sample plug-in values aligned to an evaluation set.
struct NuisanceValues {
    Eigen::VectorXd mu0;
    Eigen::VectorXd mu1;
    Eigen::VectorXd m;
    Eigen::VectorXd e;

    std::size_t size() const { return static_cast<std::size_t>(mu0.size()); }
};

// ---------------------------------------------------------------------------
// Control variates
// ---------------------------------------------------------------------------

enum class CvKind { none, location_invariance, doubly_robust, r_style, custom };

const char* to_string(CvKind k);
CvKind cv_kind_from_string(const std::string& s);  // none|li|dr|r|custom

struct ThetaPolicy {
    enum class Mode { fixed, empirical_optimal };
    Mode mode = Mode::fixed;
    double value = 1.0;

    static ThetaPolicy fixed(double v) { return {Mode::fixed, v}; }
    static ThetaPolicy optimal() { return {Mode::empirical_optimal, 0.0}; }
};

// r(i, t, y, tau_hat_x) for the custom kind; must be zero-mean (gated).
using CustomVariateFn = std::function<double(std::size_t, int, double, double)>;

struct ControlVariate {
    CvKind kind = CvKind::none;
    ThetaPolicy theta = ThetaPolicy::fixed(1.0);
    CustomVariateFn custom_fn;

    static ControlVariate none() { return {CvKind::none, ThetaPolicy::fixed(0.0), {}}; }
    static ControlVariate location_invariance(ThetaPolicy th = ThetaPolicy::optimal()) {
        return {CvKind::location_invariance, th, {}};
    }
    static ControlVariate doubly_robust(ThetaPolicy th = ThetaPolicy::fixed(1.0)) {
        return {CvKind::doubly_robust, th, {}};
    }
    static ControlVariate r_style(ThetaPolicy th = ThetaPolicy::fixed(1.0)) {
        return {CvKind::r_style, th, {}};
    }
    static ControlVariate custom(CustomVariateFn fn, ThetaPolicy th = ThetaPolicy::optimal()) {
        return {CvKind::custom, th, std::move(fn)};
    }
};

// Value of the named variate at one sample. e1 is the RCT design propensity
// (the three named variates assume treatment independent of covariates).
double control_variate_value(CvKind kind, int t, double e1, double mu0, double mu1,
                             double m, double tau_hat_x);

// Variance-minimizing theta* = -Cov(q, r) / Var(r). Var(r)=0 reports theta=0
// with the flag set.
struct ThetaEstimate {
    double theta = 0.0;
    bool var_zero = false;
};
ThetaEstimate optimal_theta(const Eigen::VectorXd& q, const Eigen::VectorXd& r);

// ---------------------------------------------------------------------------
// Propensity source
// ---------------------------------------------------------------------------

struct PropensityModel;  // learners module

class PropensitySource {
public:
    static PropensitySource known_constant(double e1);
    static PropensitySource known_per_sample(Eigen::VectorXd e);
    // Estimated regime: predictions are clipped like any propensity.
    static PropensitySource estimated(const PropensityModel& model);

    bool known() const { return kind_ != Kind::estimated; }
    // Materialize per-sample propensities for a dataset.
    Eigen::VectorXd values(const Dataset& d) const;

private:
    enum class Kind { constant, per_sample, estimated };
    Kind kind_ = Kind::constant;
    double e1_ = 0.5;
    Eigen::VectorXd per_sample_;
    Eigen::VectorXd weights_;  // estimated: logistic weights
    double intercept_ = 0.0;
    double clip_lo_ = 0.05, clip_hi_ = 0.95;
};

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

enum class Screening { unscreened, useful, degenerate, no_heterogeneity_gain };
const char* to_string(Screening s);
Screening screening_from_string(const std::string& s);

struct QResult {
    double q_hat = 0.0;
    double variance = 0.0;  // estimate of Var(q_hat) = sigma^2 / N
    double se = 0.0;
    double ci_lo = 0.0, ci_hi = 0.0;  // 95%, normal quantiles
    std::size_t n = 0;
    CvKind cv = CvKind::none;
    double theta = 0.0;
    bool theta_var_zero = false;
    Screening screening = Screening::unscreened;
    std::uint64_t eval_fingerprint = 0;  // not serialized

    std::string to_json() const;
    static QResult from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Estimation of Q
// ---------------------------------------------------------------------------

// q_hat = sum_n w_n (q_n + theta r_n) / sum_n w_n with w = 1 by default.
// Nuisances are required for the doubly-robust and r-style variates; weights,
// when given, must all be positive.
QResult qhat(const Eigen::VectorXd& tau_hat, const Dataset& d, const PropensitySource& prop,
             const ControlVariate& cv = ControlVariate::none(),
             const NuisanceValues* nuisances = nullptr,
             const Eigen::VectorXd* weights = nullptr);

// Degeneracy / heterogeneity screening. The baseline must come from the same
// evaluation dataset and variate kind.
QResult screen(const QResult& result, const QResult* baseline = nullptr);

// P_hat = q_hat + mean((mu1 - mu0)^2); same ranking as q_hat for fixed
// nuisances.
double approximate_mse(const QResult& result, const NuisanceValues& nuisances);

struct DensityRatio {
    enum class Source { user_supplied, classifier_estimated };
    Eigen::VectorXd zeta;  // per-source-sample weights, all > 0
    Source source = Source::user_supplied;
};

// Q on the target marginal estimated from source samples:
// q_hat = (1/N) sum_n zeta_n q_n (unnormalized weighting).
QResult ipw_qhat(const Eigen::VectorXd& tau_hat, const Dataset& source, const DensityRatio& ratio,
                 const PropensitySource& prop);

// Probabilistic-classifier ratio estimate zeta(x) on the source sample,
// clipped to [0.05, 20].
DensityRatio estimate_density_ratio(const Eigen::MatrixXd& source_x,
                                    const Eigen::MatrixXd& target_x);

// Zero-mean gate for custom variates: pass iff |mean| <= 3 * se.
struct GateResult {
    double mean = 0.0;
    double se = 0.0;
    bool pass = true;
};
GateResult zero_mean_gate(const Eigen::VectorXd& r_values);

}  // namespace qcate
