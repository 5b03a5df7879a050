#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "qcate/data.hpp"

namespace qcate {

// Known-truth outcome generation over preprocessed covariates, plus the
// oracle metrics used to verify that the q statistic ranks like the true
// mean squared error.

struct SyntheticConfig {
    enum class Transform { linear, interaction, sine };
    Transform transform = Transform::interaction;
    double tau_shift = 0.0;  // additive effect applied to the treated arm
    double noise_sd = 1.0;
    std::uint64_t seed = 0;
    std::vector<double> beta_values = {0, 1, 2, 3, 4};
    std::vector<double> beta_probs = {0.5, 0.2, 0.15, 0.1, 0.05};
};

const char* to_string(SyntheticConfig::Transform t);
SyntheticConfig::Transform transform_from_string(const std::string& s);

struct OracleTruth {
    Eigen::VectorXd mu0, mu1;  // standardized arms
    Eigen::VectorXd tau;       // mu1 - mu0 + tau_shift
    double sd0 = 1.0, sd1 = 1.0;  // pre-standardization spread; 0 => centered only
    double tau_shift = 0.0;
    Eigen::VectorXd true_propensity;  // filled by gen_treatment
    std::uint64_t seed = 0;
};

struct Outcomes {
    Eigen::VectorXd y0, y1;
    OracleTruth truth;
};

// Arm means from the configured transform, standardized to zero mean / unit
// sd over the sample, then independent unit-normal noise per arm and the
// additive effect on the treated arm.
Outcomes gen_outcomes(const Eigen::MatrixXd& x, const SyntheticConfig& config);

struct TreatmentDraw {
    std::vector<int> t;
    Eigen::VectorXd propensity;  // true assignment probability per sample
    Eigen::VectorXd beta_t;
};

// Pr(T=1 | X=x) = 1 / (1 + exp(beta_t' x + 1)); beta_t drawn from the same
// discrete spec as the outcome coefficients.
TreatmentDraw gen_treatment(const Eigen::MatrixXd& x, std::uint64_t seed,
                            const SyntheticConfig& config = {});

// Uniform [0,1] covariates for fully simulated runs.
Eigen::MatrixXd gen_covariates(std::size_t n, std::size_t dim, std::uint64_t seed);

// Assemble datasets from generated pieces. The logistic-assignment variant is
// observational in character but carries exact per-row propensities; the RCT
// variant assigns T ~ Bernoulli(e1) independently of x.
Dataset make_synthetic_dataset(const Eigen::MatrixXd& x, const Outcomes& outcomes,
                               const TreatmentDraw& treatment);
Dataset make_synthetic_rct(const Eigen::MatrixXd& x, const Outcomes& outcomes, double e1,
                           std::uint64_t seed);

// Empirical mean of (tau(x) - tau_hat(x))^2.
double oracle_pehe(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& tau_true);

struct ScoredModel {
    std::string id;
    double value = 0.0;  // lower is better
};

struct RankAgreement {
    double mrr = 0.0;
    double precision_at_1 = 0.0;
    double spearman = 0.0;
};

// Agreement between the q ranking and the oracle ranking. Ties broken by
// model-id lexical order in both rankings identically.
RankAgreement oracle_rank_agreement(const std::vector<ScoredModel>& q_scores,
                                    const std::vector<ScoredModel>& pehe_scores);

// Oracle sidecar (row_index, mu0, mu1, tau, true_propensity).
void write_oracle_csv(const std::string& path, const OracleTruth& truth);
OracleTruth read_oracle_csv(const std::string& path);

}  // namespace qcate
