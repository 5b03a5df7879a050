#include "qcate/synthetic.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "qcate/csv.hpp"
#include "qcate/error.hpp"
#include "qcate/par.hpp"
#include "qcate/rng.hpp"

namespace qcate {

const char* to_string(SyntheticConfig::Transform t) {
    switch (t) {
        case SyntheticConfig::Transform::linear: return "linear";
        case SyntheticConfig::Transform::interaction: return "interaction";
        case SyntheticConfig::Transform::sine: return "sine";
    }
    return "?";
}

SyntheticConfig::Transform transform_from_string(const std::string& s) {
    if (s == "linear") return SyntheticConfig::Transform::linear;
    if (s == "interaction") return SyntheticConfig::Transform::interaction;
    if (s == "sine") return SyntheticConfig::Transform::sine;
    throw ConfigError("unknown transform '" + s + "' (expected linear|interaction|sine)");
}

namespace {

Eigen::VectorXd draw_beta(std::size_t dim, const SyntheticConfig& cfg, std::uint64_t seed) {
    if (cfg.beta_values.size() != cfg.beta_probs.size() || cfg.beta_values.empty())
        throw ArgumentError("beta distribution spec needs matching values and probabilities");
    double total = 0.0;
    for (double p : cfg.beta_probs) total += p;
    if (std::abs(total - 1.0) > 1e-9)
        throw ArgumentError("beta distribution probabilities must sum to 1");
    rng::Stream stream(seed);
    Eigen::VectorXd beta(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < beta.size(); ++i) {
        const double u = stream.uniform01();
        double acc = 0.0;
        double v = cfg.beta_values.back();
        for (std::size_t k = 0; k < cfg.beta_probs.size(); ++k) {
            acc += cfg.beta_probs[k];
            if (u < acc) {
                v = cfg.beta_values[k];
                break;
            }
        }
        beta[i] = v;
    }
    return beta;
}

// Cyclic pairwise products: offset 1 for arm 0, offset 2 for arm 1.
Eigen::VectorXd pair_products(const Eigen::Ref<const Eigen::RowVectorXd>& x, int offset) {
    const auto d = x.size();
    Eigen::VectorXd z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = x[i] * x[(i + offset) % d];
    return z;
}

struct Standardized {
    Eigen::VectorXd values;
    double sd = 1.0;  // 0 => constant arm, centered only
};

Standardized standardize(Eigen::VectorXd v) {
    const double mean = v.mean();
    const double sd =
        std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size()));
    Standardized out;
    if (sd == 0.0) {
        // Degenerate constant arm: scaling is undefined, center only.
        out.values = Eigen::VectorXd::Zero(v.size());
        out.sd = 0.0;
    } else {
        out.values = (v.array() - mean) / sd;
        out.sd = sd;
    }
    return out;
}

}  // namespace

Eigen::MatrixXd gen_covariates(std::size_t n, std::size_t dim, std::uint64_t seed) {
    if (n == 0 || dim == 0) throw ArgumentError("covariate generation needs n > 0 and dim > 0");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    par::for_each(n, [&](std::size_t i) {
        rng::Stream s(rng::derive(seed, "covariates", i));
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            x(static_cast<Eigen::Index>(i), j) = s.uniform01();
    });
    return x;
}

Outcomes gen_outcomes(const Eigen::MatrixXd& x, const SyntheticConfig& config) {
    const auto n = x.rows();
    const auto d = x.cols();
    if (n == 0 || d == 0) throw ArgumentError("outcome generation needs nonempty features");
    if (!(config.noise_sd > 0.0)) throw ArgumentError("noise sd must be positive");
    if (d < 2 && config.transform != SyntheticConfig::Transform::linear)
        throw ArgumentError("interaction/sine transforms need dimension >= 2");

    const Eigen::VectorXd beta0 =
        draw_beta(static_cast<std::size_t>(d), config, rng::derive(config.seed, "beta0"));
    const Eigen::VectorXd beta1 =
        draw_beta(static_cast<std::size_t>(d), config, rng::derive(config.seed, "beta1"));

    Eigen::VectorXd raw0(n), raw1(n);
    switch (config.transform) {
        case SyntheticConfig::Transform::linear: {
            par::for_each(static_cast<std::size_t>(n), [&](std::size_t i) {
                const auto row = x.row(static_cast<Eigen::Index>(i));
                raw0[static_cast<Eigen::Index>(i)] = row * beta0;
                raw1[static_cast<Eigen::Index>(i)] = row.array().exp().matrix() * beta1;
            });
            // Arm 1 is exp(raw1); shift by the max exponent so the
            // standardized values never overflow (the shift cancels).
            const double peak = raw1.maxCoeff();
            par::for_each(static_cast<std::size_t>(n), [&](std::size_t i) {
                raw1[static_cast<Eigen::Index>(i)] =
                    std::exp(raw1[static_cast<Eigen::Index>(i)] - peak);
            });
            break;
        }
        case SyntheticConfig::Transform::interaction:
        case SyntheticConfig::Transform::sine: {
            const bool sine = config.transform == SyntheticConfig::Transform::sine;
            par::for_each(static_cast<std::size_t>(n), [&](std::size_t i) {
                const auto row = x.row(static_cast<Eigen::Index>(i));
                const double s0 = pair_products(row, 1).dot(beta0);
                const double s1 = pair_products(row, 2).dot(beta1);
                raw0[static_cast<Eigen::Index>(i)] = sine ? std::cos(s0) : s0;
                raw1[static_cast<Eigen::Index>(i)] = sine ? std::sin(s1) : s1;
            });
            break;
        }
    }

    Standardized arm0 = standardize(std::move(raw0));
    Standardized arm1 = standardize(std::move(raw1));

    Outcomes out;
    out.truth.mu0 = std::move(arm0.values);
    out.truth.mu1 = std::move(arm1.values);
    out.truth.sd0 = arm0.sd;
    out.truth.sd1 = arm1.sd;
    out.truth.tau_shift = config.tau_shift;
    out.truth.tau = out.truth.mu1 - out.truth.mu0;
    out.truth.tau.array() += config.tau_shift;
    out.truth.seed = config.seed;

    out.y0.resize(n);
    out.y1.resize(n);
    par::for_each(static_cast<std::size_t>(n), [&](std::size_t i) {
        rng::Stream s(rng::derive(config.seed, "outcome.noise", i));
        const auto ii = static_cast<Eigen::Index>(i);
        out.y0[ii] = out.truth.mu0[ii] + config.noise_sd * s.normal();
        out.y1[ii] = out.truth.mu1[ii] + config.noise_sd * s.normal() + config.tau_shift;
    });
    return out;
}

TreatmentDraw gen_treatment(const Eigen::MatrixXd& x, std::uint64_t seed,
                            const SyntheticConfig& config) {
    if (!x.allFinite()) throw ArgumentError("treatment generation needs finite features");
    TreatmentDraw draw;
    draw.beta_t =
        draw_beta(static_cast<std::size_t>(x.cols()), config, rng::derive(seed, "betaT"));
    const auto n = x.rows();
    draw.propensity.resize(n);
    draw.t.resize(static_cast<std::size_t>(n));
    par::for_each(static_cast<std::size_t>(n), [&](std::size_t i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double z = x.row(ii) * draw.beta_t + 1.0;
        const double p = 1.0 / (1.0 + std::exp(z));
        draw.propensity[ii] = p;
        rng::Stream s(rng::derive(seed, "treatment", i));
        draw.t[i] = s.bernoulli(p) ? 1 : 0;
    });
    return draw;
}

namespace {

Dataset assemble(const Eigen::MatrixXd& x, const Outcomes& outcomes, std::vector<int> t,
                 double e1, bool e_known_constant, Eigen::VectorXd true_propensity,
                 std::uint64_t seed) {
    Dataset d;
    d.x = x;
    d.t = std::move(t);
    d.y.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        d.y[i] = d.t[static_cast<std::size_t>(i)] ? outcomes.y1[i] : outcomes.y0[i];
    d.e1 = e1;
    d.provenance = Provenance::synthetic;
    d.e_known_constant = e_known_constant;
    d.true_propensity = std::move(true_propensity);
    d.seed_lineage = {seed};
    d.row_ids.resize(static_cast<std::size_t>(x.rows()));
    std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
    validate(d);
    return d;
}

}  // namespace

Dataset make_synthetic_dataset(const Eigen::MatrixXd& x, const Outcomes& outcomes,
                               const TreatmentDraw& treatment) {
    if (x.rows() != outcomes.y0.size() ||
        treatment.t.size() != static_cast<std::size_t>(x.rows()))
        throw AlignmentError("synthetic pieces have mismatched sizes");
    const double e1 = treatment.propensity.mean();
    return assemble(x, outcomes, treatment.t, e1, /*e_known_constant=*/false,
                    treatment.propensity, outcomes.truth.seed);
}

Dataset make_synthetic_rct(const Eigen::MatrixXd& x, const Outcomes& outcomes, double e1,
                           std::uint64_t seed) {
    if (!(e1 > 0.0 && e1 < 1.0)) throw ArgumentError("e1 must lie strictly inside (0,1)");
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<int> t(n);
    par::for_each(n, [&](std::size_t i) {
        rng::Stream s(rng::derive(seed, "rct.treatment", i));
        t[i] = s.bernoulli(e1) ? 1 : 0;
    });
    return assemble(x, outcomes, std::move(t), e1, /*e_known_constant=*/true,
                    Eigen::VectorXd::Constant(x.rows(), e1), seed);
}

double oracle_pehe(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& tau_true) {
    if (tau_hat.size() != tau_true.size())
        throw AlignmentError("oracle_pehe: tau_hat and truth sizes disagree");
    if (tau_hat.size() == 0) throw ArgumentError("oracle_pehe on an empty sample");
    return par::sum(static_cast<std::size_t>(tau_hat.size()),
                    [&](std::size_t i) {
                        const auto ii = static_cast<Eigen::Index>(i);
                        const double diff = tau_true[ii] - tau_hat[ii];
                        return diff * diff;
                    }) /
           static_cast<double>(tau_hat.size());
}

namespace {

// Rank 1 = lowest value; ties by model-id lexical order.
std::unordered_map<std::string, int> rank_map(std::vector<ScoredModel> scores) {
    std::sort(scores.begin(), scores.end(), [](const ScoredModel& a, const ScoredModel& b) {
        if (a.value != b.value) return a.value < b.value;
        return a.id < b.id;
    });
    std::unordered_map<std::string, int> ranks;
    for (std::size_t i = 0; i < scores.size(); ++i) ranks[scores[i].id] = static_cast<int>(i + 1);
    return ranks;
}

}  // namespace

RankAgreement oracle_rank_agreement(const std::vector<ScoredModel>& q_scores,
                                    const std::vector<ScoredModel>& pehe_scores) {
    if (q_scores.size() < 2) throw ArgumentError("rank agreement needs at least 2 models");
    if (q_scores.size() != pehe_scores.size())
        throw ArgumentError("rank agreement: model sets differ in size");
    const auto rq = rank_map(q_scores);
    const auto rp = rank_map(pehe_scores);
    for (const auto& [id, _] : rq)
        if (!rp.count(id)) throw ArgumentError("rank agreement: model '" + id + "' missing");

    std::string oracle_best, q_best;
    for (const auto& [id, rank] : rp)
        if (rank == 1) oracle_best = id;
    for (const auto& [id, rank] : rq)
        if (rank == 1) q_best = id;

    RankAgreement out;
    out.mrr = 1.0 / rq.at(oracle_best);
    out.precision_at_1 = q_best == oracle_best ? 1.0 : 0.0;
    const auto m = static_cast<double>(q_scores.size());
    double d2 = 0.0;
    for (const auto& [id, rank] : rq) {
        const double diff = rank - rp.at(id);
        d2 += diff * diff;
    }
    out.spearman = 1.0 - 6.0 * d2 / (m * (m * m - 1.0));
    return out;
}

void write_oracle_csv(const std::string& path, const OracleTruth& truth) {
    csv::Table table;
    table.header = {"row_index", "mu0", "mu1", "tau", "true_propensity"};
    const auto n = truth.mu0.size();
    table.rows.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        table.rows.push_back({std::to_string(i), csv::format_double(truth.mu0[i]),
                              csv::format_double(truth.mu1[i]), csv::format_double(truth.tau[i]),
                              csv::format_double(truth.true_propensity.size() > i
                                                     ? truth.true_propensity[i]
                                                     : std::numeric_limits<double>::quiet_NaN())});
    }
    csv::write_file(path, table);
}

OracleTruth read_oracle_csv(const std::string& path) {
    const csv::Table table = csv::read_file(path);
    const std::vector<std::string> expect = {"row_index", "mu0", "mu1", "tau", "true_propensity"};
    if (table.header != expect)
        throw SchemaError(path + ": expected header row_index,mu0,mu1,tau,true_propensity");
    OracleTruth truth;
    const auto n = static_cast<Eigen::Index>(table.n_rows());
    truth.mu0.resize(n);
    truth.mu1.resize(n);
    truth.tau.resize(n);
    truth.true_propensity.resize(n);
    auto parse = [&](const std::string& s) {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw DataError(path + ": bad numeric cell '" + s + "'");
        return v;
    };
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = table.rows[static_cast<std::size_t>(i)];
        truth.mu0[i] = parse(row[1]);
        truth.mu1[i] = parse(row[2]);
        truth.tau[i] = parse(row[3]);
        truth.true_propensity[i] = parse(row[4]);
    }
    return truth;
}

}  // namespace qcate
