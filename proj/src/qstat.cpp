#include "qcate/qstat.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "qcate/error.hpp"
#include "qcate/learners.hpp"
#include "qcate/par.hpp"

namespace qcate {

using json = nlohmann::json;

namespace {
constexpr double kZ975 = 1.959963984540054;
}

double ht_transform(int t, double y, double e_at_x) {
    if (!(e_at_x > 0.0 && e_at_x < 1.0))
        throw ArgumentError("propensity must lie strictly inside (0,1), got " +
                            std::to_string(e_at_x));
    return t == 1 ? y / e_at_x : -y / (1.0 - e_at_x);
}

double q_sample(double tau_hat_x, double eta) {
    return tau_hat_x * tau_hat_x - 2.0 * tau_hat_x * eta;
}

double gamma_term(int t, double e_tilde, double mu1, double mu0) {
    if (!(e_tilde > 0.0 && e_tilde < 1.0))
        throw ArgumentError("plug-in propensity must lie strictly inside (0,1)");
    const double a = 1.0 - static_cast<double>(t) / e_tilde;
    const double b = 1.0 - static_cast<double>(1 - t) / (1.0 - e_tilde);
    return a * mu1 - b * mu0;
}

// ---------------------------------------------------------------------------
// Control variates
// ---------------------------------------------------------------------------

const char* to_string(CvKind k) {
    switch (k) {
        case CvKind::none: return "none";
        case CvKind::location_invariance: return "li";
        case CvKind::doubly_robust: return "dr";
        case CvKind::r_style: return "r";
        case CvKind::custom: return "custom";
    }
    return "?";
}

CvKind cv_kind_from_string(const std::string& s) {
    if (s == "none") return CvKind::none;
    if (s == "li") return CvKind::location_invariance;
    if (s == "dr") return CvKind::doubly_robust;
    if (s == "r") return CvKind::r_style;
    if (s == "custom") return CvKind::custom;
    throw ArgumentError("unknown control variate '" + s + "' (expected none|li|dr|r|custom)");
}

double control_variate_value(CvKind kind, int t, double e1, double mu0, double mu1, double m,
                             double tau_hat_x) {
    switch (kind) {
        case CvKind::none:
            return 0.0;
        case CvKind::location_invariance: {
            if (!(e1 > 0.0 && e1 < 1.0))
                throw ArgumentError("e1 must lie strictly inside (0,1)");
            const double sign = t == 1 ? 1.0 / e1 : -1.0 / (1.0 - e1);
            return 2.0 * sign * tau_hat_x;
        }
        case CvKind::doubly_robust:
            return -2.0 * gamma_term(t, e1, mu1, mu0) * tau_hat_x;
        case CvKind::r_style:
            return -4.0 * (1.0 - 2.0 * t) * m * tau_hat_x;
        case CvKind::custom:
            throw ArgumentError("custom variates are evaluated through their function handle");
    }
    throw ArgumentError("unsupported control variate kind");
}

ThetaEstimate optimal_theta(const Eigen::VectorXd& q, const Eigen::VectorXd& r) {
    const auto n = q.size();
    if (r.size() != n) throw ArgumentError("optimal_theta: q and r sizes disagree");
    if (n < 2) throw ArgumentError("optimal_theta needs at least 2 samples");
    const double qm = q.mean();
    const double rm = r.mean();
    double cov = 0.0, var = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dr = r[i] - rm;
        cov += (q[i] - qm) * dr;
        var += dr * dr;
    }
    if (var == 0.0) return {0.0, true};
    return {-cov / var, false};
}

// ---------------------------------------------------------------------------
// Propensity source
// ---------------------------------------------------------------------------

PropensitySource PropensitySource::known_constant(double e1) {
    if (!(e1 > 0.0 && e1 < 1.0)) throw ArgumentError("e1 must lie strictly inside (0,1)");
    PropensitySource s;
    s.kind_ = Kind::constant;
    s.e1_ = e1;
    return s;
}

PropensitySource PropensitySource::known_per_sample(Eigen::VectorXd e) {
    for (Eigen::Index i = 0; i < e.size(); ++i)
        if (!(e[i] > 0.0 && e[i] < 1.0))
            throw ArgumentError("per-sample propensities must lie strictly inside (0,1)");
    PropensitySource s;
    s.kind_ = Kind::per_sample;
    s.per_sample_ = std::move(e);
    return s;
}

PropensitySource PropensitySource::estimated(const PropensityModel& model) {
    PropensitySource s;
    s.kind_ = Kind::estimated;
    s.weights_ = model.weights;
    s.intercept_ = model.intercept;
    s.clip_lo_ = model.clip_lo;
    s.clip_hi_ = model.clip_hi;
    return s;
}

Eigen::VectorXd PropensitySource::values(const Dataset& d) const {
    const auto n = static_cast<Eigen::Index>(d.size());
    switch (kind_) {
        case Kind::constant:
            return Eigen::VectorXd::Constant(n, e1_);
        case Kind::per_sample:
            if (per_sample_.size() != n)
                throw AlignmentError("per-sample propensities do not match the dataset size");
            return per_sample_;
        case Kind::estimated: {
            PropensityModel m;
            m.weights = weights_;
            m.intercept = intercept_;
            m.clip_lo = clip_lo_;
            m.clip_hi = clip_hi_;
            return m.predict(d.x);
        }
    }
    throw ArgumentError("invalid propensity source");
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

const char* to_string(Screening s) {
    switch (s) {
        case Screening::unscreened: return "unscreened";
        case Screening::useful: return "useful";
        case Screening::degenerate: return "degenerate";
        case Screening::no_heterogeneity_gain: return "no_heterogeneity_gain";
    }
    return "?";
}

Screening screening_from_string(const std::string& s) {
    if (s == "unscreened") return Screening::unscreened;
    if (s == "useful") return Screening::useful;
    if (s == "degenerate") return Screening::degenerate;
    if (s == "no_heterogeneity_gain") return Screening::no_heterogeneity_gain;
    throw ArgumentError("unknown screening verdict: " + s);
}

std::string QResult::to_json() const {
    json j;
    j["q_hat"] = q_hat;
    j["se"] = se;
    j["ci_lo"] = ci_lo;
    j["ci_hi"] = ci_hi;
    j["n"] = n;
    j["cv"] = qcate::to_string(cv);
    j["theta"] = theta;
    j["screening"] = qcate::to_string(screening);
    return j.dump(2) + "\n";
}

QResult QResult::from_json(const std::string& text) {
    json j = json::parse(text);
    QResult r;
    r.q_hat = j.at("q_hat").get<double>();
    r.se = j.at("se").get<double>();
    r.variance = r.se * r.se;
    r.ci_lo = j.at("ci_lo").get<double>();
    r.ci_hi = j.at("ci_hi").get<double>();
    r.n = j.at("n").get<std::size_t>();
    r.cv = cv_kind_from_string(j.at("cv").get<std::string>());
    r.theta = j.at("theta").get<double>();
    r.screening = screening_from_string(j.at("screening").get<std::string>());
    return r;
}

// ---------------------------------------------------------------------------
// q_hat
// ---------------------------------------------------------------------------

namespace {

bool needs_nuisances(CvKind kind) {
    return kind == CvKind::doubly_robust || kind == CvKind::r_style;
}

QResult finalize(Eigen::VectorXd z, const Eigen::VectorXd* weights, std::size_t n) {
    QResult res;
    res.n = n;
    if (weights == nullptr) {
        const auto mv = par::mean_var(n, [&](std::size_t i) { return z[static_cast<Eigen::Index>(i)]; });
        res.q_hat = mv.mean;
        res.variance = n > 1 ? mv.var / static_cast<double>(n) : 0.0;
    } else {
        const double w_sum =
            par::sum(n, [&](std::size_t i) { return (*weights)[static_cast<Eigen::Index>(i)]; });
        const double w_mean = w_sum / static_cast<double>(n);
        res.q_hat = par::sum(n,
                             [&](std::size_t i) {
                                 const auto ii = static_cast<Eigen::Index>(i);
                                 return (*weights)[ii] * z[ii];
                             }) /
                    w_sum;
        // Ratio-estimator variance via the linearized summands
        // u_i = w_i (z_i - q_hat) / mean(w).
        const double q = res.q_hat;
        const auto mv = par::mean_var(n, [&](std::size_t i) {
            const auto ii = static_cast<Eigen::Index>(i);
            return (*weights)[ii] * (z[ii] - q) / w_mean;
        });
        res.variance = n > 1 ? mv.var / static_cast<double>(n) : 0.0;
    }
    res.se = std::sqrt(std::max(res.variance, 0.0));
    res.ci_lo = res.q_hat - kZ975 * res.se;
    res.ci_hi = res.q_hat + kZ975 * res.se;
    return res;
}

}  // namespace

QResult qhat(const Eigen::VectorXd& tau_hat, const Dataset& d, const PropensitySource& prop,
             const ControlVariate& cv, const NuisanceValues* nuisances,
             const Eigen::VectorXd* weights) {
    const std::size_t n = d.size();
    if (n == 0) throw ArgumentError("qhat on an empty dataset");
    if (static_cast<std::size_t>(tau_hat.size()) != n)
        throw AlignmentError("tau_hat is not aligned with the dataset");
    if (needs_nuisances(cv.kind)) {
        if (nuisances == nullptr)
            throw ArgumentError(std::string("control variate '") + to_string(cv.kind) +
                                "' needs nuisance values");
        if (nuisances->size() != n)
            throw AlignmentError("nuisance values are not aligned with the dataset");
    }
    if (cv.kind == CvKind::custom && !cv.custom_fn)
        throw ArgumentError("custom control variate without a function handle");
    if (weights != nullptr) {
        if (static_cast<std::size_t>(weights->size()) != n)
            throw AlignmentError("weights are not aligned with the dataset");
        for (Eigen::Index i = 0; i < weights->size(); ++i)
            if (!((*weights)[i] > 0.0)) throw ArgumentError("weights must all be positive");
    }

    const Eigen::VectorXd e = prop.values(d);

    Eigen::VectorXd q(static_cast<Eigen::Index>(n));
    par::for_each(n, [&](std::size_t i) {
        const auto ii = static_cast<Eigen::Index>(i);
        q[ii] = q_sample(tau_hat[ii], ht_transform(d.t[i], d.y[ii], e[ii]));
    });

    double theta = 0.0;
    bool theta_flag = false;
    Eigen::VectorXd z = q;
    if (cv.kind != CvKind::none) {
        Eigen::VectorXd r(static_cast<Eigen::Index>(n));
        par::for_each(n, [&](std::size_t i) {
            const auto ii = static_cast<Eigen::Index>(i);
            if (cv.kind == CvKind::custom) {
                r[ii] = cv.custom_fn(i, d.t[i], d.y[ii], tau_hat[ii]);
            } else {
                const double mu0 = nuisances ? nuisances->mu0[ii] : 0.0;
                const double mu1 = nuisances ? nuisances->mu1[ii] : 0.0;
                const double m = nuisances ? nuisances->m[ii] : 0.0;
                const double e_for_gamma =
                    cv.kind == CvKind::doubly_robust && nuisances && nuisances->e.size() != 0
                        ? nuisances->e[ii]
                        : d.e1;
                r[ii] = control_variate_value(cv.kind, d.t[i],
                                              cv.kind == CvKind::doubly_robust ? e_for_gamma : d.e1,
                                              mu0, mu1, m, tau_hat[ii]);
            }
        });
        if (cv.theta.mode == ThetaPolicy::Mode::fixed) {
            theta = cv.theta.value;
        } else {
            const ThetaEstimate est = optimal_theta(q, r);
            theta = est.theta;
            theta_flag = est.var_zero;
        }
        z = q + theta * r;
    }

    QResult res = finalize(std::move(z), weights, n);
    res.cv = cv.kind;
    res.theta = theta;
    res.theta_var_zero = theta_flag;
    res.screening = Screening::unscreened;
    res.eval_fingerprint = d.fingerprint();
    return res;
}

QResult screen(const QResult& result, const QResult* baseline) {
    QResult out = result;
    if (baseline != nullptr) {
        if (baseline->eval_fingerprint != result.eval_fingerprint)
            throw ArgumentError("screen: result and baseline come from different evaluation sets");
        if (baseline->cv != result.cv)
            throw ArgumentError("screen: result and baseline use different control variates");
    }
    if (result.q_hat >= 0.0)
        out.screening = Screening::degenerate;
    else if (baseline != nullptr && result.q_hat >= baseline->q_hat)
        out.screening = Screening::no_heterogeneity_gain;
    else
        out.screening = Screening::useful;
    return out;
}

double approximate_mse(const QResult& result, const NuisanceValues& nuisances) {
    const std::size_t n = nuisances.size();
    if (n == 0 || nuisances.mu1.size() != nuisances.mu0.size())
        throw ArgumentError("approximate_mse needs outcome nuisances");
    if (result.n != n)
        throw AlignmentError("approximate_mse: nuisance values do not match the result sample");
    const double plug_in = par::sum(n, [&](std::size_t i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double diff = nuisances.mu1[ii] - nuisances.mu0[ii];
        return diff * diff;
    });
    return result.q_hat + plug_in / static_cast<double>(n);
}

QResult ipw_qhat(const Eigen::VectorXd& tau_hat, const Dataset& source, const DensityRatio& ratio,
                 const PropensitySource& prop) {
    const std::size_t n = source.size();
    if (static_cast<std::size_t>(tau_hat.size()) != n)
        throw AlignmentError("tau_hat is not aligned with the source dataset");
    if (static_cast<std::size_t>(ratio.zeta.size()) != n)
        throw AlignmentError("density ratio is not aligned with the source dataset");
    for (Eigen::Index i = 0; i < ratio.zeta.size(); ++i)
        if (!(ratio.zeta[i] > 0.0)) throw ArgumentError("density-ratio weights must be positive");

    const Eigen::VectorXd e = prop.values(source);
    Eigen::VectorXd z(static_cast<Eigen::Index>(n));
    par::for_each(n, [&](std::size_t i) {
        const auto ii = static_cast<Eigen::Index>(i);
        z[ii] = ratio.zeta[ii] *
                q_sample(tau_hat[ii], ht_transform(source.t[i], source.y[ii], e[ii]));
    });
    // Unnormalized (1/N) sum zeta_n q_n; z_n is the per-sample summand.
    QResult res = finalize(std::move(z), nullptr, n);
    res.cv = CvKind::none;
    res.theta = 0.0;
    res.eval_fingerprint = source.fingerprint();
    return res;
}

DensityRatio estimate_density_ratio(const Eigen::MatrixXd& source_x,
                                    const Eigen::MatrixXd& target_x) {
    if (source_x.rows() == 0 || target_x.rows() == 0)
        throw ArgumentError("density ratio needs nonempty source and target samples");
    if (source_x.cols() != target_x.cols())
        throw ArgumentError("density ratio: source and target dimensions disagree");
    const auto ns = source_x.rows();
    const auto nt = target_x.rows();
    Eigen::MatrixXd stacked(ns + nt, source_x.cols());
    stacked.topRows(ns) = source_x;
    stacked.bottomRows(nt) = target_x;
    std::vector<int> labels(static_cast<std::size_t>(ns + nt), 0);
    std::fill(labels.begin() + ns, labels.end(), 1);
    const PropensityModel clf = fit_logistic(stacked, labels, 1e-4, 1e-6, 1.0 - 1e-6);

    constexpr double kClipLo = 0.05, kClipHi = 20.0;
    const double prior = static_cast<double>(ns) / static_cast<double>(nt);
    DensityRatio ratio;
    ratio.source = DensityRatio::Source::classifier_estimated;
    ratio.zeta.resize(ns);
    const Eigen::VectorXd p = clf.predict(source_x);
    for (Eigen::Index i = 0; i < ns; ++i)
        ratio.zeta[i] = std::clamp(p[i] / (1.0 - p[i]) * prior, kClipLo, kClipHi);
    return ratio;
}

GateResult zero_mean_gate(const Eigen::VectorXd& r_values) {
    GateResult g;
    const auto n = r_values.size();
    if (n == 0) throw ArgumentError("zero-mean gate on an empty sample");
    const auto mv = par::mean_var(static_cast<std::size_t>(n),
                                  [&](std::size_t i) { return r_values[static_cast<Eigen::Index>(i)]; });
    g.mean = mv.mean;
    g.se = n > 1 ? std::sqrt(mv.var / static_cast<double>(n)) : 0.0;
    g.pass = std::abs(g.mean) <= 3.0 * g.se;
    return g;
}

}  // namespace qcate
