#include "qcate/learners.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "qcate/error.hpp"
#include "qcate/par.hpp"
#include "qcate/rng.hpp"

namespace qcate {

namespace {

constexpr double kSolveTol = 1e-8;

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow
double log1pexp(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

// ---------------------------------------------------------------------------
// Ridge
// ---------------------------------------------------------------------------

Eigen::VectorXd LinearModel::predict(const Eigen::MatrixXd& x) const {
    if (x.cols() != weights.size())
        throw ArgumentError("feature dimension " + std::to_string(x.cols()) +
                            " does not match model dimension " + std::to_string(weights.size()));
    return (x * weights).array() + intercept;
}

std::vector<double> default_lambda_grid() {
    std::vector<double> grid(13);
    for (int i = 0; i < 13; ++i) grid[static_cast<std::size_t>(i)] = std::pow(10.0, -3.0 + 0.5 * i);
    return grid;
}

namespace {

struct GramSystem {
    Eigen::MatrixXd gram;    // A'A with A = [X, 1] when intercept is on
    Eigen::VectorXd moment;  // A'y
    Eigen::VectorXd penalty_diag;
    std::size_t d = 0;  // feature columns (excluding intercept)
    bool intercept = false;
};

GramSystem build_system(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, bool intercept,
                        int unpenalized_leading) {
    GramSystem sys;
    sys.d = static_cast<std::size_t>(x.cols());
    sys.intercept = intercept;
    const auto p = static_cast<Eigen::Index>(sys.d + (intercept ? 1 : 0));
    Eigen::MatrixXd a(x.rows(), p);
    a.leftCols(x.cols()) = x;
    if (intercept) a.col(p - 1).setOnes();
    sys.gram = a.transpose() * a;
    sys.moment = a.transpose() * y;
    sys.penalty_diag = Eigen::VectorXd::Ones(p);
    for (Eigen::Index j = 0; j < std::min<Eigen::Index>(unpenalized_leading, p); ++j)
        sys.penalty_diag[j] = 0.0;
    if (intercept) sys.penalty_diag[p - 1] = 0.0;
    return sys;
}

// Solve (gram + lambda * diag(penalty)) w = moment; empty result when the
// system is numerically singular. Consistent rank-deficient systems at
// lambda=0 count as singular (the solution is not unique).
std::optional<Eigen::VectorXd> try_solve(const Eigen::MatrixXd& gram,
                                         const Eigen::VectorXd& penalty_diag,
                                         const Eigen::VectorXd& moment, double lambda) {
    Eigen::MatrixXd lhs = gram;
    lhs.diagonal() += lambda * penalty_diag;
    const auto ldlt = lhs.ldlt();
    if (lambda == 0.0) {
        // Rank deficiency shows up as a (near-)zero LDLT pivot.
        const Eigen::VectorXd d = ldlt.vectorD();
        const double peak = d.cwiseAbs().maxCoeff();
        if (d.minCoeff() <= 1e-12 * peak) return std::nullopt;
    }
    Eigen::VectorXd w = ldlt.solve(moment);
    if (!w.allFinite()) return std::nullopt;
    const double resid = (lhs * w - moment).norm();
    const double scale = std::max(moment.norm(), 1e-300);
    if (resid > kSolveTol * scale) return std::nullopt;
    return w;
}

LinearModel to_model(const Eigen::VectorXd& w, const GramSystem& sys, double lambda) {
    LinearModel m;
    m.weights = w.head(static_cast<Eigen::Index>(sys.d));
    m.intercept = sys.intercept ? w[w.size() - 1] : 0.0;
    m.lambda = lambda;
    return m;
}

}  // namespace

LinearModel ridge_solve(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda,
                        bool intercept, int unpenalized_leading) {
    if (x.rows() != y.size()) throw ArgumentError("ridge: X and y row counts disagree");
    if (lambda < 0.0) throw ArgumentError("ridge: lambda must be non-negative");
    const GramSystem sys = build_system(x, y, intercept, unpenalized_leading);
    auto w = try_solve(sys.gram, sys.penalty_diag, sys.moment, lambda);
    if (!w) throw FitError("ridge system is singular at lambda=" + std::to_string(lambda));
    return to_model(*w, sys, lambda);
}

LinearModel fit_ridge_cv(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const RidgeOptions& opts) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (x.rows() != y.size()) throw ArgumentError("ridge: X and y row counts disagree");
    if (opts.folds < 2) throw ArgumentError("ridge: need at least 2 folds");
    if (n < 2 * static_cast<std::size_t>(opts.folds))
        throw ArgumentError("ridge: need at least 2*folds rows, got " + std::to_string(n));
    if (opts.lambda_grid.empty()) throw ArgumentError("ridge: lambda grid is empty");
    for (double l : opts.lambda_grid)
        if (l < 0.0) throw ArgumentError("ridge: lambda grid values must be non-negative");

    std::vector<double> grid = opts.lambda_grid;
    std::sort(grid.begin(), grid.end());

    const GramSystem total = build_system(x, y, opts.intercept, opts.unpenalized_leading);
    const int k = opts.folds;

    // Per-fold Gram pieces; training system = total - fold.
    std::vector<GramSystem> fold(static_cast<std::size_t>(k));
    std::vector<std::vector<std::size_t>> fold_rows(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i) fold_rows[i % static_cast<std::size_t>(k)].push_back(i);
    for (int f = 0; f < k; ++f) {
        const auto& rows = fold_rows[static_cast<std::size_t>(f)];
        Eigen::MatrixXd xf(static_cast<Eigen::Index>(rows.size()), x.cols());
        Eigen::VectorXd yf(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            xf.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(rows[r]));
            yf[static_cast<Eigen::Index>(r)] = y[static_cast<Eigen::Index>(rows[r])];
        }
        fold[static_cast<std::size_t>(f)] = build_system(xf, yf, opts.intercept, opts.unpenalized_leading);
    }

    double best_err = std::numeric_limits<double>::infinity();
    double best_lambda = grid.back();
    bool any_ok = false;
    // Errors this close are numerical ties; the tie goes to the larger lambda.
    const double tie_slack =
        1e-12 * (y.squaredNorm() / static_cast<double>(n) + 1e-300);
    for (double lambda : grid) {
        double err_sum = 0.0;
        bool ok = true;
        for (int f = 0; f < k && ok; ++f) {
            const auto& fs = fold[static_cast<std::size_t>(f)];
            const Eigen::MatrixXd gram_train = total.gram - fs.gram;
            const Eigen::VectorXd moment_train = total.moment - fs.moment;
            auto w = try_solve(gram_train, total.penalty_diag, moment_train, lambda);
            if (!w) {
                ok = false;
                break;
            }
            // Validation MSE from the fold's own Gram pieces:
            // sum (y - a'w)^2 = y'y - 2 w'(A'y) + w'(A'A)w
            const auto& rows = fold_rows[static_cast<std::size_t>(f)];
            double yy = 0.0;
            for (std::size_t r : rows) {
                const double v = y[static_cast<Eigen::Index>(r)];
                yy += v * v;
            }
            const double sse =
                yy - 2.0 * w->dot(fs.moment) + w->dot(fs.gram * (*w));
            err_sum += sse / static_cast<double>(rows.size());
        }
        if (!ok) continue;
        const double err = err_sum / static_cast<double>(k);
        // Ties break toward the larger lambda (grid is ascending).
        if (err <= best_err + tie_slack) {
            best_err = std::min(err, best_err);
            best_lambda = lambda;
            any_ok = true;
        }
    }
    if (!any_ok) throw FitError("ridge CV failed for every lambda in the grid");

    auto w = try_solve(total.gram, total.penalty_diag, total.moment, best_lambda);
    bool fallback = false;
    if (!w && best_lambda == 0.0) {
        // Singular at lambda=0: fall back to the smallest positive grid value.
        for (double lambda : grid) {
            if (lambda <= 0.0) continue;
            w = try_solve(total.gram, total.penalty_diag, total.moment, best_lambda = lambda);
            fallback = true;
            break;
        }
    }
    if (!w) throw FitError("ridge system is singular for the selected lambda");
    LinearModel model = to_model(*w, total, best_lambda);
    model.lambda_fallback = fallback;
    return model;
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

double PropensityModel::predict_one(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return std::clamp(stable_sigmoid(x * weights + intercept), clip_lo, clip_hi);
}

Eigen::VectorXd PropensityModel::predict(const Eigen::MatrixXd& x) const {
    if (x.cols() != weights.size())
        throw ArgumentError("feature dimension does not match the propensity model");
    Eigen::VectorXd out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out[i] = predict_one(x.row(i));
    return out;
}

PropensityModel fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& labels, double l2,
                             double clip_lo, double clip_hi, int max_iter) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (labels.size() != n) throw ArgumentError("logistic: X and labels row counts disagree");
    if (!(clip_lo > 0.0 && clip_lo < clip_hi && clip_hi < 1.0))
        throw ArgumentError("logistic: clip bounds must satisfy 0 < lo < hi < 1");
    long positives = std::count(labels.begin(), labels.end(), 1);
    if (positives == 0 || positives == static_cast<long>(n))
        throw FitError("logistic: both classes must be present");

    const auto d = x.cols();
    const auto p = d + 1;
    Eigen::MatrixXd a(x.rows(), p);
    a.leftCols(d) = x;
    a.col(d).setOnes();
    Eigen::VectorXd tv(x.rows());
    for (std::size_t i = 0; i < n; ++i) tv[static_cast<Eigen::Index>(i)] = labels[i];

    Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, l2);
    penalty[d] = 0.0;  // intercept unpenalized

    auto penalized_ll = [&](const Eigen::VectorXd& wv) {
        const Eigen::VectorXd z = a * wv;
        double ll = 0.0;
        for (Eigen::Index i = 0; i < z.size(); ++i) ll += tv[i] * z[i] - log1pexp(z[i]);
        return ll - 0.5 * (penalty.array() * wv.array().square()).sum();
    };

    bool converged = false;
    double prev = penalized_ll(w);
    for (int iter = 0; iter < max_iter; ++iter) {
        const Eigen::VectorXd z = a * w;
        Eigen::VectorXd prob(z.size()), wt(z.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            prob[i] = stable_sigmoid(z[i]);
            wt[i] = std::max(prob[i] * (1.0 - prob[i]), 1e-10);
        }
        Eigen::MatrixXd h = a.transpose() * wt.asDiagonal() * a;
        h.diagonal() += penalty;
        const Eigen::VectorXd grad =
            a.transpose() * (tv - prob) - penalty.asDiagonal() * w;
        const Eigen::VectorXd step = h.ldlt().solve(grad);
        if (!step.allFinite()) break;
        // Halving line search keeps separable problems stable.
        double scale = 1.0;
        Eigen::VectorXd cand = w + step;
        double cand_ll = penalized_ll(cand);
        for (int half = 0; half < 20 && !(cand_ll >= prev - 1e-12); ++half) {
            scale *= 0.5;
            cand = w + scale * step;
            cand_ll = penalized_ll(cand);
        }
        if (!(cand_ll >= prev - 1e-12)) break;
        w = cand;
        if (std::abs(cand_ll - prev) < 1e-10 * (1.0 + std::abs(cand_ll))) {
            prev = cand_ll;
            converged = true;
            break;
        }
        prev = cand_ll;
    }

    PropensityModel model;
    model.weights = w.head(d);
    model.intercept = w[d];
    model.clip_lo = clip_lo;
    model.clip_hi = clip_hi;
    model.converged = converged;
    return model;
}

double logistic_log_likelihood(const PropensityModel& model, const Eigen::MatrixXd& x,
                               const std::vector<int>& labels) {
    if (static_cast<std::size_t>(x.rows()) != labels.size())
        throw ArgumentError("logistic: X and labels row counts disagree");
    double ll = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double z = x.row(i) * model.weights + model.intercept;
        ll += labels[static_cast<std::size_t>(i)] * z - log1pexp(z);
    }
    return ll;
}

// ---------------------------------------------------------------------------
// Cross-fitted nuisances
// ---------------------------------------------------------------------------

namespace {

RidgeOptions shrink_for(std::size_t rows, const RidgeOptions& base) {
    RidgeOptions opts = base;
    opts.folds = static_cast<int>(std::clamp<std::size_t>(rows / 2, 2, 5));
    return opts;
}

LinearModel fit_outcome(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                        const RidgeOptions& base) {
    const auto rows = static_cast<std::size_t>(x.rows());
    if (rows == 0) throw FitError("nuisance fit on an empty arm");
    if (rows < 4) {
        // Too small for CV; single solve at a mid-grid penalty.
        return ridge_solve(x, y, 1.0, base.intercept, base.unpenalized_leading);
    }
    return fit_ridge_cv(x, y, shrink_for(rows, base));
}

struct RowsView {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::vector<int> t;
};

RowsView gather(const Dataset& d, const std::vector<std::size_t>& rows) {
    RowsView v;
    v.x.resize(static_cast<Eigen::Index>(rows.size()), d.x.cols());
    v.y.resize(static_cast<Eigen::Index>(rows.size()));
    v.t.resize(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        v.x.row(static_cast<Eigen::Index>(k)) = d.x.row(static_cast<Eigen::Index>(rows[k]));
        v.y[static_cast<Eigen::Index>(k)] = d.y[static_cast<Eigen::Index>(rows[k])];
        v.t[k] = d.t[rows[k]];
    }
    return v;
}

bool folds_have_both_arms(const Dataset& d, const std::vector<int>& fold_of, int folds) {
    // Every training complement must contain both arms.
    std::vector<long> treated(static_cast<std::size_t>(folds), 0),
        control(static_cast<std::size_t>(folds), 0);
    for (std::size_t i = 0; i < d.size(); ++i)
        (d.t[i] == 1 ? treated : control)[static_cast<std::size_t>(fold_of[i])]++;
    const long t_total = std::accumulate(treated.begin(), treated.end(), 0L);
    const long c_total = std::accumulate(control.begin(), control.end(), 0L);
    for (int f = 0; f < folds; ++f) {
        if (t_total - treated[static_cast<std::size_t>(f)] == 0) return false;
        if (c_total - control[static_cast<std::size_t>(f)] == 0) return false;
        if (treated[static_cast<std::size_t>(f)] + control[static_cast<std::size_t>(f)] == 0)
            return false;
    }
    return true;
}

std::vector<int> stratified_folds(const Dataset& d, int folds, rng::Stream& stream) {
    std::vector<std::size_t> treated, control;
    for (std::size_t i = 0; i < d.size(); ++i) (d.t[i] == 1 ? treated : control).push_back(i);
    auto deal = [&](std::vector<std::size_t>& arm, std::vector<int>& fold_of) {
        for (std::size_t i = arm.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(stream.below(i));
            std::swap(arm[i - 1], arm[j]);
        }
        for (std::size_t k = 0; k < arm.size(); ++k)
            fold_of[arm[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
    };
    std::vector<int> fold_of(d.size(), 0);
    deal(treated, fold_of);
    deal(control, fold_of);
    return fold_of;
}

}  // namespace

NuisanceValues NuisanceSet::predict(const Eigen::MatrixXd& x) const {
    NuisanceValues v;
    const auto n = x.rows();
    v.mu0 = Eigen::VectorXd::Zero(n);
    v.mu1 = Eigen::VectorXd::Zero(n);
    v.m = Eigen::VectorXd::Zero(n);
    v.e = Eigen::VectorXd::Constant(n, e1_);
    if (!e_known_constant_) v.e.setZero();
    for (const auto& fm : models_) {
        v.mu0 += fm.mu0.predict(x);
        v.mu1 += fm.mu1.predict(x);
        v.m += fm.m.predict(x);
        if (!e_known_constant_ && fm.e) v.e += fm.e->predict(x);
    }
    const double k = static_cast<double>(models_.size());
    v.mu0 /= k;
    v.mu1 /= k;
    v.m /= k;
    if (!e_known_constant_) v.e /= k;
    return v;
}

NuisanceSet fit_nuisances(const Dataset& d, int folds, std::uint64_t seed,
                          const RidgeOptions& ridge) {
    validate(d);
    if (folds < 2) throw ArgumentError("cross-fitting needs at least 2 folds");
    if (d.size() < static_cast<std::size_t>(2 * folds))
        throw FitError("dataset too small for " + std::to_string(folds) + "-fold cross-fitting");

    rng::Stream stream(rng::derive(seed, "nuisance.folds"));
    std::vector<int> fold_of(d.size());
    for (auto& f : fold_of) f = static_cast<int>(stream.below(static_cast<std::uint64_t>(folds)));
    if (!folds_have_both_arms(d, fold_of, folds)) {
        fold_of = stratified_folds(d, folds, stream);
        if (!folds_have_both_arms(d, fold_of, folds))
            throw FitError("an arm is empty in a cross-fitting fold even after stratification");
    }

    NuisanceSet set;
    set.folds_ = folds;
    set.fold_of_ = fold_of;
    set.e1_ = d.e1;
    set.e_known_constant_ = d.e_known_constant;
    set.dataset_fingerprint_ = d.fingerprint();
    set.models_.resize(static_cast<std::size_t>(folds));

    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train0, train1, train_all;
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (fold_of[i] == f) continue;
            train_all.push_back(i);
            (d.t[i] == 1 ? train1 : train0).push_back(i);
        }
        auto& fm = set.models_[static_cast<std::size_t>(f)];
        const RowsView v0 = gather(d, train0);
        const RowsView v1 = gather(d, train1);
        const RowsView va = gather(d, train_all);
        fm.mu0 = fit_outcome(v0.x, v0.y, ridge);
        fm.mu1 = fit_outcome(v1.x, v1.y, ridge);
        fm.m = fit_outcome(va.x, va.y, ridge);
        if (!d.e_known_constant) fm.e = fit_propensity(va.x, va.t);
    }

    // Out-of-fold plug-in values: row i is predicted by the fold model that
    // never saw row i.
    const auto n = static_cast<Eigen::Index>(d.size());
    set.oof_.mu0.resize(n);
    set.oof_.mu1.resize(n);
    set.oof_.m.resize(n);
    set.oof_.e.resize(n);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& fm = set.models_[static_cast<std::size_t>(fold_of[i])];
        const auto row = d.x.row(static_cast<Eigen::Index>(i));
        const auto ii = static_cast<Eigen::Index>(i);
        set.oof_.mu0[ii] = fm.mu0.predict_one(row);
        set.oof_.mu1[ii] = fm.mu1.predict_one(row);
        set.oof_.m[ii] = fm.m.predict_one(row);
        set.oof_.e[ii] = d.e_known_constant ? d.e1 : fm.e->predict_one(row);
    }
    return set;
}

// ---------------------------------------------------------------------------
// CATE strategies
// ---------------------------------------------------------------------------

const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::s_learner: return "s";
        case Strategy::s_learner_ext: return "s_ext";
        case Strategy::t_learner: return "t";
        case Strategy::r_learner: return "r";
        case Strategy::dr_learner: return "dr";
        case Strategy::constant_effect: return "const";
        case Strategy::zero: return "zero";
        case Strategy::imported: return "imported";
    }
    return "?";
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "s") return Strategy::s_learner;
    if (s == "s_ext") return Strategy::s_learner_ext;
    if (s == "t") return Strategy::t_learner;
    if (s == "r") return Strategy::r_learner;
    if (s == "dr") return Strategy::dr_learner;
    if (s == "const") return Strategy::constant_effect;
    if (s == "zero") return Strategy::zero;
    throw ArgumentError("unknown strategy '" + s + "' (expected s|s_ext|t|r|dr|const|zero)");
}

bool strategy_needs_nuisances(Strategy s) {
    return s == Strategy::r_learner || s == Strategy::dr_learner ||
           s == Strategy::constant_effect;
}

namespace {

Eigen::MatrixXd stacked_design(const Eigen::MatrixXd& x, const std::vector<int>& t, bool ext) {
    const auto n = x.rows();
    const auto d = x.cols();
    Eigen::MatrixXd a(n, ext ? 2 * d + 1 : d + 1);
    a.leftCols(d) = x;
    for (Eigen::Index i = 0; i < n; ++i) a(i, d) = t[static_cast<std::size_t>(i)];
    if (ext)
        for (Eigen::Index i = 0; i < n; ++i) {
            if (t[static_cast<std::size_t>(i)])
                a.row(i).tail(d) = x.row(i);
            else
                a.row(i).tail(d).setZero();
        }
    return a;
}

}  // namespace

Eigen::VectorXd CateEstimator::predict(const Eigen::MatrixXd& x) const {
    if (strategy_ == Strategy::imported)
        throw ArgumentError("imported estimator has no functional form; use predict_rows");
    if (strategy_ != Strategy::zero && strategy_ != Strategy::constant_effect &&
        static_cast<std::size_t>(x.cols()) != dim_)
        throw ArgumentError("feature dimension " + std::to_string(x.cols()) +
                            " does not match the fitted dimension " + std::to_string(dim_));
    const auto n = x.rows();
    switch (strategy_) {
        case Strategy::zero: return Eigen::VectorXd::Zero(n);
        case Strategy::constant_effect: return Eigen::VectorXd::Constant(n, constant_);
        case Strategy::t_learner: return arm1_.predict(x) - arm0_.predict(x);
        case Strategy::r_learner: {
            Eigen::VectorXd out = Eigen::VectorXd::Constant(n, r_coef_[0]);
            out += x * r_coef_.tail(r_coef_.size() - 1);
            return out;
        }
        case Strategy::dr_learner: return dr_model_.predict(x);
        case Strategy::s_learner:
        case Strategy::s_learner_ext: {
            const bool ext = strategy_ == Strategy::s_learner_ext;
            std::vector<int> ones(static_cast<std::size_t>(n), 1),
                zeros(static_cast<std::size_t>(n), 0);
            return stacked_.predict(stacked_design(x, ones, ext)) -
                   stacked_.predict(stacked_design(x, zeros, ext));
        }
        case Strategy::imported: break;
    }
    throw ArgumentError("unsupported strategy in predict");
}

Eigen::VectorXd CateEstimator::predict_rows(const std::vector<std::size_t>& row_ids) const {
    if (strategy_ != Strategy::imported)
        throw ArgumentError("predict_rows is only available on imported estimators");
    std::unordered_map<std::size_t, double> by_row;
    by_row.reserve(imported_rows_.size());
    for (std::size_t i = 0; i < imported_rows_.size(); ++i)
        by_row.emplace(imported_rows_[i], imported_[static_cast<Eigen::Index>(i)]);
    Eigen::VectorXd out(static_cast<Eigen::Index>(row_ids.size()));
    for (std::size_t i = 0; i < row_ids.size(); ++i) {
        const auto it = by_row.find(row_ids[i]);
        if (it == by_row.end())
            throw AlignmentError("no imported prediction for row id " + std::to_string(row_ids[i]));
        out[static_cast<Eigen::Index>(i)] = it->second;
    }
    return out;
}

CateEstimator fit_cate(Strategy strategy, const Dataset& d, const NuisanceSet* nuisances,
                       std::uint64_t seed, const RidgeOptions& ridge) {
    validate(d);
    CateEstimator est;
    est.strategy_ = strategy;
    est.id_ = to_string(strategy);
    est.seed_ = seed;
    est.dataset_fingerprint_ = d.fingerprint();
    est.dim_ = d.dim();

    if (strategy_needs_nuisances(strategy)) {
        if (!nuisances) throw ArgumentError("strategy needs cross-fitted nuisances");
        if (nuisances->dataset_fingerprint() != d.fingerprint())
            throw AlignmentError("nuisances were fitted on a different dataset");
    }

    const auto rows = static_cast<std::size_t>(d.x.rows());
    switch (strategy) {
        case Strategy::zero:
            break;
        case Strategy::s_learner:
        case Strategy::s_learner_ext: {
            const bool ext = strategy == Strategy::s_learner_ext;
            est.stacked_ = fit_ridge_cv(stacked_design(d.x, d.t, ext), d.y,
                                        shrink_for(rows, ridge));
            break;
        }
        case Strategy::t_learner: {
            std::vector<std::size_t> idx0, idx1;
            for (std::size_t i = 0; i < d.size(); ++i) (d.t[i] ? idx1 : idx0).push_back(i);
            if (idx0.empty() || idx1.empty()) throw FitError("t-learner needs both arms");
            const RowsView v0 = gather(d, idx0);
            const RowsView v1 = gather(d, idx1);
            est.arm0_ = fit_outcome(v0.x, v0.y, ridge);
            est.arm1_ = fit_outcome(v1.x, v1.y, ridge);
            break;
        }
        case Strategy::r_learner: {
            const auto& nv = nuisances->oof();
            Eigen::VectorXd zt(d.x.rows());
            for (Eigen::Index i = 0; i < d.x.rows(); ++i)
                zt[i] = d.t[static_cast<std::size_t>(i)] - nv.e[i];
            if (zt.squaredNorm() == 0.0)
                throw DegenerateDesignError("r-learner: sum (t - e)^2 is zero");
            Eigen::MatrixXd design(d.x.rows(), d.x.cols() + 1);
            design.col(0) = zt;
            design.rightCols(d.x.cols()) = zt.asDiagonal() * d.x;
            RidgeOptions opts = shrink_for(rows, ridge);
            opts.intercept = false;
            opts.unpenalized_leading = 1;  // constant-effect direction stays unpenalized
            const LinearModel m = fit_ridge_cv(design, d.y - nv.m, opts);
            est.r_coef_ = m.weights;
            break;
        }
        case Strategy::dr_learner: {
            const auto& nv = nuisances->oof();
            Eigen::VectorXd pseudo(d.x.rows());
            for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
                const int t = d.t[static_cast<std::size_t>(i)];
                pseudo[i] = ht_transform(t, d.y[i], nv.e[i]) +
                            gamma_term(t, nv.e[i], nv.mu1[i], nv.mu0[i]);
            }
            est.dr_model_ = fit_ridge_cv(d.x, pseudo, shrink_for(rows, ridge));
            break;
        }
        case Strategy::constant_effect: {
            const auto& nv = nuisances->oof();
            double num = 0.0, den = 0.0;
            for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
                const double zt = d.t[static_cast<std::size_t>(i)] - nv.e[i];
                num += zt * (d.y[i] - nv.m[i]);
                den += zt * zt;
            }
            if (den == 0.0)
                throw DegenerateDesignError("constant-effect: sum (t - e)^2 is zero");
            est.constant_ = num / den;
            break;
        }
        case Strategy::imported:
            throw ArgumentError("imported estimators come from prediction tables, not fit_cate");
    }
    return est;
}

CateEstimator from_predictions(const PredictionTable& table, const Dataset& d) {
    if (table.row_ids.size() != d.size())
        throw AlignmentError("prediction table row count does not match the dataset");
    CateEstimator est;
    est.strategy_ = Strategy::imported;
    est.id_ = table.model_id.empty() ? "imported" : table.model_id;
    est.dataset_fingerprint_ = d.fingerprint();
    est.dim_ = d.dim();
    est.imported_ = table.tau;
    est.imported_rows_ = table.row_ids;
    return est;
}

Eigen::VectorXd predict_cate(const CateEstimator& est, const Eigen::MatrixXd& x) {
    return est.predict(x);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double r_loss(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& y, const Eigen::VectorXd& m,
              const std::vector<int>& t, const Eigen::VectorXd& e_tilde) {
    const auto n = tau_hat.size();
    if (y.size() != n || m.size() != n || e_tilde.size() != n ||
        t.size() != static_cast<std::size_t>(n))
        throw ArgumentError("r_loss: input sizes disagree");
    return par::sum(static_cast<std::size_t>(n),
                    [&](std::size_t i) {
                        const auto ii = static_cast<Eigen::Index>(i);
                        const double resid =
                            (y[ii] - m[ii]) - (t[i] - e_tilde[ii]) * tau_hat[ii];
                        return resid * resid;
                    }) /
           static_cast<double>(n);
}

double dr_loss(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& eta_plus_gamma) {
    const auto n = tau_hat.size();
    if (eta_plus_gamma.size() != n) throw ArgumentError("dr_loss: input sizes disagree");
    return par::sum(static_cast<std::size_t>(n),
                    [&](std::size_t i) {
                        const auto ii = static_cast<Eigen::Index>(i);
                        const double resid = eta_plus_gamma[ii] - tau_hat[ii];
                        return resid * resid;
                    }) /
           static_cast<double>(n);
}

}  // namespace qcate
