#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "qcate/error.hpp"
#include "qcate/learners.hpp"
#include "qcate/qstat.hpp"
#include "qcate/rng.hpp"
#include "test_util.hpp"

using namespace qcate;

namespace {

Dataset tiny_dataset(std::vector<int> t, std::vector<double> y, double e1) {
    Dataset d;
    const auto n = static_cast<Eigen::Index>(t.size());
    d.x = Eigen::MatrixXd::Zero(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) d.x(i, 0) = 0.1 * static_cast<double>(i);
    d.t = std::move(t);
    d.y = Eigen::Map<Eigen::VectorXd>(y.data(), n);
    d.e1 = e1;
    d.row_ids.resize(static_cast<std::size_t>(n));
    std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
    return d;
}

// 1-D RCT with mu0(x) = x^2, tau(x) = x, unit noise.
Dataset synthetic_rct(std::size_t n, double e1, std::uint64_t seed, double noise = 1.0) {
    Dataset d;
    d.x.resize(static_cast<Eigen::Index>(n), 1);
    d.t.resize(n);
    d.y.resize(static_cast<Eigen::Index>(n));
    rng::Stream s(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = 1.0 - s.uniform01();  // (0, 1]
        const auto ii = static_cast<Eigen::Index>(i);
        d.x(ii, 0) = x;
        d.t[i] = s.bernoulli(e1) ? 1 : 0;
        d.y[ii] = x * x + d.t[i] * x + noise * s.normal();
    }
    d.e1 = e1;
    d.row_ids.resize(n);
    std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
    return d;
}

Eigen::VectorXd fixed_tau(const Dataset& d) { return 0.5 * d.x.col(0).array() + 0.2; }

}  // namespace

TEST_CASE("horvitz-thompson transform") {
    CHECK(ht_transform(1, 2.0, 0.5) == 4.0);
    CHECK(ht_transform(0, 2.0, 0.5) == -4.0);
    CHECK(ht_transform(1, 1.0, 0.8) == 1.25);
    CHECK_THROWS_AS(ht_transform(1, 1.0, 0.0), ArgumentError);
    CHECK_THROWS_AS(ht_transform(0, 1.0, 1.0), ArgumentError);
}

TEST_CASE("q sample statistic") {
    CHECK(q_sample(0.0, 123.4) == 0.0);
    CHECK(q_sample(1.0, 2.0) == -3.0);
    CHECK(q_sample(-1.0, 2.0) == 5.0);
}

TEST_CASE("gamma shorthand") {
    // t=1, e=0.5, mu1=1, mu0=2: (1 - 2) * 1 - (1 - 0) * 2 = -3
    CHECK(gamma_term(1, 0.5, 1.0, 2.0) == -3.0);
    CHECK(gamma_term(0, 0.5, 1.0, 2.0) == 1.0 - (1.0 - 2.0) * 2.0);
}

TEST_CASE("control variate values") {
    // location invariance at e1=0.5: +-4 tau
    CHECK(control_variate_value(CvKind::location_invariance, 1, 0.5, 0, 0, 0, 1.5) == 6.0);
    CHECK(control_variate_value(CvKind::location_invariance, 0, 0.5, 0, 0, 0, 1.5) == -6.0);
    // doubly robust hand case: gamma = -3, r = -2 * gamma * tau = 6
    CHECK(control_variate_value(CvKind::doubly_robust, 1, 0.5, 2.0, 1.0, 0.0, 1.0) == 6.0);
    // r-style: -4 (1-2t) m tau = -4 * (-1) * 0.5 * 2 = 4
    CHECK(control_variate_value(CvKind::r_style, 1, 0.5, 0.0, 0.0, 0.5, 2.0) == 4.0);
    CHECK(control_variate_value(CvKind::none, 1, 0.5, 0, 0, 0, 3.0) == 0.0);
}

TEST_CASE("location-invariance variate is zero-mean on balanced draws") {
    rng::Stream s(21);
    std::vector<double> values;
    for (int i = 0; i < 20000; ++i) {
        const int t = s.bernoulli(0.5) ? 1 : 0;
        const double tau = s.normal(0.3, 1.0);
        values.push_back(control_variate_value(CvKind::location_invariance, t, 0.5, 0, 0, 0, tau));
    }
    CHECK(std::abs(testutil::mean(values)) <= 3.0 * testutil::se_of_mean(values));
}

TEST_CASE("zero estimator scores exactly zero under every variate") {
    const Dataset d = synthetic_rct(500, 0.5, 30);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(500);
    const PropensitySource prop = PropensitySource::known_constant(0.5);
    NuisanceValues nv;
    nv.mu0 = d.x.col(0);
    nv.mu1 = 2.0 * d.x.col(0);
    nv.m = 1.5 * d.x.col(0);
    nv.e = Eigen::VectorXd::Constant(500, 0.5);

    for (const auto& cv :
         {ControlVariate::none(), ControlVariate::location_invariance(),
          ControlVariate::doubly_robust(), ControlVariate::r_style(),
          ControlVariate::location_invariance(ThetaPolicy::fixed(1.0))}) {
        const QResult r = qhat(zero, d, prop, cv, &nv);
        CHECK(r.q_hat == 0.0);
        CHECK(r.se == 0.0);
        CHECK(r.ci_lo == 0.0);
        CHECK(r.ci_hi == 0.0);
    }
}

TEST_CASE("two-sample hand oracle") {
    // (t=1, y=1), (t=0, y=1), e=0.5, tau_hat = 1:
    // eta = (2, -2); q = 1 - 2*eta*1 = (-3, 5); mean = 1.0
    const Dataset d = tiny_dataset({1, 0}, {1.0, 1.0}, 0.5);
    const Eigen::VectorXd tau = Eigen::VectorXd::Ones(2);
    const QResult r = qhat(tau, d, PropensitySource::known_constant(0.5));
    CHECK(r.q_hat == 1.0);
    CHECK(r.n == 2);
    // sample variance of (-3, 5) is 32; variance of the mean 16
    CHECK(r.variance == doctest::Approx(16.0));
    CHECK(r.ci_lo == doctest::Approx(1.0 - 1.959963984540054 * 4.0));
    CHECK(r.ci_lo <= r.q_hat);
    CHECK(r.q_hat <= r.ci_hi);
}

TEST_CASE("q_hat is unbiased for Q under the known propensity") {
    // Q = E[tau_hat^2 - 2 tau_hat tau]; the oracle integrates over a fresh
    // million-draw covariate sample, no outcomes involved.
    double q_oracle = 0.0;
    {
        rng::Stream s(31);
        const std::size_t big = 1000000;
        double acc = 0.0;
        for (std::size_t i = 0; i < big; ++i) {
            const double x = 1.0 - s.uniform01();
            const double tau_hat = 0.5 * x + 0.2;
            acc += tau_hat * tau_hat - 2.0 * tau_hat * x;  // tau(x) = x
        }
        q_oracle = acc / static_cast<double>(big);
    }
    std::vector<double> qhats;
    for (std::uint64_t rep = 0; rep < 400; ++rep) {
        const Dataset d = synthetic_rct(500, 0.5, 1000 + rep);
        qhats.push_back(
            qhat(fixed_tau(d), d, PropensitySource::known_constant(0.5)).q_hat);
    }
    const double err = std::abs(testutil::mean(qhats) - q_oracle);
    CHECK(err <= 3.0 * testutil::se_of_mean(qhats));
}

TEST_CASE("weighted q_hat matches the local-effect formula") {
    const Dataset d = synthetic_rct(300, 0.5, 32);
    const Eigen::VectorXd tau = fixed_tau(d);
    const PropensitySource prop = PropensitySource::known_constant(0.5);
    Eigen::VectorXd w(300);
    for (Eigen::Index i = 0; i < 300; ++i) w[i] = 0.5 + d.x(i, 0);

    const QResult plain = qhat(tau, d, prop);
    const QResult weighted = qhat(tau, d, prop, ControlVariate::none(), nullptr, &w);

    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < 300; ++i) {
        const double q = q_sample(tau[i], ht_transform(d.t[static_cast<std::size_t>(i)],
                                                       d.y[i], 0.5));
        num += w[i] * q;
        den += w[i];
    }
    CHECK(weighted.q_hat == doctest::Approx(num / den).epsilon(1e-12));
    CHECK(weighted.q_hat != plain.q_hat);

    SUBCASE("unit weights reproduce the plain statistic exactly") {
        const Eigen::VectorXd ones = Eigen::VectorXd::Ones(300);
        const QResult unit = qhat(tau, d, prop, ControlVariate::none(), nullptr, &ones);
        CHECK(unit.q_hat == doctest::Approx(plain.q_hat).epsilon(1e-14));
        CHECK(unit.se == doctest::Approx(plain.se).epsilon(1e-12));
    }
    SUBCASE("nonpositive weights are rejected") {
        w[7] = 0.0;
        CHECK_THROWS_AS(qhat(tau, d, prop, ControlVariate::none(), nullptr, &w),
                        ArgumentError);
    }
}

TEST_CASE("q_hat argument checks") {
    const Dataset d = synthetic_rct(50, 0.5, 33);
    const Eigen::VectorXd tau = Eigen::VectorXd::Zero(49);
    CHECK_THROWS_AS(qhat(tau, d, PropensitySource::known_constant(0.5)), AlignmentError);
    const Eigen::VectorXd tau_ok = Eigen::VectorXd::Zero(50);
    CHECK_THROWS_AS(qhat(tau_ok, d, PropensitySource::known_constant(0.5),
                         ControlVariate::doubly_robust()),
                    ArgumentError);  // nuisances missing
}

TEST_CASE("se shrinks with sample size") {
    const Dataset small = synthetic_rct(2000, 0.5, 34);
    const Dataset large = synthetic_rct(32000, 0.5, 35);
    const double se_small =
        qhat(fixed_tau(small), small, PropensitySource::known_constant(0.5)).se;
    const double se_large =
        qhat(fixed_tau(large), large, PropensitySource::known_constant(0.5)).se;
    CHECK(se_large < se_small);
}

TEST_CASE("optimal theta") {
    rng::Stream s(36);
    Eigen::VectorXd q(5000), r(5000);
    SUBCASE("independent variate: theta near zero") {
        for (Eigen::Index i = 0; i < q.size(); ++i) {
            q[i] = s.normal();
            r[i] = s.normal();
        }
        const ThetaEstimate est = optimal_theta(q, r);
        CHECK(std::abs(est.theta) <= 3.0 / std::sqrt(5000.0));
        CHECK_FALSE(est.var_zero);
    }
    SUBCASE("r = q - mean(q): theta is exactly -1") {
        for (Eigen::Index i = 0; i < q.size(); ++i) q[i] = s.normal(2.0, 3.0);
        r = q.array() - q.mean();
        CHECK(optimal_theta(q, r).theta == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("r = -2q + c: theta is exactly +0.5") {
        for (Eigen::Index i = 0; i < q.size(); ++i) q[i] = s.normal();
        r = -2.0 * q.array() + 7.0;
        CHECK(optimal_theta(q, r).theta == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("constant variate flags zero variance") {
        for (Eigen::Index i = 0; i < q.size(); ++i) q[i] = s.normal();
        r.setConstant(3.0);
        const ThetaEstimate est = optimal_theta(q, r);
        CHECK(est.theta == 0.0);
        CHECK(est.var_zero);
    }
    SUBCASE("needs two samples") {
        CHECK_THROWS_AS(optimal_theta(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)),
                        ArgumentError);
    }
}

TEST_CASE("screening verdicts") {
    QResult r;
    r.n = 100;
    r.eval_fingerprint = 1234;
    r.cv = CvKind::doubly_robust;

    SUBCASE("nonnegative q is degenerate") {
        r.q_hat = 0.3;
        CHECK(screen(r).screening == Screening::degenerate);
        r.q_hat = 0.0;
        CHECK(screen(r).screening == Screening::degenerate);
    }
    SUBCASE("worse than the constant-effect baseline") {
        r.q_hat = -0.1;
        QResult base = r;
        base.q_hat = -0.5;
        CHECK(screen(r, &base).screening == Screening::no_heterogeneity_gain);
    }
    SUBCASE("better than the baseline is useful") {
        r.q_hat = -0.5;
        QResult base = r;
        base.q_hat = -0.1;
        CHECK(screen(r, &base).screening == Screening::useful);
    }
    SUBCASE("mismatched evaluation sets are rejected") {
        QResult base = r;
        base.eval_fingerprint = 999;
        CHECK_THROWS_AS(screen(r, &base), ArgumentError);
    }
    SUBCASE("mismatched variate kinds are rejected") {
        QResult base = r;
        base.cv = CvKind::none;
        CHECK_THROWS_AS(screen(r, &base), ArgumentError);
    }
}

TEST_CASE("approximate mse") {
    const Dataset d = synthetic_rct(400, 0.5, 37);
    const PropensitySource prop = PropensitySource::known_constant(0.5);
    NuisanceValues nv;
    nv.mu0 = d.x.col(0);
    nv.mu1 = d.x.col(0);
    nv.m = d.x.col(0);
    nv.e = Eigen::VectorXd::Constant(400, 0.5);

    const QResult q1 = qhat(fixed_tau(d), d, prop);
    SUBCASE("identical outcome arms add nothing") {
        CHECK(approximate_mse(q1, nv) == q1.q_hat);
    }
    SUBCASE("rankings by q and by approximate mse agree exactly") {
        nv.mu1 = 2.0 * d.x.col(0);
        const QResult q2 = qhat(Eigen::VectorXd::Constant(400, 0.9), d, prop);
        const double p1 = approximate_mse(q1, nv);
        const double p2 = approximate_mse(q2, nv);
        CHECK(((q1.q_hat < q2.q_hat) == (p1 < p2)));
        CHECK(p1 - p2 == doctest::Approx(q1.q_hat - q2.q_hat).epsilon(1e-12));
    }
    SUBCASE("misaligned nuisances are rejected") {
        NuisanceValues bad = nv;
        bad.mu0 = Eigen::VectorXd::Zero(10);
        bad.mu1 = Eigen::VectorXd::Zero(10);
        bad.m = Eigen::VectorXd::Zero(10);
        bad.e = Eigen::VectorXd::Zero(10);
        CHECK_THROWS_AS(approximate_mse(q1, bad), AlignmentError);
    }
}

TEST_CASE("approximate mse approaches the oracle as nuisances improve") {
    // |P_hat - PEHE| medians shrink as the nuisance training size grows.
    const std::size_t eval_n = 2000;
    std::vector<std::size_t> train_sizes = {500, 2000, 8000};
    std::vector<double> med_err;
    for (std::size_t ts = 0; ts < train_sizes.size(); ++ts) {
        std::vector<double> errs;
        for (std::uint64_t rep = 0; rep < 50; ++rep) {
            const Dataset train = synthetic_rct(train_sizes[ts], 0.5, 4000 + 97 * ts + rep);
            const Dataset eval = synthetic_rct(eval_n, 0.5, 9000 + 131 * ts + rep);
            const NuisanceSet ns = fit_nuisances(train, 2, rep);
            const NuisanceValues nv = ns.predict(eval.x);
            const Eigen::VectorXd tau = fixed_tau(eval);
            const QResult q = qhat(tau, eval, PropensitySource::known_constant(0.5));
            const double p_hat = approximate_mse(q, nv);
            double pehe = 0.0;
            for (Eigen::Index i = 0; i < eval.x.rows(); ++i) {
                const double diff = eval.x(i, 0) - tau[i];
                pehe += diff * diff;
            }
            pehe /= static_cast<double>(eval_n);
            errs.push_back(std::abs(p_hat - pehe));
        }
        med_err.push_back(testutil::median(errs));
    }
    CHECK(med_err[1] < med_err[0]);
    CHECK(med_err[2] < med_err[1]);
}

TEST_CASE("r-loss identity at e1 = 1/2") {
    // L_R = q_hat(r_R, theta=1)/4 + mean((y - m)^2) for arbitrary tau and m.
    rng::Stream s(38);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 50 + s.below(200);
        Dataset d = synthetic_rct(n, 0.5, 5000 + static_cast<std::uint64_t>(trial));
        Eigen::VectorXd tau(static_cast<Eigen::Index>(n)), m(static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < tau.size(); ++i) {
            tau[i] = s.normal(0.0, 2.0);
            m[i] = s.normal(0.5, 1.5);
        }
        NuisanceValues nv;
        nv.mu0 = Eigen::VectorXd::Zero(tau.size());
        nv.mu1 = Eigen::VectorXd::Zero(tau.size());
        nv.m = m;
        nv.e = Eigen::VectorXd::Constant(tau.size(), 0.5);

        const QResult q = qhat(tau, d, PropensitySource::known_constant(0.5),
                               ControlVariate::r_style(ThetaPolicy::fixed(1.0)), &nv);
        const double lr = r_loss(tau, d.y, m, d.t, nv.e);
        const double y_m = (d.y - m).squaredNorm() / static_cast<double>(n);
        CHECK(lr == doctest::Approx(q.q_hat / 4.0 + y_m).epsilon(1e-8));
    }
}

TEST_CASE("dr-loss identity") {
    // L_DR = q_hat(r_DR, theta=1) + mean((eta + gamma)^2) for arbitrary
    // nuisance configurations (gamma and eta share the same plug-ins).
    rng::Stream s(39);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 50 + s.below(200);
        Dataset d = synthetic_rct(n, 0.5, 6000 + static_cast<std::uint64_t>(trial));
        NuisanceValues nv;
        const auto en = static_cast<Eigen::Index>(n);
        Eigen::VectorXd tau(en);
        nv.mu0.resize(en);
        nv.mu1.resize(en);
        nv.m.resize(en);
        nv.e.resize(en);
        for (Eigen::Index i = 0; i < en; ++i) {
            tau[i] = s.normal(0.0, 2.0);
            nv.mu0[i] = s.normal();
            nv.mu1[i] = s.normal();
            nv.m[i] = s.normal();
            nv.e[i] = s.uniform(0.1, 0.9);
        }
        // eta inside both the loss and q_hat uses the design constant; gamma
        // uses the plug-in e from the nuisances.
        Eigen::VectorXd eta_gamma(en);
        for (Eigen::Index i = 0; i < en; ++i) {
            const int t = d.t[static_cast<std::size_t>(i)];
            eta_gamma[i] =
                ht_transform(t, d.y[i], 0.5) + gamma_term(t, nv.e[i], nv.mu1[i], nv.mu0[i]);
        }
        const QResult q = qhat(tau, d, PropensitySource::known_constant(0.5),
                               ControlVariate::doubly_robust(ThetaPolicy::fixed(1.0)), &nv);
        const double ldr = dr_loss(tau, eta_gamma);
        const double constant = eta_gamma.squaredNorm() / static_cast<double>(n);
        CHECK(ldr == doctest::Approx(q.q_hat + constant).epsilon(1e-8));
    }
}

TEST_CASE("unit density ratio reproduces the plain statistic") {
    const Dataset d = synthetic_rct(400, 0.5, 40);
    const Eigen::VectorXd tau = fixed_tau(d);
    const PropensitySource prop = PropensitySource::known_constant(0.5);
    DensityRatio ratio;
    ratio.zeta = Eigen::VectorXd::Ones(400);
    const QResult plain = qhat(tau, d, prop);
    const QResult ipw = ipw_qhat(tau, d, ratio, prop);
    CHECK(ipw.q_hat == doctest::Approx(plain.q_hat).epsilon(1e-14));
}

TEST_CASE("zero ratio weight is rejected") {
    const Dataset d = synthetic_rct(50, 0.5, 41);
    DensityRatio ratio;
    ratio.zeta = Eigen::VectorXd::Ones(50);
    ratio.zeta[3] = 0.0;
    CHECK_THROWS_AS(
        ipw_qhat(fixed_tau(d), d, ratio, PropensitySource::known_constant(0.5)),
        ArgumentError);
}

TEST_CASE("ipw transports q to a tilted target distribution") {
    // Source X ~ U(0,1]; target density 2x on (0,1] (zeta(x) = 2x). Both
    // share mu0(x)=x^2 and tau(x)=x, so the target q is directly estimable
    // from an independent target draw.
    auto make_target = [](std::size_t n, std::uint64_t seed) {
        Dataset d;
        d.x.resize(static_cast<Eigen::Index>(n), 1);
        d.t.resize(n);
        d.y.resize(static_cast<Eigen::Index>(n));
        rng::Stream s(seed);
        for (std::size_t i = 0; i < n; ++i) {
            const double x = std::sqrt(1.0 - s.uniform01());  // density 2x
            const auto ii = static_cast<Eigen::Index>(i);
            d.x(ii, 0) = x;
            d.t[i] = s.bernoulli(0.5) ? 1 : 0;
            d.y[ii] = x * x + d.t[i] * x + s.normal();
        }
        d.e1 = 0.5;
        d.row_ids.resize(n);
        std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
        return d;
    };
    const PropensitySource prop = PropensitySource::known_constant(0.5);
    std::vector<double> diffs;
    for (std::uint64_t rep = 0; rep < 50; ++rep) {
        const Dataset source = synthetic_rct(4000, 0.5, 7000 + rep);
        const Dataset target = make_target(4000, 8000 + rep);
        DensityRatio ratio;
        ratio.zeta = 2.0 * source.x.col(0);
        ratio.source = DensityRatio::Source::user_supplied;
        const double from_source =
            ipw_qhat(fixed_tau(source), source, ratio, prop).q_hat;
        const double on_target = qhat(fixed_tau(target), target, prop).q_hat;
        diffs.push_back(from_source - on_target);
    }
    CHECK(std::abs(testutil::mean(diffs)) <= 3.0 * testutil::se_of_mean(diffs));
}

TEST_CASE("density ratio near one for identical distributions") {
    std::vector<double> medians;
    for (std::uint64_t rep = 0; rep < 50; ++rep) {
        rng::Stream s(9000 + rep);
        Eigen::MatrixXd src(4000, 2), tgt(4000, 2);
        for (Eigen::Index i = 0; i < 4000; ++i)
            for (Eigen::Index j = 0; j < 2; ++j) {
                src(i, j) = s.uniform01();
                tgt(i, j) = s.uniform01();
            }
        const DensityRatio ratio = estimate_density_ratio(src, tgt);
        std::vector<double> z(ratio.zeta.data(), ratio.zeta.data() + ratio.zeta.size());
        medians.push_back(testutil::median(z));
    }
    const double med = testutil::median(medians);
    CHECK(med >= 0.8);
    CHECK(med <= 1.25);
}

TEST_CASE("disjoint supports saturate at the clip bounds") {
    Eigen::MatrixXd src(200, 1), tgt(200, 1);
    rng::Stream s(42);
    for (Eigen::Index i = 0; i < 200; ++i) {
        src(i, 0) = s.uniform(0.0, 0.3);
        tgt(i, 0) = s.uniform(0.7, 1.0);
    }
    const DensityRatio ratio = estimate_density_ratio(src, tgt);
    // source points sit where the target has no mass: lower clip everywhere
    CHECK(ratio.zeta.maxCoeff() == 0.05);
    CHECK(estimate_density_ratio(tgt, src).zeta.maxCoeff() == 0.05);

    SUBCASE("upper clip at source points swamped by the target") {
        Eigen::MatrixXd wide(400, 1), narrow(400, 1);
        for (Eigen::Index i = 0; i < 400; ++i) {
            wide(i, 0) = s.uniform01();
            narrow(i, 0) = 0.995 + 0.005 * s.uniform01();
        }
        const DensityRatio up = estimate_density_ratio(wide, narrow);
        CHECK(up.zeta.maxCoeff() == 20.0);
    }
}

TEST_CASE("symmetric shift gives reciprocal ratios in median") {
    rng::Stream s(43);
    Eigen::MatrixXd src(4000, 1), tgt(4000, 1);
    for (Eigen::Index i = 0; i < 4000; ++i) {
        src(i, 0) = std::pow(s.uniform01(), 0.8);
        tgt(i, 0) = 1.0 - std::pow(s.uniform01(), 0.8);
    }
    // Reflecting both samples swaps the two densities, so the product of the
    // forward ratio and the reflected-fit ratio hovers around 1.
    const DensityRatio fwd = estimate_density_ratio(src, tgt);
    Eigen::MatrixXd src_reflected = (1.0 - src.array()).matrix();
    Eigen::MatrixXd tgt_reflected = (1.0 - tgt.array()).matrix();
    const DensityRatio bwd = estimate_density_ratio(src_reflected, tgt_reflected);
    std::vector<double> prods;
    for (Eigen::Index i = 0; i < 4000; ++i) prods.push_back(fwd.zeta[i] * bwd.zeta[i]);
    const double med = testutil::median(prods);
    CHECK(med > 0.6);
    CHECK(med < 1.6);
}

TEST_CASE("dimension mismatch is rejected") {
    CHECK_THROWS_AS(estimate_density_ratio(Eigen::MatrixXd::Zero(5, 2),
                                           Eigen::MatrixXd::Zero(5, 3)),
                    ArgumentError);
}

TEST_CASE("zero-mean gate") {
    rng::Stream s(44);
    Eigen::VectorXd centered(5000), shifted(5000);
    for (Eigen::Index i = 0; i < 5000; ++i) {
        centered[i] = s.normal();
        shifted[i] = s.normal() + 0.5;
    }
    CHECK(zero_mean_gate(centered).pass);
    const GateResult bad = zero_mean_gate(shifted);
    CHECK_FALSE(bad.pass);
    CHECK(bad.mean == doctest::Approx(0.5).epsilon(0.2));
    CHECK(bad.se > 0.0);

    SUBCASE("identically zero passes") {
        CHECK(zero_mean_gate(Eigen::VectorXd::Zero(10)).pass);
    }
    SUBCASE("nonzero constant fails") {
        CHECK_FALSE(zero_mean_gate(Eigen::VectorXd::Constant(10, 1.0)).pass);
    }
}

TEST_CASE("qresult json round trip") {
    const Dataset d = synthetic_rct(100, 0.5, 45);
    QResult r = qhat(fixed_tau(d), d, PropensitySource::known_constant(0.5));
    r = screen(r);
    const std::string text = r.to_json();
    const QResult back = QResult::from_json(text);
    CHECK(back.q_hat == r.q_hat);
    CHECK(back.se == r.se);
    CHECK(back.ci_lo == r.ci_lo);
    CHECK(back.ci_hi == r.ci_hi);
    CHECK(back.n == r.n);
    CHECK(back.cv == r.cv);
    CHECK(back.screening == r.screening);
    CHECK(back.to_json() == text);
}

TEST_CASE("custom variate flows through q_hat") {
    const Dataset d = synthetic_rct(1000, 0.5, 46);
    const Eigen::VectorXd tau = fixed_tau(d);
    const PropensitySource prop = PropensitySource::known_constant(0.5);
    // The location-invariance variate expressed as a custom handle must
    // reproduce the built-in kind at the same theta.
    auto fn = [&](std::size_t, int t, double, double tau_x) {
        return control_variate_value(CvKind::location_invariance, t, 0.5, 0, 0, 0, tau_x);
    };
    const QResult builtin =
        qhat(tau, d, prop, ControlVariate::location_invariance(ThetaPolicy::fixed(0.7)));
    const QResult custom = qhat(tau, d, prop, ControlVariate::custom(fn, ThetaPolicy::fixed(0.7)));
    CHECK(custom.q_hat == doctest::Approx(builtin.q_hat).epsilon(1e-14));
}
