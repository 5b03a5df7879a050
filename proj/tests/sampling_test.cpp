#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "qcate/error.hpp"
#include "qcate/rng.hpp"
#include "qcate/sampling.hpp"
#include "test_util.hpp"

using namespace qcate;

namespace {

Dataset uniform_pool(std::size_t n, std::size_t dim, double e1, std::uint64_t seed) {
    Dataset d;
    d.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    d.t.resize(n);
    d.y.resize(static_cast<Eigen::Index>(n));
    rng::Stream s(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        for (Eigen::Index j = 0; j < d.x.cols(); ++j) d.x(ii, j) = s.uniform01();
        d.t[i] = s.bernoulli(e1) ? 1 : 0;
        d.y[ii] = s.normal();
    }
    d.e1 = e1;
    d.provenance = Provenance::rct;
    d.row_ids.resize(n);
    std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
    return d;
}

// scale=0 makes G constant per arm, so the calibrated keep probabilities are
// exact targets: G(1,x) = frac*size/N1, G(0,x) = (1-frac)*size/N0.
BiasingFn flat_biasing(const Dataset& pool, double frac, std::size_t size, std::uint64_t seed,
                       double g_lo = 0.001, double g_hi = 0.999) {
    BiasingConfig cfg;
    cfg.layers = 1;
    cfg.target_est_size = size;
    cfg.target_treat_frac = frac;
    cfg.seed = seed;
    cfg.logit_scale = 0.0;
    cfg.g_lo = g_lo;
    cfg.g_hi = g_hi;
    return make_biasing_fn(cfg, pool);
}

}  // namespace

TEST_CASE("calibration hits the size and treatment-fraction targets") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Dataset pool = uniform_pool(4000, 3, 0.5, 100 + seed);
        BiasingConfig cfg;
        cfg.layers = 1;
        cfg.target_est_size = 800;
        cfg.target_treat_frac = 0.5;
        cfg.seed = seed;
        const BiasingFn g = make_biasing_fn(cfg, pool);

        double mass1 = 0.0, mass0 = 0.0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const auto row = pool.x.row(static_cast<Eigen::Index>(i));
            if (pool.t[i] == 1)
                mass1 += g.g(1, row);
            else
                mass0 += g.g(0, row);
        }
        const double size = mass0 + mass1;
        CHECK(std::abs(size - 800.0) <= 0.02 * 800.0);
        CHECK(std::abs(mass1 / size - 0.5) <= 0.02);
    }
}

TEST_CASE("symmetric targets calibrate near-equal shifts across arms") {
    // The two arm networks are drawn independently from the same law, so the
    // calibrated shifts match in distribution; their mean difference over
    // seeds is consistent with zero.
    std::vector<double> diffs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Dataset pool = uniform_pool(3000, 2, 0.5, 400 + seed);
        BiasingConfig cfg;
        cfg.layers = 1;
        cfg.target_est_size = 600;
        cfg.target_treat_frac = 0.5;
        cfg.seed = 17 + seed;
        const BiasingFn g = make_biasing_fn(cfg, pool);
        diffs.push_back(g.shift(1) - g.shift(0));
    }
    CHECK(std::abs(testutil::mean(diffs)) <= 3.0 * testutil::se_of_mean(diffs));
}

TEST_CASE("equal-arm keep probability leaves the design propensity unchanged") {
    const Dataset pool = uniform_pool(2000, 2, 0.5, 7);
    // flat G with equal arms: frac = pool treated share, any feasible size
    const BiasingFn g = flat_biasing(pool, 0.5, 500, 3);
    for (int probe = 0; probe < 5; ++probe) {
        Eigen::RowVectorXd x(2);
        x << 0.2 * probe, 1.0 - 0.15 * probe;
        CHECK(induced_propensity(g, 0.5, x) == doctest::Approx(0.5).epsilon(0.02));
    }
}

TEST_CASE("induced propensity matches the closed form at engineered keep rates") {
    // Balanced pool, G(x,1)=0.9 and G(x,0)=0.1 via flat calibration:
    // induced = 1 / (1 + (0.1/0.9)) = 0.9 at e1 = 0.5.
    Dataset pool = uniform_pool(20000, 1, 0.5, 8);
    // force an exactly balanced pool so the flat targets are exact
    for (std::size_t i = 0; i < pool.size(); ++i) pool.t[i] = i % 2 == 0 ? 1 : 0;
    const std::size_t n1 = pool.size() / 2;
    const std::size_t size = static_cast<std::size_t>(0.9 * n1 + 0.1 * n1);
    const BiasingFn g = flat_biasing(pool, 0.9, size, 4);
    Eigen::RowVectorXd x(1);
    x << 0.5;
    CHECK(g.g(1, x) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(g.g(0, x) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(induced_propensity(g, 0.5, x) == doctest::Approx(0.9).epsilon(1e-6));

    SUBCASE("equal arms at a skewed design return e1") {
        CHECK(induced_propensity(flat_biasing(pool, 0.5, 1000, 5), 0.85, x) ==
              doctest::Approx(0.85).epsilon(1e-6));
    }
}

TEST_CASE("observational sampling keeps rows by the biased coin") {
    Dataset pool = uniform_pool(20000, 1, 0.5, 9);
    for (std::size_t i = 0; i < pool.size(); ++i) pool.t[i] = i % 2 == 0 ? 1 : 0;

    SUBCASE("uniform 0.98 keep rate") {
        const std::size_t target = static_cast<std::size_t>(0.98 * 20000);
        const BiasingFn g = flat_biasing(pool, 0.5, target, 10);
        const Dataset est = observational_sample(pool, g, 11);
        const double kept = static_cast<double>(est.size());
        const double se = std::sqrt(20000 * 0.98 * 0.02);
        CHECK(std::abs(kept - 0.98 * 20000) <= 3.0 * se);
        CHECK(est.provenance == Provenance::observational_sampled);
        CHECK_FALSE(est.e_known_constant);
    }
    SUBCASE("arm-skewed keep rates tilt the treated share to 0.9") {
        const std::size_t n1 = pool.size() / 2;
        const std::size_t size = static_cast<std::size_t>(0.9 * n1 + 0.1 * n1);
        const BiasingFn g = flat_biasing(pool, 0.9, size, 12);
        const Dataset est = observational_sample(pool, g, 13);
        double treated = 0.0;
        for (int t : est.t) treated += t;
        const double frac = treated / static_cast<double>(est.size());
        const double se = std::sqrt(0.9 * 0.1 / static_cast<double>(est.size()));
        CHECK(std::abs(frac - 0.9) <= 3.0 * se);
        // hidden ground truth carries the induced propensity
        REQUIRE(est.true_propensity.size() == static_cast<Eigen::Index>(est.size()));
        CHECK(est.true_propensity.minCoeff() == doctest::Approx(0.9).epsilon(1e-6));
    }
}

TEST_CASE("sampling is deterministic and leaves rows untouched") {
    const Dataset pool = uniform_pool(5000, 3, 0.4, 14);
    BiasingConfig cfg;
    cfg.layers = 2;
    cfg.target_est_size = 1000;
    cfg.target_treat_frac = 0.3;
    cfg.seed = 15;
    const BiasingFn g = make_biasing_fn(cfg, pool);
    const Dataset a = observational_sample(pool, g, 16);
    const Dataset b = observational_sample(pool, g, 16);
    CHECK(a.row_ids == b.row_ids);
    CHECK((a.x - b.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.y - b.y).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.t == b.t);

    // kept rows are verbatim pool rows
    for (std::size_t k = 0; k < a.size(); ++k) {
        const std::size_t src = a.row_ids[k];
        CHECK(a.t[k] == pool.t[src]);
        CHECK(a.y[static_cast<Eigen::Index>(k)] == pool.y[static_cast<Eigen::Index>(src)]);
        CHECK((a.x.row(static_cast<Eigen::Index>(k)) -
               pool.x.row(static_cast<Eigen::Index>(src)))
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
    }
    const Dataset c = observational_sample(pool, g, 17);
    CHECK(a.row_ids != c.row_ids);
}

TEST_CASE("binned induced propensity matches the empirical treated share") {
    // 1-D pool, nonlinear keep probability; within covariate bins the kept
    // rows' treated share tracks the closed form.
    const Dataset pool = uniform_pool(100000, 1, 0.5, 18);
    BiasingConfig cfg;
    cfg.layers = 1;
    cfg.target_est_size = 30000;
    cfg.target_treat_frac = 0.35;
    cfg.seed = 19;
    const BiasingFn g = make_biasing_fn(cfg, pool);
    const Dataset est = observational_sample(pool, g, 20);

    constexpr int kBins = 10;
    std::vector<double> treated(kBins, 0), total(kBins, 0), predicted(kBins, 0);
    for (std::size_t i = 0; i < est.size(); ++i) {
        const int bin = std::min(kBins - 1, static_cast<int>(est.x(static_cast<Eigen::Index>(i), 0) * kBins));
        treated[static_cast<std::size_t>(bin)] += est.t[i];
        total[static_cast<std::size_t>(bin)] += 1.0;
        predicted[static_cast<std::size_t>(bin)] +=
            est.true_propensity[static_cast<Eigen::Index>(i)];
    }
    int within = 0;
    for (int b = 0; b < kBins; ++b) {
        REQUIRE(total[static_cast<std::size_t>(b)] > 100);
        const double p = predicted[static_cast<std::size_t>(b)] / total[static_cast<std::size_t>(b)];
        const double frac = treated[static_cast<std::size_t>(b)] / total[static_cast<std::size_t>(b)];
        const double se = std::sqrt(p * (1.0 - p) / total[static_cast<std::size_t>(b)]);
        if (std::abs(frac - p) <= 3.0 * se) ++within;
    }
    CHECK(within >= 9);
}

TEST_CASE("calibration failure modes") {
    const Dataset pool = uniform_pool(500, 2, 0.5, 21);
    BiasingConfig cfg;
    cfg.layers = 1;
    cfg.seed = 22;
    SUBCASE("target size not below the pool") {
        cfg.target_est_size = 500;
        cfg.target_treat_frac = 0.5;
        CHECK_THROWS_AS(make_biasing_fn(cfg, pool), CalibrationError);
    }
    SUBCASE("treated mass out of reach under the keep bounds") {
        cfg.target_est_size = 499;
        cfg.target_treat_frac = 0.99;  // needs ~494 treated, pool has ~250
        CHECK_THROWS_WITH_AS(make_biasing_fn(cfg, pool),
                             doctest::Contains("treated kept count"), CalibrationError);
    }
    SUBCASE("bad depth") {
        cfg.layers = 4;
        cfg.target_est_size = 100;
        CHECK_THROWS_AS(make_biasing_fn(cfg, pool), ArgumentError);
    }
    SUBCASE("non-rct pools are refused by the sampler") {
        Dataset synth = pool;
        synth.provenance = Provenance::synthetic;
        cfg.layers = 1;
        cfg.target_est_size = 100;
        cfg.target_treat_frac = 0.5;
        const BiasingFn g = make_biasing_fn(cfg, pool);
        CHECK_THROWS_AS(observational_sample(synth, g, 1), ArgumentError);
    }
}

TEST_CASE("keep probabilities stay inside the configured bounds") {
    const Dataset pool = uniform_pool(2000, 4, 0.5, 23);
    BiasingConfig cfg;
    cfg.layers = 3;
    cfg.target_est_size = 200;
    cfg.target_treat_frac = 0.2;
    cfg.seed = 24;
    cfg.logit_scale = 4.0;  // strong selection pushes into the clips
    const BiasingFn g = make_biasing_fn(cfg, pool);
    for (std::size_t i = 0; i < 200; ++i) {
        const auto row = pool.x.row(static_cast<Eigen::Index>(i));
        for (int t : {0, 1}) {
            const double v = g.g(t, row);
            CHECK(v >= cfg.g_lo);
            CHECK(v <= cfg.g_hi);
        }
    }
}

TEST_CASE("grid construction") {
    SUBCASE("full factorial with 100 replicates yields 3600 cells") {
        const auto cells =
            build_grid({1000, 2000, 4000, 8000}, {0.1, 0.5, 0.9}, {1, 2, 3}, 100, 42);
        CHECK(cells.size() == 3600);
        std::set<std::uint64_t> seeds;
        for (const auto& c : cells) seeds.insert(c.seed);
        CHECK(seeds.size() == 3600);  // distinct per-cell seeds
    }
    SUBCASE("singletons collapse to one cell") {
        const auto cells = build_grid({1000}, {0.5}, {1}, 1, 0);
        CHECK(cells.size() == 1);
    }
    SUBCASE("replicates of a setting get different seeds") {
        const auto cells = build_grid({1000}, {0.5}, {1}, 2, 7);
        REQUIRE(cells.size() == 2);
        CHECK(cells[0].seed != cells[1].seed);
        CHECK(cells[0].cell_index == cells[1].cell_index);
    }
    SUBCASE("empty axes are rejected") {
        CHECK_THROWS_AS(build_grid({}, {0.5}, {1}, 1, 0), ArgumentError);
        CHECK_THROWS_AS(build_grid({10}, {0.5}, {1}, 0, 0), ArgumentError);
    }
}
