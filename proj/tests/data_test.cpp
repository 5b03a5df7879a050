#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "qcate/data.hpp"
#include "qcate/error.hpp"
#include "qcate/rng.hpp"
#include "test_util.hpp"

using namespace qcate;

namespace {

SchemaConfig basic_schema() {
    SchemaConfig s;
    s.covariates = {{"recency", ColumnSpec::Kind::numeric},
                    {"history", ColumnSpec::Kind::numeric},
                    {"zip", ColumnSpec::Kind::categorical}};
    s.treatment_column = "t";
    s.outcome_column = "y";
    return s;
}

// Mail-campaign style table: numeric + categorical covariates, binary
// treatment with the requested share of ones.
std::string make_table(std::size_t n, double treat_frac, std::uint64_t seed) {
    rng::Stream s(seed);
    std::ostringstream out;
    out << "recency,history,zip,t,y\n";
    const char* zips[] = {"rural", "suburban", "urban"};
    for (std::size_t i = 0; i < n; ++i) {
        out << (1 + s.below(12)) << "," << s.uniform(10.0, 3000.0) << ","
            << zips[s.below(3)] << "," << (s.bernoulli(treat_frac) ? 1 : 0) << ","
            << s.normal() << "\n";
    }
    return out.str();
}

}  // namespace

TEST_CASE("load_csv ingests a 64000-row marketing-style table") {
    const auto dir = testutil::temp_dir("data_load");
    const auto path = dir / "mail.csv";
    testutil::write_file(path, make_table(64000, 0.67, 1));
    SchemaConfig schema = basic_schema();

    const Dataset d = load_csv(path.string(), schema);
    CHECK(d.size() == 64000);
    CHECK(d.dim() == 5);  // 2 numeric + 3 one-hot levels
    CHECK(d.e1 == doctest::Approx(0.67).epsilon(0.02));
    CHECK(d.provenance == Provenance::rct);
    // features scaled into [0,1]
    CHECK(d.x.minCoeff() >= 0.0);
    CHECK(d.x.maxCoeff() <= 1.0);

    SUBCASE("declared e1 wins over the empirical mean") {
        schema.e1 = 0.67;
        const Dataset d2 = load_csv(path.string(), schema);
        CHECK(d2.e1 == 0.67);
    }
    SUBCASE("declared e1 far from the data fails the 5-SE check") {
        schema.e1 = 0.5;
        CHECK_THROWS_AS(load_csv(path.string(), schema), DataError);
    }
}

TEST_CASE("load_csv error paths") {
    const auto dir = testutil::temp_dir("data_errors");
    const SchemaConfig schema = basic_schema();

    SUBCASE("single row with t=1 violates overlap") {
        const auto path = dir / "one.csv";
        testutil::write_file(path, "recency,history,zip,t,y\n1,10.0,urban,1,0.5\n");
        CHECK_THROWS_AS(load_csv(path.string(), schema), DataError);
    }
    SUBCASE("treatment value 2 is rejected") {
        const auto path = dir / "bad_t.csv";
        testutil::write_file(path,
                             "recency,history,zip,t,y\n1,10.0,urban,1,0.5\n2,20.0,rural,2,0.1\n");
        CHECK_THROWS_AS(load_csv(path.string(), schema), DataError);
    }
    SUBCASE("missing covariate column is a schema error") {
        const auto path = dir / "missing.csv";
        testutil::write_file(path, "recency,zip,t,y\n1,urban,1,0.5\n2,rural,0,0.1\n");
        CHECK_THROWS_AS(load_csv(path.string(), schema), SchemaError);
    }
    SUBCASE("empty file is a data error") {
        const auto path = dir / "empty.csv";
        testutil::write_file(path, "");
        CHECK_THROWS_AS(load_csv(path.string(), schema), DataError);
    }
    SUBCASE("header-only file is a data error") {
        const auto path = dir / "header.csv";
        testutil::write_file(path, "recency,history,zip,t,y\n");
        CHECK_THROWS_AS(load_csv(path.string(), schema), DataError);
    }
    SUBCASE("unparseable outcome is a data error") {
        const auto path = dir / "bad_y.csv";
        testutil::write_file(path, "recency,history,zip,t,y\n1,10.0,urban,1,abc\n");
        CHECK_THROWS_AS(load_csv(path.string(), schema), DataError);
    }
}

TEST_CASE("preprocess: one-hot encoding") {
    csv::Table raw = csv::read_string("color\na\nb\nc\nb\na\n");
    SchemaConfig schema;
    schema.covariates = {{"color", ColumnSpec::Kind::categorical}};
    schema.treatment_column = "t";
    schema.outcome_column = "y";
    const Eigen::MatrixXd x = preprocess(raw, schema);
    REQUIRE(x.cols() == 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        CHECK(x.row(i).sum() == 1.0);
        for (Eigen::Index j = 0; j < 3; ++j) CHECK((x(i, j) == 0.0 || x(i, j) == 1.0));
    }
    // sorted levels: a -> col 0, b -> col 1, c -> col 2
    CHECK(x(0, 0) == 1.0);
    CHECK(x(1, 1) == 1.0);
    CHECK(x(2, 2) == 1.0);
}

TEST_CASE("preprocess: min-max scaling") {
    Eigen::MatrixXd raw(3, 1);
    raw << 2.0, 4.0, 6.0;
    const Eigen::MatrixXd x = preprocess(raw);
    CHECK(x(0, 0) == 0.0);
    CHECK(x(1, 0) == 0.5);
    CHECK(x(2, 0) == 1.0);
}

TEST_CASE("preprocess: constant column scales to zero, not an error") {
    Eigen::MatrixXd raw(4, 2);
    raw << 7.0, 1.0, 7.0, 2.0, 7.0, 3.0, 7.0, 4.0;
    const Eigen::MatrixXd x = preprocess(raw);
    CHECK(x.col(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(x.col(1).maxCoeff() == 1.0);
}

TEST_CASE("preprocess: feature cap selects a deterministic seed-dependent subset") {
    rng::Stream s(3);
    Eigen::MatrixXd raw(20, 150);
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
        for (Eigen::Index j = 0; j < raw.cols(); ++j) raw(i, j) = s.uniform01();

    const auto p1 = Preprocessor::fit(raw, 100, 17);
    const auto p2 = Preprocessor::fit(raw, 100, 17);
    const auto p3 = Preprocessor::fit(raw, 100, 18);
    CHECK(p1.out_dim() == 100);
    CHECK(p1.selected_columns() == p2.selected_columns());
    CHECK(p1.selected_columns() != p3.selected_columns());
    CHECK(p1.transform(raw) == p2.transform(raw));
    // Stacking order preserved: selected indices ascend.
    const auto& sel = p1.selected_columns();
    for (std::size_t k = 1; k < sel.size(); ++k) CHECK(sel[k] > sel[k - 1]);
}

TEST_CASE("preprocess: unseen categories map to all-zero indicators") {
    csv::Table fit_rows = csv::read_string("color\na\nb\n");
    SchemaConfig schema;
    schema.covariates = {{"color", ColumnSpec::Kind::categorical}};
    schema.treatment_column = "t";
    schema.outcome_column = "y";
    const auto prep = Preprocessor::fit(fit_rows, schema);
    csv::Table new_rows = csv::read_string("color\nc\na\n");
    const Eigen::MatrixXd x = prep.transform(new_rows);
    CHECK(x.row(0).sum() == 0.0);
    CHECK(x.row(1).sum() == 1.0);
}

TEST_CASE("preprocess: numeric transform clips new rows into [0,1]") {
    Eigen::MatrixXd train(2, 1), eval(2, 1);
    train << 0.0, 10.0;
    eval << -5.0, 20.0;
    const auto prep = Preprocessor::fit(train, 100, 0);
    const Eigen::MatrixXd xe = prep.transform(eval);
    CHECK(xe(0, 0) == 0.0);
    CHECK(xe(1, 0) == 1.0);
}

TEST_CASE("preprocess is idempotent on its own output") {
    rng::Stream s(9);
    Eigen::MatrixXd raw(50, 6);
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
        for (Eigen::Index j = 0; j < raw.cols(); ++j) raw(i, j) = s.uniform(-3.0, 11.0);
    raw.col(4).setConstant(2.0);  // degenerate column
    const Eigen::MatrixXd once = preprocess(raw, 100, 5);
    const Eigen::MatrixXd twice = preprocess(once, 100, 5);
    CHECK((once - twice).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("split partitions the dataset") {
    const auto dir = testutil::temp_dir("data_split");
    const auto path = dir / "d.csv";
    testutil::write_file(path, make_table(100, 0.5, 2));
    const Dataset d = load_csv(path.string(), basic_schema());

    auto [train, eval] = split(d, 0.5, 77);
    CHECK(train.size() == 50);
    CHECK(eval.size() == 50);
    CHECK(train.e1 == d.e1);
    CHECK(eval.provenance == d.provenance);

    std::set<std::size_t> ids(train.row_ids.begin(), train.row_ids.end());
    for (auto id : eval.row_ids) CHECK(ids.insert(id).second);  // disjoint
    CHECK(ids.size() == 100);                                   // exhaustive

    SUBCASE("deterministic under the seed") {
        auto [train2, eval2] = split(d, 0.5, 77);
        CHECK(train2.row_ids == train.row_ids);
        CHECK(eval2.row_ids == eval.row_ids);
        auto [train3, eval3] = split(d, 0.5, 78);
        CHECK(train3.row_ids != train.row_ids);
    }
    SUBCASE("rounded sizes") {
        auto [tr, ev] = split(d, 0.33, 1);
        CHECK(ev.size() == 33);
        CHECK(tr.size() == 67);
    }
    SUBCASE("empty part is an argument error") {
        const Dataset one = take_rows(d, {0});
        CHECK_THROWS_AS(split(one, 0.5, 1), ArgumentError);
    }
    SUBCASE("fraction must be inside (0,1)") {
        CHECK_THROWS_AS(split(d, 0.0, 1), ArgumentError);
        CHECK_THROWS_AS(split(d, 1.0, 1), ArgumentError);
    }
}

TEST_CASE("import_predictions") {
    const auto dir = testutil::temp_dir("data_import");
    const auto data_path = dir / "d.csv";
    testutil::write_file(data_path, make_table(10, 0.5, 4));
    const Dataset d = load_csv(data_path.string(), basic_schema());

    SUBCASE("zeros file gives the trivial zero-effect estimator") {
        std::ostringstream out;
        out << "row_index,tau_hat\n";
        for (int i = 0; i < 10; ++i) out << i << ",0.0\n";
        const auto path = dir / "zeros.csv";
        testutil::write_file(path, out.str());
        const PredictionTable p = import_predictions(path.string(), d);
        CHECK(p.tau.cwiseAbs().maxCoeff() == 0.0);
        CHECK(p.tau.size() == 10);
    }
    SUBCASE("short file is an alignment error") {
        std::ostringstream out;
        out << "row_index,tau_hat\n";
        for (int i = 0; i < 9; ++i) out << i << ",0.1\n";
        const auto path = dir / "short.csv";
        testutil::write_file(path, out.str());
        CHECK_THROWS_AS(import_predictions(path.string(), d), AlignmentError);
    }
    SUBCASE("NaN token is a data error") {
        std::ostringstream out;
        out << "row_index,tau_hat\n";
        for (int i = 0; i < 10; ++i) out << i << (i == 3 ? ",nan\n" : ",0.1\n");
        const auto path = dir / "nan.csv";
        testutil::write_file(path, out.str());
        CHECK_THROWS_AS(import_predictions(path.string(), d), DataError);
    }
    SUBCASE("select maps by originating row id") {
        std::ostringstream out;
        out << "row_index,tau_hat\n";
        for (int i = 0; i < 10; ++i) out << i << "," << i * 1.5 << "\n";
        const auto path = dir / "ladder.csv";
        testutil::write_file(path, out.str());
        const PredictionTable p = import_predictions(path.string(), d);
        const Eigen::VectorXd sub = p.select({7, 2});
        CHECK(sub[0] == 7 * 1.5);
        CHECK(sub[1] == 2 * 1.5);
    }
}

TEST_CASE("dataset csv round trip is exact") {
    const auto dir = testutil::temp_dir("data_roundtrip");
    const auto path = dir / "d.csv";
    testutil::write_file(path, make_table(200, 0.4, 5));
    const Dataset d = load_csv(path.string(), basic_schema());

    const auto staged = dir / "staged.csv";
    write_dataset_csv(staged.string(), d);
    const Dataset back = read_dataset_csv(staged.string(), d.e1, d.provenance);
    CHECK(back.size() == d.size());
    CHECK((back.x - d.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.y - d.y).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.t == d.t);

    // Re-writing the read-back dataset is byte-identical.
    const auto staged2 = dir / "staged2.csv";
    write_dataset_csv(staged2.string(), back);
    CHECK(testutil::read_file(staged) == testutil::read_file(staged2));
}

TEST_CASE("dataset validation") {
    Dataset d;
    d.x = Eigen::MatrixXd::Zero(2, 1);
    d.x(1, 0) = 0.25;
    d.y = Eigen::VectorXd::Zero(2);
    d.y[1] = 3.5;
    d.t = {0, 1};
    d.e1 = 0.5;
    CHECK_NOTHROW(validate(d));
    const Sample s = d.sample(1);
    CHECK(s.t == 1);
    CHECK(s.y == 3.5);
    CHECK(s.x[0] == 0.25);
    SUBCASE("e1 outside (0,1)") {
        d.e1 = 1.0;
        CHECK_THROWS_AS(validate(d), DataError);
    }
    SUBCASE("non-binary treatment") {
        d.t = {0, 2};
        CHECK_THROWS_AS(validate(d), DataError);
    }
    SUBCASE("non-finite outcome") {
        d.y[0] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(validate(d), DataError);
    }
    SUBCASE("empty dataset") {
        Dataset e;
        CHECK_THROWS_AS(validate(e), DataError);
    }
}
