// qcate command line: synth | sample | evaluate | bench | verify.
// File-based staging between stages; every stage is reproducible from its
// config and seed.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qcate/bench.hpp"
#include "qcate/csv.hpp"
#include "qcate/data.hpp"
#include "qcate/error.hpp"
#include "qcate/learners.hpp"
#include "qcate/par.hpp"
#include "qcate/qstat.hpp"
#include "qcate/rng.hpp"
#include "qcate/sampling.hpp"
#include "qcate/synthetic.hpp"
#include "qcate/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct GridFlags {
    std::vector<std::size_t> sizes = {1000, 2000, 4000, 8000};
    std::vector<double> treat_fracs = {0.1, 0.5, 0.9};
    std::vector<int> layers = {1, 2, 3};
    int replicates = 100;
    double eval_fraction = 0.5;
};

void add_grid_options(CLI::App* cmd, GridFlags& grid) {
    cmd->add_option("--sizes", grid.sizes, "Estimation dataset sizes")->delimiter(',');
    cmd->add_option("--treat-fracs", grid.treat_fracs, "Target treatment fractions")->delimiter(',');
    cmd->add_option("--layers", grid.layers, "Assignment MLP depths (1-3)")->delimiter(',');
    cmd->add_option("--replicates", grid.replicates, "Replicates per setting");
    cmd->add_option("--eval-fraction", grid.eval_fraction, "Share of rows held out for evaluation");
}

qcate::ControlVariate make_cv(const std::string& cv_name, const std::string& theta,
                              qcate::CustomVariateFn custom_fn = {}) {
    using qcate::ControlVariate;
    using qcate::CvKind;
    using qcate::ThetaPolicy;
    const CvKind kind = qcate::cv_kind_from_string(cv_name);
    ControlVariate cv;
    switch (kind) {
        case CvKind::none: cv = ControlVariate::none(); break;
        case CvKind::location_invariance: cv = ControlVariate::location_invariance(); break;
        case CvKind::doubly_robust: cv = ControlVariate::doubly_robust(); break;
        case CvKind::r_style: cv = ControlVariate::r_style(); break;
        case CvKind::custom: cv = ControlVariate::custom(std::move(custom_fn)); break;
    }
    if (theta == "auto")
        cv.theta = ThetaPolicy::optimal();
    else if (!theta.empty() && theta != "default")
        cv.theta = ThetaPolicy::fixed(std::stod(theta));
    return cv;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw qcate::DataError("cannot write " + path);
    out << text;
    if (!out) throw qcate::DataError("write failed: " + path);
}

json meta_for(const qcate::Dataset& d) {
    json meta;
    meta["provenance"] = qcate::to_string(d.provenance);
    meta["e1"] = d.e1;
    meta["e_known_constant"] = d.e_known_constant;
    meta["n"] = d.size();
    meta["dim"] = d.dim();
    meta["seed_lineage"] = d.seed_lineage;
    return meta;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string transform = "interaction";
    double tau = 0.0;
    std::size_t n = 10000;
    std::size_t dim = 8;
    double noise_sd = 1.0;
    std::uint64_t seed = 0;
    std::string assignment = "logistic";
    double e1 = 0.5;
    std::string input, schema;
    std::size_t cap = qcate::Preprocessor::kDefaultCap;
    std::string out_dir = ".";
};

void run_synth(const SynthArgs& a) {
    qcate::SyntheticConfig cfg;
    cfg.transform = qcate::transform_from_string(a.transform);
    cfg.tau_shift = a.tau;
    cfg.noise_sd = a.noise_sd;
    cfg.seed = a.seed;

    Eigen::MatrixXd x;
    if (!a.input.empty()) {
        if (a.schema.empty()) throw qcate::ConfigError("--input needs --schema");
        const auto schema = qcate::SchemaConfig::from_json_file(a.schema);
        const auto table = qcate::csv::read_file(a.input);
        x = qcate::preprocess(table, schema, a.cap, qcate::rng::derive(a.seed, "synth.prep"));
    } else {
        x = qcate::gen_covariates(a.n, a.dim, qcate::rng::derive(a.seed, "synth.x"));
    }

    const qcate::Outcomes outcomes = qcate::gen_outcomes(x, cfg);
    qcate::Dataset d;
    qcate::OracleTruth truth = outcomes.truth;
    if (a.assignment == "logistic") {
        const auto treatment =
            qcate::gen_treatment(x, qcate::rng::derive(a.seed, "synth.t"), cfg);
        d = qcate::make_synthetic_dataset(x, outcomes, treatment);
        truth.true_propensity = treatment.propensity;
    } else if (a.assignment == "rct") {
        d = qcate::make_synthetic_rct(x, outcomes, a.e1, qcate::rng::derive(a.seed, "synth.t"));
        truth.true_propensity = d.true_propensity;
    } else {
        throw qcate::ConfigError("unknown assignment '" + a.assignment +
                                 "' (expected logistic|rct)");
    }

    fs::create_directories(a.out_dir);
    qcate::write_dataset_csv((fs::path(a.out_dir) / "synthetic.csv").string(), d);
    qcate::write_oracle_csv((fs::path(a.out_dir) / "synthetic_oracle.csv").string(), truth);
    json meta = meta_for(d);
    meta["transform"] = a.transform;
    meta["tau"] = a.tau;
    meta["noise_sd"] = a.noise_sd;
    meta["assignment"] = a.assignment;
    write_text((fs::path(a.out_dir) / "synthetic_meta.json").string(), meta.dump(2) + "\n");
    std::cout << "wrote " << d.size() << " rows to " << a.out_dir << "/synthetic.csv\n";
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string input, schema;
    GridFlags grid;
    std::uint64_t seed = 0;
    std::size_t cap = qcate::Preprocessor::kDefaultCap;
    std::string out_dir = "cells";
    bool dry_run = false;
    int jobs = 0;
};

void run_sample(const SampleArgs& a) {
    const auto cells = qcate::build_grid(a.grid.sizes, a.grid.treat_fracs, a.grid.layers,
                                         a.grid.replicates, a.seed);
    const std::size_t settings =
        a.grid.sizes.size() * a.grid.treat_fracs.size() * a.grid.layers.size();
    if (a.dry_run) {
        std::cout << cells.size() << " cells (" << settings << " settings x "
                  << a.grid.replicates << " replicates)\n";
        return;
    }
    const auto schema = qcate::SchemaConfig::from_json_file(a.schema);
    const qcate::Dataset base =
        qcate::load_csv(a.input, schema, a.cap, qcate::rng::derive(a.seed, "load"));
    fs::create_directories(a.out_dir);

    std::vector<std::string> errors(cells.size());
    const int threads = a.jobs > 0 ? a.jobs : qcate::par::max_jobs();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(cells.size()); ++c) {
        const auto& cell = cells[static_cast<std::size_t>(c)];
        const std::string tag = "cell_" + std::to_string(cell.cell_index) + "_r" +
                                std::to_string(cell.replicate);
        try {
            auto [train, eval] =
                qcate::split(base, a.grid.eval_fraction, qcate::rng::derive(cell.seed, "cell.split"));
            qcate::BiasingConfig bc;
            bc.layers = cell.layers;
            bc.target_est_size = cell.size;
            bc.target_treat_frac = cell.treat_frac;
            bc.seed = qcate::rng::derive(cell.seed, "cell.bias");
            const auto g = qcate::make_biasing_fn(bc, train);
            const qcate::Dataset est =
                qcate::observational_sample(train, g, qcate::rng::derive(cell.seed, "cell.sample"));

            const fs::path dir(a.out_dir);
            qcate::write_dataset_csv((dir / (tag + "_est.csv")).string(), est);
            qcate::write_dataset_csv((dir / (tag + "_eval.csv")).string(), eval);
            json meta = meta_for(est);
            meta["setting"] = {{"size", cell.size},
                               {"treat_frac", cell.treat_frac},
                               {"layers", cell.layers},
                               {"replicate", cell.replicate}};
            json prop = json::array();
            for (Eigen::Index i = 0; i < est.true_propensity.size(); ++i)
                prop.push_back(est.true_propensity[i]);
            meta["induced_propensity"] = std::move(prop);
            write_text((dir / (tag + "_meta.json")).string(), meta.dump(2) + "\n");
        } catch (const qcate::Error& e) {
            errors[static_cast<std::size_t>(c)] = tag + ": " + e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw qcate::CalibrationError(e);
    std::cout << "wrote " << cells.size() << " cells to " << a.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string data, schema, predictions;
    std::string cv = "none";
    std::string theta = "default";
    double e1 = -1.0;  // <= 0: take from schema / empirical
    std::uint64_t seed = 0;
    std::size_t cap = qcate::Preprocessor::kDefaultCap;
    double nuisance_frac = 0.2;
    std::string out = "qresult.json";
};

void run_evaluate(const EvaluateArgs& a) {
    std::string cv_name = a.cv;
    std::string custom_path;
    if (cv_name.rfind("custom:", 0) == 0) {
        custom_path = cv_name.substr(7);
        cv_name = "custom";
        if (custom_path.empty()) throw qcate::ConfigError("--cv custom:<path> needs a path");
    }

    auto schema = qcate::SchemaConfig::from_json_file(a.schema);
    if (a.e1 > 0.0) {
        if (!(a.e1 < 1.0)) throw qcate::ConfigError("--e1 must lie strictly inside (0,1)");
        // Flows through the declared-e1 path so the balance check still runs.
        schema.e1 = a.e1;
    }
    qcate::Dataset d = qcate::load_csv(a.data, schema, a.cap, qcate::rng::derive(a.seed, "load"));
    const qcate::PredictionTable preds = qcate::import_predictions(a.predictions, d);

    // Custom variates come as per-row values and must pass the zero-mean gate.
    std::optional<qcate::PredictionTable> custom_values;
    if (!custom_path.empty()) {
        custom_values = qcate::import_predictions(custom_path, d);
        const qcate::GateResult gate = qcate::zero_mean_gate(custom_values->tau);
        if (!gate.pass)
            throw qcate::ConfigError("custom control variate failed the zero-mean gate: mean=" +
                                     std::to_string(gate.mean) + " se=" +
                                     std::to_string(gate.se));
    }

    const qcate::CvKind kind = qcate::cv_kind_from_string(cv_name);
    const bool needs_nuis =
        kind == qcate::CvKind::doubly_robust || kind == qcate::CvKind::r_style;

    qcate::Dataset score = d;
    qcate::NuisanceValues nv;
    bool have_nv = false;
    if (needs_nuis) {
        auto [nuis_slice, score_part] =
            qcate::split(d, 1.0 - a.nuisance_frac, qcate::rng::derive(a.seed, "evalsplit"));
        const auto ns = qcate::fit_nuisances(nuis_slice, 2, qcate::rng::derive(a.seed, "nuis"));
        score = std::move(score_part);
        nv = ns.predict(score.x);
        if (score.e_known_constant)
            nv.e = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(score.size()), score.e1);
        have_nv = true;
    }

    qcate::CustomVariateFn custom_fn;
    if (custom_values) {
        const Eigen::VectorXd values = custom_values->select(score.row_ids);
        custom_fn = [values](std::size_t i, int, double, double) {
            return values[static_cast<Eigen::Index>(i)];
        };
    }
    const qcate::ControlVariate cv = make_cv(cv_name, a.theta, std::move(custom_fn));
    const Eigen::VectorXd tau = preds.select(score.row_ids);
    const qcate::PropensitySource prop = qcate::PropensitySource::known_constant(score.e1);
    qcate::QResult q = qcate::qhat(tau, score, prop, cv, have_nv ? &nv : nullptr);
    q = qcate::screen(q);

    const std::string text = q.to_json();
    write_text(a.out, text);
    std::cout << text;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string input, schema;
    GridFlags grid;
    std::string roster = "s,s_ext,t,r,dr,const,zero";
    std::string cv = "dr";
    std::string theta = "default";
    std::string oracle;  // optional oracle sidecar for agreement metrics
    std::string dataset_id;
    std::uint64_t seed = 0;
    std::size_t cap = qcate::Preprocessor::kDefaultCap;
    int jobs = 0;
    std::string out_dir = "bench_out";
};

void run_bench(const BenchArgs& a) {
    const auto schema = qcate::SchemaConfig::from_json_file(a.schema);
    const qcate::Dataset base =
        qcate::load_csv(a.input, schema, a.cap, qcate::rng::derive(a.seed, "load"));

    qcate::GridConfig grid;
    grid.sizes = a.grid.sizes;
    grid.treat_fracs = a.grid.treat_fracs;
    grid.layers = a.grid.layers;
    grid.replicates = a.grid.replicates;
    grid.eval_fraction = a.grid.eval_fraction;
    grid.master_seed = a.seed;

    qcate::QConfig qcfg;
    qcfg.cv = make_cv(a.cv, a.theta);

    const auto roster = qcate::parse_roster(a.roster);
    std::optional<Eigen::VectorXd> oracle_tau;
    if (!a.oracle.empty()) oracle_tau = qcate::read_oracle_csv(a.oracle).tau;

    const std::string id =
        a.dataset_id.empty() ? fs::path(a.input).stem().string() : a.dataset_id;
    const auto report = qcate::run_benchmark(base, grid, roster, qcfg, a.jobs,
                                             oracle_tau ? &*oracle_tau : nullptr, id);
    fs::create_directories(a.out_dir);
    qcate::emit_report(report, qcate::ReportFormat::json,
                       (fs::path(a.out_dir) / "report.json").string());
    qcate::emit_report(report, qcate::ReportFormat::csv,
                       (fs::path(a.out_dir) / "report.csv").string());
    std::cout << "wrote " << report.cells.size() << " cell results to " << a.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyArgs {
    std::string transform = "interaction";
    double tau = 0.5;
    std::size_t n_est = 2000;
    std::size_t dim = 8;
    std::vector<std::size_t> sizes = {1000, 2000, 4000, 8000, 16000, 32000, 64000};
    int replicates = 50;
    std::string roster = "s,s_ext,t,r,dr,const,zero";
    std::string cv = "dr";
    std::string theta = "default";
    std::uint64_t seed = 0;
    int jobs = 0;
    std::string out_dir = "verify_out";
};

void run_verify_cmd(const VerifyArgs& a) {
    qcate::VerifyConfig cfg;
    cfg.synthetic.transform = qcate::transform_from_string(a.transform);
    cfg.synthetic.tau_shift = a.tau;
    cfg.synthetic.seed = a.seed;
    cfg.n_est = a.n_est;
    cfg.dim = a.dim;
    cfg.eval_sizes = a.sizes;
    cfg.replicates = a.replicates;
    cfg.roster = qcate::parse_roster(a.roster);
    cfg.qcfg.cv = make_cv(a.cv, a.theta);
    cfg.jobs = a.jobs;

    const auto rows = qcate::run_verify(cfg);

    json j;
    j["schema_version"] = 1;
    j["transform"] = a.transform;
    j["tau"] = a.tau;
    j["n_est"] = a.n_est;
    j["replicates"] = a.replicates;
    j["cv"] = a.cv;
    json table = json::array();
    for (const auto& r : rows)
        table.push_back({{"eval_size", r.eval_size},
                         {"mrr", r.mrr},
                         {"precision_at_1", r.precision_at_1},
                         {"spearman", r.spearman},
                         {"replicates", r.replicates}});
    j["by_size"] = std::move(table);

    fs::create_directories(a.out_dir);
    write_text((fs::path(a.out_dir) / "verify.json").string(), j.dump(2) + "\n");

    qcate::csv::Table out;
    out.header = {"eval_size", "mrr", "precision_at_1", "spearman", "replicates"};
    for (const auto& r : rows)
        out.rows.push_back({std::to_string(r.eval_size), qcate::csv::format_double(r.mrr),
                            qcate::csv::format_double(r.precision_at_1),
                            qcate::csv::format_double(r.spearman), std::to_string(r.replicates)});
    qcate::csv::write_file((fs::path(a.out_dir) / "verify.csv").string(), out);

    std::cout << "eval_size mrr precision_at_1 spearman\n";
    for (const auto& r : rows)
        std::cout << r.eval_size << " " << r.mrr << " " << r.precision_at_1 << " " << r.spearman
                  << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"q-statistic evaluation of CATE estimators on randomized experiment data"};
    app.require_subcommand(1);
    // Key-value run config: a [subcommand] section per stage; any key is
    // overridable by the same-named flag.
    app.set_config("--config", "", "Run configuration file");
    app.allow_config_extras(CLI::config_extras_mode::error);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a known-truth synthetic dataset");
    synth_cmd->add_option("--transform", synth.transform, "linear|interaction|sine");
    synth_cmd->add_option("--tau", synth.tau, "Additive treated-arm effect");
    synth_cmd->add_option("--n", synth.n, "Rows to simulate");
    synth_cmd->add_option("--dim", synth.dim, "Simulated covariate dimension");
    synth_cmd->add_option("--noise-sd", synth.noise_sd, "Outcome noise sd");
    synth_cmd->add_option("--seed", synth.seed, "Master seed");
    synth_cmd->add_option("--assignment", synth.assignment, "logistic|rct");
    synth_cmd->add_option("--e1", synth.e1, "Treatment probability for rct assignment");
    synth_cmd->add_option("--input", synth.input, "Real covariate CSV (optional)")
        ->check(CLI::ExistingFile);
    synth_cmd->add_option("--schema", synth.schema, "Schema JSON for --input")
        ->check(CLI::ExistingFile);
    synth_cmd->add_option("--cap", synth.cap, "Feature cap");
    synth_cmd->add_option("--out-dir", synth.out_dir, "Output directory");
    synth_cmd->callback([&]() { run_synth(synth); });

    SampleArgs sample;
    auto* sample_cmd =
        app.add_subcommand("sample", "Observationally sample estimation/evaluation pairs");
    sample_cmd->add_option("--input", sample.input, "RCT CSV");
    sample_cmd->add_option("--schema", sample.schema, "Schema JSON");
    add_grid_options(sample_cmd, sample.grid);
    sample_cmd->add_option("--seed", sample.seed, "Master seed");
    sample_cmd->add_option("--cap", sample.cap, "Feature cap");
    sample_cmd->add_option("--out-dir", sample.out_dir, "Output directory");
    sample_cmd->add_option("--jobs", sample.jobs, "Worker threads (0 = all cores)");
    sample_cmd->add_flag("--dry-run", sample.dry_run, "Print the cell count and exit");
    sample_cmd->callback([&]() {
        if (!sample.dry_run) {
            if (sample.input.empty() || sample.schema.empty())
                throw qcate::ConfigError("sample needs --input and --schema");
            if (!fs::exists(sample.input))
                throw qcate::ConfigError("input file does not exist: " + sample.input);
            if (!fs::exists(sample.schema))
                throw qcate::ConfigError("schema file does not exist: " + sample.schema);
        }
        run_sample(sample);
    });

    EvaluateArgs eval;
    auto* eval_cmd = app.add_subcommand("evaluate", "Score predictions with the q statistic");
    eval_cmd->add_option("--data", eval.data, "Evaluation CSV")->check(CLI::ExistingFile);
    eval_cmd->add_option("--schema", eval.schema, "Schema JSON")->check(CLI::ExistingFile);
    eval_cmd->add_option("--predictions", eval.predictions, "Two-column CSV (row_index,tau_hat)")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--cv", eval.cv, "none|li|dr|r|custom:<path>");
    eval_cmd->add_option("--theta", eval.theta, "default|auto|<number>");
    eval_cmd->add_option("--e1", eval.e1, "Override the design treatment probability");
    eval_cmd->add_option("--seed", eval.seed, "Master seed");
    eval_cmd->add_option("--cap", eval.cap, "Feature cap");
    eval_cmd->add_option("--nuisance-frac", eval.nuisance_frac,
                         "Evaluation share reserved for nuisance fitting (dr/r)");
    eval_cmd->add_option("--out", eval.out, "Result JSON path");
    eval_cmd->callback([&]() {
        if (eval.data.empty() || eval.schema.empty() || eval.predictions.empty())
            throw qcate::ConfigError("evaluate needs --data, --schema and --predictions");
        run_evaluate(eval);
    });

    BenchArgs bench;
    auto* bench_cmd = app.add_subcommand("bench", "Run the observational-sampling benchmark");
    bench_cmd->add_option("--input", bench.input, "RCT CSV")->check(CLI::ExistingFile);
    bench_cmd->add_option("--schema", bench.schema, "Schema JSON")->check(CLI::ExistingFile);
    add_grid_options(bench_cmd, bench.grid);
    bench_cmd->add_option("--roster", bench.roster, "Comma-separated model list");
    bench_cmd->add_option("--cv", bench.cv, "none|li|dr|r");
    bench_cmd->add_option("--theta", bench.theta, "default|auto|<number>");
    bench_cmd->add_option("--oracle", bench.oracle, "Oracle sidecar CSV (agreement metrics)")
        ->check(CLI::ExistingFile);
    bench_cmd->add_option("--dataset-id", bench.dataset_id, "Dataset id in the report");
    bench_cmd->add_option("--seed", bench.seed, "Master seed");
    bench_cmd->add_option("--cap", bench.cap, "Feature cap");
    bench_cmd->add_option("--jobs", bench.jobs, "Worker threads (0 = all cores)");
    bench_cmd->add_option("--out-dir", bench.out_dir, "Output directory");
    bench_cmd->callback([&]() {
        if (bench.input.empty() || bench.schema.empty())
            throw qcate::ConfigError("bench needs --input and --schema");
        run_bench(bench);
    });

    VerifyArgs verify;
    auto* verify_cmd =
        app.add_subcommand("verify", "Ranking agreement against the oracle on synthetic data");
    verify_cmd->add_option("--transform", verify.transform, "linear|interaction|sine");
    verify_cmd->add_option("--tau", verify.tau, "Additive treated-arm effect");
    verify_cmd->add_option("--n-est", verify.n_est, "Estimation dataset size");
    verify_cmd->add_option("--dim", verify.dim, "Simulated covariate dimension");
    verify_cmd->add_option("--sizes", verify.sizes, "Evaluation sizes")->delimiter(',');
    verify_cmd->add_option("--replicates", verify.replicates, "Protocol replicates");
    verify_cmd->add_option("--roster", verify.roster, "Comma-separated model list");
    verify_cmd->add_option("--cv", verify.cv, "none|li|dr|r");
    verify_cmd->add_option("--theta", verify.theta, "default|auto|<number>");
    verify_cmd->add_option("--seed", verify.seed, "Master seed");
    verify_cmd->add_option("--jobs", verify.jobs, "Worker threads (0 = all cores)");
    verify_cmd->add_option("--out-dir", verify.out_dir, "Output directory");
    verify_cmd->callback([&]() { run_verify_cmd(verify); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const qcate::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return qcate::exit_code(e.category());
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
