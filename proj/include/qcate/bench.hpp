#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qcate/data.hpp"
#include "qcate/learners.hpp"
#include "qcate/qstat.hpp"
#include "qcate/sampling.hpp"

namespace qcate {

// Orchestration: for every grid cell, split the base RCT data, manufacture a
// biased estimation set, fit the roster, and score each model's q statistic
// on the held-out RCT evaluation rows.

struct RosterEntry {
    std::string id;
    Strategy strategy = Strategy::zero;
    std::string import_path;  // imported strategy only
};

// "s,t,dr,const,zero,import:<path>" -> entries.
std::vector<RosterEntry> parse_roster(const std::string& spec);

struct QConfig {
    ControlVariate cv = ControlVariate::doubly_robust();
    // Share of the evaluation split reserved for fitting evaluation-side
    // nuisances; those rows never enter the q sum.
    double eval_nuisance_frac = 0.2;
    int nuisance_folds = 2;
};

struct GridConfig {
    std::vector<std::size_t> sizes = {1000, 2000, 4000, 8000};
    std::vector<double> treat_fracs = {0.1, 0.5, 0.9};
    std::vector<int> layers = {1, 2, 3};
    int replicates = 100;
    double eval_fraction = 0.5;
    std::uint64_t master_seed = 0;
};

enum class CellStatus { ok, fit_failed, cell_failed };
const char* to_string(CellStatus s);

struct CellResult {
    std::string dataset_id;
    std::size_t size = 0;
    double treat_frac = 0.5;
    int layers = 1;
    int replicate = 0;
    std::string model_id;
    CellStatus status = CellStatus::ok;
    std::string error;
    QResult q;
    double pehe = std::numeric_limits<double>::quiet_NaN();  // oracle runs only
    double wall_ms = 0.0;  // profiling only; excluded from the canonical JSON
};

struct ModelAggregate {
    std::string model;
    long wins = 0;
    double win_share = 0.0;
    long degenerate_count = 0;
    double degenerate_rate = 0.0;
    long failed_count = 0;
    double avg_rank = 0.0;
};

struct AgreementSummary {
    double mrr = 0.0;
    double precision_at_1 = 0.0;
    double spearman = 0.0;
    long cells = 0;
};

struct BenchmarkReport {
    int schema_version = 1;
    std::string dataset_id;
    GridConfig grid;
    std::vector<std::string> roster_ids;
    std::string cv;
    std::string theta_policy;
    std::vector<CellResult> cells;
    std::vector<ModelAggregate> aggregates;
    std::optional<AgreementSummary> agreement;
};

// Per-model aggregates: rank 1 goes to the most negative q_hat; a model wins
// at rank 1; win share is over cells with at least one non-degenerate model;
// degenerate rate is per model over all completed cells. Ties on q_hat break
// by model-id lexical order.
std::vector<ModelAggregate> summarize(const std::vector<CellResult>& cells);

// Runs the full grid. Per-cell failures are recorded and the run continues.
// oracle_tau, when given, is aligned to the base dataset rows and enables
// per-cell oracle agreement metrics.
BenchmarkReport run_benchmark(const Dataset& rct, const GridConfig& grid,
                              const std::vector<RosterEntry>& roster, const QConfig& qcfg,
                              int jobs = 0, const Eigen::VectorXd* oracle_tau = nullptr,
                              const std::string& dataset_id = "dataset");

enum class ReportFormat { json, csv };

// JSON is canonical: stable field order, floats at 6 significant digits,
// byte-identical for identical inputs and master seed. CSV is one row per
// (cell, model) and additionally carries wall-clock timings.
void emit_report(const BenchmarkReport& report, ReportFormat format, const std::string& path);
std::string report_to_json(const BenchmarkReport& report);
BenchmarkReport report_from_json(const std::string& text);

}  // namespace qcate
