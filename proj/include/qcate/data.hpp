#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qcate/csv.hpp"

namespace qcate {

enum class Provenance { rct, observational_sampled, synthetic };

const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct Sample {
    Eigen::VectorXd x;
    int t = 0;
    double y = 0.0;
};

// Immutable after construction; safe to share across parallel workers.
struct Dataset {
    Eigen::MatrixXd x;  // N x D, preprocessed features, each column in [0, 1]
    std::vector<int> t;
    Eigen::VectorXd y;
    double e1 = 0.5;  // design treatment probability (RCT); E0 = 1 - e1
    Provenance provenance = Provenance::rct;
    // True when the design propensity is the known constant e1 (RCT data).
    // Observational samples and logistic-assignment synthetic data set this
    // false, which switches nuisance fitting into the estimated regime.
    bool e_known_constant = true;
    std::vector<std::uint64_t> seed_lineage;
    std::vector<std::size_t> row_ids;  // lineage to the originating table
    Eigen::VectorXd true_propensity;   // per-row ground truth when known; size 0 otherwise

    std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(x.cols()); }
    double e0() const { return 1.0 - e1; }
    Sample sample(std::size_t i) const;

    // Cheap structural hash used to detect misaligned result/baseline pairs.
    std::uint64_t fingerprint() const;
};

// Throws DataError / ArgumentError when an invariant is broken.
void validate(const Dataset& d);

struct ColumnSpec {
    enum class Kind { numeric, categorical };
    std::string name;
    Kind kind = Kind::numeric;
};

struct SchemaConfig {
    std::vector<ColumnSpec> covariates;
    std::string treatment_column;
    std::string outcome_column;
    std::optional<double> e1;  // declared design propensity; wins over the empirical mean

    static SchemaConfig from_json_file(const std::string& path);
    static SchemaConfig from_json_text(const std::string& text);
    void check() const;  // treatment/outcome disjoint from covariates, names nonempty
};

// Feature pipeline (one-hot + min-max into [0,1] + column cap). Fit captures
// scalers and category levels; transform applies them to new rows, clipping
// numerics into [0,1] and mapping unseen categories to all-zero indicators.
class Preprocessor {
public:
    static constexpr std::size_t kDefaultCap = 100;

    static Preprocessor fit(const csv::Table& raw, const SchemaConfig& schema,
                            std::size_t cap = kDefaultCap, std::uint64_t seed = 0);
    // Numeric-only variant (all columns treated as numeric covariates).
    static Preprocessor fit(const Eigen::MatrixXd& raw, std::size_t cap = kDefaultCap,
                            std::uint64_t seed = 0);

    Eigen::MatrixXd transform(const csv::Table& raw) const;
    Eigen::MatrixXd transform(const Eigen::MatrixXd& raw) const;

    std::size_t out_dim() const { return selected_.size(); }
    const std::vector<std::size_t>& selected_columns() const { return selected_; }

private:
    struct NumericScaler {
        double min = 0.0, max = 0.0;
    };
    struct Column {
        ColumnSpec::Kind kind = ColumnSpec::Kind::numeric;
        std::size_t raw_index = 0;  // index into schema covariates / matrix columns
        NumericScaler scaler;
        std::vector<std::string> levels;  // sorted, categorical only
    };
    Eigen::MatrixXd stack(const std::vector<Column>& cols,
                          const csv::Table* raw_table, const Eigen::MatrixXd* raw_matrix) const;

    std::vector<Column> columns_;
    std::vector<std::string> raw_names_;     // covariate names in schema order
    std::size_t stacked_dim_ = 0;            // before the cap
    std::vector<std::size_t> selected_;      // stacked-column subset, ascending
};

// preprocess in one shot: fit on the rows and return the feature matrix.
Eigen::MatrixXd preprocess(const csv::Table& raw, const SchemaConfig& schema,
                           std::size_t cap = Preprocessor::kDefaultCap, std::uint64_t seed = 0);
Eigen::MatrixXd preprocess(const Eigen::MatrixXd& raw,
                           std::size_t cap = Preprocessor::kDefaultCap, std::uint64_t seed = 0);

Dataset load_csv(const std::string& path, const SchemaConfig& schema,
                 std::size_t cap = Preprocessor::kDefaultCap, std::uint64_t seed = 0);

// Disjoint, exhaustive partition; the second part holds round(fraction * N)
// rows. Both parts inherit e1 and provenance.
std::pair<Dataset, Dataset> split(const Dataset& d, double eval_fraction, std::uint64_t seed);

// Row subset in the given order; inherits e1, provenance and lineage.
Dataset take_rows(const Dataset& d, const std::vector<std::size_t>& indices);

struct PredictionTable {
    std::string model_id;
    Eigen::VectorXd tau;  // aligned to dataset row order
    std::vector<std::size_t> row_ids;
    std::uint64_t dataset_fingerprint = 0;

    // Predictions for a subset of the originating rows.
    Eigen::VectorXd select(const std::vector<std::size_t>& rows) const;
};

PredictionTable import_predictions(const std::string& path, const Dataset& d);

// Writers used by the CLI stages (synth/sample emit module-format CSV files).
void write_dataset_csv(const std::string& path, const Dataset& d);
Dataset read_dataset_csv(const std::string& path, double e1, Provenance provenance,
                         bool e_known_constant = true);

}  // namespace qcate
