#include "qcate/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "qcate/error.hpp"
#include "qcate/par.hpp"
#include "qcate/rng.hpp"

namespace qcate {

using json = nlohmann::json;

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::rct: return "rct";
        case Provenance::observational_sampled: return "observational-sampled";
        case Provenance::synthetic: return "synthetic";
    }
    return "?";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "rct") return Provenance::rct;
    if (s == "observational-sampled") return Provenance::observational_sampled;
    if (s == "synthetic") return Provenance::synthetic;
    throw ArgumentError("unknown provenance: " + s);
}

Sample Dataset::sample(std::size_t i) const {
    return Sample{x.row(static_cast<Eigen::Index>(i)).transpose(), t[i],
                  y[static_cast<Eigen::Index>(i)]};
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

template <class T>
std::uint64_t fnv1a_value(std::uint64_t h, const T& v) {
    return fnv1a(h, &v, sizeof(v));
}

double parse_double(const std::string& s, const char* what) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = b + s.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e)
        throw DataError(std::string("cannot parse ") + what + " value '" + s + "'");
    return v;
}

int parse_treatment(const std::string& s) {
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw DataError("treatment value must be 0 or 1, got '" + s + "'");
}

}  // namespace

std::uint64_t Dataset::fingerprint() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    const std::uint64_t n = size(), d = dim();
    h = fnv1a_value(h, n);
    h = fnv1a_value(h, d);
    h = fnv1a_value(h, e1);
    h = fnv1a_value(h, provenance);
    for (auto id : row_ids) h = fnv1a_value(h, id);
    // Strided content probe; enough to catch misaligned data.
    const std::size_t probes = std::min<std::size_t>(n, 64);
    for (std::size_t k = 0; k < probes; ++k) {
        const std::size_t i = k * (n / probes);
        h = fnv1a_value(h, y[static_cast<Eigen::Index>(i)]);
        h = fnv1a_value(h, t[i]);
        if (d > 0) h = fnv1a_value(h, x(static_cast<Eigen::Index>(i), 0));
        if (d > 1)
            h = fnv1a_value(h, x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d - 1)));
    }
    return h;
}

void validate(const Dataset& d) {
    const std::size_t n = d.size();
    if (n == 0) throw DataError("dataset is empty");
    if (d.t.size() != n || static_cast<std::size_t>(d.y.size()) != n)
        throw ArgumentError("dataset t/y/x sizes disagree");
    if (!d.row_ids.empty() && d.row_ids.size() != n)
        throw ArgumentError("row_ids size disagrees with dataset size");
    if (!(d.e1 > 0.0 && d.e1 < 1.0))
        throw DataError("treatment probability e1 must lie strictly inside (0,1), got " +
                        std::to_string(d.e1));
    for (int v : d.t)
        if (v != 0 && v != 1) throw DataError("treatment values must be binary");
    if (!d.y.allFinite() || !d.x.allFinite()) throw DataError("non-finite value in dataset");
    if (d.true_propensity.size() != 0 &&
        static_cast<std::size_t>(d.true_propensity.size()) != n)
        throw ArgumentError("true_propensity size disagrees with dataset size");
}

namespace {

// Empirical treatment fraction must sit within 5 standard errors of the
// declared design propensity; applied on ingestion only.
void check_rct_balance(const Dataset& d) {
    if (d.provenance != Provenance::rct) return;
    const double n = static_cast<double>(d.size());
    const double frac = std::accumulate(d.t.begin(), d.t.end(), 0.0) / n;
    const double se = std::sqrt(d.e1 * (1.0 - d.e1) / n);
    if (std::abs(frac - d.e1) > 5.0 * se)
        throw DataError("empirical treatment fraction " + std::to_string(frac) +
                        " is more than 5 SEs away from declared e1=" + std::to_string(d.e1));
}

}  // namespace

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

void SchemaConfig::check() const {
    if (covariates.empty()) throw SchemaError("schema needs at least one covariate column");
    if (treatment_column.empty() || outcome_column.empty())
        throw SchemaError("schema needs treatment and outcome column names");
    if (treatment_column == outcome_column)
        throw SchemaError("treatment and outcome columns must differ");
    for (const auto& c : covariates)
        if (c.name == treatment_column || c.name == outcome_column)
            throw SchemaError("covariate '" + c.name + "' collides with treatment/outcome");
    if (e1 && !(*e1 > 0.0 && *e1 < 1.0))
        throw SchemaError("declared e1 must lie strictly inside (0,1)");
}

SchemaConfig SchemaConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("schema is not valid JSON: ") + e.what());
    }
    SchemaConfig cfg;
    for (auto& [key, value] : j.items()) {
        if (key == "covariates") {
            for (const auto& item : value) {
                ColumnSpec spec;
                spec.name = item.at("name").get<std::string>();
                const std::string kind = item.at("kind").get<std::string>();
                if (kind == "numeric")
                    spec.kind = ColumnSpec::Kind::numeric;
                else if (kind == "categorical")
                    spec.kind = ColumnSpec::Kind::categorical;
                else
                    throw SchemaError("column kind must be numeric|categorical, got '" + kind +
                                      "'");
                cfg.covariates.push_back(std::move(spec));
            }
        } else if (key == "treatment") {
            cfg.treatment_column = value.get<std::string>();
        } else if (key == "outcome") {
            cfg.outcome_column = value.get<std::string>();
        } else if (key == "e1") {
            cfg.e1 = value.get<double>();
        } else {
            throw SchemaError("unknown schema key '" + key + "'");
        }
    }
    cfg.check();
    return cfg;
}

SchemaConfig SchemaConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open schema file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

// ---------------------------------------------------------------------------
// Preprocessor
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> select_subset(std::size_t total, std::size_t cap, std::uint64_t seed) {
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (total <= cap) return idx;
    rng::Stream stream(rng::derive(seed, "preprocess.column_subset"));
    // Partial Fisher-Yates, then restore the original stacking order.
    for (std::size_t i = 0; i < cap; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(stream.below(total - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

Preprocessor Preprocessor::fit(const csv::Table& raw, const SchemaConfig& schema,
                               std::size_t cap, std::uint64_t seed) {
    schema.check();
    if (cap == 0) throw ArgumentError("feature cap must be positive");
    Preprocessor p;
    for (std::size_t c = 0; c < schema.covariates.size(); ++c) {
        const auto& spec = schema.covariates[c];
        const long col = raw.find(spec.name);
        if (col < 0) throw SchemaError("covariate column '" + spec.name + "' not found");
        Column column;
        column.kind = spec.kind;
        column.raw_index = static_cast<std::size_t>(col);
        if (spec.kind == ColumnSpec::Kind::numeric) {
            double lo = std::numeric_limits<double>::infinity();
            double hi = -lo;
            for (const auto& row : raw.rows) {
                const double v = parse_double(row[column.raw_index], spec.name.c_str());
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            column.scaler = {lo, hi};
        } else {
            std::vector<std::string> levels;
            for (const auto& row : raw.rows) levels.push_back(row[column.raw_index]);
            std::sort(levels.begin(), levels.end());
            levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
            column.levels = std::move(levels);
        }
        p.columns_.push_back(std::move(column));
        p.raw_names_.push_back(spec.name);
    }
    p.stacked_dim_ = 0;
    for (const auto& c : p.columns_)
        p.stacked_dim_ += c.kind == ColumnSpec::Kind::numeric ? 1 : c.levels.size();
    if (p.stacked_dim_ == 0) throw SchemaError("no usable covariate columns");
    p.selected_ = select_subset(p.stacked_dim_, cap, seed);
    return p;
}

Preprocessor Preprocessor::fit(const Eigen::MatrixXd& raw, std::size_t cap, std::uint64_t seed) {
    if (raw.cols() == 0) throw ArgumentError("need at least one covariate column");
    if (cap == 0) throw ArgumentError("feature cap must be positive");
    Preprocessor p;
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
        Column column;
        column.kind = ColumnSpec::Kind::numeric;
        column.raw_index = static_cast<std::size_t>(c);
        column.scaler = {raw.col(c).minCoeff(), raw.col(c).maxCoeff()};
        p.columns_.push_back(column);
        p.raw_names_.push_back("c" + std::to_string(c));
    }
    p.stacked_dim_ = p.columns_.size();
    p.selected_ = select_subset(p.stacked_dim_, cap, seed);
    return p;
}

Eigen::MatrixXd Preprocessor::stack(const std::vector<Column>& cols, const csv::Table* raw_table,
                                    const Eigen::MatrixXd* raw_matrix) const {
    const std::size_t n =
        raw_table ? raw_table->n_rows() : static_cast<std::size_t>(raw_matrix->rows());
    // Tables are addressed by column name so the transform survives
    // reordered files; matrices stay positional.
    std::vector<Column> resolved = cols;
    if (raw_table) {
        for (std::size_t c = 0; c < resolved.size(); ++c) {
            const long idx = raw_table->find(raw_names_[c]);
            if (idx < 0)
                throw SchemaError("covariate column '" + raw_names_[c] + "' not found");
            resolved[c].raw_index = static_cast<std::size_t>(idx);
        }
    }
    Eigen::MatrixXd out(n, static_cast<Eigen::Index>(selected_.size()));
    std::vector<double> stacked(stacked_dim_);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pos = 0;
        for (const auto& col : resolved) {
            if (col.kind == ColumnSpec::Kind::numeric) {
                double v;
                if (raw_table)
                    v = parse_double(raw_table->rows[i][col.raw_index], "numeric covariate");
                else
                    v = (*raw_matrix)(static_cast<Eigen::Index>(i),
                                      static_cast<Eigen::Index>(col.raw_index));
                const double span = col.scaler.max - col.scaler.min;
                // Constant columns scale to zero; out-of-range rows clip.
                double scaled = span > 0.0 ? (v - col.scaler.min) / span : 0.0;
                stacked[pos++] = std::clamp(scaled, 0.0, 1.0);
            } else {
                const std::string& v = raw_table->rows[i][col.raw_index];
                const auto it = std::lower_bound(col.levels.begin(), col.levels.end(), v);
                const bool seen = it != col.levels.end() && *it == v;
                for (std::size_t l = 0; l < col.levels.size(); ++l)
                    stacked[pos + l] = 0.0;
                if (seen) stacked[pos + static_cast<std::size_t>(it - col.levels.begin())] = 1.0;
                pos += col.levels.size();
            }
        }
        for (std::size_t j = 0; j < selected_.size(); ++j)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                stacked[selected_[j]];
    }
    return out;
}

Eigen::MatrixXd Preprocessor::transform(const csv::Table& raw) const {
    return stack(columns_, &raw, nullptr);
}

Eigen::MatrixXd Preprocessor::transform(const Eigen::MatrixXd& raw) const {
    if (static_cast<std::size_t>(raw.cols()) != columns_.size())
        throw ArgumentError("matrix column count disagrees with the fitted preprocessor");
    return stack(columns_, nullptr, &raw);
}

Eigen::MatrixXd preprocess(const csv::Table& raw, const SchemaConfig& schema, std::size_t cap,
                           std::uint64_t seed) {
    return Preprocessor::fit(raw, schema, cap, seed).transform(raw);
}

Eigen::MatrixXd preprocess(const Eigen::MatrixXd& raw, std::size_t cap, std::uint64_t seed) {
    return Preprocessor::fit(raw, cap, seed).transform(raw);
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

Dataset load_csv(const std::string& path, const SchemaConfig& schema, std::size_t cap,
                 std::uint64_t seed) {
    const csv::Table table = csv::read_file(path);
    schema.check();
    if (table.rows.empty()) throw DataError(path + ": no data rows");
    const long t_col = table.find(schema.treatment_column);
    if (t_col < 0) throw SchemaError("treatment column '" + schema.treatment_column + "' not found");
    const long y_col = table.find(schema.outcome_column);
    if (y_col < 0) throw SchemaError("outcome column '" + schema.outcome_column + "' not found");

    Dataset d;
    const std::size_t n = table.n_rows();
    d.t.resize(n);
    d.y.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        d.t[i] = parse_treatment(table.rows[i][static_cast<std::size_t>(t_col)]);
        const double y = parse_double(table.rows[i][static_cast<std::size_t>(y_col)], "outcome");
        if (!std::isfinite(y)) throw DataError("non-finite outcome at row " + std::to_string(i));
        d.y[static_cast<Eigen::Index>(i)] = y;
    }
    d.x = preprocess(table, schema, cap, seed);
    const double empirical = std::accumulate(d.t.begin(), d.t.end(), 0.0) / static_cast<double>(n);
    d.e1 = schema.e1.value_or(empirical);
    d.provenance = Provenance::rct;
    d.e_known_constant = true;
    d.seed_lineage = {seed};
    d.row_ids.resize(n);
    std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
    validate(d);
    check_rct_balance(d);
    return d;
}

std::pair<Dataset, Dataset> split(const Dataset& d, double eval_fraction, std::uint64_t seed) {
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
        throw ArgumentError("eval fraction must lie strictly inside (0,1)");
    const std::size_t n = d.size();
    if (n == 0) throw ArgumentError("cannot split an empty dataset");
    const auto n_eval =
        static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(n)));
    if (n_eval == 0 || n_eval == n)
        throw ArgumentError("eval fraction " + std::to_string(eval_fraction) +
                            " yields an empty part at N=" + std::to_string(n));

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng::Stream stream(rng::derive(seed, "split.perm"));
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(stream.below(i + 1));
        std::swap(perm[i], perm[j]);
    }
    std::vector<std::size_t> eval_idx(perm.begin(), perm.begin() + static_cast<long>(n_eval));
    std::vector<std::size_t> train_idx(perm.begin() + static_cast<long>(n_eval), perm.end());
    std::sort(eval_idx.begin(), eval_idx.end());
    std::sort(train_idx.begin(), train_idx.end());

    auto take = [&](const std::vector<std::size_t>& idx) {
        Dataset part = take_rows(d, idx);
        part.seed_lineage.push_back(seed);
        return part;
    };
    return {take(train_idx), take(eval_idx)};
}

Dataset take_rows(const Dataset& d, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ArgumentError("take_rows with an empty index list");
    Dataset part;
    part.x.resize(static_cast<Eigen::Index>(idx.size()), d.x.cols());
    part.y.resize(static_cast<Eigen::Index>(idx.size()));
    part.t.resize(idx.size());
    part.row_ids.resize(idx.size());
    const bool has_prop = d.true_propensity.size() != 0;
    if (has_prop) part.true_propensity.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= d.size()) throw ArgumentError("take_rows index out of range");
        const auto i = static_cast<Eigen::Index>(idx[k]);
        part.x.row(static_cast<Eigen::Index>(k)) = d.x.row(i);
        part.y[static_cast<Eigen::Index>(k)] = d.y[i];
        part.t[k] = d.t[idx[k]];
        part.row_ids[k] = d.row_ids.empty() ? idx[k] : d.row_ids[idx[k]];
        if (has_prop) part.true_propensity[static_cast<Eigen::Index>(k)] = d.true_propensity[i];
    }
    part.e1 = d.e1;
    part.provenance = d.provenance;
    part.e_known_constant = d.e_known_constant;
    part.seed_lineage = d.seed_lineage;
    validate(part);
    return part;
}

// ---------------------------------------------------------------------------
// Prediction import
// ---------------------------------------------------------------------------

Eigen::VectorXd PredictionTable::select(const std::vector<std::size_t>& rows) const {
    std::unordered_map<std::size_t, double> by_row;
    by_row.reserve(row_ids.size());
    for (std::size_t i = 0; i < row_ids.size(); ++i)
        by_row.emplace(row_ids[i], tau[static_cast<Eigen::Index>(i)]);
    Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto it = by_row.find(rows[i]);
        if (it == by_row.end())
            throw AlignmentError("no prediction for row id " + std::to_string(rows[i]));
        out[static_cast<Eigen::Index>(i)] = it->second;
    }
    return out;
}

PredictionTable import_predictions(const std::string& path, const Dataset& d) {
    const csv::Table table = csv::read_file(path);
    if (table.header.size() != 2 || table.header[0] != "row_index" ||
        table.header[1] != "tau_hat")
        throw SchemaError(path + ": expected header 'row_index,tau_hat'");
    if (table.n_rows() != d.size())
        throw AlignmentError(path + ": " + std::to_string(table.n_rows()) + " predictions for " +
                             std::to_string(d.size()) + " samples");
    std::unordered_map<std::size_t, double> by_row;
    by_row.reserve(table.n_rows());
    for (const auto& row : table.rows) {
        const double idx = parse_double(row[0], "row_index");
        const double tau = parse_double(row[1], "tau_hat");
        if (!std::isfinite(tau)) throw DataError(path + ": non-finite tau_hat value");
        if (idx < 0 || idx != std::floor(idx))
            throw DataError(path + ": row_index must be a non-negative integer");
        if (!by_row.emplace(static_cast<std::size_t>(idx), tau).second)
            throw AlignmentError(path + ": duplicate row_index " + row[0]);
    }
    PredictionTable out;
    out.model_id = path;
    out.row_ids = d.row_ids;
    out.tau.resize(static_cast<Eigen::Index>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto it = by_row.find(d.row_ids[i]);
        if (it == by_row.end())
            throw AlignmentError(path + ": missing prediction for row id " +
                                 std::to_string(d.row_ids[i]));
        out.tau[static_cast<Eigen::Index>(i)] = it->second;
    }
    out.dataset_fingerprint = d.fingerprint();
    return out;
}

// ---------------------------------------------------------------------------
// Module-format staging files
// ---------------------------------------------------------------------------

void write_dataset_csv(const std::string& path, const Dataset& d) {
    csv::Table table;
    for (std::size_t j = 0; j < d.dim(); ++j) table.header.push_back("x" + std::to_string(j));
    table.header.push_back("t");
    table.header.push_back("y");
    table.rows.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        std::vector<std::string> row;
        row.reserve(d.dim() + 2);
        for (std::size_t j = 0; j < d.dim(); ++j)
            row.push_back(csv::format_double(
                d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
        row.push_back(std::to_string(d.t[i]));
        row.push_back(csv::format_double(d.y[static_cast<Eigen::Index>(i)]));
        table.rows.push_back(std::move(row));
    }
    csv::write_file(path, table);
}

Dataset read_dataset_csv(const std::string& path, double e1, Provenance provenance,
                         bool e_known_constant) {
    const csv::Table table = csv::read_file(path);
    const long t_col = table.find("t");
    const long y_col = table.find("y");
    if (t_col < 0 || y_col < 0) throw SchemaError(path + ": expected t and y columns");
    if (table.rows.empty()) throw DataError(path + ": no data rows");
    std::vector<std::size_t> x_cols;
    for (std::size_t c = 0; c < table.n_cols(); ++c)
        if (static_cast<long>(c) != t_col && static_cast<long>(c) != y_col) x_cols.push_back(c);
    Dataset d;
    const std::size_t n = table.n_rows();
    d.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(x_cols.size()));
    d.y.resize(static_cast<Eigen::Index>(n));
    d.t.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < x_cols.size(); ++j)
            d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                parse_double(table.rows[i][x_cols[j]], "feature");
        d.t[i] = parse_treatment(table.rows[i][static_cast<std::size_t>(t_col)]);
        d.y[static_cast<Eigen::Index>(i)] = parse_double(table.rows[i][static_cast<std::size_t>(y_col)], "outcome");
    }
    d.e1 = e1;
    d.provenance = provenance;
    d.e_known_constant = e_known_constant;
    d.row_ids.resize(n);
    std::iota(d.row_ids.begin(), d.row_ids.end(), std::size_t{0});
    validate(d);
    if (provenance == Provenance::rct && e_known_constant) check_rct_balance(d);
    return d;
}

}  // namespace qcate
