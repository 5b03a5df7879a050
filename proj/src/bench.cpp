#include "qcate/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "qcate/csv.hpp"
#include "qcate/error.hpp"
#include "qcate/par.hpp"
#include "qcate/rng.hpp"
#include "qcate/synthetic.hpp"

namespace qcate {

using json = nlohmann::json;

const char* to_string(CellStatus s) {
    switch (s) {
        case CellStatus::ok: return "ok";
        case CellStatus::fit_failed: return "fit_failed";
        case CellStatus::cell_failed: return "cell_failed";
    }
    return "?";
}

namespace {

CellStatus cell_status_from_string(const std::string& s) {
    if (s == "ok") return CellStatus::ok;
    if (s == "fit_failed") return CellStatus::fit_failed;
    if (s == "cell_failed") return CellStatus::cell_failed;
    throw ArgumentError("unknown cell status: " + s);
}

double round_sig(double v, int digits = 6) {
    if (v == 0.0 || !std::isfinite(v)) return v;
    const double mag = std::pow(10.0, digits - 1 - std::floor(std::log10(std::abs(v))));
    return std::round(v * mag) / mag;
}

}  // namespace

std::vector<RosterEntry> parse_roster(const std::string& spec) {
    std::vector<RosterEntry> roster;
    std::string token;
    auto flush = [&]() {
        if (token.empty()) return;
        RosterEntry entry;
        if (token.rfind("import:", 0) == 0) {
            entry.strategy = Strategy::imported;
            entry.import_path = token.substr(7);
            if (entry.import_path.empty())
                throw ConfigError("import roster entry needs a path: '" + token + "'");
            entry.id = "import:" + entry.import_path;
        } else {
            entry.strategy = strategy_from_string(token);
            entry.id = token;
        }
        roster.push_back(std::move(entry));
        token.clear();
    };
    for (char c : spec) {
        if (c == ',')
            flush();
        else if (!std::isspace(static_cast<unsigned char>(c)))
            token.push_back(c);
    }
    flush();
    if (roster.empty()) throw ConfigError("roster is empty");
    return roster;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

std::vector<ModelAggregate> summarize(const std::vector<CellResult>& cells) {
    if (cells.empty()) throw ArgumentError("summarize needs at least one cell result");

    using CellKey = std::tuple<std::string, std::size_t, double, int, int>;
    std::map<CellKey, std::vector<const CellResult*>> by_cell;
    std::map<std::string, ModelAggregate> agg;
    for (const auto& c : cells) {
        by_cell[{c.dataset_id, c.size, c.treat_frac, c.layers, c.replicate}].push_back(&c);
        agg.try_emplace(c.model_id, ModelAggregate{c.model_id, 0, 0.0, 0, 0.0, 0, 0.0});
    }

    long qualifying_cells = 0;
    long total_cells = 0;
    std::map<std::string, double> rank_sum;
    for (auto& [key, group] : by_cell) {
        ++total_cells;
        bool qualifies = false;
        for (const auto* r : group) {
            if (r->status == CellStatus::ok && r->q.q_hat < 0.0) qualifies = true;
            if (r->status == CellStatus::ok && r->q.q_hat >= 0.0)
                agg[r->model_id].degenerate_count++;
            if (r->status != CellStatus::ok) agg[r->model_id].failed_count++;
        }
        if (!qualifies) continue;
        ++qualifying_cells;
        // Rank every model in the cell: successful results by q_hat ascending
        // (most negative = rank 1), failures after them; ties by model id.
        std::vector<const CellResult*> order(group.begin(), group.end());
        std::sort(order.begin(), order.end(), [](const CellResult* a, const CellResult* b) {
            const bool a_ok = a->status == CellStatus::ok;
            const bool b_ok = b->status == CellStatus::ok;
            if (a_ok != b_ok) return a_ok;
            if (a_ok && a->q.q_hat != b->q.q_hat) return a->q.q_hat < b->q.q_hat;
            return a->model_id < b->model_id;
        });
        agg[order.front()->model_id].wins++;
        for (std::size_t k = 0; k < order.size(); ++k)
            rank_sum[order[k]->model_id] += static_cast<double>(k + 1);
    }

    std::vector<ModelAggregate> out;
    out.reserve(agg.size());
    for (auto& [id, a] : agg) {
        a.win_share = qualifying_cells > 0
                          ? static_cast<double>(a.wins) / static_cast<double>(qualifying_cells)
                          : 0.0;
        a.degenerate_rate =
            total_cells > 0 ? static_cast<double>(a.degenerate_count) / static_cast<double>(total_cells)
                            : 0.0;
        a.avg_rank = qualifying_cells > 0 ? rank_sum[id] / static_cast<double>(qualifying_cells)
                                          : 0.0;
        out.push_back(a);
    }
    std::sort(out.begin(), out.end(), [](const ModelAggregate& a, const ModelAggregate& b) {
        if (a.wins != b.wins) return a.wins > b.wins;
        return a.model < b.model;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

namespace {

struct CellContext {
    const Dataset* base;
    const GridConfig* grid;
    const std::vector<RosterEntry>* roster;
    const QConfig* qcfg;
    const Eigen::VectorXd* oracle_tau;  // aligned to base rows
    const std::unordered_map<std::string, PredictionTable>* imports;
    std::string dataset_id;
};

// The evaluation regime is known-propensity: the design constant for RCT
// rows, the recorded truth otherwise.
PropensitySource eval_propensity(const Dataset& score) {
    if (score.e_known_constant) return PropensitySource::known_constant(score.e1);
    if (score.true_propensity.size() != 0)
        return PropensitySource::known_per_sample(score.true_propensity);
    throw ArgumentError("evaluation data has neither a known constant nor recorded propensities");
}

std::vector<CellResult> run_cell(const CellContext& ctx, const GridCell& cell) {
    std::vector<CellResult> out;
    out.reserve(ctx.roster->size());
    CellResult proto;
    proto.dataset_id = ctx.dataset_id;
    proto.size = cell.size;
    proto.treat_frac = cell.treat_frac;
    proto.layers = cell.layers;
    proto.replicate = cell.replicate;

    auto fail_all = [&](const std::string& why) {
        for (const auto& entry : *ctx.roster) {
            CellResult r = proto;
            r.model_id = entry.id;
            r.status = CellStatus::cell_failed;
            r.error = why;
            out.push_back(std::move(r));
        }
        return out;
    };

    Dataset d_est, score;
    NuisanceValues eval_nv;
    bool have_eval_nv = false;
    PropensitySource prop = PropensitySource::known_constant(0.5);
    std::optional<NuisanceSet> est_ns;
    std::string est_ns_error;
    std::optional<QResult> baseline;
    try {
        auto [train, eval] = split(*ctx.base, ctx.grid->eval_fraction,
                                   rng::derive(cell.seed, "cell.split"));
        BiasingConfig bc;
        bc.layers = cell.layers;
        bc.target_est_size = cell.size;
        bc.target_treat_frac = cell.treat_frac;
        bc.seed = rng::derive(cell.seed, "cell.bias");
        const BiasingFn g = make_biasing_fn(bc, train);
        d_est = observational_sample(train, g, rng::derive(cell.seed, "cell.sample"));

        const bool cv_needs_nuisances = ctx.qcfg->cv.kind == CvKind::doubly_robust ||
                                        ctx.qcfg->cv.kind == CvKind::r_style;
        if (cv_needs_nuisances) {
            auto [nuis_slice, score_part] =
                split(eval, 1.0 - ctx.qcfg->eval_nuisance_frac,
                      rng::derive(cell.seed, "cell.evalsplit"));
            const NuisanceSet eval_ns = fit_nuisances(nuis_slice, ctx.qcfg->nuisance_folds,
                                                      rng::derive(cell.seed, "cell.nuis_eval"));
            score = std::move(score_part);
            eval_nv = eval_ns.predict(score.x);
            // gamma uses the known evaluation propensity, not a plug-in
            if (score.e_known_constant)
                eval_nv.e = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(score.size()),
                                                      score.e1);
            else if (score.true_propensity.size() != 0)
                eval_nv.e = score.true_propensity;
            have_eval_nv = true;
        } else {
            score = std::move(eval);
        }
        prop = eval_propensity(score);
    } catch (const Error& e) {
        return fail_all(e.what());
    }

    // Estimation-side nuisances feed only the models that need them; a
    // failure here degrades those models and the screening baseline, not the
    // whole cell.
    try {
        est_ns = fit_nuisances(d_est, ctx.qcfg->nuisance_folds,
                               rng::derive(cell.seed, "cell.nuis_est"));
    } catch (const Error& e) {
        est_ns_error = e.what();
    }
    if (est_ns) {
        try {
            const CateEstimator base_model = fit_cate(
                Strategy::constant_effect, d_est, &*est_ns, rng::derive(cell.seed, "cell.base"));
            baseline = qhat(base_model.predict(score.x), score, prop, ctx.qcfg->cv,
                            have_eval_nv ? &eval_nv : nullptr);
        } catch (const Error&) {
            baseline.reset();  // screening falls back to the degeneracy rule
        }
    }

    for (const auto& entry : *ctx.roster) {
        CellResult r = proto;
        r.model_id = entry.id;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            Eigen::VectorXd tau;
            if (entry.strategy == Strategy::imported) {
                tau = ctx.imports->at(entry.id).select(score.row_ids);
            } else {
                const NuisanceSet* ns = nullptr;
                if (strategy_needs_nuisances(entry.strategy)) {
                    if (!est_ns) throw FitError("estimation nuisances unavailable: " + est_ns_error);
                    ns = &*est_ns;
                }
                const CateEstimator model =
                    fit_cate(entry.strategy, d_est, ns,
                             rng::derive(cell.seed, "cell.fit", std::hash<std::string>{}(entry.id)));
                tau = model.predict(score.x);
            }
            QResult q = qhat(tau, score, prop, ctx.qcfg->cv, have_eval_nv ? &eval_nv : nullptr);
            r.q = screen(q, baseline ? &*baseline : nullptr);
            r.status = CellStatus::ok;
            if (ctx.oracle_tau != nullptr) {
                Eigen::VectorXd truth(static_cast<Eigen::Index>(score.size()));
                for (std::size_t i = 0; i < score.size(); ++i)
                    truth[static_cast<Eigen::Index>(i)] =
                        (*ctx.oracle_tau)[static_cast<Eigen::Index>(score.row_ids[i])];
                r.pehe = oracle_pehe(tau, truth);
            }
        } catch (const Error& e) {
            r.status = CellStatus::fit_failed;
            r.error = e.what();
        }
        r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

BenchmarkReport run_benchmark(const Dataset& rct, const GridConfig& grid,
                              const std::vector<RosterEntry>& roster, const QConfig& qcfg,
                              int jobs, const Eigen::VectorXd* oracle_tau,
                              const std::string& dataset_id) {
    validate(rct);
    if (roster.empty()) throw ConfigError("roster is empty");
    if (!(grid.eval_fraction > 0.0 && grid.eval_fraction < 1.0))
        throw ConfigError("eval_fraction must lie strictly inside (0,1)");
    if (oracle_tau != nullptr && static_cast<std::size_t>(oracle_tau->size()) != rct.size())
        throw AlignmentError("oracle tau is not aligned with the base dataset");

    // Custom variates must pass the zero-mean gate on a pilot sample before
    // any cell is run.
    if (qcfg.cv.kind == CvKind::custom) {
        if (!qcfg.cv.custom_fn) throw ConfigError("custom control variate without a function");
        const std::size_t pilot = std::min<std::size_t>(rct.size(), 10000);
        Eigen::VectorXd r(static_cast<Eigen::Index>(pilot));
        for (std::size_t i = 0; i < pilot; ++i)
            r[static_cast<Eigen::Index>(i)] =
                qcfg.cv.custom_fn(i, rct.t[i], rct.y[static_cast<Eigen::Index>(i)], 1.0);
        const GateResult gate = zero_mean_gate(r);
        if (!gate.pass)
            throw ConfigError("custom control variate failed the zero-mean gate: mean=" +
                              std::to_string(gate.mean) + " se=" + std::to_string(gate.se));
    }

    std::unordered_map<std::string, PredictionTable> imports;
    for (const auto& entry : roster)
        if (entry.strategy == Strategy::imported)
            imports.emplace(entry.id, import_predictions(entry.import_path, rct));

    const std::vector<GridCell> cells =
        build_grid(grid.sizes, grid.treat_fracs, grid.layers, grid.replicates, grid.master_seed);

    CellContext ctx;
    ctx.base = &rct;
    ctx.grid = &grid;
    ctx.roster = &roster;
    ctx.qcfg = &qcfg;
    ctx.oracle_tau = oracle_tau;
    ctx.imports = &imports;
    ctx.dataset_id = dataset_id;

    std::vector<std::vector<CellResult>> slots(cells.size());
    const int threads = jobs > 0 ? jobs : par::max_jobs();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(cells.size()); ++c)
        slots[static_cast<std::size_t>(c)] = run_cell(ctx, cells[static_cast<std::size_t>(c)]);

    BenchmarkReport report;
    report.dataset_id = dataset_id;
    report.grid = grid;
    for (const auto& entry : roster) report.roster_ids.push_back(entry.id);
    report.cv = to_string(qcfg.cv.kind);
    report.theta_policy = qcfg.cv.theta.mode == ThetaPolicy::Mode::fixed
                              ? "fixed:" + std::to_string(qcfg.cv.theta.value)
                              : "empirical_optimal";
    for (auto& slot : slots)
        for (auto& r : slot) report.cells.push_back(std::move(r));
    report.aggregates = summarize(report.cells);

    if (oracle_tau != nullptr) {
        AgreementSummary agreement;
        using CellKey = std::tuple<std::size_t, double, int, int>;
        std::map<CellKey, std::vector<const CellResult*>> by_cell;
        for (const auto& c : report.cells)
            if (c.status == CellStatus::ok && std::isfinite(c.pehe))
                by_cell[{c.size, c.treat_frac, c.layers, c.replicate}].push_back(&c);
        for (const auto& [key, group] : by_cell) {
            if (group.size() < 2) continue;
            std::vector<ScoredModel> qs, ps;
            for (const auto* r : group) {
                qs.push_back({r->model_id, r->q.q_hat});
                ps.push_back({r->model_id, r->pehe});
            }
            const RankAgreement ra = oracle_rank_agreement(qs, ps);
            agreement.mrr += ra.mrr;
            agreement.precision_at_1 += ra.precision_at_1;
            agreement.spearman += ra.spearman;
            agreement.cells++;
        }
        if (agreement.cells > 0) {
            agreement.mrr /= static_cast<double>(agreement.cells);
            agreement.precision_at_1 /= static_cast<double>(agreement.cells);
            agreement.spearman /= static_cast<double>(agreement.cells);
            report.agreement = agreement;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

namespace {

json grid_to_json(const GridConfig& g) {
    json j;
    j["sizes"] = g.sizes;
    j["treat_fracs"] = g.treat_fracs;
    j["layers"] = g.layers;
    j["replicates"] = g.replicates;
    j["eval_fraction"] = round_sig(g.eval_fraction);
    j["master_seed"] = g.master_seed;
    return j;
}

GridConfig grid_from_json(const json& j) {
    GridConfig g;
    g.sizes = j.at("sizes").get<std::vector<std::size_t>>();
    g.treat_fracs = j.at("treat_fracs").get<std::vector<double>>();
    g.layers = j.at("layers").get<std::vector<int>>();
    g.replicates = j.at("replicates").get<int>();
    g.eval_fraction = j.at("eval_fraction").get<double>();
    g.master_seed = j.at("master_seed").get<std::uint64_t>();
    return g;
}

json cell_to_json(const CellResult& c) {
    json j;
    j["dataset_id"] = c.dataset_id;
    j["size"] = c.size;
    j["treat_frac"] = round_sig(c.treat_frac);
    j["layers"] = c.layers;
    j["replicate"] = c.replicate;
    j["model"] = c.model_id;
    j["status"] = to_string(c.status);
    j["error"] = c.error;
    if (c.status == CellStatus::ok) {
        j["q_hat"] = round_sig(c.q.q_hat);
        j["se"] = round_sig(c.q.se);
        j["ci_lo"] = round_sig(c.q.ci_lo);
        j["ci_hi"] = round_sig(c.q.ci_hi);
        j["n"] = c.q.n;
        j["cv"] = to_string(c.q.cv);
        j["theta"] = round_sig(c.q.theta);
        j["screening"] = to_string(c.q.screening);
        if (std::isfinite(c.pehe)) j["pehe"] = round_sig(c.pehe);
    }
    return j;
}

CellResult cell_from_json(const json& j) {
    CellResult c;
    c.dataset_id = j.at("dataset_id").get<std::string>();
    c.size = j.at("size").get<std::size_t>();
    c.treat_frac = j.at("treat_frac").get<double>();
    c.layers = j.at("layers").get<int>();
    c.replicate = j.at("replicate").get<int>();
    c.model_id = j.at("model").get<std::string>();
    c.status = cell_status_from_string(j.at("status").get<std::string>());
    c.error = j.at("error").get<std::string>();
    if (c.status == CellStatus::ok) {
        c.q.q_hat = j.at("q_hat").get<double>();
        c.q.se = j.at("se").get<double>();
        c.q.variance = c.q.se * c.q.se;
        c.q.ci_lo = j.at("ci_lo").get<double>();
        c.q.ci_hi = j.at("ci_hi").get<double>();
        c.q.n = j.at("n").get<std::size_t>();
        c.q.cv = cv_kind_from_string(j.at("cv").get<std::string>());
        c.q.theta = j.at("theta").get<double>();
        c.q.screening = screening_from_string(j.at("screening").get<std::string>());
        if (j.contains("pehe")) c.pehe = j.at("pehe").get<double>();
    }
    return c;
}

}  // namespace

std::string report_to_json(const BenchmarkReport& report) {
    json j;
    j["schema_version"] = report.schema_version;
    j["dataset_id"] = report.dataset_id;
    j["grid"] = grid_to_json(report.grid);
    j["roster"] = report.roster_ids;
    j["cv"] = report.cv;
    j["theta_policy"] = report.theta_policy;
    j["conventions"] = {
        {"ranking", "rank 1 = most negative q_hat; ties by model id; failures ranked last"},
        {"failed_models", "count as degenerate for win-share qualification only"},
        {"win_share_denominator", "cells with at least one non-degenerate model"}};
    json aggs = json::array();
    for (const auto& a : report.aggregates) {
        json ja;
        ja["model"] = a.model;
        ja["wins"] = a.wins;
        ja["win_share"] = round_sig(a.win_share);
        ja["degenerate_count"] = a.degenerate_count;
        ja["degenerate_rate"] = round_sig(a.degenerate_rate);
        ja["failed"] = a.failed_count;
        ja["avg_rank"] = round_sig(a.avg_rank);
        aggs.push_back(std::move(ja));
    }
    j["aggregates"] = std::move(aggs);
    if (report.agreement) {
        j["agreement"] = {{"mrr", round_sig(report.agreement->mrr)},
                          {"precision_at_1", round_sig(report.agreement->precision_at_1)},
                          {"spearman", round_sig(report.agreement->spearman)},
                          {"cells", report.agreement->cells}};
    }
    json cells = json::array();
    for (const auto& c : report.cells) cells.push_back(cell_to_json(c));
    j["cells"] = std::move(cells);
    return j.dump(2) + "\n";
}

BenchmarkReport report_from_json(const std::string& text) {
    const json j = json::parse(text);
    BenchmarkReport report;
    report.schema_version = j.at("schema_version").get<int>();
    report.dataset_id = j.at("dataset_id").get<std::string>();
    report.grid = grid_from_json(j.at("grid"));
    report.roster_ids = j.at("roster").get<std::vector<std::string>>();
    report.cv = j.at("cv").get<std::string>();
    report.theta_policy = j.at("theta_policy").get<std::string>();
    for (const auto& ja : j.at("aggregates")) {
        ModelAggregate a;
        a.model = ja.at("model").get<std::string>();
        a.wins = ja.at("wins").get<long>();
        a.win_share = ja.at("win_share").get<double>();
        a.degenerate_count = ja.at("degenerate_count").get<long>();
        a.degenerate_rate = ja.at("degenerate_rate").get<double>();
        a.failed_count = ja.at("failed").get<long>();
        a.avg_rank = ja.at("avg_rank").get<double>();
        report.aggregates.push_back(std::move(a));
    }
    if (j.contains("agreement")) {
        AgreementSummary s;
        s.mrr = j.at("agreement").at("mrr").get<double>();
        s.precision_at_1 = j.at("agreement").at("precision_at_1").get<double>();
        s.spearman = j.at("agreement").at("spearman").get<double>();
        s.cells = j.at("agreement").at("cells").get<long>();
        report.agreement = s;
    }
    for (const auto& jc : j.at("cells")) report.cells.push_back(cell_from_json(jc));
    return report;
}

void emit_report(const BenchmarkReport& report, ReportFormat format, const std::string& path) {
    if (format == ReportFormat::json) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path);
        out << report_to_json(report);
        if (!out) throw DataError("write failed: " + path);
        return;
    }
    csv::Table table;
    table.header = {"dataset_id", "size",  "treat_frac", "layers", "replicate", "model",
                    "status",     "q_hat", "se",         "ci_lo",  "ci_hi",     "n",
                    "cv",         "theta", "screening",  "pehe",   "wall_ms",   "error"};
    for (const auto& c : report.cells) {
        std::string error = c.error.empty() ? "-" : c.error;
        std::replace(error.begin(), error.end(), ',', ';');
        const bool ok = c.status == CellStatus::ok;
        table.rows.push_back(
            {c.dataset_id, std::to_string(c.size), csv::format_double(c.treat_frac),
             std::to_string(c.layers), std::to_string(c.replicate), c.model_id,
             to_string(c.status), ok ? csv::format_double(round_sig(c.q.q_hat)) : "-",
             ok ? csv::format_double(round_sig(c.q.se)) : "-",
             ok ? csv::format_double(round_sig(c.q.ci_lo)) : "-",
             ok ? csv::format_double(round_sig(c.q.ci_hi)) : "-",
             ok ? std::to_string(c.q.n) : "-", ok ? to_string(c.q.cv) : "-",
             ok ? csv::format_double(round_sig(c.q.theta)) : "-",
             ok ? to_string(c.q.screening) : "-",
             std::isfinite(c.pehe) ? csv::format_double(round_sig(c.pehe)) : "-",
             csv::format_double(c.wall_ms), error});
    }
    csv::write_file(path, table);
}

}  // namespace qcate
