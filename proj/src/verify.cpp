#include "qcate/verify.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "qcate/error.hpp"
#include "qcate/par.hpp"
#include "qcate/rng.hpp"

namespace qcate {

namespace {

struct ReplicateAgreement {
    std::vector<RankAgreement> per_size;  // aligned to config.eval_sizes
    bool ok = false;
};

ReplicateAgreement run_replicate(const VerifyConfig& cfg, int rep) {
    ReplicateAgreement out;
    const std::uint64_t seed = rng::derive(cfg.synthetic.seed, "verify.replicate",
                                           static_cast<std::uint64_t>(rep));
    const std::size_t max_eval =
        *std::max_element(cfg.eval_sizes.begin(), cfg.eval_sizes.end());
    const std::size_t n_pool = cfg.n_est + max_eval;

    const Eigen::MatrixXd x = gen_covariates(n_pool, cfg.dim, rng::derive(seed, "x"));
    SyntheticConfig synth = cfg.synthetic;
    synth.seed = rng::derive(seed, "outcomes");
    const Outcomes outcomes = gen_outcomes(x, synth);
    const TreatmentDraw treatment = gen_treatment(x, rng::derive(seed, "treatment"), synth);
    const Dataset full = make_synthetic_dataset(x, outcomes, treatment);

    std::vector<std::size_t> est_rows(cfg.n_est);
    std::iota(est_rows.begin(), est_rows.end(), std::size_t{0});
    const Dataset d_est = take_rows(full, est_rows);

    const NuisanceSet est_ns = fit_nuisances(d_est, cfg.qcfg.nuisance_folds,
                                             rng::derive(seed, "nuis_est"));
    std::vector<CateEstimator> models;
    models.reserve(cfg.roster.size());
    for (const auto& entry : cfg.roster) {
        const NuisanceSet* ns = strategy_needs_nuisances(entry.strategy) ? &est_ns : nullptr;
        models.push_back(fit_cate(entry.strategy, d_est, ns,
                                  rng::derive(seed, "fit", std::hash<std::string>{}(entry.id))));
    }

    const bool cv_needs_nuisances = cfg.qcfg.cv.kind == CvKind::doubly_robust ||
                                    cfg.qcfg.cv.kind == CvKind::r_style;
    out.per_size.reserve(cfg.eval_sizes.size());
    for (std::size_t s = 0; s < cfg.eval_sizes.size(); ++s) {
        const std::size_t size = cfg.eval_sizes[s];
        std::vector<std::size_t> eval_rows(size);
        std::iota(eval_rows.begin(), eval_rows.end(), cfg.n_est);
        const Dataset eval = take_rows(full, eval_rows);

        Dataset score = eval;
        NuisanceValues nv;
        bool have_nv = false;
        if (cv_needs_nuisances) {
            auto [nuis_slice, score_part] = split(eval, 1.0 - cfg.qcfg.eval_nuisance_frac,
                                                  rng::derive(seed, "evalsplit", size));
            const NuisanceSet eval_ns = fit_nuisances(nuis_slice, cfg.qcfg.nuisance_folds,
                                                      rng::derive(seed, "nuis_eval", size));
            score = std::move(score_part);
            nv = eval_ns.predict(score.x);
            nv.e = score.true_propensity;  // evaluation uses the known truth
            have_nv = true;
        }
        const PropensitySource prop = PropensitySource::known_per_sample(score.true_propensity);

        Eigen::VectorXd truth(static_cast<Eigen::Index>(score.size()));
        for (std::size_t i = 0; i < score.size(); ++i)
            truth[static_cast<Eigen::Index>(i)] =
                outcomes.truth.tau[static_cast<Eigen::Index>(score.row_ids[i])];

        std::vector<ScoredModel> qs, ps;
        for (std::size_t m = 0; m < models.size(); ++m) {
            const Eigen::VectorXd tau = models[m].predict(score.x);
            const QResult q = qhat(tau, score, prop, cfg.qcfg.cv, have_nv ? &nv : nullptr);
            qs.push_back({cfg.roster[m].id, q.q_hat});
            ps.push_back({cfg.roster[m].id, oracle_pehe(tau, truth)});
        }
        out.per_size.push_back(oracle_rank_agreement(qs, ps));
    }
    out.ok = true;
    return out;
}

}  // namespace

std::vector<VerifyRow> run_verify(const VerifyConfig& cfg) {
    if (cfg.roster.size() < 2)
        throw ConfigError("ranking agreement needs at least 2 models in the roster");
    for (const auto& entry : cfg.roster)
        if (entry.strategy == Strategy::imported)
            throw ConfigError("the verify protocol fits models itself; imports are not supported");
    if (cfg.eval_sizes.empty() || cfg.replicates < 1)
        throw ConfigError("verify needs eval sizes and replicates >= 1");
    if (cfg.n_est < 64) throw ConfigError("estimation size too small for the protocol");

    std::vector<ReplicateAgreement> reps(static_cast<std::size_t>(cfg.replicates));
    std::vector<std::string> errors(static_cast<std::size_t>(cfg.replicates));
    const int threads = cfg.jobs > 0 ? cfg.jobs : par::max_jobs();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (int r = 0; r < cfg.replicates; ++r) {
        try {
            reps[static_cast<std::size_t>(r)] = run_replicate(cfg, r);
        } catch (const Error& e) {
            errors[static_cast<std::size_t>(r)] = e.what();
        }
    }
    if (std::none_of(reps.begin(), reps.end(), [](const auto& r) { return r.ok; })) {
        for (const auto& e : errors)
            if (!e.empty()) throw NumericError("every verify replicate failed; first error: " + e);
        throw NumericError("every verify replicate failed");
    }

    std::vector<VerifyRow> rows;
    for (std::size_t s = 0; s < cfg.eval_sizes.size(); ++s) {
        VerifyRow row;
        row.eval_size = cfg.eval_sizes[s];
        for (const auto& rep : reps) {
            if (!rep.ok) continue;
            row.mrr += rep.per_size[s].mrr;
            row.precision_at_1 += rep.per_size[s].precision_at_1;
            row.spearman += rep.per_size[s].spearman;
            row.replicates++;
        }
        if (row.replicates > 0) {
            row.mrr /= row.replicates;
            row.precision_at_1 /= row.replicates;
            row.spearman /= row.replicates;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace qcate
