#include "qcate/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qcate/error.hpp"
#include "qcate/par.hpp"

namespace qcate {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

Mlp::Mlp(std::size_t in_dim, int width, int layers, rng::Stream& stream) : in_dim_(in_dim) {
    std::size_t prev = in_dim;
    for (int l = 0; l < layers; ++l) {
        Eigen::MatrixXd w(width, static_cast<Eigen::Index>(prev));
        Eigen::VectorXd b(width);
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = stream.normal();
        for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = stream.normal();
        w_.push_back(std::move(w));
        b_.push_back(std::move(b));
        prev = static_cast<std::size_t>(width);
    }
    w_out_.resize(static_cast<Eigen::Index>(prev));
    for (Eigen::Index i = 0; i < w_out_.size(); ++i) w_out_[i] = stream.normal();
    b_out_ = stream.normal();
}

double Mlp::logit(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    Eigen::VectorXd h = x.transpose();
    for (std::size_t l = 0; l < w_.size(); ++l)
        h = ((w_[l] * h + b_[l]).array().tanh()).matrix();
    return w_out_.dot(h) + b_out_;
}

double BiasingFn::g(int t, const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    const Mlp& net = t == 1 ? arm1_ : arm0_;
    const double shift = t == 1 ? shift1_ : shift0_;
    return std::clamp(sigmoid(scale_ * net.logit(x) + shift), g_lo_, g_hi_);
}

Eigen::VectorXd BiasingFn::g_column(int t, const Eigen::MatrixXd& x) const {
    Eigen::VectorXd out(x.rows());
    par::for_each(static_cast<std::size_t>(x.rows()), [&](std::size_t i) {
        out[static_cast<Eigen::Index>(i)] = g(t, x.row(static_cast<Eigen::Index>(i)));
    });
    return out;
}

namespace {

// Expected kept count over one arm for a given calibration shift.
double arm_mass(const Eigen::VectorXd& logits, double scale, double shift, double lo, double hi) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i)
        s += std::clamp(sigmoid(scale * logits[i] + shift), lo, hi);
    return s;
}

// Bisection for the shift that puts the arm's expected kept count at target.
double calibrate_shift(const Eigen::VectorXd& logits, double scale, double target, double lo,
                       double hi, int iters, const char* what) {
    const auto n = static_cast<double>(logits.size());
    if (target > hi * n || target < lo * n)
        throw CalibrationError(std::string("cannot reach target ") + what + " of " +
                               std::to_string(target) + " with " + std::to_string(logits.size()) +
                               " pool rows and keep bounds [" + std::to_string(lo) + ", " +
                               std::to_string(hi) + "]");
    double b_lo = -40.0, b_hi = 40.0;
    if (arm_mass(logits, scale, b_lo, lo, hi) > target ||
        arm_mass(logits, scale, b_hi, lo, hi) < target)
        throw CalibrationError(std::string("bisection cannot bracket the ") + what + " target");
    for (int it = 0; it < iters; ++it) {
        const double mid = 0.5 * (b_lo + b_hi);
        if (arm_mass(logits, scale, mid, lo, hi) < target)
            b_lo = mid;
        else
            b_hi = mid;
    }
    return 0.5 * (b_lo + b_hi);
}

}  // namespace

BiasingFn make_biasing_fn(const BiasingConfig& config, const Dataset& pool) {
    if (config.layers < 1 || config.layers > 3)
        throw ArgumentError("biasing function depth must be 1, 2, or 3");
    if (!(config.g_lo > 0.0 && config.g_lo < config.g_hi && config.g_hi < 1.0))
        throw ArgumentError("g bounds must satisfy 0 < lo < hi < 1");
    if (!(config.target_treat_frac > 0.0 && config.target_treat_frac < 1.0))
        throw ArgumentError("target treatment fraction must lie strictly inside (0,1)");
    if (pool.size() == 0) throw ArgumentError("calibration pool is empty");
    if (config.target_est_size == 0 || config.target_est_size >= pool.size())
        throw CalibrationError("target estimation size " + std::to_string(config.target_est_size) +
                               " is not below the pool size " + std::to_string(pool.size()));

    BiasingFn fn;
    rng::Stream s0(rng::derive(config.seed, "biasing.arm0"));
    rng::Stream s1(rng::derive(config.seed, "biasing.arm1"));
    fn.arm0_ = Mlp(pool.dim(), config.hidden_width, config.layers, s0);
    fn.arm1_ = Mlp(pool.dim(), config.hidden_width, config.layers, s1);
    fn.scale_ = config.logit_scale;
    fn.g_lo_ = config.g_lo;
    fn.g_hi_ = config.g_hi;

    // Raw logits per arm over that arm's pool rows.
    std::vector<std::size_t> rows0, rows1;
    for (std::size_t i = 0; i < pool.size(); ++i) (pool.t[i] == 1 ? rows1 : rows0).push_back(i);
    if (rows0.empty() || rows1.empty())
        throw CalibrationError("calibration pool must contain both arms");
    auto arm_logits = [&](const Mlp& net, const std::vector<std::size_t>& rows) {
        Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
        par::for_each(rows.size(), [&](std::size_t k) {
            out[static_cast<Eigen::Index>(k)] =
                net.logit(pool.x.row(static_cast<Eigen::Index>(rows[k])));
        });
        return out;
    };
    const Eigen::VectorXd z0 = arm_logits(fn.arm0_, rows0);
    const Eigen::VectorXd z1 = arm_logits(fn.arm1_, rows1);

    // Decoupled targets: expected kept treated mass and control mass.
    const double size = static_cast<double>(config.target_est_size);
    const double target1 = config.target_treat_frac * size;
    const double target0 = (1.0 - config.target_treat_frac) * size;
    fn.shift1_ = calibrate_shift(z1, fn.scale_, target1, config.g_lo, config.g_hi,
                                 config.bisect_iters, "treated kept count");
    fn.shift0_ = calibrate_shift(z0, fn.scale_, target0, config.g_lo, config.g_hi,
                                 config.bisect_iters, "control kept count");

    const double s1m = arm_mass(z1, fn.scale_, fn.shift1_, config.g_lo, config.g_hi);
    const double s0m = arm_mass(z0, fn.scale_, fn.shift0_, config.g_lo, config.g_hi);
    const double achieved_size = s0m + s1m;
    const double achieved_frac = s1m / achieved_size;
    if (std::abs(achieved_size - size) > config.size_rel_tol * size)
        throw CalibrationError("estimation-size target missed: expected kept count " +
                               std::to_string(achieved_size) + " vs target " +
                               std::to_string(size));
    if (std::abs(achieved_frac - config.target_treat_frac) > config.frac_abs_tol)
        throw CalibrationError("treatment-fraction target missed: achieved " +
                               std::to_string(achieved_frac) + " vs target " +
                               std::to_string(config.target_treat_frac));
    return fn;
}

double induced_propensity(const BiasingFn& g, double e1,
                          const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    if (!(e1 > 0.0 && e1 < 1.0)) throw ArgumentError("e1 must lie strictly inside (0,1)");
    const double odds = (1.0 - e1) / e1 * (g.g(0, x) / g.g(1, x));
    return 1.0 / (1.0 + odds);
}

Dataset observational_sample(const Dataset& pool, const BiasingFn& g, std::uint64_t seed) {
    if (pool.provenance != Provenance::rct)
        throw ArgumentError("observational sampling draws from RCT pools only");
    validate(pool);

    for (int attempt = 0; attempt < 3; ++attempt) {
        // Per-row keep draws from a counter-based stream: parallel-safe and
        // independent of iteration order.
        std::vector<char> keep(pool.size(), 0);
        par::for_each(pool.size(), [&](std::size_t i) {
            rng::Stream s(rng::derive(seed, "obs.keep", static_cast<std::uint64_t>(attempt), i));
            keep[i] = s.bernoulli(g.g(pool.t[i], pool.x.row(static_cast<Eigen::Index>(i)))) ? 1 : 0;
        });
        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < pool.size(); ++i)
            if (keep[i]) kept.push_back(i);
        if (kept.empty()) continue;

        Dataset out;
        out.x.resize(static_cast<Eigen::Index>(kept.size()), pool.x.cols());
        out.y.resize(static_cast<Eigen::Index>(kept.size()));
        out.t.resize(kept.size());
        out.row_ids.resize(kept.size());
        out.true_propensity.resize(static_cast<Eigen::Index>(kept.size()));
        for (std::size_t k = 0; k < kept.size(); ++k) {
            const auto i = static_cast<Eigen::Index>(kept[k]);
            out.x.row(static_cast<Eigen::Index>(k)) = pool.x.row(i);
            out.y[static_cast<Eigen::Index>(k)] = pool.y[i];
            out.t[k] = pool.t[kept[k]];
            out.row_ids[k] = pool.row_ids.empty() ? kept[k] : pool.row_ids[kept[k]];
            out.true_propensity[static_cast<Eigen::Index>(k)] =
                induced_propensity(g, pool.e1, pool.x.row(i));
        }
        out.e1 = pool.e1;
        out.provenance = Provenance::observational_sampled;
        out.e_known_constant = false;
        out.seed_lineage = pool.seed_lineage;
        out.seed_lineage.push_back(seed);
        validate(out);
        return out;
    }
    throw CalibrationError("observational sample came back empty after 3 attempts");
}

std::vector<GridCell> build_grid(const std::vector<std::size_t>& sizes,
                                 const std::vector<double>& treat_fracs,
                                 const std::vector<int>& layer_counts, int replicates,
                                 std::uint64_t master_seed) {
    if (sizes.empty() || treat_fracs.empty() || layer_counts.empty() || replicates < 1)
        throw ArgumentError("grid needs nonempty sizes, fractions, layers and replicates >= 1");
    std::vector<GridCell> cells;
    cells.reserve(sizes.size() * treat_fracs.size() * layer_counts.size() *
                  static_cast<std::size_t>(replicates));
    std::size_t setting = 0;
    for (std::size_t size : sizes)
        for (double frac : treat_fracs)
            for (int layers : layer_counts) {
                for (int rep = 0; rep < replicates; ++rep) {
                    GridCell cell;
                    cell.cell_index = setting;
                    cell.size = size;
                    cell.treat_frac = frac;
                    cell.layers = layers;
                    cell.replicate = rep;
                    cell.seed = rng::derive(master_seed, "grid.cell", setting,
                                            static_cast<std::uint64_t>(rep));
                    cells.push_back(cell);
                }
                ++setting;
            }
    return cells;
}

}  // namespace qcate
