#pragma once

#include <cstdint>
#include <vector>

#include "qcate/bench.hpp"
#include "qcate/synthetic.hpp"

namespace qcate {

// Ranking-agreement protocol: generate known-truth data, fit the roster on a
// fixed-size estimation set, then compare q-statistic rankings against oracle
// rankings on evaluation sets of growing size.

struct VerifyConfig {
    SyntheticConfig synthetic;  // transform, tau shift, noise, master seed
    std::size_t n_est = 2000;
    std::size_t dim = 8;
    std::vector<std::size_t> eval_sizes = {1000, 2000, 4000, 8000, 16000, 32000, 64000};
    int replicates = 50;
    std::vector<RosterEntry> roster;  // >= 2 models, no imports
    QConfig qcfg;
    int jobs = 0;
};

struct VerifyRow {
    std::size_t eval_size = 0;
    double mrr = 0.0;
    double precision_at_1 = 0.0;
    double spearman = 0.0;
    int replicates = 0;
};

std::vector<VerifyRow> run_verify(const VerifyConfig& config);

}  // namespace qcate
