#pragma once

// Bootstrapping learning on the reinitialized encoder: class-balanced loss
// guidance, global loss guidance, then meta guidance until the clean pool
// reaches the halt fraction. Only the head and untrusted channels train.

#include "trustcore/filter.hpp"

namespace trustcore {

struct BootstrapParams {
    int iter1 = 10;
    int iter2 = 10;
    double gamma1 = 0.02;
    double gamma2 = 0.02;
    double gamma3 = 0.05;
    int epochs_per_iter = 5;  // T
    double rho = 0.90;
    TrainOpts train;  // optimizer settings; selector/groups are managed here
    std::uint64_t rng_seed = 0;

    void validate() const {
        for (double g : {gamma1, gamma2, gamma3})
            if (!(g > 0 && g < 1)) throw ParamError("gamma fraction outside (0,1)");
        if (!(rho > 0 && rho <= 1)) throw ParamError("rho outside (0,1]");
        if (iter1 < 0 || iter2 < 0 || epochs_per_iter < 1) throw ParamError("bad iteration counts");
    }
};

enum class BootstrapPhase { class_balanced, global, meta };
std::string to_string(BootstrapPhase p);

struct BootstrapRound {
    int round = 0;
    BootstrapPhase phase = BootstrapPhase::class_balanced;
    std::vector<int> added;
    std::size_t pool_size = 0;  // after the additions
    Real train_loss = 0;
    bool skipped = false;  // clone diverged, no additions this round
};

struct BootstrapAudit {
    std::vector<BootstrapRound> rounds;
    void save_jsonl(const std::filesystem::path& path) const;
    static BootstrapAudit load_jsonl(const std::filesystem::path& path);
    // Re-applies the audited additions on top of the starting pool.
    CleanPool replay(const CleanPool& start) const;
};

struct BootstrapResult {
    Encoder encoder;
    Head head;
    CleanPool pool;
    BootstrapAudit audit;
};

// Selection primitives (ranked over the complement of the pool).
std::vector<int> select_lowest_per_class(const VecX& losses, const std::vector<int>& ids,
                                         const VecXi& labels, int num_classes, double gamma);
std::vector<int> select_lowest_global(const VecX& losses, const std::vector<int>& ids,
                                      double gamma);
std::vector<int> select_smallest_reduction(const VecX& loss_before, const VecX& loss_after,
                                           const std::vector<int>& ids, double gamma,
                                           bool at_least_one);

// `encoder` must already carry the partition in reinit mode; a fresh head is
// initialized inside. Trusted-channel parameters are never touched.
BootstrapResult run_bootstrap(const Encoder& encoder, const ChannelPartition& partition,
                              const LabeledDataset& ds, const CleanPool& clean_subset,
                              const BootstrapParams& params);

}  // namespace trustcore
