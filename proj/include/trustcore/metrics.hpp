#pragma once

// Evaluation: clean accuracy, attack success rate, selection purity. The
// only module that reads ground-truth poison flags.

#include "trustcore/expand.hpp"
#include "trustcore/trigger.hpp"

namespace trustcore {

Real accuracy(const Encoder& encoder, const Head& head, const LabeledDataset& test_set);
Real accuracy(const TapModel& model, const LabeledDataset& test_set);
VecX per_class_accuracy(const Encoder& encoder, const Head& head, const LabeledDataset& test_set);

// Applies the trigger to every test sample whose true label differs from the
// target class; fraction predicted as the target class.
Real attack_success_rate(const Encoder& encoder, const Head& head, const LabeledDataset& test_set,
                         const TriggerSpec& spec);
Real attack_success_rate(const TapModel& model, const LabeledDataset& test_set,
                         const TriggerSpec& spec);

struct SiftMetrics {
    int npd = 0;  // poisoned samples in the target class of the dataset
    int nfd = 0;  // selected samples in the target class
    int poisons_in_selection = 0;
    std::map<int, int> poisons_per_class;
    Real precision = Real(1);  // 1 - poisons/nfd

    nlohmann::json to_json() const;
};

SiftMetrics sift_report(const std::vector<int>& selected_ids, const LabeledDataset& ds,
                        int target_class);

struct PoolMetrics {
    std::size_t size = 0;
    int poison_count = 0;
    std::map<std::string, int> poisons_by_provenance;

    nlohmann::json to_json() const;
};

PoolMetrics pool_report(const CleanPool& pool, const LabeledDataset& ds);

struct EvalReport {
    // no-defense baseline
    Real baseline_acc = -1, baseline_asr = -1, baseline_asr_e = -1, baseline_asr_d = -1;
    // defended final model
    Real acc = -1, asr = -1, asr_e = -1, asr_d = -1;
    std::vector<Real> per_class_acc;
    SiftMetrics seed_metrics;
    PoolMetrics expanded_pool, final_pool;
    double runtime_seconds = 0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    std::string table() const;  // human-readable summary
};

}  // namespace trustcore
