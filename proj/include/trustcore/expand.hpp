#pragma once

// Clean-pool growth: confusion training against a deliberately mislabeled
// base set, then largest-loss selection, repeated until the pool reaches the
// target fraction of the dataset.

#include "trustcore/sift.hpp"

#include <unordered_set>

namespace trustcore {

enum class Provenance { seed, loss_expand, class_loss, global_loss, meta };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct PoolEntry {
    int id = 0;
    Provenance prov = Provenance::seed;
    int round = 0;
};

// Ordered, provenance-tagged id set. Monotone: entries are only ever added.
class CleanPool {
public:
    void add(int id, Provenance prov, int round);
    bool contains(int id) const { return members_.count(id) > 0; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<PoolEntry>& entries() const { return entries_; }
    std::vector<int> ids() const;
    std::vector<int> complement_of(const std::vector<int>& universe) const;

    void save_jsonl(const std::filesystem::path& path) const;
    static CleanPool load_jsonl(const std::filesystem::path& path);

private:
    std::vector<PoolEntry> entries_;
    std::unordered_set<int> members_;
};

struct ConfusionOpts {
    // steps 0 selects three epochs over the base set by batch count, with a
    // floor of 120 steps; the low-noise schedule below keeps the loss
    // ranking stable (high momentum and large steps collapse the poison
    // mappings and invert it).
    int steps = 0;
    int batch_size = 256;
    Real learning_rate = Real(0.002);
    Real momentum = Real(0);
    OptimizerKind optimizer = OptimizerKind::sgd;
};

struct ExpansionParams {
    double r_expand = 0.05;
    double target_ratio = 0.20;
    Real lambda = Real(0.5);
    ConfusionOpts confusion;
    TrainOpts head_retrain;  // per-round fine-tune of a fresh head on D
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(r_expand > 0 && r_expand < 1)) throw ParamError("r_expand outside (0,1)");
        if (!(target_ratio > 0 && target_ratio < 1)) throw ParamError("target_ratio outside (0,1)");
        if (lambda < 0 || lambda > 1) throw ParamError("lambda outside [0,1]");
    }
};

// Joint descent on lambda * loss(rest batch, true labels) +
// (1-lambda) * loss(base batch, uniformly wrong labels); only the head moves.
// Embedding-level core: emb rows align with labels rows, index lists select
// rows. The rest-batch stream is identical to train_head_steps with the same
// seed.
void confusion_train(Head& head, const MatX& emb, const VecXi& labels,
                     const std::vector<int>& rest_rows, const std::vector<int>& base_rows,
                     Real lambda, const ConfusionOpts& opts, std::uint64_t rng_seed);

void confusion_train(Head& head, const Encoder& encoder, const LabeledDataset& ds,
                     const std::vector<int>& rest_ids, const std::vector<int>& base_ids,
                     Real lambda, const ConfusionOpts& opts, std::uint64_t rng_seed);

// Plain step-based head training drawing rest batches exactly like
// confusion_train (the lambda = 1 trajectory contract).
void train_head_steps(Head& head, const MatX& emb, const VecXi& labels,
                      const std::vector<int>& rest_rows, const ConfusionOpts& opts,
                      std::uint64_t rng_seed);

CleanPool expand_seed(const Encoder& encoder, const LabeledDataset& ds, const SiftResult& seeds,
                      const ExpansionParams& params);

}  // namespace trustcore
