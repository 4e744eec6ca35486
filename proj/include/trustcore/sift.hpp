#pragma once

// Seed selection: density-based majority rule per layer plus the
// cross-layer consistent-neighbor rule, ranked per class.

#include "trustcore/model.hpp"
#include "trustcore/train.hpp"

#include <json.hpp>

#include <filesystem>
#include <unordered_map>

namespace trustcore {

struct SiftParams {
    int num_layers = 3;     // L, taken as the last L tap layers
    int neighbors = 50;     // m
    double alpha = 0.01;
    // Density clustering knobs. min_pts 0 selects max(5, round(0.01*|class|));
    // eps 0 selects the 90th-percentile k-distance per (layer, class).
    int min_pts = 0;
    Real eps_quantile = Real(0.90);
    Real eps_override = Real(0);

    void validate() const {
        if (!(alpha > 0 && alpha < 1)) throw ParamError("alpha outside (0,1)");
        if (neighbors < 1) throw ParamError("neighbor count must be >= 1");
        if (num_layers < 1) throw ParamError("layer count must be >= 1");
    }
};

struct ActivationRecord {
    std::vector<MatX> layers;  // L matrices, one row per sample
    std::vector<int> ids;      // row -> id
    VecXi labels;              // row -> class
    std::unordered_map<int, int> row_of;
    int num_classes = 0;

    std::vector<int> class_rows(int cls) const;
};

struct ClassSift {
    int cls = 0;
    std::vector<int> seeds;            // ranked, best first
    std::vector<int> candidates;       // majority-rule survivors (sorted by id)
    std::vector<int> neighbor_counts;  // aligned with candidates
    bool shortfall = false;
    bool empty_layer = false;  // some layer clustered everything as noise
};

struct SiftResult {
    std::vector<ClassSift> per_class;
    SiftParams params;

    std::vector<int> all_seeds() const;
    const ClassSift& for_class(int cls) const;
    nlohmann::json to_json() const;
    static SiftResult from_json(const nlohmann::json& j);
};

// Exact density clustering; label -1 = noise, clusters numbered from 0 in
// discovery order. min_pts counts the point itself.
std::vector<int> dbscan(const MatX& points, Real eps, int min_pts);

// Distance from each point to its k-th nearest neighbor (self excluded).
VecX kth_neighbor_distance(const MatX& points, int k);

ActivationRecord record_activations(const TapModel& model, const LabeledDataset& ds,
                                    const SiftParams& params);

// Majority rule for one class: intersection of the largest density cluster
// across layers. Never admits noise points.
ClassSift majority_candidates(const ActivationRecord& rec, int cls, const SiftParams& params);

// Consistency rule for one sample: m nearest neighbors per layer over the
// whole dataset (self excluded), intersected across layers and with the
// sample's class.
int consistent_neighbor_count(int id, const ActivationRecord& rec, int cls,
                              const SiftParams& params);

SiftResult sift_seeds(const ActivationRecord& rec, const SiftParams& params);
SiftResult sift_seeds(const TapModel& model, const LabeledDataset& ds, const SiftParams& params);

void save_sift_result(const std::filesystem::path& path, const SiftResult& r);
SiftResult load_sift_result(const std::filesystem::path& path);

}  // namespace trustcore
