#include "trustcore/sift.hpp"

#include "trustcore/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

namespace trustcore {

std::vector<int> ActivationRecord::class_rows(int cls) const {
    std::vector<int> rows;
    for (std::size_t r = 0; r < ids.size(); ++r)
        if (labels(static_cast<Eigen::Index>(r)) == cls) rows.push_back(static_cast<int>(r));
    return rows;
}

std::vector<int> SiftResult::all_seeds() const {
    std::vector<int> out;
    for (const auto& c : per_class) out.insert(out.end(), c.seeds.begin(), c.seeds.end());
    std::sort(out.begin(), out.end());
    return out;
}

const ClassSift& SiftResult::for_class(int cls) const {
    for (const auto& c : per_class)
        if (c.cls == cls) return c;
    throw LookupError("no sift entry for class " + std::to_string(cls));
}

// ---------------------------------------------------------------------------
// Density clustering
// ---------------------------------------------------------------------------
namespace {

// Pairwise squared distances by explicit difference (no inner-product
// expansion; rank decisions near ties must be stable).
MatX pairwise_sq(const MatX& pts) {
    const Eigen::Index n = pts.rows();
    MatX d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i, i) = 0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const Real v = (pts.row(i) - pts.row(j)).squaredNorm();
            d(i, j) = v;
            d(j, i) = v;
        }
    }
    return d;
}

}  // namespace

std::vector<int> dbscan(const MatX& points, Real eps, int min_pts) {
    const int n = static_cast<int>(points.rows());
    const Real eps_sq = eps * eps;
    const MatX d = pairwise_sq(points);

    std::vector<std::vector<int>> neigh(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (d(i, j) <= eps_sq) neigh[static_cast<std::size_t>(i)].push_back(j);

    constexpr int kUnvisited = -2, kNoise = -1;
    std::vector<int> label(static_cast<std::size_t>(n), kUnvisited);
    int cluster = 0;
    for (int i = 0; i < n; ++i) {
        if (label[static_cast<std::size_t>(i)] != kUnvisited) continue;
        if (static_cast<int>(neigh[static_cast<std::size_t>(i)].size()) < min_pts) {
            label[static_cast<std::size_t>(i)] = kNoise;
            continue;
        }
        label[static_cast<std::size_t>(i)] = cluster;
        std::queue<int> frontier;
        frontier.push(i);
        while (!frontier.empty()) {
            const int p = frontier.front();
            frontier.pop();
            if (static_cast<int>(neigh[static_cast<std::size_t>(p)].size()) < min_pts) continue;
            for (int q : neigh[static_cast<std::size_t>(p)]) {
                int& lq = label[static_cast<std::size_t>(q)];
                if (lq == kNoise) lq = cluster;  // border point
                if (lq != kUnvisited) continue;
                lq = cluster;
                frontier.push(q);
            }
        }
        ++cluster;
    }
    return label;
}

VecX kth_neighbor_distance(const MatX& points, int k) {
    const int n = static_cast<int>(points.rows());
    if (k >= n) throw ParamError("kth_neighbor_distance: k must be < point count");
    const MatX d = pairwise_sq(points);
    VecX out(n);
    std::vector<Real> row;
    for (int i = 0; i < n; ++i) {
        row.clear();
        for (int j = 0; j < n; ++j)
            if (j != i) row.push_back(d(i, j));
        std::nth_element(row.begin(), row.begin() + (k - 1), row.end());
        out(i) = std::sqrt(row[static_cast<std::size_t>(k - 1)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activation recording
// ---------------------------------------------------------------------------
ActivationRecord record_activations(const TapModel& model, const LabeledDataset& ds,
                                    const SiftParams& params) {
    params.validate();
    if (params.num_layers > model.num_taps())
        throw ParamError("model exposes fewer tap layers than requested");
    ActivationRecord rec;
    rec.ids = ds.ids;
    rec.labels.resize(ds.size());
    rec.num_classes = ds.num_classes;
    for (int i = 0; i < ds.size(); ++i) {
        rec.labels(i) = ds.labels(ds.row_of(ds.ids[static_cast<std::size_t>(i)]));
        rec.row_of[ds.ids[static_cast<std::size_t>(i)]] = i;
    }

    const int first_tap = model.num_taps() - params.num_layers;
    rec.layers.resize(static_cast<std::size_t>(params.num_layers));
    constexpr int kChunk = 256;
    for (int at = 0; at < ds.size(); at += kChunk) {
        const int n = std::min(kChunk, ds.size() - at);
        std::vector<int> rows(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            rows[static_cast<std::size_t>(i)] = ds.row_of(ds.ids[static_cast<std::size_t>(at + i)]);
        const FeatureMap fm = to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
        const TapForward tf = forward_with_taps(model, fm);
        for (int l = 0; l < params.num_layers; ++l) {
            MatX& layer = rec.layers[static_cast<std::size_t>(l)];
            const MatX& tap = tf.taps[static_cast<std::size_t>(first_tap + l)];
            if (layer.size() == 0) layer.resize(ds.size(), tap.cols());
            layer.middleRows(at, n) = tap;
        }
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Majority rule
// ---------------------------------------------------------------------------
namespace {

int auto_min_pts(const SiftParams& p, std::size_t class_size) {
    if (p.min_pts > 0) return p.min_pts;
    return std::max(5, static_cast<int>(std::lround(0.01 * static_cast<double>(class_size))));
}

Real quantile_nearest_rank(std::vector<Real> v, Real q) {
    std::sort(v.begin(), v.end());
    const auto n = static_cast<double>(v.size());
    auto idx = static_cast<std::ptrdiff_t>(std::ceil(q * n)) - 1;
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(v.size()) - 1);
    return v[static_cast<std::size_t>(idx)];
}

}  // namespace

ClassSift majority_candidates(const ActivationRecord& rec, int cls, const SiftParams& params) {
    params.validate();
    ClassSift out;
    out.cls = cls;
    const std::vector<int> rows = rec.class_rows(cls);
    if (rows.empty()) throw ParamError("majority_candidates: class empty");
    const int min_pts = auto_min_pts(params, rows.size());

    std::vector<int> survivors = rows;  // rows still in every layer's largest cluster
    for (const MatX& layer : rec.layers) {
        MatX pts(static_cast<Eigen::Index>(rows.size()), layer.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = layer.row(rows[i]);

        Real eps = params.eps_override;
        if (eps <= 0) {
            const VecX kd = kth_neighbor_distance(pts, std::min<int>(min_pts, static_cast<int>(rows.size()) - 1));
            eps = quantile_nearest_rank(std::vector<Real>(kd.data(), kd.data() + kd.size()),
                                        params.eps_quantile);
        }
        const std::vector<int> labels = dbscan(pts, eps, min_pts);
        const int k = *std::max_element(labels.begin(), labels.end()) + 1;
        if (k <= 0) {
            out.empty_layer = true;
            out.candidates.clear();
            return out;
        }
        std::vector<int> sizes(static_cast<std::size_t>(k), 0);
        for (int l : labels)
            if (l >= 0) ++sizes[static_cast<std::size_t>(l)];
        const int largest = static_cast<int>(
            std::max_element(sizes.begin(), sizes.end()) - sizes.begin());

        std::vector<int> keep;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (labels[i] == largest) keep.push_back(rows[i]);
        std::vector<int> merged;
        std::set_intersection(survivors.begin(), survivors.end(), keep.begin(), keep.end(),
                              std::back_inserter(merged));
        survivors = std::move(merged);
    }
    out.candidates.reserve(survivors.size());
    for (int r : survivors) out.candidates.push_back(rec.ids[static_cast<std::size_t>(r)]);
    std::sort(out.candidates.begin(), out.candidates.end());
    return out;
}

// ---------------------------------------------------------------------------
// Consistency rule
// ---------------------------------------------------------------------------
namespace {

// m nearest rows to `row` in `layer` (self excluded), ties by row index.
std::vector<int> nearest_rows(const MatX& layer, int row, int m) {
    const Eigen::Index n = layer.rows();
    VecX d = (layer.rowwise() - layer.row(row)).rowwise().squaredNorm();
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(n) - 1);
    for (Eigen::Index i = 0; i < n; ++i)
        if (i != row) idx.push_back(static_cast<int>(i));
    std::partial_sort(idx.begin(), idx.begin() + m, idx.end(), [&](int a, int b) {
        if (d(a) != d(b)) return d(a) < d(b);
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(m));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<int> consistent_rows(const ActivationRecord& rec, int row, int m) {
    std::vector<int> acc = nearest_rows(rec.layers[0], row, m);
    for (std::size_t l = 1; l < rec.layers.size(); ++l) {
        const std::vector<int> nl = nearest_rows(rec.layers[l], row, m);
        std::vector<int> merged;
        std::set_intersection(acc.begin(), acc.end(), nl.begin(), nl.end(),
                              std::back_inserter(merged));
        acc = std::move(merged);
        if (acc.empty()) break;
    }
    return acc;
}

}  // namespace

int consistent_neighbor_count(int id, const ActivationRecord& rec, int cls,
                              const SiftParams& params) {
    params.validate();
    if (params.neighbors >= static_cast<int>(rec.ids.size()))
        throw ParamError("neighbor count must be smaller than the dataset");
    const auto it = rec.row_of.find(id);
    if (it == rec.row_of.end()) throw LookupError("sample id not in activation record");
    int count = 0;
    for (int r : consistent_rows(rec, it->second, params.neighbors))
        if (rec.labels(r) == cls) ++count;
    return count;
}

// ---------------------------------------------------------------------------
// Full sifting
// ---------------------------------------------------------------------------
SiftResult sift_seeds(const ActivationRecord& rec, const SiftParams& params) {
    params.validate();
    if (params.neighbors >= static_cast<int>(rec.ids.size()))
        throw ParamError("neighbor count must be smaller than the dataset");
    SiftResult result;
    result.params = params;
    for (int cls = 0; cls < rec.num_classes; ++cls) {
        const std::size_t class_size = rec.class_rows(cls).size();
        if (class_size < static_cast<std::size_t>(std::ceil(1.0 / params.alpha)))
            throw ParamError("class " + std::to_string(cls) + " smaller than 1/alpha");
        ClassSift cs = majority_candidates(rec, cls, params);
        cs.neighbor_counts.resize(cs.candidates.size());
        for (std::size_t i = 0; i < cs.candidates.size(); ++i) {
            const int row = rec.row_of.at(cs.candidates[i]);
            int count = 0;
            for (int r : consistent_rows(rec, row, params.neighbors))
                if (rec.labels(r) == cls) ++count;
            cs.neighbor_counts[i] = count;
        }
        const std::size_t want = floor_count(params.alpha, class_size);
        std::vector<std::size_t> order(cs.candidates.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (cs.neighbor_counts[a] != cs.neighbor_counts[b])
                return cs.neighbor_counts[a] > cs.neighbor_counts[b];
            return cs.candidates[a] < cs.candidates[b];
        });
        const std::size_t take = std::min(want, cs.candidates.size());
        cs.shortfall = take < want;
        cs.seeds.reserve(take);
        for (std::size_t i = 0; i < take; ++i) cs.seeds.push_back(cs.candidates[order[i]]);
        result.per_class.push_back(std::move(cs));
    }
    return result;
}

SiftResult sift_seeds(const TapModel& model, const LabeledDataset& ds, const SiftParams& params) {
    const ActivationRecord rec = record_activations(model, ds, params);
    return sift_seeds(rec, params);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------
nlohmann::json SiftResult::to_json() const {
    nlohmann::json j;
    j["params"] = {{"num_layers", params.num_layers},
                   {"neighbors", params.neighbors},
                   {"alpha", params.alpha},
                   {"min_pts", params.min_pts},
                   {"eps_quantile", params.eps_quantile},
                   {"eps_override", params.eps_override}};
    j["classes"] = nlohmann::json::array();
    for (const auto& c : per_class) {
        j["classes"].push_back({{"class", c.cls},
                                {"seeds", c.seeds},
                                {"candidates", c.candidates},
                                {"neighbor_counts", c.neighbor_counts},
                                {"shortfall", c.shortfall},
                                {"empty_layer", c.empty_layer}});
    }
    return j;
}

SiftResult SiftResult::from_json(const nlohmann::json& j) {
    SiftResult r;
    const auto& p = j.at("params");
    r.params.num_layers = p.at("num_layers").get<int>();
    r.params.neighbors = p.at("neighbors").get<int>();
    r.params.alpha = p.at("alpha").get<double>();
    r.params.min_pts = p.at("min_pts").get<int>();
    r.params.eps_quantile = p.at("eps_quantile").get<Real>();
    r.params.eps_override = p.at("eps_override").get<Real>();
    for (const auto& c : j.at("classes")) {
        ClassSift cs;
        cs.cls = c.at("class").get<int>();
        cs.seeds = c.at("seeds").get<std::vector<int>>();
        cs.candidates = c.at("candidates").get<std::vector<int>>();
        cs.neighbor_counts = c.at("neighbor_counts").get<std::vector<int>>();
        cs.shortfall = c.at("shortfall").get<bool>();
        cs.empty_layer = c.at("empty_layer").get<bool>();
        r.per_class.push_back(std::move(cs));
    }
    return r;
}

void save_sift_result(const fs::path& path, const SiftResult& r) { write_json(path, r.to_json()); }

SiftResult load_sift_result(const fs::path& path) { return SiftResult::from_json(read_json(path)); }

}  // namespace trustcore
