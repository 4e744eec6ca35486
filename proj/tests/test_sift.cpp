#include "trustcore/sift.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace trustcore;

namespace {

// Independent quadratic-time density clustering used as the oracle. Same
// parameter meaning (min_pts counts the point itself), different code path.
std::vector<int> dbscan_oracle(const MatX& pts, Real eps, int min_pts) {
    const int n = static_cast<int>(pts.rows());
    std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
    std::vector<int> degree(n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double d2 = 0;
            for (Eigen::Index k = 0; k < pts.cols(); ++k) {
                const double d = static_cast<double>(pts(i, k)) - pts(j, k);
                d2 += d * d;
            }
            if (d2 <= static_cast<double>(eps) * eps) {
                adj[i][j] = true;
                ++degree[i];
            }
        }
    std::vector<int> label(n, -2);
    int cluster = 0;
    for (int i = 0; i < n; ++i) {
        if (label[i] != -2) continue;
        if (degree[i] < min_pts) {
            label[i] = -1;
            continue;
        }
        std::vector<int> stack = {i};
        label[i] = cluster;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            if (degree[p] < min_pts) continue;
            for (int q = 0; q < n; ++q) {
                if (!adj[p][q]) continue;
                if (label[q] == -1) label[q] = cluster;
                if (label[q] == -2) {
                    label[q] = cluster;
                    stack.push_back(q);
                }
            }
        }
        ++cluster;
    }
    return label;
}

// Partitions agree up to cluster renumbering; noise must match exactly.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) return false;
    std::map<int, int> fwd, bwd;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if ((a[i] == -1) != (b[i] == -1)) return false;
        if (a[i] == -1) continue;
        if (fwd.count(a[i]) && fwd[a[i]] != b[i]) return false;
        if (bwd.count(b[i]) && bwd[b[i]] != a[i]) return false;
        fwd[a[i]] = b[i];
        bwd[b[i]] = a[i];
    }
    return true;
}

// Synthetic activation record: per layer, per class, points drawn around
// class centers; a fraction of one class sits in a far-away blob.
ActivationRecord synthetic_record(int layers, int classes, int per_class, int dim,
                                  int outlier_class, int outliers, Real outlier_shift,
                                  std::uint64_t seed) {
    ActivationRecord rec;
    rec.num_classes = classes;
    const int n = classes * per_class;
    rec.labels.resize(n);
    Rng rng(seed);
    for (int l = 0; l < layers; ++l) {
        MatX m(n, dim);
        int row = 0;
        for (int c = 0; c < classes; ++c) {
            for (int s = 0; s < per_class; ++s, ++row) {
                for (int d = 0; d < dim; ++d)
                    m(row, d) = static_cast<Real>(c) * 10 + static_cast<Real>(rng.normal());
                if (c == outlier_class && s < outliers) m.row(row).array() += outlier_shift;
                if (l == 0) {
                    rec.labels(row) = c;
                    rec.ids.push_back(row);
                    rec.row_of[row] = row;
                }
            }
        }
        rec.layers.push_back(std::move(m));
    }
    return rec;
}

}  // namespace

TEST_CASE("dbscan matches the quadratic oracle on random point sets") {
    Rng rng(41);
    for (int trial = 0; trial < 12; ++trial) {
        const int n = 30 + rng.uniform_int(50);
        const int d = 2 + rng.uniform_int(3);
        MatX pts(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                pts(i, j) = static_cast<Real>(rng.normal()) +
                            (rng.uniform() < 0.5 ? Real(0) : Real(4));
        const Real eps = 0.5f + static_cast<Real>(rng.uniform());
        const int min_pts = 3 + rng.uniform_int(4);
        REQUIRE(same_partition(dbscan(pts, eps, min_pts), dbscan_oracle(pts, eps, min_pts)));
    }
}

TEST_CASE("majority rule: 95/5 two-blob class keeps only the big blob") {
    // 95 points near the class center, 5 in a far blob, identical geometry in
    // all layers.
    const ActivationRecord rec = synthetic_record(3, 2, 100, 4, /*outlier_class=*/0,
                                                  /*outliers=*/5, /*shift=*/50.0f, 7);
    SiftParams params;
    params.min_pts = 5;
    params.eps_override = 3.0f;  // hand-set: blob diameter ~ a few sigma
    const ClassSift cs = majority_candidates(rec, 0, params);
    CHECK(cs.candidates.size() == 95);
    for (int id : cs.candidates) CHECK(id >= 5);  // the 5 outliers are rows 0..4
}

TEST_CASE("majority rule: single cluster keeps the whole class; L=1 degenerates") {
    const ActivationRecord rec = synthetic_record(3, 2, 60, 3, 0, 0, 0, 11);
    SiftParams params;
    params.eps_override = 4.0f;
    params.min_pts = 5;
    CHECK(majority_candidates(rec, 1, params).candidates.size() == 60);

    ActivationRecord one_layer = rec;
    one_layer.layers.resize(1);
    SiftParams p1 = params;
    p1.num_layers = 1;
    CHECK(majority_candidates(one_layer, 1, p1).candidates.size() == 60);
}

TEST_CASE("majority rule: all-noise layer reports the empty-candidates condition") {
    const ActivationRecord rec = synthetic_record(2, 2, 30, 3, 0, 0, 0, 13);
    SiftParams params;
    params.eps_override = 1e-6f;  // nobody has min_pts neighbors
    params.min_pts = 5;
    const ClassSift cs = majority_candidates(rec, 0, params);
    CHECK(cs.empty_layer);
    CHECK(cs.candidates.empty());
}

TEST_CASE("consistency rule: closed-form cases") {
    // Identical activations across layers, all neighbors same class -> m.
    ActivationRecord rec = synthetic_record(1, 1, 40, 3, 0, 0, 0, 17);
    rec.layers.push_back(rec.layers[0]);
    rec.layers.push_back(rec.layers[0]);
    SiftParams params;
    params.neighbors = 7;
    CHECK(consistent_neighbor_count(0, rec, 0, params) == 7);

    // Disjoint neighbor sets between layers -> 0. Hand-placed line points:
    // layer 1 puts rows 1..3 next to row 0, layer 2 puts rows 4..6 there.
    ActivationRecord rec2;
    rec2.num_classes = 1;
    const int n2 = 10;
    rec2.labels = VecXi::Zero(n2);
    for (int i = 0; i < n2; ++i) {
        rec2.ids.push_back(i);
        rec2.row_of[i] = i;
    }
    MatX l1 = MatX::Zero(n2, 1), l2 = MatX::Zero(n2, 1);
    const Real far1[] = {0, 1.0f, 1.1f, 1.2f, 50, 60, 70, 80, 90, 100};
    const Real far2[] = {0, 50, 60, 70, 1.0f, 1.1f, 1.2f, 80, 90, 100};
    for (int i = 0; i < n2; ++i) {
        l1(i, 0) = far1[i];
        l2(i, 0) = far2[i];
    }
    rec2.layers = {l1, l2};
    SiftParams p2;
    p2.neighbors = 3;
    p2.num_layers = 2;
    CHECK(consistent_neighbor_count(0, rec2, 0, p2) == 0);

    CHECK_THROWS_AS(consistent_neighbor_count(0, rec, 0, [] {
                        SiftParams p;
                        p.neighbors = 40;
                        return p;
                    }()),
                    ParamError);
}

TEST_CASE("consistency rule: 60-point two-layer instance matches brute force") {
    Rng rng(23);
    ActivationRecord rec;
    rec.num_classes = 3;
    const int n = 60;
    rec.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        rec.labels(i) = i % 3;
        rec.ids.push_back(i + 1000);  // non-dense ids on purpose
        rec.row_of[i + 1000] = i;
    }
    for (int l = 0; l < 2; ++l) {
        MatX m(n, 5);
        for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = static_cast<Real>(rng.normal());
        rec.layers.push_back(std::move(m));
    }
    SiftParams params;
    params.neighbors = 9;
    params.num_layers = 2;

    for (int row = 0; row < n; ++row) {
        // brute force: full pairwise sort per layer
        std::vector<std::set<int>> neigh;
        for (const MatX& layer : rec.layers) {
            std::vector<std::pair<double, int>> d;
            for (int j = 0; j < n; ++j) {
                if (j == row) continue;
                double s = 0;
                for (int k = 0; k < 5; ++k) {
                    const double diff =
                        static_cast<double>(layer(row, k)) - static_cast<double>(layer(j, k));
                    s += diff * diff;
                }
                d.emplace_back(s, j);
            }
            std::sort(d.begin(), d.end());
            std::set<int> s;
            for (int k = 0; k < params.neighbors; ++k) s.insert(d[static_cast<std::size_t>(k)].second);
            neigh.push_back(std::move(s));
        }
        int expect = 0;
        for (int j : neigh[0])
            if (neigh[1].count(j) && rec.labels(j) == rec.labels(row)) ++expect;
        REQUIRE(consistent_neighbor_count(row + 1000, rec, rec.labels(row), params) == expect);
    }
}

TEST_CASE("sift_seeds: counts contract, containment, permutation invariance") {
    const ActivationRecord rec = synthetic_record(3, 4, 120, 4, 1, 6, 40.0f, 29);
    SiftParams params;
    params.alpha = 0.05f;
    params.neighbors = 15;
    params.min_pts = 5;
    const SiftResult res = sift_seeds(rec, params);
    REQUIRE(res.per_class.size() == 4);
    for (const auto& cs : res.per_class) {
        CHECK(!cs.shortfall);
        CHECK(cs.seeds.size() == 6);  // floor(0.05 * 120)
        // seeds within candidates within the class
        for (int id : cs.seeds)
            CHECK(std::find(cs.candidates.begin(), cs.candidates.end(), id) !=
                  cs.candidates.end());
        for (int id : cs.candidates) CHECK(rec.labels(rec.row_of.at(id)) == cs.cls);
    }

    // permute rows: same seed ids selected
    ActivationRecord shuffled;
    shuffled.num_classes = rec.num_classes;
    std::vector<int> perm(rec.ids.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    Rng rng(5);
    rng.shuffle(perm);
    shuffled.labels.resize(rec.labels.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        shuffled.ids.push_back(rec.ids[static_cast<std::size_t>(perm[i])]);
        shuffled.labels(static_cast<Eigen::Index>(i)) = rec.labels(perm[i]);
        shuffled.row_of[shuffled.ids.back()] = static_cast<int>(i);
    }
    for (const MatX& layer : rec.layers) {
        MatX m(layer.rows(), layer.cols());
        for (std::size_t i = 0; i < perm.size(); ++i)
            m.row(static_cast<Eigen::Index>(i)) = layer.row(perm[i]);
        shuffled.layers.push_back(std::move(m));
    }
    const SiftResult res2 = sift_seeds(shuffled, params);
    for (int c = 0; c < 4; ++c) {
        std::vector<int> a = res.for_class(c).seeds;
        std::vector<int> b = res2.for_class(c).seeds;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        REQUIRE(a == b);
    }
}

TEST_CASE("sift_seeds: minority blob never contributes seeds at <= 30%") {
    for (const int outliers : {10, 20, 30}) {  // of 100 per class
        const ActivationRecord rec =
            synthetic_record(3, 3, 100, 4, /*outlier_class=*/2, outliers, 35.0f, 31);
        SiftParams params;
        params.alpha = 0.05f;
        params.neighbors = 12;
        params.min_pts = 5;
        const SiftResult res = sift_seeds(rec, params);
        for (int id : res.for_class(2).seeds) {
            // outlier rows for class 2 start at row 200
            CHECK((id < 200 || id >= 200 + outliers));
        }
    }
}

TEST_CASE("sift_seeds: preconditions") {
    const ActivationRecord rec = synthetic_record(2, 2, 30, 3, 0, 0, 0, 37);
    SiftParams params;
    params.alpha = 0.01f;  // needs class size >= 100
    CHECK_THROWS_AS(sift_seeds(rec, params), ParamError);
    params.alpha = 0.1f;
    params.neighbors = 60;  // m >= dataset
    CHECK_THROWS_AS(sift_seeds(rec, params), ParamError);
}

TEST_CASE("sift result: json round-trip") {
    const ActivationRecord rec = synthetic_record(2, 2, 40, 3, 0, 0, 0, 39);
    SiftParams params;
    params.alpha = 0.1f;
    params.neighbors = 8;
    params.min_pts = 4;
    const SiftResult res = sift_seeds(rec, params);
    const SiftResult back = SiftResult::from_json(res.to_json());
    REQUIRE(back.per_class.size() == res.per_class.size());
    for (std::size_t i = 0; i < res.per_class.size(); ++i) {
        CHECK(back.per_class[i].seeds == res.per_class[i].seeds);
        CHECK(back.per_class[i].candidates == res.per_class[i].candidates);
        CHECK(back.per_class[i].neighbor_counts == res.per_class[i].neighbor_counts);
    }
}
