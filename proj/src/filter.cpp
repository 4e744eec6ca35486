#include "trustcore/filter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trustcore {

nlohmann::json ChannelPartition::to_json() const {
    nlohmann::json j;
    j["keep_fraction"] = keep_fraction;
    j["untrusted"] = untrusted;
    j["trusted"] = trusted;
    j["warnings"] = warnings;
    j["mask_values"] = nlohmann::json::array();
    for (const auto& m : mask_values)
        j["mask_values"].push_back(std::vector<Real>(m.data(), m.data() + m.size()));
    return j;
}

ChannelPartition ChannelPartition::from_json(const nlohmann::json& j) {
    ChannelPartition p;
    p.keep_fraction = j.at("keep_fraction").get<double>();
    p.untrusted = j.at("untrusted").get<std::vector<std::vector<int>>>();
    p.trusted = j.at("trusted").get<std::vector<std::vector<int>>>();
    p.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& mv : j.at("mask_values")) {
        const auto v = mv.get<std::vector<Real>>();
        p.mask_values.push_back(Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    return p;
}

void ChannelPartition::validate_against(const Encoder& e) const {
    if (num_layers() != e.num_blocks()) throw ShapeError("partition layer count mismatch");
    for (int l = 0; l < num_layers(); ++l) {
        const int k = e.cfg.block_channels[static_cast<std::size_t>(l)];
        std::vector<char> seen(static_cast<std::size_t>(k), 0);
        for (int c : untrusted[static_cast<std::size_t>(l)]) {
            if (c < 0 || c >= k) throw ShapeError("untrusted channel index out of range");
            seen[static_cast<std::size_t>(c)] = 1;
        }
        for (int c : trusted[static_cast<std::size_t>(l)]) {
            if (c < 0 || c >= k) throw ShapeError("trusted channel index out of range");
            if (seen[static_cast<std::size_t>(c)]) throw ShapeError("channel in both sets");
            seen[static_cast<std::size_t>(c)] = 1;
        }
        for (char s : seen)
            if (!s) throw ShapeError("partition does not cover every channel");
    }
}

// ---------------------------------------------------------------------------
// Selective unlearning
// ---------------------------------------------------------------------------
Encoder selective_unlearn(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
                          const FilterParams& params) {
    params.validate();
    Encoder enc = encoder;
    Optimizer opt(OptimizerKind::sgd, params.unlearn_lr, Real(0));
    typename Encoder::Grads eg;
    typename Head::Grads hg;  // computed but never applied
    Rng base(derive_seed(params.rng_seed, "unlearn"));
    std::vector<int> order = ds.ids;

    for (int epoch = 0;; ++epoch) {
        if (evaluate_accuracy(enc, head, ds) < params.acc_min) return enc;
        if (epoch >= params.unlearn_max_epochs)
            throw UnlearnStallError("training accuracy never dropped below threshold");
        Rng erng = base.fork("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        for (std::size_t at = 0; at < order.size();
             at += static_cast<std::size_t>(params.unlearn_batch)) {
            const std::size_t n = std::min<std::size_t>(
                static_cast<std::size_t>(params.unlearn_batch), order.size() - at);
            std::vector<int> rows(n);
            VecXi labels(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                rows[i] = ds.row_of(order[at + i]);
                labels(static_cast<Eigen::Index>(i)) = ds.labels(rows[i]);
            }
            const FeatureMap fm =
                to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
            typename Encoder::Cache ec;
            const MatX emb = enc.forward(fm, /*train_norm=*/false, &ec);
            typename Head::Cache hc;
            const MatX logits = head.forward(emb, &hc);
            MatX dlogits;
            // Ascent: descend the negated loss.
            const Real loss = cross_entropy_backward(logits, labels, dlogits, Real(-1));
            if (!std::isfinite(loss)) throw TrainingDivergedError("unlearning diverged");
            hg.init(head);
            MatX demb;
            head.backward(hc, dlogits, hg, &demb);
            eg.init(enc, false);
            enc.backward(ec, demb, eg);
            // Bounded ascent steps: unbounded cross-entropy ascent compounds
            // through the stacked normalization scales and overflows before
            // the epoch-end accuracy check can fire.
            for (auto* group : {&eg.dgamma, &eg.dbeta}) {
                for (MatX& g : *group) {
                    const Real norm = g.norm();
                    if (norm > params.unlearn_grad_clip) g *= params.unlearn_grad_clip / norm;
                }
            }
            const auto slots =
                collect_slots(&enc, &eg, nullptr, nullptr, {Trainable::theta_norm}, nullptr);
            opt.step(slots);
        }
    }
}

// ---------------------------------------------------------------------------
// Mask recovery
// ---------------------------------------------------------------------------
std::vector<VecX> recover_mask(const Encoder& unlearned, const Head& head,
                               const LabeledDataset& ds, const std::vector<int>& pool_ids,
                               const FilterParams& params, const MaskObserver& observer) {
    params.validate();
    if (pool_ids.empty()) throw ParamError("recover_mask: empty clean pool");
    Encoder enc = unlearned;
    enc.engage_masks();
    Optimizer opt(OptimizerKind::adam, params.recover_lr, Real(0.9));
    typename Encoder::Grads eg;
    typename Head::Grads hg;
    Rng base(derive_seed(params.rng_seed, "recover"));
    std::vector<int> order = pool_ids;

    for (int epoch = 0; epoch < params.recover_epochs; ++epoch) {
        Rng erng = base.fork("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        for (std::size_t at = 0; at < order.size();
             at += static_cast<std::size_t>(params.recover_batch)) {
            const std::size_t n = std::min<std::size_t>(
                static_cast<std::size_t>(params.recover_batch), order.size() - at);
            std::vector<int> rows(n);
            VecXi labels(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                rows[i] = ds.row_of(order[at + i]);
                labels(static_cast<Eigen::Index>(i)) = ds.labels(rows[i]);
            }
            const FeatureMap fm =
                to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
            typename Encoder::Cache ec;
            const MatX emb = enc.forward(fm, /*train_norm=*/false, &ec);
            typename Head::Cache hc;
            const MatX logits = head.forward(emb, &hc);
            MatX dlogits;
            const Real loss = cross_entropy_backward(logits, labels, dlogits);
            if (!std::isfinite(loss)) throw TrainingDivergedError("mask recovery diverged");
            hg.init(head);
            MatX demb;
            head.backward(hc, dlogits, hg, &demb);
            eg.init(enc, false);
            enc.backward(ec, demb, eg);
            const auto slots =
                collect_slots(&enc, &eg, nullptr, nullptr, {Trainable::masks}, nullptr);
            opt.step(slots);
            for (auto& m : enc.masks)
                m = m.cwiseMax(Real(0)).cwiseMin(Real(1));
            if (observer) observer(enc.masks);
        }
    }
    std::vector<VecX> out;
    out.reserve(enc.masks.size());
    for (const auto& m : enc.masks) out.push_back(m.col(0));
    return out;
}

// ---------------------------------------------------------------------------
// Thresholding and application
// ---------------------------------------------------------------------------
ChannelPartition threshold_channels(const std::vector<VecX>& masks, const FilterParams& params) {
    params.validate();
    ChannelPartition part;
    part.keep_fraction = params.keep_fraction;
    for (std::size_t l = 0; l < masks.size(); ++l) {
        const VecX& m = masks[l];
        const int k = static_cast<int>(m.size());
        const int keep = static_cast<int>(ceil_count(params.keep_fraction, static_cast<std::size_t>(k)));
        const int cut = k - keep;
        std::vector<int> order(static_cast<std::size_t>(k));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (m(a) != m(b)) return m(a) < m(b);
            return a < b;
        });
        if (cut > 0 && cut < k && m(order[static_cast<std::size_t>(cut - 1)]) ==
                                      m(order[static_cast<std::size_t>(cut)]))
            part.warnings.push_back("layer " + std::to_string(l) +
                                    ": mask tie spans the cut, resolved by channel index");
        std::vector<int> psi(order.begin(), order.begin() + cut);
        std::vector<int> chi(order.begin() + cut, order.end());
        std::sort(psi.begin(), psi.end());
        std::sort(chi.begin(), chi.end());
        part.untrusted.push_back(std::move(psi));
        part.trusted.push_back(std::move(chi));
        part.mask_values.push_back(m);
    }
    return part;
}

Encoder apply_partition(const Encoder& original, const ChannelPartition& partition,
                        PartitionMode mode, std::uint64_t rng_seed) {
    partition.validate_against(original);
    Encoder enc = original;
    enc.release_masks();
    for (int l = 0; l < enc.num_blocks(); ++l) {
        const auto li = static_cast<std::size_t>(l);
        auto& conv = enc.convs[li];
        auto& norm = enc.norms[li];
        Rng rng(derive_seed(rng_seed, "reinit-layer", static_cast<std::uint64_t>(l)));
        const Real stddev =
            std::sqrt(Real(2) / static_cast<Real>(conv.weight.rows()));
        for (int c : partition.untrusted[li]) {
            if (mode == PartitionMode::prune) {
                conv.weight.col(c).setZero();
                norm.gamma(c, 0) = 0;
                norm.beta(c, 0) = 0;
            } else {
                for (Eigen::Index r = 0; r < conv.weight.rows(); ++r)
                    conv.weight(r, c) = rng.normal() * stddev;
                norm.gamma(c, 0) = 1;
                norm.beta(c, 0) = 0;
                norm.run_mean(c, 0) = 0;
                norm.run_var(c, 0) = 1;
            }
        }
    }
    return enc;
}

}  // namespace trustcore
