#include "trustcore/train.hpp"

#include <algorithm>
#include <cmath>

namespace trustcore {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------
Optimizer::Optimizer(OptimizerKind kind, Real lr, Real momentum)
    : kind_(kind), lr_(lr), momentum_(momentum) {}

void Optimizer::step(const std::vector<ParamSlot>& slots) {
    if (m_.size() < slots.size()) m_.resize(slots.size());
    if (kind_ == OptimizerKind::adam && v_.size() < slots.size()) v_.resize(slots.size());
    ++t_;
    const Real bc1 = Real(1) - std::pow(beta1_, static_cast<Real>(t_));
    const Real bc2 = Real(1) - std::pow(beta2_, static_cast<Real>(t_));

    for (std::size_t s = 0; s < slots.size(); ++s) {
        const ParamSlot& slot = slots[s];
        MatX& w = *slot.value;
        const MatX& g = *slot.grad;
        MatX& m = m_[s];
        if (m.size() == 0) m = MatX::Zero(w.rows(), w.cols());

        auto sgd_update = [&](auto wblk, auto gblk, auto mblk) {
            mblk = momentum_ * mblk + gblk;
            wblk -= lr_ * mblk;
        };
        auto adam_update = [&](auto wblk, auto gblk, auto mblk, auto vblk) {
            mblk = beta1_ * mblk + (Real(1) - beta1_) * gblk;
            vblk = beta2_ * vblk.array().matrix() +
                   (Real(1) - beta2_) * gblk.array().square().matrix();
            const auto mhat = (mblk / bc1).array();
            const auto vhat = (vblk / bc2).array();
            wblk -= (lr_ * mhat / (vhat.sqrt() + eps_)).matrix();
        };

        if (kind_ == OptimizerKind::sgd) {
            switch (slot.subset) {
                case ParamSlot::Subset::none:
                    sgd_update(w.block(0, 0, w.rows(), w.cols()),
                               g.block(0, 0, g.rows(), g.cols()),
                               m.block(0, 0, m.rows(), m.cols()));
                    break;
                case ParamSlot::Subset::cols:
                    for (int j : slot.index) sgd_update(w.col(j), g.col(j), m.col(j));
                    break;
                case ParamSlot::Subset::rows:
                    for (int i : slot.index) sgd_update(w.row(i), g.row(i), m.row(i));
                    break;
            }
        } else {
            MatX& v = v_[s];
            if (v.size() == 0) v = MatX::Zero(w.rows(), w.cols());
            switch (slot.subset) {
                case ParamSlot::Subset::none:
                    adam_update(w.block(0, 0, w.rows(), w.cols()),
                                g.block(0, 0, g.rows(), g.cols()),
                                m.block(0, 0, m.rows(), m.cols()),
                                v.block(0, 0, v.rows(), v.cols()));
                    break;
                case ParamSlot::Subset::cols:
                    for (int j : slot.index)
                        adam_update(w.col(j), g.col(j), m.col(j), v.col(j));
                    break;
                case ParamSlot::Subset::rows:
                    for (int i : slot.index)
                        adam_update(w.row(i), g.row(i), m.row(i), v.row(i));
                    break;
            }
        }
    }
}

std::vector<ParamSlot> collect_slots(Encoder* encoder, typename Encoder::Grads* egrads,
                                     Head* head, typename Head::Grads* hgrads,
                                     const std::set<Trainable>& selector,
                                     const ChannelSubset* psi) {
    std::vector<ParamSlot> slots;
    const bool want_phi = selector.count(Trainable::phi) > 0;
    const bool want_all_enc = selector.count(Trainable::all_encoder) > 0;
    const bool want_norm = selector.count(Trainable::theta_norm) > 0;
    const bool want_masks = selector.count(Trainable::masks) > 0;
    const bool want_psi = selector.count(Trainable::psi) > 0;
    if (want_psi && !psi) throw ParamError("psi selector requires a channel partition");
    if ((want_all_enc || want_norm || want_masks || want_psi) && !encoder)
        throw ParamError("encoder groups selected without an encoder");
    if (want_phi && !head) throw ParamError("phi selected without a head");

    if (want_phi) {
        slots.push_back({&head->l1.weight, &hgrads->dw1, ParamSlot::Subset::none, {}});
        slots.push_back({&head->l1.bias, &hgrads->db1, ParamSlot::Subset::none, {}});
        slots.push_back({&head->l2.weight, &hgrads->dw2, ParamSlot::Subset::none, {}});
        slots.push_back({&head->l2.bias, &hgrads->db2, ParamSlot::Subset::none, {}});
        slots.push_back({&head->l3.weight, &hgrads->dw3, ParamSlot::Subset::none, {}});
        slots.push_back({&head->l3.bias, &hgrads->db3, ParamSlot::Subset::none, {}});
    }
    if (encoder) {
        for (int l = 0; l < encoder->num_blocks(); ++l) {
            const auto li = static_cast<std::size_t>(l);
            if (want_all_enc) {
                slots.push_back({&encoder->convs[li].weight, &egrads->dweight[li],
                                 ParamSlot::Subset::none, {}});
            } else if (want_psi && !(*psi)[li].empty()) {
                slots.push_back({&encoder->convs[li].weight, &egrads->dweight[li],
                                 ParamSlot::Subset::cols, (*psi)[li]});
            }
            if (want_all_enc || want_norm) {
                slots.push_back({&encoder->norms[li].gamma, &egrads->dgamma[li],
                                 ParamSlot::Subset::none, {}});
                slots.push_back({&encoder->norms[li].beta, &egrads->dbeta[li],
                                 ParamSlot::Subset::none, {}});
            } else if (want_psi && !(*psi)[li].empty()) {
                slots.push_back({&encoder->norms[li].gamma, &egrads->dgamma[li],
                                 ParamSlot::Subset::rows, (*psi)[li]});
                slots.push_back({&encoder->norms[li].beta, &egrads->dbeta[li],
                                 ParamSlot::Subset::rows, (*psi)[li]});
            }
            if (want_masks) {
                if (!encoder->masks_engaged()) throw ParamError("masks selected but not engaged");
                slots.push_back({&encoder->masks[li], &egrads->dmask[li],
                                 ParamSlot::Subset::none, {}});
            }
        }
    }
    return slots;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------
namespace {

constexpr int kEvalChunk = 256;

std::vector<int> all_ids_or(const LabeledDataset& ds, const std::vector<int>& ids) {
    if (!ids.empty()) return ids;
    return ds.ids;
}

}  // namespace

MatX embed_dataset(const Encoder& encoder, const LabeledDataset& ds,
                   const std::vector<int>& ids_in) {
    const std::vector<int> ids = all_ids_or(ds, ids_in);
    MatX emb(static_cast<Eigen::Index>(ids.size()), encoder.embedding_dim());
    for (std::size_t at = 0; at < ids.size(); at += kEvalChunk) {
        const std::size_t n = std::min<std::size_t>(kEvalChunk, ids.size() - at);
        std::vector<int> rows(n);
        for (std::size_t i = 0; i < n; ++i) rows[i] = ds.row_of(ids[at + i]);
        const FeatureMap fm = to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
        emb.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(n)) =
            encoder.forward_eval(fm, nullptr);
    }
    if (!emb.allFinite()) throw TrainingDivergedError("non-finite embeddings");
    return emb;
}

VecX per_sample_losses(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
                       const std::vector<int>& ids_in) {
    const std::vector<int> ids = all_ids_or(ds, ids_in);
    VecX losses(static_cast<Eigen::Index>(ids.size()));
    for (std::size_t at = 0; at < ids.size(); at += kEvalChunk) {
        const std::size_t n = std::min<std::size_t>(kEvalChunk, ids.size() - at);
        std::vector<int> rows(n);
        VecXi labels(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            rows[i] = ds.row_of(ids[at + i]);
            labels(static_cast<Eigen::Index>(i)) = ds.labels(rows[i]);
        }
        const FeatureMap fm = to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
        const MatX emb = encoder.forward_eval(fm, nullptr);
        const MatX logits = head.forward(emb, nullptr);
        losses.segment(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(n)) =
            cross_entropy_per_sample(logits, labels);
    }
    return losses;
}

VecX per_sample_losses(const TapModel& model, const LabeledDataset& ds,
                       const std::vector<int>& ids) {
    return per_sample_losses(model.encoder, model.head, ds, ids);
}

VecXi predict(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
              const std::vector<int>& ids_in) {
    const std::vector<int> ids = all_ids_or(ds, ids_in);
    VecXi pred(static_cast<Eigen::Index>(ids.size()));
    for (std::size_t at = 0; at < ids.size(); at += kEvalChunk) {
        const std::size_t n = std::min<std::size_t>(kEvalChunk, ids.size() - at);
        std::vector<int> rows(n);
        for (std::size_t i = 0; i < n; ++i) rows[i] = ds.row_of(ids[at + i]);
        const FeatureMap fm = to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
        const MatX logits = head.forward(encoder.forward_eval(fm, nullptr), nullptr);
        for (std::size_t i = 0; i < n; ++i) {
            Eigen::Index arg;
            logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
            pred(static_cast<Eigen::Index>(at + i)) = static_cast<int>(arg);
        }
    }
    return pred;
}

Real evaluate_accuracy(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
                       const std::vector<int>& ids_in) {
    const std::vector<int> ids = all_ids_or(ds, ids_in);
    if (ids.empty()) throw ParamError("accuracy over empty set");
    const VecXi pred = predict(encoder, head, ds, ids);
    int correct = 0;
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (pred(static_cast<Eigen::Index>(i)) == ds.labels(ds.row_of(ids[i]))) ++correct;
    return static_cast<Real>(correct) / static_cast<Real>(ids.size());
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------
TrainStats train_joint(Encoder& encoder, Head& head, const LabeledDataset& ds,
                       const std::vector<int>& ids_in, const TrainOpts& opts,
                       const ChannelSubset* psi) {
    const std::vector<int> ids = all_ids_or(ds, ids_in);
    if (ids.empty()) throw ParamError("training over empty id set");
    Optimizer opt(opts.optimizer, opts.learning_rate, opts.momentum);
    typename Encoder::Grads eg;
    typename Head::Grads hg;
    TrainStats stats;
    Rng base(opts.rng_seed);

    std::vector<int> order = ids;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng erng = base.fork("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        Real epoch_loss = 0;
        int batches = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t n =
                std::min<std::size_t>(static_cast<std::size_t>(opts.batch_size), order.size() - at);
            std::vector<int> rows(n);
            VecXi labels(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                rows[i] = ds.row_of(order[at + i]);
                labels(static_cast<Eigen::Index>(i)) = ds.labels(rows[i]);
            }
            const FeatureMap fm =
                to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
            typename Encoder::Cache ec;
            const MatX emb = encoder.forward(fm, opts.norm_batch_stats, &ec);
            typename Head::Cache hc;
            const MatX logits = head.forward(emb, &hc);
            MatX dlogits;
            const Real loss = cross_entropy_backward(logits, labels, dlogits);
            if (!std::isfinite(loss)) throw TrainingDivergedError("non-finite training loss");
            epoch_loss += loss;
            ++batches;
            hg.init(head);
            MatX demb;
            head.backward(hc, dlogits, hg, &demb);
            eg.init(encoder, false);
            encoder.backward(ec, demb, eg);
            const auto slots = collect_slots(&encoder, &eg, &head, &hg, opts.selector, psi);
            opt.step(slots);
        }
        epoch_loss /= static_cast<Real>(std::max(batches, 1));
        if (epoch == 0) stats.first_epoch_loss = epoch_loss;
        stats.final_epoch_loss = epoch_loss;
        ++stats.epochs_run;
    }
    return stats;
}

TrainStats train_head_on_embeddings(Head& head, const MatX& emb, const VecXi& labels,
                                    const TrainOpts& opts) {
    if (emb.rows() == 0) throw ParamError("training over empty embedding set");
    Optimizer opt(opts.optimizer, opts.learning_rate, opts.momentum);
    typename Head::Grads hg;
    TrainStats stats;
    Rng base(opts.rng_seed);
    std::vector<int> order(static_cast<std::size_t>(emb.rows()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng erng = base.fork("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        Real epoch_loss = 0;
        int batches = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t n =
                std::min<std::size_t>(static_cast<std::size_t>(opts.batch_size), order.size() - at);
            MatX x(static_cast<Eigen::Index>(n), emb.cols());
            VecXi y(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                x.row(static_cast<Eigen::Index>(i)) = emb.row(order[at + i]);
                y(static_cast<Eigen::Index>(i)) = labels(order[at + i]);
            }
            typename Head::Cache hc;
            const MatX logits = head.forward(x, &hc);
            MatX dlogits;
            const Real loss = cross_entropy_backward(logits, y, dlogits);
            if (!std::isfinite(loss)) throw TrainingDivergedError("non-finite training loss");
            epoch_loss += loss;
            ++batches;
            hg.init(head);
            head.backward(hc, dlogits, hg, nullptr);
            const auto slots = collect_slots(nullptr, nullptr, &head, &hg, {Trainable::phi}, nullptr);
            opt.step(slots);
        }
        epoch_loss /= static_cast<Real>(std::max(batches, 1));
        if (epoch == 0) stats.first_epoch_loss = epoch_loss;
        stats.final_epoch_loss = epoch_loss;
        ++stats.epochs_run;
    }
    return stats;
}

Encoder pretrain_encoder(const LabeledDataset& pretrain_split, const EncoderConfig& cfg,
                         const TrainOpts& opts, const HeadConfig& head_cfg) {
    if (pretrain_split.size() == 0) throw ParamError("pretrain split is empty");
    Rng rng(derive_seed(opts.rng_seed, "pretrain-init"));
    Encoder encoder(cfg, rng);
    Head head(encoder.embedding_dim(), pretrain_split.num_classes, head_cfg, rng);
    TrainOpts o = opts;
    o.selector = {Trainable::phi, Trainable::all_encoder};
    o.norm_batch_stats = true;
    train_joint(encoder, head, pretrain_split, {}, o);
    return encoder;  // throwaway head discarded
}

TrainStats train_head(const Encoder& encoder, Head& head, const LabeledDataset& ds,
                      const TrainOpts& opts, const std::vector<int>& ids_in) {
    if (opts.selector != std::set<Trainable>{Trainable::phi})
        throw ContractError("train_head requires selector {phi}");
    const std::vector<int> ids = all_ids_or(ds, ids_in);
    const MatX emb = embed_dataset(encoder, ds, ids);
    VecXi labels(static_cast<Eigen::Index>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i)
        labels(static_cast<Eigen::Index>(i)) = ds.labels(ds.row_of(ids[i]));
    return train_head_on_embeddings(head, emb, labels, opts);
}

Head make_head(const Encoder& encoder, int num_classes, const HeadConfig& cfg, Rng& rng) {
    return Head(encoder.embedding_dim(), num_classes, cfg, rng);
}

}  // namespace trustcore
