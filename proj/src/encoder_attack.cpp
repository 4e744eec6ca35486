#include "trustcore/encoder_attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trustcore {

namespace {

// d(1 - cos(e, u))/de for fixed u, scaled by `weight`; accumulates the loss.
VecX cos_loss_backward(const VecX& e, const VecX& u, Real weight, Real& loss_out) {
    const Real ne = e.norm(), nu = u.norm();
    if (ne < Real(1e-12) || nu < Real(1e-12)) {
        loss_out += weight;  // undefined direction; no gradient signal
        return VecX::Zero(e.size());
    }
    const Real c = e.dot(u) / (ne * nu);
    loss_out += weight * (Real(1) - c);
    return -weight * (u / (ne * nu) - e * (c / (ne * ne)));
}

FeatureMap triggered_feature_map(const LabeledDataset& ds, const std::vector<int>& rows,
                                 const TriggerSpec& spec) {
    RowMatX imgs(static_cast<Eigen::Index>(rows.size()), ds.images.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const VecX img = ds.images.row(rows[i]).transpose();
        imgs.row(static_cast<Eigen::Index>(i)) =
            apply_trigger(img, ds.channels, ds.height, ds.width, spec).transpose();
    }
    return to_feature_map(imgs, ds.channels, ds.height, ds.width);
}

}  // namespace

EncoderAttackResult inject_encoder_backdoor(const Encoder& encoder,
                                            const LabeledDataset& shadow_data,
                                            const RowMatX& reference_targets,
                                            const TriggerSpec& spec,
                                            const EncoderAttackOpts& opts) {
    if (spec.kind != TriggerKind::patch && spec.kind != TriggerKind::blend)
        throw ParamError("encoder injection supports patch and blend triggers");
    if (reference_targets.rows() == 0) throw ParamError("reference targets empty");
    if (shadow_data.size() == 0) throw ParamError("shadow data empty");

    EncoderAttackResult result;
    result.encoder = encoder;
    const Encoder reference = encoder;  // pre-attack snapshot

    // Anchor: mean pre-attack embedding of the reference targets.
    const FeatureMap ref_fm = to_feature_map(reference_targets, shadow_data.channels,
                                             shadow_data.height, shadow_data.width);
    const VecX anchor = reference.forward_eval(ref_fm, nullptr).colwise().mean().transpose();

    Optimizer opt(opts.optimizer, opts.learning_rate, opts.momentum);
    typename Encoder::Grads eg;
    Rng base(derive_seed(opts.rng_seed, "encoder-attack"));
    std::vector<int> order = shadow_data.ids;

    for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
        Rng erng = base.fork("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        for (std::size_t at = 0; at < order.size();
             at += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t n = std::min<std::size_t>(
                static_cast<std::size_t>(opts.batch_size), order.size() - at);
            std::vector<int> rows(n);
            for (std::size_t i = 0; i < n; ++i) rows[i] = shadow_data.row_of(order[at + i]);
            const FeatureMap clean_fm = to_feature_map(
                shadow_data.images, rows, shadow_data.channels, shadow_data.height,
                shadow_data.width);

            // Per-sample utility anchors from the frozen pre-attack encoder.
            const MatX utility_target = reference.forward_eval(clean_fm, nullptr);

            eg.init(result.encoder, false);
            Real batch_loss = 0;
            {
                const FeatureMap trig_fm = [&] {
                    std::vector<int> local(n);
                    for (std::size_t i = 0; i < n; ++i) local[i] = rows[i];
                    return triggered_feature_map(shadow_data, local, spec);
                }();
                typename Encoder::Cache cache;
                const MatX emb = result.encoder.forward(trig_fm, false, &cache);
                MatX demb = MatX::Zero(emb.rows(), emb.cols());
                const Real w = opts.lambda_align / static_cast<Real>(n);
                for (Eigen::Index i = 0; i < emb.rows(); ++i)
                    demb.row(i) +=
                        cos_loss_backward(emb.row(i).transpose(), anchor, w, batch_loss)
                            .transpose();
                result.encoder.backward(cache, demb, eg);
            }
            {
                typename Encoder::Cache cache;
                const MatX emb = result.encoder.forward(clean_fm, false, &cache);
                MatX demb = MatX::Zero(emb.rows(), emb.cols());
                const Real w = opts.lambda_utility / static_cast<Real>(n);
                for (Eigen::Index i = 0; i < emb.rows(); ++i)
                    demb.row(i) += cos_loss_backward(emb.row(i).transpose(),
                                                     utility_target.row(i).transpose(), w,
                                                     batch_loss)
                                       .transpose();
                result.encoder.backward(cache, demb, eg);
            }
            if (!std::isfinite(batch_loss))
                throw TrainingDivergedError("encoder injection diverged");
            const auto slots = collect_slots(&result.encoder, &eg, nullptr, nullptr,
                                             {Trainable::all_encoder}, nullptr);
            opt.step(slots);
        }
    }

    // Achieved alignment/utility, for reporting and the success flag.
    Real align_sum = 0, util_sum = 0;
    int count = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t at = 0; at < shadow_data.ids.size(); at += kChunk) {
        const std::size_t n = std::min(kChunk, shadow_data.ids.size() - at);
        std::vector<int> rows(n);
        for (std::size_t i = 0; i < n; ++i)
            rows[i] = shadow_data.row_of(shadow_data.ids[at + i]);
        const FeatureMap clean_fm = to_feature_map(shadow_data.images, rows,
                                                   shadow_data.channels, shadow_data.height,
                                                   shadow_data.width);
        const FeatureMap trig_fm = triggered_feature_map(shadow_data, rows, spec);
        const MatX et = result.encoder.forward_eval(trig_fm, nullptr);
        const MatX ec = result.encoder.forward_eval(clean_fm, nullptr);
        const MatX e0 = reference.forward_eval(clean_fm, nullptr);
        for (Eigen::Index i = 0; i < et.rows(); ++i) {
            align_sum += et.row(i).dot(anchor.transpose()) /
                         std::max(Real(1e-12), et.row(i).norm() * anchor.norm());
            util_sum += ec.row(i).dot(e0.row(i)) /
                        std::max(Real(1e-12), ec.row(i).norm() * e0.row(i).norm());
            ++count;
        }
    }
    result.alignment = align_sum / static_cast<Real>(count);
    result.utility = util_sum / static_cast<Real>(count);
    result.success = opts.max_epochs == 0 || result.alignment >= opts.min_alignment;
    return result;
}

// ---------------------------------------------------------------------------
// Layerwise universal perturbation
// ---------------------------------------------------------------------------
UapResult craft_uap_trigger(const TapModel& model, const LabeledDataset& ds,
                            const std::vector<int>& target_seed_ids, Real budget,
                            const UapOpts& opts) {
    if (target_seed_ids.empty()) throw ParamError("uap crafting needs target seed ids");
    if (budget < 0) throw ParamError("negative perturbation budget");
    const int pix = ds.pixels_per_image();
    UapResult result;
    result.delta = VecX::Zero(pix);
    if (budget == Real(0) || opts.iterations == 0) return result;  // zero-ball projection

    const int num_layers = std::min(opts.num_layers, model.num_taps());
    const int first_tap = model.num_taps() - num_layers;

    // Per-layer target means over the seed set.
    std::vector<VecX> target_means;
    {
        std::vector<int> rows(target_seed_ids.size());
        for (std::size_t i = 0; i < target_seed_ids.size(); ++i)
            rows[i] = ds.row_of(target_seed_ids[i]);
        const FeatureMap fm = to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
        const TapForward tf = forward_with_taps(model, fm);
        for (int l = first_tap; l < model.num_taps(); ++l)
            target_means.push_back(
                tf.taps[static_cast<std::size_t>(l)].colwise().mean().transpose());
    }

    const Real step = opts.step > 0 ? opts.step : budget / Real(10);
    Rng rng(derive_seed(opts.rng_seed, "uap"));
    const int hw = ds.height * ds.width;

    // Minibatch objective and (optionally) its gradient wrt the shared delta.
    auto objective = [&](const VecX& delta, const std::vector<int>& rows, VecX* grad) {
        const auto b = static_cast<Eigen::Index>(rows.size());
        FeatureMap fm = to_feature_map(ds.images, rows, ds.channels, ds.height, ds.width);
        Eigen::ArrayXXf pass(fm.act.rows(), fm.act.cols());
        for (int c = 0; c < ds.channels; ++c) {
            for (Eigen::Index i = 0; i < b; ++i) {
                for (int p = 0; p < hw; ++p) {
                    Real& v = fm.act(i * hw + p, c);
                    const Real z = v + delta(c * hw + p);
                    pass(i * hw + p, c) = (z >= Real(0) && z <= Real(1)) ? Real(1) : Real(0);
                    v = std::clamp(z, Real(0), Real(1));
                }
            }
        }

        typename Encoder::Cache ec;
        const MatX emb = model.encoder.forward_eval(fm, grad ? &ec : nullptr);
        typename Head::Cache hc;
        model.head.forward(emb, &hc);
        const MatX* taps[3] = {&emb, &hc.a1, &hc.a2};

        Real obj = 0;
        const Real scale = Real(1) / static_cast<Real>(b * num_layers);
        std::vector<MatX> dtaps(3);
        for (int l = first_tap; l < 3; ++l) {
            const MatX& a = *taps[l];
            MatX d = MatX::Zero(a.rows(), a.cols());
            const VecX& m = target_means[static_cast<std::size_t>(l - first_tap)];
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                const VecX diff = a.row(i).transpose() - m;
                const Real norm = diff.norm();
                obj += scale * norm;
                if (norm > Real(1e-12)) d.row(i) = (scale / norm) * diff.transpose();
            }
            dtaps[static_cast<std::size_t>(l)] = std::move(d);
        }
        if (!grad) return obj;

        typename Head::Grads hg;
        hg.init(model.head);
        MatX demb = MatX::Zero(emb.rows(), emb.cols());
        const MatX dlogits = MatX::Zero(emb.rows(), model.head.l3.weight.cols());
        model.head.backward(hc, dlogits, hg, &demb,
                            dtaps[1].size() ? &dtaps[1] : nullptr,
                            dtaps[2].size() ? &dtaps[2] : nullptr);
        if (dtaps[0].size()) demb += dtaps[0];

        typename Encoder::Grads eg;
        eg.init(model.encoder, /*want_input=*/true);
        model.encoder.backward(ec, demb, eg);

        grad->setZero(pix);
        const MatX& din = eg.dinput->act;
        for (int c = 0; c < ds.channels; ++c)
            for (Eigen::Index i = 0; i < b; ++i)
                for (int p = 0; p < hw; ++p)
                    (*grad)(c * hw + p) += din(i * hw + p, c) * pass(i * hw + p, c);
        return obj;
    };

    auto sample_rows = [&] {
        const int b = std::min<int>(opts.batch_size, ds.size());
        std::vector<int> rows(static_cast<std::size_t>(b));
        if (b == ds.size()) {
            std::iota(rows.begin(), rows.end(), 0);  // full batch, no resampling
        } else {
            for (int i = 0; i < b; ++i)
                rows[static_cast<std::size_t>(i)] = rng.uniform_int(ds.size());
        }
        return rows;
    };

    Real best_obj = std::numeric_limits<Real>::infinity();
    VecX best_delta = result.delta;
    Real first_obj = 0;
    for (int iter = 0; iter < opts.iterations; ++iter) {
        VecX grad;
        const Real obj = objective(result.delta, sample_rows(), &grad);
        if (iter == 0) first_obj = obj;
        if (obj < best_obj) {
            best_obj = obj;
            best_delta = result.delta;
        }
        for (Eigen::Index i = 0; i < pix; ++i) {
            if (grad(i) > 0)
                result.delta(i) -= step;
            else if (grad(i) < 0)
                result.delta(i) += step;
            result.delta(i) = std::clamp(result.delta(i), -budget, budget);
        }
    }
    const Real final_obj = objective(result.delta, sample_rows(), nullptr);
    if (final_obj < best_obj) {
        best_obj = final_obj;
        best_delta = result.delta;
    }

    result.delta = best_delta;
    result.objective = best_obj;
    result.diverged = !(best_obj < first_obj);
    return result;
}

}  // namespace trustcore
