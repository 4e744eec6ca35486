#include "trustcore/filter.hpp"

#include <doctest.h>

using namespace trustcore;

namespace {

std::vector<VecX> masks_of(std::initializer_list<std::initializer_list<Real>> layers) {
    std::vector<VecX> out;
    for (const auto& l : layers) {
        VecX v(static_cast<Eigen::Index>(l.size()));
        Eigen::Index i = 0;
        for (Real x : l) v(i++) = x;
        out.push_back(v);
    }
    return out;
}

}  // namespace

TEST_CASE("threshold_channels: ceiling arithmetic at K=64 keep 0.9") {
    VecX m(64);
    for (int i = 0; i < 64; ++i) m(i) = static_cast<Real>(i) / 64.0f;
    FilterParams params;
    const ChannelPartition part = threshold_channels({m}, params);
    CHECK(part.untrusted[0].size() == 6);  // 64 - ceil(57.6)
    CHECK(part.trusted[0].size() == 58);
    CHECK(part.untrusted[0] == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("threshold_channels: all-equal masks cut the lowest indices with a warning") {
    FilterParams params;
    const ChannelPartition part = threshold_channels({VecX::Constant(64, 0.5f)}, params);
    CHECK(part.untrusted[0] == std::vector<int>{0, 1, 2, 3, 4, 5});
    REQUIRE(!part.warnings.empty());
}

TEST_CASE("threshold_channels: keep fraction just under one empties the cut") {
    FilterParams params;
    params.keep_fraction = 1.0 - 1e-6;  // < 1/K for K=16
    VecX m = VecX::Constant(16, 0.3f);
    const ChannelPartition part = threshold_channels({m}, params);
    CHECK(part.untrusted[0].empty());
    CHECK(part.trusted[0].size() == 16);
}

TEST_CASE("threshold_channels: exact per-layer counts over random masks") {
    Rng rng(53);
    for (int trial = 0; trial < 15; ++trial) {
        const int k = 8 + rng.uniform_int(120);
        VecX m(k);
        for (int i = 0; i < k; ++i) m(i) = static_cast<Real>(rng.uniform());
        FilterParams params;
        params.keep_fraction = 0.5 + 0.45 * rng.uniform();
        const ChannelPartition part = threshold_channels({m}, params);
        const auto expect_cut =
            static_cast<std::size_t>(k) - ceil_count(params.keep_fraction, static_cast<std::size_t>(k));
        REQUIRE(part.untrusted[0].size() == expect_cut);
        REQUIRE(part.trusted[0].size() + part.untrusted[0].size() == static_cast<std::size_t>(k));
        // psi holds the lowest mask values
        Real worst_psi = -1, best_chi = 2;
        for (int c : part.untrusted[0]) worst_psi = std::max(worst_psi, m(c));
        for (int c : part.trusted[0]) best_chi = std::min(best_chi, m(c));
        if (!part.untrusted[0].empty()) CHECK(worst_psi <= best_chi);
    }
}

namespace {

struct FilterFixture {
    LabeledDataset ds;
    Encoder encoder;
    Head head;

    FilterFixture() : ds(generate_glyphs(4, 60, 16, 77)) {
        EncoderConfig cfg;
        cfg.block_channels = {8, 16};
        TrainOpts opts;
        opts.epochs = 4;
        opts.batch_size = 32;
        opts.learning_rate = 0.02f;
        opts.rng_seed = 14;
        encoder = pretrain_encoder(ds, cfg, opts);
        Rng rng(15);
        head = make_head(encoder, 4, HeadConfig{32, 16}, rng);
        TrainOpts hopts;
        hopts.epochs = 12;
        hopts.rng_seed = 16;
        train_head(encoder, head, ds, hopts);
    }
};

}  // namespace

TEST_CASE("selective_unlearn: drops accuracy, touches only normalization affine") {
    const FilterFixture fx;
    REQUIRE(evaluate_accuracy(fx.encoder, fx.head, fx.ds) > 0.9f);

    const auto conv_hash = hash_conv_weights(fx.encoder);
    const auto stats_hash = hash_norm_stats(fx.encoder);
    const auto head_hash = hash_head(fx.head);

    FilterParams params;
    params.rng_seed = 3;
    // four classes floor at chance 0.25 under ascent; threshold must sit above
    params.acc_min = 0.30f;
    params.unlearn_lr = 0.05f;
    params.unlearn_batch = 32;
    const Encoder unlearned = selective_unlearn(fx.encoder, fx.head, fx.ds, params);
    CHECK(evaluate_accuracy(unlearned, fx.head, fx.ds) < params.acc_min);
    CHECK(hash_conv_weights(unlearned) == conv_hash);
    CHECK(hash_norm_stats(unlearned) == stats_hash);
    CHECK(hash_head(fx.head) == head_hash);
    CHECK(hash_norm_affine(unlearned) != hash_norm_affine(fx.encoder));

    // Conv responses to fixed probes are unchanged (pre-normalization path).
    Rng rng(9);
    FeatureMap probe;
    probe.batch = 2;
    probe.h = 16;
    probe.w = 16;
    probe.act.resize(2 * 256, 3);
    fill_normal(probe.act, rng, 0.5f);
    const FeatureMap r0 = fx.encoder.convs[0].forward(probe, nullptr);
    const FeatureMap r1 = unlearned.convs[0].forward(probe, nullptr);
    REQUIRE(r0.act == r1.act);
}

TEST_CASE("selective_unlearn: pre-degenerate model is a zero-epoch no-op") {
    const FilterFixture fx;
    Rng rng(19);
    Head fresh = make_head(fx.encoder, 4, HeadConfig{32, 16}, rng);
    FilterParams params;
    params.acc_min = 0.50f;  // a fresh head sits near chance, below this
    const Encoder out = selective_unlearn(fx.encoder, fresh, fx.ds, params);
    CHECK(hash_norm_affine(out) == hash_norm_affine(fx.encoder));
}

TEST_CASE("recover_mask: zero epochs keeps all ones; clipping holds after every step") {
    const FilterFixture fx;
    FilterParams params;
    params.recover_epochs = 0;
    const auto ones = recover_mask(fx.encoder, fx.head, fx.ds, fx.ds.ids, params);
    for (const auto& m : ones)
        for (Eigen::Index i = 0; i < m.size(); ++i) CHECK(m(i) == 1.0f);

    params.recover_epochs = 2;
    params.recover_lr = 0.05f;  // aggressive on purpose; clipping must hold anyway
    params.rng_seed = 4;
    int observed = 0;
    const auto masks = recover_mask(
        fx.encoder, fx.head, fx.ds, fx.ds.ids, params, [&](const std::vector<MatX>& ms) {
            ++observed;
            for (const auto& m : ms) {
                REQUIRE(m.minCoeff() >= 0.0f);
                REQUIRE(m.maxCoeff() <= 1.0f);
            }
        });
    CHECK(observed > 0);
    for (const auto& m : masks) {
        CHECK(m.minCoeff() >= 0.0f);
        CHECK(m.maxCoeff() <= 1.0f);
    }
    CHECK_THROWS_AS(recover_mask(fx.encoder, fx.head, fx.ds, {}, params), ParamError);
}

TEST_CASE("recover_mask: only masks move") {
    const FilterFixture fx;
    FilterParams params;
    params.recover_epochs = 1;
    params.rng_seed = 5;
    // recover_mask works on an internal copy; verify it returns masks and the
    // inputs stay untouched by construction (const refs). Check group hashes
    // of the inputs for good measure.
    const auto conv_hash = hash_conv_weights(fx.encoder);
    const auto affine_hash = hash_norm_affine(fx.encoder);
    (void)recover_mask(fx.encoder, fx.head, fx.ds, fx.ds.ids, params);
    CHECK(hash_conv_weights(fx.encoder) == conv_hash);
    CHECK(hash_norm_affine(fx.encoder) == affine_hash);
}

TEST_CASE("apply_partition: empty cut is the identity") {
    const FilterFixture fx;
    FilterParams params;
    params.keep_fraction = 1.0 - 1e-9;
    std::vector<VecX> masks;
    for (int w : fx.encoder.cfg.block_channels) masks.push_back(VecX::Constant(w, 0.5f));
    const ChannelPartition part = threshold_channels(masks, params);
    const Encoder pruned = apply_partition(fx.encoder, part, PartitionMode::prune);
    CHECK(hash_conv_weights(pruned) == hash_conv_weights(fx.encoder));
    CHECK(hash_norm_affine(pruned) == hash_norm_affine(fx.encoder));
}

TEST_CASE("apply_partition: pruned channels output exactly zero; accuracy collapses when all cut") {
    const FilterFixture fx;
    ChannelPartition part;
    part.keep_fraction = 0.9;
    for (int w : fx.encoder.cfg.block_channels) {
        std::vector<int> all(static_cast<std::size_t>(w));
        std::iota(all.begin(), all.end(), 0);
        part.untrusted.push_back(all);  // prune everything
        part.trusted.push_back({});
        part.mask_values.push_back(VecX::Zero(w));
    }
    const Encoder pruned = apply_partition(fx.encoder, part, PartitionMode::prune);
    const Real acc = evaluate_accuracy(pruned, fx.head, fx.ds);
    CHECK(acc <= 0.3f);  // chance-ish on 4 classes

    // Block outputs are exactly the zeroed affine: check embedding is zero.
    FeatureMap fm = to_feature_map(fx.ds.images, {0, 1}, 3, 16, 16);
    const MatX emb = pruned.forward_eval(fm, nullptr);
    CHECK(emb.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("apply_partition: reinit redraws psi, keeps chi bit-identical, resets stats") {
    const FilterFixture fx;
    ChannelPartition part;
    part.keep_fraction = 0.75;
    for (int w : fx.encoder.cfg.block_channels) {
        std::vector<int> psi, chi;
        for (int c = 0; c < w; ++c) (c % 4 == 0 ? psi : chi).push_back(c);
        part.untrusted.push_back(psi);
        part.trusted.push_back(chi);
        part.mask_values.push_back(VecX::Constant(w, 0.5f));
    }
    const Encoder reinit = apply_partition(fx.encoder, part, PartitionMode::reinit, 42);
    for (int l = 0; l < fx.encoder.num_blocks(); ++l) {
        const auto li = static_cast<std::size_t>(l);
        for (int c : part.trusted[li]) {
            REQUIRE(reinit.convs[li].weight.col(c) == fx.encoder.convs[li].weight.col(c));
            REQUIRE(reinit.norms[li].gamma(c, 0) == fx.encoder.norms[li].gamma(c, 0));
            REQUIRE(reinit.norms[li].run_mean(c, 0) == fx.encoder.norms[li].run_mean(c, 0));
        }
        for (int c : part.untrusted[li]) {
            CHECK(reinit.convs[li].weight.col(c) != fx.encoder.convs[li].weight.col(c));
            CHECK(reinit.norms[li].gamma(c, 0) == 1.0f);
            CHECK(reinit.norms[li].beta(c, 0) == 0.0f);
            CHECK(reinit.norms[li].run_mean(c, 0) == 0.0f);
            CHECK(reinit.norms[li].run_var(c, 0) == 1.0f);
        }
    }
    // geometry mismatch rejected
    ChannelPartition bad = part;
    bad.untrusted[0].push_back(999);
    CHECK_THROWS_AS(apply_partition(fx.encoder, bad, PartitionMode::prune), ShapeError);
}
