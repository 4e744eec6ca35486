#include "trustcore/bootstrap.hpp"

#include <doctest.h>

#include <filesystem>
#include <numeric>

using namespace trustcore;

TEST_CASE("select_lowest_per_class: exact floors per class") {
    // 1000 remaining per class, gamma 2% -> exactly 20 each.
    const int classes = 3, per = 1000;
    VecX losses(classes * per);
    VecXi labels(classes * per);
    std::vector<int> ids(static_cast<std::size_t>(classes) * per);
    Rng rng(3);
    for (int i = 0; i < classes * per; ++i) {
        losses(i) = static_cast<Real>(rng.uniform());
        labels(i) = i % classes;
        ids[static_cast<std::size_t>(i)] = i;
    }
    const auto picked = select_lowest_per_class(losses, ids, labels, classes, 0.02);
    REQUIRE(picked.size() == 60);
    std::map<int, int> per_cls;
    for (int id : picked) ++per_cls[labels(id)];
    for (int c = 0; c < classes; ++c) CHECK(per_cls[c] == 20);

    // the picked ones really are the lowest per class
    for (int c = 0; c < classes; ++c) {
        Real worst_picked = -1;
        for (int id : picked)
            if (labels(id) == c) worst_picked = std::max(worst_picked, losses(id));
        int lower_unpicked = 0;
        for (int i = 0; i < classes * per; ++i)
            if (labels(i) == c && losses(i) < worst_picked &&
                std::find(picked.begin(), picked.end(), i) == picked.end())
                ++lower_unpicked;
        CHECK(lower_unpicked == 0);
    }
}

TEST_CASE("select_lowest_per_class: floor to zero is a counted no-op") {
    VecX losses(9);
    VecXi labels(9);
    std::vector<int> ids(9);
    for (int i = 0; i < 9; ++i) {
        losses(i) = static_cast<Real>(i);
        labels(i) = i % 3;
        ids[static_cast<std::size_t>(i)] = i;
    }
    CHECK(select_lowest_per_class(losses, ids, labels, 3, 0.02).empty());
}

TEST_CASE("select_lowest_global: count and no balancing") {
    VecX losses(100);
    VecXi labels(100);
    std::vector<int> ids(100);
    for (int i = 0; i < 100; ++i) {
        losses(i) = i < 10 ? -1.0f : 1.0f;  // the low-loss ten are all class 0
        labels(i) = i < 10 ? 0 : i % 5;
        ids[static_cast<std::size_t>(i)] = i;
    }
    const auto picked = select_lowest_global(losses, ids, 0.10);
    REQUIRE(picked.size() == 10);
    for (int id : picked) CHECK(id < 10);
}

TEST_CASE("select_smallest_reduction: ties break by id; memorized first") {
    const int n = 50;
    VecX before(n), after(n);
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) {
        before(i) = 1.0f;
        after(i) = 1.0f;  // zero reduction everywhere -> ties
        ids[static_cast<std::size_t>(i)] = 1000 + i;
    }
    const auto picked = select_smallest_reduction(before, after, ids, 0.10, false);
    CHECK(picked == std::vector<int>{1000, 1001, 1002, 1003, 1004});

    // an already-memorized sample (loss ~0, reduction ~0) beats a sample the
    // clone learned (large positive reduction)
    before(7) = 0.001f;
    after(7) = 0.001f;
    for (int i = 0; i < n; ++i)
        if (i != 7) {
            before(i) = 2.0f;
            after(i) = 0.5f;
        }
    const auto picked2 = select_smallest_reduction(before, after, ids, 0.02, false);
    REQUIRE(picked2.size() == 1);
    CHECK(picked2[0] == 1007);

    // at_least_one guard
    CHECK(select_smallest_reduction(before, after, ids, 0.001, true).size() == 1);
    CHECK(select_smallest_reduction(before, after, ids, 0.001, false).empty());
}

TEST_CASE("audit: jsonl round-trip and exact pool replay") {
    BootstrapAudit audit;
    BootstrapRound r1;
    r1.round = 1;
    r1.phase = BootstrapPhase::class_balanced;
    r1.added = {5, 6};
    r1.pool_size = 4;
    r1.train_loss = 0.5f;
    BootstrapRound r2;
    r2.round = 2;
    r2.phase = BootstrapPhase::meta;
    r2.added = {9};
    r2.pool_size = 5;
    r2.train_loss = 0.25f;
    audit.rounds = {r1, r2};

    const auto path = std::filesystem::temp_directory_path() / "trustcore_test_audit.jsonl";
    audit.save_jsonl(path);
    const BootstrapAudit back = BootstrapAudit::load_jsonl(path);
    REQUIRE(back.rounds.size() == 2);
    CHECK(back.rounds[1].phase == BootstrapPhase::meta);
    CHECK(back.rounds[1].added == std::vector<int>{9});

    CleanPool start;
    start.add(1, Provenance::seed, 0);
    start.add(2, Provenance::loss_expand, 1);
    const CleanPool replayed = back.replay(start);
    CHECK(replayed.ids() == std::vector<int>{1, 2, 5, 6, 9});
    CHECK(replayed.entries()[2].prov == Provenance::class_loss);
    CHECK(replayed.entries()[4].prov == Provenance::meta);
}

namespace {

struct BootFixture {
    LabeledDataset ds;
    Encoder encoder;
    ChannelPartition partition;
    CleanPool dsub;

    BootFixture() : ds(generate_glyphs(4, 50, 16, 31)) {
        EncoderConfig cfg;
        cfg.block_channels = {8, 16};
        TrainOpts opts;
        opts.epochs = 3;
        opts.batch_size = 32;
        opts.learning_rate = 0.02f;
        opts.rng_seed = 24;
        encoder = pretrain_encoder(ds, cfg, opts);
        // partition: every fourth channel untrusted
        for (int w : cfg.block_channels) {
            std::vector<int> psi, chi;
            for (int c = 0; c < w; ++c) (c % 4 == 0 ? psi : chi).push_back(c);
            partition.untrusted.push_back(psi);
            partition.trusted.push_back(chi);
            partition.mask_values.push_back(VecX::Constant(w, 0.5f));
        }
        encoder = apply_partition(encoder, partition, PartitionMode::reinit, 5);
        // clean subset: first 8 ids of each class
        for (int c = 0; c < 4; ++c) {
            const auto& cid = ds.class_ids(c);
            for (int i = 0; i < 8; ++i) dsub.add(cid[static_cast<std::size_t>(i)], Provenance::seed, 0);
        }
    }

    BootstrapParams params() const {
        BootstrapParams p;
        p.iter1 = 2;
        p.iter2 = 2;
        p.gamma1 = 0.05;
        p.gamma2 = 0.05;
        p.gamma3 = 0.10;
        p.epochs_per_iter = 1;
        p.rho = 0.60;
        p.train.batch_size = 32;
        p.train.learning_rate = 0.01f;
        p.rng_seed = 77;
        return p;
    }
};

std::uint64_t chi_hash(const Encoder& e, const ChannelPartition& part) {
    std::uint64_t h = 1469598103934665603ull;
    for (int l = 0; l < e.num_blocks(); ++l) {
        const auto li = static_cast<std::size_t>(l);
        for (int c : part.trusted[li]) {
            MatX col = e.convs[li].weight.col(c);
            h = hash_matrix(col, h);
            const Real g = e.norms[li].gamma(c, 0), b = e.norms[li].beta(c, 0);
            const Real rm = e.norms[li].run_mean(c, 0), rv = e.norms[li].run_var(c, 0);
            h = fnv1a(&g, sizeof g, h);
            h = fnv1a(&b, sizeof b, h);
            h = fnv1a(&rm, sizeof rm, h);
            h = fnv1a(&rv, sizeof rv, h);
        }
    }
    return h;
}

}  // namespace

TEST_CASE("run_bootstrap: chi frozen, pool monotone, audit replays, deterministic") {
    const BootFixture fx;
    const auto chi_before = chi_hash(fx.encoder, fx.partition);
    const auto flag_reads_before = fx.ds.poison_flag_reads();

    const BootstrapResult res = run_bootstrap(fx.encoder, fx.partition, fx.ds, fx.dsub,
                                              fx.params());
    CHECK(fx.ds.poison_flag_reads() == flag_reads_before);
    CHECK(chi_hash(res.encoder, fx.partition) == chi_before);

    // pool growth: starts with dsub, monotone, reaches rho
    REQUIRE(res.pool.size() >= fx.dsub.size());
    for (std::size_t i = 0; i < fx.dsub.entries().size(); ++i)
        CHECK(res.pool.entries()[i].id == fx.dsub.entries()[i].id);
    CHECK(static_cast<double>(res.pool.size()) >= 0.60 * fx.ds.size() - 1e-6);

    // phase 1 counts: per class floor(gamma1 * |remaining_k|)
    std::size_t pool_size = fx.dsub.size();
    for (const auto& round : res.audit.rounds) {
        if (round.phase != BootstrapPhase::class_balanced) break;
        std::size_t expect = 0;
        // remaining per class from the running pool
        CleanPool running;
        for (std::size_t i = 0; i < pool_size; ++i)
            running.add(res.pool.entries()[i].id, Provenance::seed, 0);
        for (int c = 0; c < fx.ds.num_classes; ++c) {
            std::size_t rem = 0;
            for (int id : fx.ds.class_ids(c))
                if (!running.contains(id)) ++rem;
            expect += floor_count(fx.params().gamma1, rem);
        }
        REQUIRE(round.added.size() == expect);
        pool_size += round.added.size();
        REQUIRE(round.pool_size == pool_size);
    }

    // audit replay reconstructs the final pool exactly
    const CleanPool replayed = res.audit.replay(fx.dsub);
    REQUIRE(replayed.ids() == res.pool.ids());

    // determinism: identical run, identical pools and parameters
    const BootstrapResult res2 = run_bootstrap(fx.encoder, fx.partition, fx.ds, fx.dsub,
                                               fx.params());
    CHECK(res2.pool.ids() == res.pool.ids());
    CHECK(hash_conv_weights(res2.encoder) == hash_conv_weights(res.encoder));
    CHECK(hash_head(res2.head) == hash_head(res.head));
}

TEST_CASE("run_bootstrap: rho already met skips the meta phase") {
    const BootFixture fx;
    BootstrapParams p = fx.params();
    p.rho = static_cast<double>(fx.dsub.size()) / fx.ds.size();  // met from the start
    p.iter1 = 1;
    p.iter2 = 1;
    const BootstrapResult res = run_bootstrap(fx.encoder, fx.partition, fx.ds, fx.dsub, p);
    for (const auto& r : res.audit.rounds) CHECK(r.phase != BootstrapPhase::meta);
}

TEST_CASE("run_bootstrap: parameter validation") {
    const BootFixture fx;
    BootstrapParams p = fx.params();
    p.gamma1 = 0;
    CHECK_THROWS_AS(run_bootstrap(fx.encoder, fx.partition, fx.ds, fx.dsub, p), ParamError);
    p = fx.params();
    CHECK_THROWS_AS(run_bootstrap(fx.encoder, fx.partition, fx.ds, CleanPool{}, p), ParamError);
}
