#include "trustcore/expand.hpp"

#include <doctest.h>

#include <filesystem>

using namespace trustcore;

namespace {

// A small frozen-encoder world expressed directly in embedding space: class
// means on a simplex with Gaussian spread.
struct EmbWorld {
    MatX emb;
    VecXi labels;
    int num_classes;
};

EmbWorld make_world(int classes, int per_class, int dim, std::uint64_t seed) {
    EmbWorld w;
    w.num_classes = classes;
    const int n = classes * per_class;
    w.emb.resize(n, dim);
    w.labels.resize(n);
    Rng rng(seed);
    int row = 0;
    for (int c = 0; c < classes; ++c)
        for (int s = 0; s < per_class; ++s, ++row) {
            for (int d = 0; d < dim; ++d)
                w.emb(row, d) = (d == c % dim ? 4.0f : 0.0f) + static_cast<Real>(rng.normal());
            w.labels(row) = c;
        }
    return w;
}

Real mean_loss(const Head& head, const MatX& emb, const VecXi& labels,
               const std::vector<int>& rows) {
    MatX x(static_cast<Eigen::Index>(rows.size()), emb.cols());
    VecXi y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = emb.row(rows[i]);
        y(static_cast<Eigen::Index>(i)) = labels(rows[i]);
    }
    return cross_entropy_per_sample(head.forward(x, nullptr), y).mean();
}

}  // namespace

TEST_CASE("clean pool: uniqueness, ordering, jsonl round-trip") {
    CleanPool pool;
    pool.add(3, Provenance::seed, 0);
    pool.add(1, Provenance::seed, 0);
    pool.add(7, Provenance::loss_expand, 2);
    CHECK_THROWS_AS(pool.add(3, Provenance::meta, 5), ParamError);
    CHECK(pool.size() == 3);
    CHECK(pool.contains(7));
    CHECK(!pool.contains(2));
    CHECK(pool.ids() == std::vector<int>{3, 1, 7});
    CHECK(pool.complement_of({1, 2, 3, 4}) == std::vector<int>{2, 4});

    const auto path = std::filesystem::temp_directory_path() / "trustcore_test_pool.jsonl";
    pool.save_jsonl(path);
    const CleanPool back = CleanPool::load_jsonl(path);
    REQUIRE(back.size() == pool.size());
    for (std::size_t i = 0; i < pool.entries().size(); ++i) {
        CHECK(back.entries()[i].id == pool.entries()[i].id);
        CHECK(back.entries()[i].prov == pool.entries()[i].prov);
        CHECK(back.entries()[i].round == pool.entries()[i].round);
    }
}

TEST_CASE("confusion_train: lambda=1 matches plain step training exactly") {
    const EmbWorld w = make_world(4, 50, 8, 3);
    std::vector<int> rest, base;
    for (int i = 0; i < w.emb.rows(); ++i) (i % 10 == 0 ? base : rest).push_back(i);

    Rng rng(5);
    Head a(8, 4, HeadConfig{16, 12}, rng);
    Head b = a;
    ConfusionOpts opts;
    opts.steps = 120;
    opts.batch_size = 64;
    opts.learning_rate = 0.01f;
    opts.momentum = 0.9f;
    confusion_train(a, w.emb, w.labels, rest, base, /*lambda=*/1.0f, opts, 99);
    train_head_steps(b, w.emb, w.labels, rest, opts, 99);
    CHECK(hash_head(a) == hash_head(b));
}

TEST_CASE("confusion_train: lambda=0 strictly increases the base loss") {
    const EmbWorld w = make_world(4, 60, 8, 7);
    std::vector<int> rest, base;
    for (int i = 0; i < w.emb.rows(); ++i) (i % 8 == 0 ? base : rest).push_back(i);

    Rng rng(6);
    Head head(8, 4, HeadConfig{16, 12}, rng);
    // First fit the head so the base set starts at low loss.
    ConfusionOpts fit;
    fit.steps = 300;
    fit.batch_size = 64;
    fit.learning_rate = 0.01f;
    fit.momentum = 0.9f;
    train_head_steps(head, w.emb, w.labels, rest, fit, 1);
    const Real before = mean_loss(head, w.emb, w.labels, base);

    ConfusionOpts ct;
    ct.steps = 200;
    ct.batch_size = 64;
    ct.learning_rate = 0.01f;
    ct.momentum = 0.9f;
    confusion_train(head, w.emb, w.labels, rest, base, /*lambda=*/0.0f, ct, 2);
    const Real after = mean_loss(head, w.emb, w.labels, base);
    CHECK(after > before);
}

TEST_CASE("confusion_train: parameter and lambda validation") {
    const EmbWorld w = make_world(2, 20, 4, 9);
    std::vector<int> all;
    for (int i = 0; i < w.emb.rows(); ++i) all.push_back(i);
    Rng rng(1);
    Head head(4, 2, HeadConfig{8, 8}, rng);
    ConfusionOpts opts;
    opts.steps = 5;
    CHECK_THROWS_AS(confusion_train(head, w.emb, w.labels, {}, all, 0.5f, opts, 1), ParamError);
    CHECK_THROWS_AS(confusion_train(head, w.emb, w.labels, all, {}, 0.5f, opts, 1), ParamError);
    CHECK_THROWS_AS(confusion_train(head, w.emb, w.labels, all, all, 1.5f, opts, 1), ParamError);
}

// Dataset-level expansion fixture shared by the remaining cases: a small
// glyph world with a real (tiny) encoder.
namespace {

struct ExpandFixture {
    LabeledDataset ds;
    Encoder encoder;
    SiftResult seeds;

    ExpandFixture() : ds(generate_glyphs(4, 60, 16, 21)) {
        EncoderConfig cfg;
        cfg.block_channels = {8, 16};
        TrainOpts opts;
        opts.epochs = 3;
        opts.batch_size = 32;
        opts.learning_rate = 0.02f;
        opts.rng_seed = 4;
        encoder = pretrain_encoder(ds, cfg, opts);
        TapModel model{encoder, Head()};
        Rng rng(8);
        model.head = make_head(encoder, 4, HeadConfig{32, 16}, rng);
        TrainOpts hopts;
        hopts.epochs = 10;
        hopts.rng_seed = 5;
        train_head(encoder, model.head, ds, hopts);
        SiftParams sp;
        sp.alpha = 0.05;  // 3 per class
        sp.neighbors = 10;
        seeds = sift_seeds(model, ds, sp);
    }
};

}  // namespace

TEST_CASE("expand_seed: growth arithmetic, disjointness, provenance, determinism") {
    const ExpandFixture fx;
    ExpansionParams params;
    params.target_ratio = 0.30;
    params.r_expand = 0.10;
    params.head_retrain.epochs = 5;
    params.confusion.steps = 30;
    params.rng_seed = 31;

    const auto flag_reads_before = fx.ds.poison_flag_reads();
    const CleanPool pool = expand_seed(fx.encoder, fx.ds, fx.seeds, params);
    CHECK(fx.ds.poison_flag_reads() == flag_reads_before);  // defender never peeked

    // Seeds first, tagged as seeds, never evicted.
    const std::size_t n_seeds = fx.seeds.all_seeds().size();
    REQUIRE(pool.entries().size() >= n_seeds);
    for (std::size_t i = 0; i < n_seeds; ++i) {
        CHECK(pool.entries()[i].prov == Provenance::seed);
        CHECK(pool.entries()[i].round == 0);
    }

    // Per-round growth is exactly ceil(|rest| * r_expand).
    std::size_t size = n_seeds;
    int round = 1;
    for (std::size_t i = n_seeds; i < pool.entries().size();) {
        const std::size_t rest = static_cast<std::size_t>(fx.ds.size()) - size;
        const std::size_t expect = ceil_count(params.r_expand, rest);
        std::size_t got = 0;
        while (i < pool.entries().size() && pool.entries()[i].round == round) {
            CHECK(pool.entries()[i].prov == Provenance::loss_expand);
            ++got;
            ++i;
        }
        REQUIRE(got == expect);
        size += got;
        ++round;
    }
    CHECK(static_cast<double>(pool.size()) >= 0.30 * fx.ds.size() - 1e-6);

    // Unique ids (disjoint additions) within the dataset.
    std::vector<int> ids = pool.ids();
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());

    // Bit-for-bit reproducible trajectory.
    const CleanPool again = expand_seed(fx.encoder, fx.ds, fx.seeds, params);
    REQUIRE(again.entries().size() == pool.entries().size());
    for (std::size_t i = 0; i < pool.entries().size(); ++i) {
        CHECK(again.entries()[i].id == pool.entries()[i].id);
        CHECK(again.entries()[i].round == pool.entries()[i].round);
    }
}

TEST_CASE("expand_seed: pre-satisfied target returns the seeds untouched") {
    const ExpandFixture fx;
    ExpansionParams params;
    const std::size_t n_seeds = fx.seeds.all_seeds().size();
    params.target_ratio = static_cast<double>(n_seeds) / fx.ds.size();
    params.rng_seed = 1;
    const CleanPool pool = expand_seed(fx.encoder, fx.ds, fx.seeds, params);
    CHECK(pool.size() == n_seeds);
    for (const auto& e : pool.entries()) CHECK(e.prov == Provenance::seed);
}

TEST_CASE("expand_seed: empty-seed class rejected") {
    const ExpandFixture fx;
    SiftResult broken = fx.seeds;
    broken.per_class[1].seeds.clear();
    ExpansionParams params;
    CHECK_THROWS_AS(expand_seed(fx.encoder, fx.ds, broken, params), ParamError);
}
