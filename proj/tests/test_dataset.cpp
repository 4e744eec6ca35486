#include "trustcore/dataset.hpp"
#include "trustcore/nn.hpp"
#include "trustcore/tensor_io.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace trustcore;
namespace fsys = std::filesystem;

namespace {

fsys::path temp_dir(const std::string& tag) {
    const fsys::path p = fsys::temp_directory_path() / ("trustcore_test_" + tag);
    fsys::remove_all(p);
    fsys::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("glyphs: counts, determinism, pixel range") {
    const LabeledDataset ds = generate_glyphs(10, 500, 32, 1);
    CHECK(ds.size() == 5000);
    for (int c = 0; c < 10; ++c) CHECK(ds.class_ids(c).size() == 500);
    CHECK(ds.images.minCoeff() >= 0.0f);
    CHECK(ds.images.maxCoeff() <= 1.0f);
    ds.validate();

    const LabeledDataset again = generate_glyphs(10, 500, 32, 1);
    CHECK(ds.images == again.images);
    CHECK(ds.labels == again.labels);

    const LabeledDataset other = generate_glyphs(10, 500, 32, 2);
    CHECK(ds.images != other.images);
}

TEST_CASE("glyphs: parameter validation") {
    CHECK_THROWS_AS(generate_glyphs(1, 100, 32, 0), ParamError);
    CHECK_THROWS_AS(generate_glyphs(10, 5, 32, 0), ParamError);
    CHECK_THROWS_AS(generate_glyphs(10, 100, 8, 0), ParamError);
}

TEST_CASE("glyphs: two classes are probe-separable on raw pixels") {
    // Logistic probe trained directly on pixels must reach > 0.9 on the
    // training set for the smallest allowed configuration.
    const LabeledDataset ds = generate_glyphs(2, 10, 16, 7);
    Rng rng(3);
    LinearT<Real> probe(ds.pixels_per_image(), 2, rng);
    MatX x = ds.images;  // row-major to column-major copy
    VecXi y = ds.labels;
    for (int step = 0; step < 400; ++step) {
        MatX logits = probe.forward(x);
        MatX dlogits;
        cross_entropy_backward(logits, y, dlogits);
        MatX dw = MatX::Zero(probe.weight.rows(), probe.weight.cols());
        MatX db = MatX::Zero(probe.bias.rows(), 1);
        probe.backward(x, dlogits, dw, db, nullptr);
        probe.weight -= 0.5f * dw;
        probe.bias -= 0.5f * db;
    }
    const MatX logits = probe.forward(x);
    int correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg;
        logits.row(i).maxCoeff(&arg);
        if (static_cast<int>(arg) == y(i)) ++correct;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(ds.size()) > 0.9);
}

TEST_CASE("split: stratified counts and determinism") {
    const LabeledDataset ds = generate_glyphs(4, 100, 16, 5);
    const SplitSpec spec{0.5, 0.4, 0.1, 42};
    const SplitResult parts = split(ds, spec);
    for (int c = 0; c < 4; ++c) {
        CHECK(parts.pretrain.class_ids(c).size() == 50);
        CHECK(parts.downstream.class_ids(c).size() == 40);
        CHECK(parts.test.class_ids(c).size() == 10);
    }
    const SplitResult again = split(ds, spec);
    CHECK(parts.pretrain.ids == again.pretrain.ids);
    CHECK(parts.downstream.ids == again.downstream.ids);
    CHECK(parts.test.ids == again.test.ids);

    const SplitResult other = split(ds, SplitSpec{0.5, 0.4, 0.1, 43});
    CHECK(parts.pretrain.ids != other.pretrain.ids);
}

TEST_CASE("split: disjoint and exhaustive over random specs") {
    const LabeledDataset ds = generate_glyphs(3, 60, 16, 9);
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const double a = 0.2 + 0.4 * rng.uniform();
        const double b = 0.1 + 0.3 * rng.uniform();
        const SplitSpec spec{a, 1.0 - a - b, b, rng.next_u64()};
        const SplitResult parts = split(ds, spec);
        std::vector<int> all;
        for (const auto* part : {&parts.pretrain, &parts.downstream, &parts.test})
            all.insert(all.end(), part->ids.begin(), part->ids.end());
        std::sort(all.begin(), all.end());
        std::vector<int> expect = ds.ids;
        std::sort(expect.begin(), expect.end());
        REQUIRE(all == expect);  // disjoint (no dup after sort+equal) and exhaustive
    }
}

TEST_CASE("split: degenerate fractions rejected") {
    const LabeledDataset ds = generate_glyphs(2, 20, 16, 1);
    CHECK_THROWS_AS(split(ds, SplitSpec{1.0, 0.0, 0.0, 1}), DegenerateSplitError);
    CHECK_THROWS_AS(split(ds, SplitSpec{0.5, 0.5, 0.0, 1}), DegenerateSplitError);
    CHECK_THROWS_AS(split(ds, SplitSpec{0.5, 0.2, 0.2, 1}), ParamError);  // sums to 0.9
}

TEST_CASE("cifar10: single handcrafted record decodes") {
    const fsys::path dir = temp_dir("cifar_single");
    const fsys::path file = dir / "one_record.bin";
    std::vector<std::uint8_t> rec(3073, 255);
    rec[0] = 3;
    write_bytes(file, rec.data(), rec.size());

    const LabeledDataset ds = load_cifar10(file);
    CHECK(ds.size() == 1);
    CHECK(ds.labels(0) == 3);
    CHECK(ds.images.row(0).minCoeff() == 1.0f);
    CHECK(ds.channels == 3);
    CHECK(ds.height == 32);
    CHECK(ds.width == 32);
}

TEST_CASE("cifar10: malformed inputs") {
    const fsys::path dir = temp_dir("cifar_bad");
    {
        std::ofstream f(dir / "empty.bin", std::ios::binary);
    }
    CHECK_THROWS_AS(load_cifar10(dir / "empty.bin"), FormatError);

    std::vector<std::uint8_t> bad(3072, 0);  // one byte short
    write_bytes(dir / "short.bin", bad.data(), bad.size());
    CHECK_THROWS_AS(load_cifar10(dir / "short.bin"), FormatError);

    std::vector<std::uint8_t> badlabel(3073, 0);
    badlabel[0] = 10;
    write_bytes(dir / "badlabel.bin", badlabel.data(), badlabel.size());
    CHECK_THROWS_AS(load_cifar10(dir / "badlabel.bin"), CorruptLabelError);
}

TEST_CASE("cifar10: record round-trip and full archive layout") {
    const fsys::path dir = temp_dir("cifar_full");
    // Synthesize the standard 5-batch train layout + test batch.
    Rng rng(123);
    auto make_batch = [&](const fsys::path& p, int n) {
        std::vector<std::uint8_t> bytes;
        bytes.reserve(static_cast<std::size_t>(n) * 3073);
        for (int i = 0; i < n; ++i) {
            bytes.push_back(static_cast<std::uint8_t>(rng.uniform_int(10)));
            for (int q = 0; q < 3072; ++q)
                bytes.push_back(static_cast<std::uint8_t>(rng.uniform_int(256)));
        }
        write_bytes(p, bytes.data(), bytes.size());
        return bytes;
    };
    std::vector<std::uint8_t> train_bytes;
    for (int b = 1; b <= 5; ++b) {
        auto bb = make_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), 10000);
        train_bytes.insert(train_bytes.end(), bb.begin(), bb.end());
    }
    make_batch(dir / "test_batch.bin", 10000);

    const LabeledDataset train = load_cifar10(dir);
    CHECK(train.size() == 50000);
    const LabeledDataset test = load_cifar10(dir, true);
    CHECK(test.size() == 10000);

    // decode -> re-encode reproduces the original bytes
    CHECK(encode_cifar10_records(train) == train_bytes);
    fsys::remove_all(dir);
}

TEST_CASE("dataset: directory persistence round-trip") {
    LabeledDataset ds = generate_glyphs(3, 20, 16, 11);
    ds.mutable_poison_flags()[5] = 1;
    const fsys::path dir = temp_dir("ds_roundtrip");
    save_dataset(dir / "ds", ds);
    const LabeledDataset back = load_dataset(dir / "ds");
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
    CHECK(back.ids == ds.ids);
    CHECK(back.evaluation_only_poison_flags() == ds.evaluation_only_poison_flags());
}

TEST_CASE("dataset: id lookup and flag read audit") {
    const LabeledDataset ds = generate_glyphs(2, 10, 16, 2);
    CHECK_THROWS_AS(ds.row_of(9999), LookupError);
    const auto reads_before = ds.poison_flag_reads();
    (void)ds.class_ids(0);
    (void)ds.row_of(3);
    CHECK(ds.poison_flag_reads() == reads_before);
    (void)ds.evaluation_only_poison_flags();
    CHECK(ds.poison_flag_reads() == reads_before + 1);
}
