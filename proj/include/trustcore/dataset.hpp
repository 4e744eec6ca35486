#pragma once

// Dataset representation, CIFAR-10 binary ingestion, procedural glyph
// generation, deterministic stratified splits, directory persistence.

#include "trustcore/common.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace trustcore {

// Images are one row per sample, plane-major (all of channel 0, then channel
// 1, ...), pixel values in [0,1]. Ids are dense integers assigned at load
// time and survive splits/subsets; everything downstream references ids,
// never row positions. Ground-truth poison flags live behind an
// evaluation-only accessor; defense code receives the same object but the
// accessor counts reads so tests can audit that no defense path touched it.
class LabeledDataset {
public:
    RowMatX images;
    VecXi labels;
    std::vector<int> ids;
    int channels = 3, height = 0, width = 0, num_classes = 0;

    int size() const { return static_cast<int>(ids.size()); }
    int pixels_per_image() const { return channels * height * width; }

    void rebuild_index();
    int row_of(int id) const;
    int label_of(int id) const { return labels(row_of(id)); }
    const std::vector<int>& class_ids(int cls) const;

    // Evaluation-only ground truth. Defense operations must never call these;
    // the read counter makes that auditable at runtime.
    const std::vector<std::uint8_t>& evaluation_only_poison_flags() const {
        ++flag_reads_;
        return poison_flags_;
    }
    bool evaluation_only_is_poison(int id) const {
        ++flag_reads_;
        return poison_flags_[static_cast<std::size_t>(row_of(id))] != 0;
    }
    std::uint64_t poison_flag_reads() const { return flag_reads_; }

    // Construction-time access (loaders, poisoning); not part of the defense
    // surface.
    std::vector<std::uint8_t>& mutable_poison_flags() { return poison_flags_; }

    void validate() const;

private:
    std::vector<std::uint8_t> poison_flags_;
    std::vector<int> id_to_row_;
    std::map<int, std::vector<int>> class_index_;
    mutable std::uint64_t flag_reads_ = 0;
};

struct SplitSpec {
    double pretrain_fraction = 0.5;
    double downstream_fraction = 0.4;
    double test_fraction = 0.1;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

struct SplitResult {
    LabeledDataset pretrain, downstream, test;
};

// Stratified by class, deterministic by seed; remainder rows go to the
// downstream split. Any class left empty in any split is an error.
SplitResult split(const LabeledDataset& dataset, const SplitSpec& spec);

// CIFAR-10 binary batches (3073-byte records: label byte + 3*1024 pixel
// bytes). `path` may be a single batch file or a directory holding the
// standard layout (data_batch_1..5.bin + test_batch.bin).
LabeledDataset load_cifar10(const std::filesystem::path& path, bool test_split = false);
// Re-encode to record bytes (round-trip check, fixture generation).
std::vector<std::uint8_t> encode_cifar10_records(const LabeledDataset& ds);

// Procedural shape-per-class dataset: distinct shape + base hue per class,
// randomized position/scale/noise, deterministic for a fixed seed.
LabeledDataset generate_glyphs(int num_classes, int per_class, int size, std::uint64_t rng_seed);

// Directory persistence: manifest.json + images.f32 + labels.i32 (+ poison
// flags, which are evaluation metadata carried alongside).
void save_dataset(const std::filesystem::path& dir, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& dir);

}  // namespace trustcore
