#include "trustcore/dataset.hpp"

#include "trustcore/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace trustcore {

void LabeledDataset::rebuild_index() {
    class_index_.clear();
    int max_id = -1;
    for (int id : ids) max_id = std::max(max_id, id);
    id_to_row_.assign(static_cast<std::size_t>(max_id) + 1, -1);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const int id = ids[r];
        if (id < 0 || id_to_row_[static_cast<std::size_t>(id)] != -1)
            throw ParamError("dataset ids must be unique and non-negative");
        id_to_row_[static_cast<std::size_t>(id)] = static_cast<int>(r);
        class_index_[labels(static_cast<Eigen::Index>(r))].push_back(id);
    }
    if (poison_flags_.empty()) poison_flags_.assign(ids.size(), 0);
}

int LabeledDataset::row_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_row_.size() ||
        id_to_row_[static_cast<std::size_t>(id)] < 0)
        throw LookupError("unknown sample id " + std::to_string(id));
    return id_to_row_[static_cast<std::size_t>(id)];
}

const std::vector<int>& LabeledDataset::class_ids(int cls) const {
    auto it = class_index_.find(cls);
    if (it == class_index_.end()) {
        static const std::vector<int> empty;
        return empty;
    }
    return it->second;
}

void LabeledDataset::validate() const {
    if (images.rows() != static_cast<Eigen::Index>(ids.size()) ||
        labels.size() != static_cast<Eigen::Index>(ids.size()))
        throw ShapeError("dataset arrays out of sync");
    if (images.cols() != pixels_per_image()) throw ShapeError("image width mismatch");
    for (Eigen::Index i = 0; i < labels.size(); ++i)
        if (labels(i) < 0 || labels(i) >= num_classes) throw ParamError("label out of range");
    if ((images.array() < Real(0)).any() || (images.array() > Real(1)).any())
        throw ParamError("pixel values outside [0,1]");
    std::size_t total = 0;
    for (int c = 0; c < num_classes; ++c) total += class_ids(c).size();
    if (total != ids.size()) throw ParamError("class index does not partition ids");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------
void SplitSpec::validate() const {
    const double sum = pretrain_fraction + downstream_fraction + test_fraction;
    if (std::abs(sum - 1.0) > 1e-9) throw ParamError("split fractions must sum to 1");
    for (double f : {pretrain_fraction, downstream_fraction, test_fraction})
        if (f < 0 || f > 1) throw ParamError("split fraction outside [0,1]");
}

namespace {

LabeledDataset take_rows(const LabeledDataset& src, const std::vector<int>& take_ids) {
    LabeledDataset out;
    out.channels = src.channels;
    out.height = src.height;
    out.width = src.width;
    out.num_classes = src.num_classes;
    out.images.resize(static_cast<Eigen::Index>(take_ids.size()), src.images.cols());
    out.labels.resize(static_cast<Eigen::Index>(take_ids.size()));
    out.ids = take_ids;
    auto& flags = out.mutable_poison_flags();
    flags.resize(take_ids.size());
    const auto& src_flags = src.evaluation_only_poison_flags();
    for (std::size_t i = 0; i < take_ids.size(); ++i) {
        const int r = src.row_of(take_ids[i]);
        out.images.row(static_cast<Eigen::Index>(i)) = src.images.row(r);
        out.labels(static_cast<Eigen::Index>(i)) = src.labels(r);
        flags[i] = src_flags[static_cast<std::size_t>(r)];
    }
    out.rebuild_index();
    return out;
}

}  // namespace

SplitResult split(const LabeledDataset& dataset, const SplitSpec& spec) {
    spec.validate();
    Rng rng(spec.rng_seed);
    std::vector<int> pre_ids, down_ids, test_ids;
    for (int c = 0; c < dataset.num_classes; ++c) {
        std::vector<int> cls = dataset.class_ids(c);
        std::sort(cls.begin(), cls.end());
        rng.shuffle(cls);
        const auto n = cls.size();
        const auto n_pre = static_cast<std::size_t>(std::floor(spec.pretrain_fraction * static_cast<double>(n)));
        const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(n)));
        if (n_pre + n_test > n) throw DegenerateSplitError("split fractions overflow class");
        const auto n_down = n - n_pre - n_test;
        if (n_pre == 0 || n_down == 0 || n_test == 0)
            throw DegenerateSplitError("class " + std::to_string(c) + " empty in some split");
        pre_ids.insert(pre_ids.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_pre));
        test_ids.insert(test_ids.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_pre),
                        cls.begin() + static_cast<std::ptrdiff_t>(n_pre + n_test));
        down_ids.insert(down_ids.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_pre + n_test),
                        cls.end());
        (void)n_down;
    }
    std::sort(pre_ids.begin(), pre_ids.end());
    std::sort(down_ids.begin(), down_ids.end());
    std::sort(test_ids.begin(), test_ids.end());
    SplitResult out;
    out.pretrain = take_rows(dataset, pre_ids);
    out.downstream = take_rows(dataset, down_ids);
    out.test = take_rows(dataset, test_ids);
    return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------
namespace {

constexpr int kCifarRecord = 3073;
constexpr int kCifarPixels = 3072;

void decode_cifar_file(const fs::path& file, std::vector<std::uint8_t>& labels,
                       std::vector<std::uint8_t>& pixels) {
    const std::string bytes = read_bytes(file);
    if (bytes.empty()) throw FormatError("empty CIFAR batch: " + file.string());
    if (bytes.size() % kCifarRecord != 0)
        throw FormatError("malformed CIFAR record length in " + file.string());
    const std::size_t n = bytes.size() / kCifarRecord;
    for (std::size_t i = 0; i < n; ++i) {
        const auto* rec = reinterpret_cast<const std::uint8_t*>(bytes.data()) + i * kCifarRecord;
        if (rec[0] >= 10)
            throw CorruptLabelError("label byte >= 10 in " + file.string());
        labels.push_back(rec[0]);
        pixels.insert(pixels.end(), rec + 1, rec + kCifarRecord);
    }
}

}  // namespace

LabeledDataset load_cifar10(const fs::path& path, bool test_split) {
    std::vector<std::uint8_t> labels, pixels;
    if (fs::is_directory(path)) {
        if (test_split) {
            decode_cifar_file(path / "test_batch.bin", labels, pixels);
        } else {
            for (int i = 1; i <= 5; ++i)
                decode_cifar_file(path / ("data_batch_" + std::to_string(i) + ".bin"), labels,
                                  pixels);
        }
    } else {
        decode_cifar_file(path, labels, pixels);
    }
    LabeledDataset ds;
    ds.channels = 3;
    ds.height = 32;
    ds.width = 32;
    ds.num_classes = 10;
    const auto n = static_cast<Eigen::Index>(labels.size());
    ds.images.resize(n, kCifarPixels);
    ds.labels.resize(n);
    ds.ids.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        ds.labels(i) = labels[static_cast<std::size_t>(i)];
        ds.ids[static_cast<std::size_t>(i)] = static_cast<int>(i);
        const std::uint8_t* src = pixels.data() + static_cast<std::size_t>(i) * kCifarPixels;
        Real* dst = ds.images.data() + static_cast<std::size_t>(i) * kCifarPixels;
        for (int p = 0; p < kCifarPixels; ++p) dst[p] = static_cast<Real>(src[p]) / Real(255);
    }
    ds.rebuild_index();
    return ds;
}

std::vector<std::uint8_t> encode_cifar10_records(const LabeledDataset& ds) {
    if (ds.pixels_per_image() != kCifarPixels) throw ShapeError("not CIFAR-10 shaped");
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(ds.size()) * kCifarRecord);
    for (int i = 0; i < ds.size(); ++i) {
        out.push_back(static_cast<std::uint8_t>(ds.labels(i)));
        const Real* src = ds.images.data() + static_cast<std::size_t>(i) * kCifarPixels;
        for (int p = 0; p < kCifarPixels; ++p)
            out.push_back(static_cast<std::uint8_t>(std::lround(src[p] * Real(255))));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Glyph generation. Shape + base hue per class; position/scale/noise are
// randomized per sample. Separable enough for a desk-scale probe.
// ---------------------------------------------------------------------------
namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    h = h - std::floor(h);
    const double i = std::floor(h * 6.0);
    const double f = h * 6.0 - i;
    const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

// Coverage in [0,1] for shape `kind` at normalized offset (u,v), unit radius.
double glyph_coverage(int kind, double u, double v) {
    const double r = std::sqrt(u * u + v * v);
    const double soft = 6.0;  // edge softness in normalized units
    auto edge = [&](double signed_dist) {
        return std::clamp(0.5 - soft * signed_dist, 0.0, 1.0);
    };
    switch (kind % 10) {
        case 0:  // disk
            return edge(r - 1.0);
        case 1:  // square
            return edge(std::max(std::abs(u), std::abs(v)) - 1.0);
        case 2: {  // triangle (up)
            const double d = std::max({-v - 0.8, v + 2.0 * std::abs(u) - 1.0});
            return edge(d);
        }
        case 3:  // ring
            return edge(std::abs(r - 0.75) - 0.25);
        case 4: {  // plus
            const double d = std::min(std::max(std::abs(u) - 0.35, std::abs(v) - 1.0),
                                      std::max(std::abs(v) - 0.35, std::abs(u) - 1.0));
            return edge(d);
        }
        case 5: {  // diamond
            return edge(std::abs(u) + std::abs(v) - 1.0);
        }
        case 6: {  // X cross
            const double a = std::abs(u - v) / std::sqrt(2.0);
            const double b = std::abs(u + v) / std::sqrt(2.0);
            const double d = std::min(std::max(a - 0.3, r - 1.0), std::max(b - 0.3, r - 1.0));
            return edge(d);
        }
        case 7: {  // horizontal stripes in a disk
            const double s = std::sin(v * 3.14159265358979 * 2.5);
            return edge(r - 1.0) * (s > 0 ? 1.0 : 0.15);
        }
        case 8: {  // vertical stripes in a square
            const double d = std::max(std::abs(u), std::abs(v)) - 1.0;
            const double s = std::sin(u * 3.14159265358979 * 2.5);
            return edge(d) * (s > 0 ? 1.0 : 0.15);
        }
        default: {  // checkerboard in a square
            const double d = std::max(std::abs(u), std::abs(v)) - 1.0;
            const bool on = (std::sin(u * 3.14159265358979 * 1.7) *
                             std::sin(v * 3.14159265358979 * 1.7)) > 0;
            return edge(d) * (on ? 1.0 : 0.15);
        }
    }
}

}  // namespace

LabeledDataset generate_glyphs(int num_classes, int per_class, int size,
                               std::uint64_t rng_seed) {
    if (num_classes < 2) throw ParamError("generate_glyphs: num_classes >= 2 required");
    if (per_class < 10) throw ParamError("generate_glyphs: per_class >= 10 required");
    if (size < 16) throw ParamError("generate_glyphs: size >= 16 required");

    LabeledDataset ds;
    ds.channels = 3;
    ds.height = size;
    ds.width = size;
    ds.num_classes = num_classes;
    const int n = num_classes * per_class;
    const int hw = size * size;
    ds.images.resize(n, 3 * hw);
    ds.labels.resize(n);
    ds.ids.resize(static_cast<std::size_t>(n));

    Rng rng(rng_seed);
    int row = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        for (int s = 0; s < per_class; ++s, ++row) {
            // Per-sample nuisance: position, scale, aspect, small rotation
            // (small enough to keep square/diamond and plus/cross distinct),
            // hue/value jitter, background level, pixel noise.
            const double cx = size / 2.0 + (rng.uniform() - 0.5) * size / 4.0;
            const double cy = size / 2.0 + (rng.uniform() - 0.5) * size / 4.0;
            const double radius = (0.45 + 0.45 * rng.uniform()) * size / 2.0 * 0.8;
            const double aspect = 0.7 + 0.6 * rng.uniform();
            const double theta = (rng.uniform() - 0.5) * 0.7;  // ~ +/- 20 degrees
            const double ct = std::cos(theta), st = std::sin(theta);
            const double bg = 0.05 + 0.20 * rng.uniform();
            double rgb[3];
            hsv_to_rgb(static_cast<double>(cls) / num_classes + 0.06 * (rng.uniform() - 0.5),
                       0.65 + 0.3 * rng.uniform(), 0.75 + 0.2 * rng.uniform(), rgb);
            Real* img = ds.images.data() + static_cast<std::size_t>(row) * 3 * hw;
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    const double du = (x + 0.5 - cx) / radius;
                    const double dv = (y + 0.5 - cy) / radius;
                    const double u = (du * ct + dv * st) * aspect;
                    const double v = -du * st + dv * ct;
                    const double cov = glyph_coverage(cls, u, v);
                    for (int ch = 0; ch < 3; ++ch) {
                        double val = bg + cov * (rgb[ch] - bg);
                        val += 0.05 * rng.normal();
                        img[ch * hw + y * size + x] =
                            static_cast<Real>(std::clamp(val, 0.0, 1.0));
                    }
                }
            }
            ds.labels(row) = cls;
            ds.ids[static_cast<std::size_t>(row)] = row;
        }
    }
    ds.rebuild_index();
    return ds;
}

// ---------------------------------------------------------------------------
// Directory persistence
// ---------------------------------------------------------------------------
void save_dataset(const fs::path& dir, const LabeledDataset& ds) {
    fs::create_directories(dir);
    Json m;
    m["format"] = "trustcore-dataset-v1";
    m["n"] = ds.size();
    m["channels"] = ds.channels;
    m["height"] = ds.height;
    m["width"] = ds.width;
    m["num_classes"] = ds.num_classes;
    m["ids"] = ds.ids;
    m["files"] = {{"images", "images.f32"}, {"labels", "labels.i32"}, {"poison_flags", "poison_flags.u8"}};
    write_json(dir / "manifest.json", m);
    write_bytes(dir / "images.f32", ds.images.data(),
                sizeof(Real) * static_cast<std::size_t>(ds.images.size()));
    std::vector<std::int32_t> lab(static_cast<std::size_t>(ds.labels.size()));
    for (Eigen::Index i = 0; i < ds.labels.size(); ++i) lab[static_cast<std::size_t>(i)] = ds.labels(i);
    write_bytes(dir / "labels.i32", lab.data(), sizeof(std::int32_t) * lab.size());
    const auto& flags = ds.evaluation_only_poison_flags();
    write_bytes(dir / "poison_flags.u8", flags.data(), flags.size());
}

LabeledDataset load_dataset(const fs::path& dir) {
    const Json m = read_json(dir / "manifest.json");
    LabeledDataset ds;
    const int n = m.at("n").get<int>();
    ds.channels = m.at("channels").get<int>();
    ds.height = m.at("height").get<int>();
    ds.width = m.at("width").get<int>();
    ds.num_classes = m.at("num_classes").get<int>();
    ds.ids = m.at("ids").get<std::vector<int>>();
    ds.images.resize(n, ds.pixels_per_image());
    const std::string img = read_bytes(dir / "images.f32");
    if (img.size() != sizeof(Real) * static_cast<std::size_t>(ds.images.size()))
        throw IoError("dataset image payload size mismatch");
    std::memcpy(ds.images.data(), img.data(), img.size());
    const std::string lab = read_bytes(dir / "labels.i32");
    if (lab.size() != sizeof(std::int32_t) * static_cast<std::size_t>(n))
        throw IoError("dataset label payload size mismatch");
    ds.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        std::int32_t v;
        std::memcpy(&v, lab.data() + sizeof(std::int32_t) * static_cast<std::size_t>(i), sizeof v);
        ds.labels(i) = v;
    }
    const std::string flags = read_bytes(dir / "poison_flags.u8");
    if (flags.size() != static_cast<std::size_t>(n)) throw IoError("poison flag payload mismatch");
    ds.mutable_poison_flags().assign(flags.begin(), flags.end());
    ds.rebuild_index();
    return ds;
}

}  // namespace trustcore
