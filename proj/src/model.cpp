#include "trustcore/model.hpp"

#include "trustcore/tensor_io.hpp"

#include <cstring>

namespace trustcore {

FeatureMap to_feature_map(const RowMatX& images, const std::vector<int>& rows, int c, int h,
                          int w) {
    const int hw = h * w;
    if (images.cols() != static_cast<Eigen::Index>(c) * hw)
        throw ShapeError("to_feature_map: image width does not match dims");
    FeatureMap fm;
    fm.batch = static_cast<int>(rows.size());
    fm.h = h;
    fm.w = w;
    fm.act.resize(static_cast<Eigen::Index>(fm.batch) * hw, c);
    for (int j = 0; j < c; ++j) {
        Real* dst = fm.act.data() + static_cast<std::size_t>(j) * fm.act.rows();
        for (int b = 0; b < fm.batch; ++b) {
            const Real* src = images.data() +
                              static_cast<std::size_t>(rows[static_cast<std::size_t>(b)]) *
                                  images.cols() +
                              static_cast<std::size_t>(j) * hw;
            std::memcpy(dst + static_cast<std::size_t>(b) * hw, src, sizeof(Real) * hw);
        }
    }
    return fm;
}

FeatureMap to_feature_map(const RowMatX& images, int c, int h, int w) {
    std::vector<int> rows(static_cast<std::size_t>(images.rows()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
    return to_feature_map(images, rows, c, h, w);
}

TapForward forward_with_taps(const TapModel& model, const FeatureMap& batch) {
    TapForward out;
    const MatX emb = model.encoder.forward_eval(batch, nullptr);
    Head::Cache hc;
    out.logits = model.head.forward(emb, &hc);
    out.taps = {emb, std::move(hc.a1), std::move(hc.a2)};
    for (const MatX& t : out.taps)
        if (!t.allFinite()) throw TrainingDivergedError("non-finite tap activation");
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
namespace {

struct TensorEntry {
    std::string name;
    const MatX* tensor;
};

std::vector<TensorEntry> encoder_tensors(const Encoder& e) {
    std::vector<TensorEntry> v;
    for (int l = 0; l < e.num_blocks(); ++l) {
        const std::string p = "enc.block" + std::to_string(l) + ".";
        v.push_back({p + "conv.weight", &e.convs[static_cast<std::size_t>(l)].weight});
        v.push_back({p + "norm.gamma", &e.norms[static_cast<std::size_t>(l)].gamma});
        v.push_back({p + "norm.beta", &e.norms[static_cast<std::size_t>(l)].beta});
        v.push_back({p + "norm.run_mean", &e.norms[static_cast<std::size_t>(l)].run_mean});
        v.push_back({p + "norm.run_var", &e.norms[static_cast<std::size_t>(l)].run_var});
        if (e.masks_engaged())
            v.push_back({p + "mask", &e.masks[static_cast<std::size_t>(l)]});
    }
    return v;
}

std::vector<TensorEntry> head_tensors(const Head& h) {
    return {
        {"head.l1.weight", &h.l1.weight}, {"head.l1.bias", &h.l1.bias},
        {"head.l2.weight", &h.l2.weight}, {"head.l2.bias", &h.l2.bias},
        {"head.l3.weight", &h.l3.weight}, {"head.l3.bias", &h.l3.bias},
    };
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Encoder& encoder, const Head* head,
                     int num_classes, std::uint64_t seed) {
    fs::create_directories(dir);
    Json m;
    m["format"] = "trustcore-checkpoint-v1";
    m["byte_order"] = "little-endian";
    m["scalar"] = "float32";
    m["seed"] = seed;
    m["num_classes"] = num_classes;
    m["encoder"] = {{"block_channels", encoder.cfg.block_channels},
                    {"kernel", encoder.cfg.kernel},
                    {"in_channels", encoder.cfg.in_channels},
                    {"masks_engaged", encoder.masks_engaged()}};
    if (head) m["head"] = {{"hidden1", head->cfg.hidden1}, {"hidden2", head->cfg.hidden2}};

    auto entries = encoder_tensors(encoder);
    if (head) {
        auto ht = head_tensors(*head);
        entries.insert(entries.end(), ht.begin(), ht.end());
    }
    Json tensors = Json::array();
    for (const auto& [name, tensor] : entries) {
        tensors.push_back({{"name", name},
                           {"rows", tensor->rows()},
                           {"cols", tensor->cols()},
                           {"file", name + ".f32"}});
        write_tensor(dir / (name + ".f32"), *tensor);
    }
    m["tensors"] = tensors;
    write_json(dir / "manifest.json", m);
}

namespace {

MatX load_named(const fs::path& dir, const Json& manifest, const std::string& name) {
    for (const auto& t : manifest.at("tensors")) {
        if (t.at("name") == name) {
            MatX m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
            read_tensor(dir / t.at("file").get<std::string>(), m);
            return m;
        }
    }
    throw IoError("checkpoint tensor missing: " + name);
}

}  // namespace

Encoder load_encoder(const fs::path& dir) {
    const Json m = read_json(dir / "manifest.json");
    EncoderConfig cfg;
    cfg.block_channels = m.at("encoder").at("block_channels").get<std::vector<int>>();
    cfg.kernel = m.at("encoder").at("kernel").get<int>();
    cfg.in_channels = m.at("encoder").at("in_channels").get<int>();
    Rng rng(0);
    Encoder e(cfg, rng);
    const bool masks = m.at("encoder").at("masks_engaged").get<bool>();
    if (masks) e.engage_masks();
    for (int l = 0; l < e.num_blocks(); ++l) {
        const std::string p = "enc.block" + std::to_string(l) + ".";
        const auto li = static_cast<std::size_t>(l);
        e.convs[li].weight = load_named(dir, m, p + "conv.weight");
        e.norms[li].gamma = load_named(dir, m, p + "norm.gamma");
        e.norms[li].beta = load_named(dir, m, p + "norm.beta");
        e.norms[li].run_mean = load_named(dir, m, p + "norm.run_mean");
        e.norms[li].run_var = load_named(dir, m, p + "norm.run_var");
        if (masks) e.masks[li] = load_named(dir, m, p + "mask");
    }
    return e;
}

bool checkpoint_has_head(const fs::path& dir) {
    return read_json(dir / "manifest.json").contains("head");
}

Head load_head(const fs::path& dir) {
    const Json m = read_json(dir / "manifest.json");
    if (!m.contains("head")) throw IoError("checkpoint has no head: " + dir.string());
    Head h;
    h.cfg.hidden1 = m.at("head").at("hidden1").get<int>();
    h.cfg.hidden2 = m.at("head").at("hidden2").get<int>();
    h.l1.weight = load_named(dir, m, "head.l1.weight");
    h.l1.bias = load_named(dir, m, "head.l1.bias");
    h.l2.weight = load_named(dir, m, "head.l2.weight");
    h.l2.bias = load_named(dir, m, "head.l2.bias");
    h.l3.weight = load_named(dir, m, "head.l3.weight");
    h.l3.bias = load_named(dir, m, "head.l3.bias");
    return h;
}

std::uint64_t hash_conv_weights(const Encoder& e) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& c : e.convs) h = hash_matrix(c.weight, h);
    return h;
}

std::uint64_t hash_norm_affine(const Encoder& e) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& n : e.norms) {
        h = hash_matrix(n.gamma, h);
        h = hash_matrix(n.beta, h);
    }
    return h;
}

std::uint64_t hash_norm_stats(const Encoder& e) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& n : e.norms) {
        h = hash_matrix(n.run_mean, h);
        h = hash_matrix(n.run_var, h);
    }
    return h;
}

std::uint64_t hash_masks(const Encoder& e) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& m : e.masks) h = hash_matrix(m, h);
    return h;
}

std::uint64_t hash_head(const Head& h) {
    std::uint64_t v = 1469598103934665603ull;
    v = hash_matrix(h.l1.weight, v);
    v = hash_matrix(h.l1.bias, v);
    v = hash_matrix(h.l2.weight, v);
    v = hash_matrix(h.l2.bias, v);
    v = hash_matrix(h.l3.weight, v);
    v = hash_matrix(h.l3.bias, v);
    return v;
}

}  // namespace trustcore
