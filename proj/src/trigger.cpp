#include "trustcore/trigger.hpp"

#include <algorithm>
#include <cmath>

namespace trustcore {

std::string to_string(TriggerKind k) {
    switch (k) {
        case TriggerKind::patch: return "patch";
        case TriggerKind::blend: return "blend";
        case TriggerKind::sinusoid: return "sinusoid";
        case TriggerKind::source_specific_patch: return "source_specific_patch";
        case TriggerKind::uap: return "uap";
    }
    throw ParamError("bad trigger kind");
}

TriggerKind trigger_kind_from_string(const std::string& s) {
    if (s == "patch") return TriggerKind::patch;
    if (s == "blend") return TriggerKind::blend;
    if (s == "sinusoid") return TriggerKind::sinusoid;
    if (s == "source_specific_patch") return TriggerKind::source_specific_patch;
    if (s == "uap") return TriggerKind::uap;
    throw ParamError("unknown trigger kind: " + s);
}

void TriggerSpec::validate(int num_classes) const {
    if (target_class < 0 || target_class >= num_classes)
        throw ParamError("trigger target class out of range");
    if (poison_ratio < 0 || poison_ratio >= 1) throw ParamError("poison ratio outside [0,1)");
    if (cover_ratio < 0 || cover_ratio >= 1) throw ParamError("cover ratio outside [0,1)");
    const bool clean_ok = kind == TriggerKind::sinusoid || kind == TriggerKind::uap;
    if (label_mode == LabelMode::clean && !clean_ok)
        throw ParamError("clean label mode only valid for sinusoid and uap triggers");
    if (label_mode == LabelMode::dirty && kind == TriggerKind::sinusoid)
        throw ParamError("sinusoid trigger is clean-label");
    if (kind == TriggerKind::source_specific_patch) {
        if (source_class < 0 || source_class >= num_classes || source_class == target_class)
            throw ParamError("source class invalid");
        for (int c : cover_classes)
            if (c < 0 || c >= num_classes || c == target_class)
                throw ParamError("cover class invalid");
    }
    if (kind == TriggerKind::uap) {
        if (uap_delta.size() == 0) throw ParamError("uap trigger needs a perturbation");
        if (uap_delta.cwiseAbs().maxCoeff() > uap_budget + Real(1e-6))
            throw ParamError("uap perturbation violates its budget");
    }
}

nlohmann::json TriggerSpec::to_json() const {
    nlohmann::json j;
    j["kind"] = to_string(kind);
    j["target_class"] = target_class;
    j["poison_ratio"] = poison_ratio;
    j["cover_ratio"] = cover_ratio;
    j["label_mode"] = label_mode == LabelMode::dirty ? "dirty" : "clean";
    j["patch_size"] = patch_size;
    j["patch_x"] = patch_x;
    j["patch_y"] = patch_y;
    j["patch_pixels"] = patch_pixels;
    j["blend_weight"] = blend_weight;
    j["blend_pattern_seed"] = blend_pattern_seed;
    j["sig_delta"] = sig_delta;
    j["sig_freq"] = sig_freq;
    j["source_class"] = source_class;
    j["cover_classes"] = cover_classes;
    j["uap_budget"] = uap_budget;
    j["uap_delta"] = std::vector<Real>(uap_delta.data(), uap_delta.data() + uap_delta.size());
    return j;
}

TriggerSpec TriggerSpec::from_json(const nlohmann::json& j) {
    TriggerSpec s;
    s.kind = trigger_kind_from_string(j.at("kind").get<std::string>());
    s.target_class = j.at("target_class").get<int>();
    s.poison_ratio = j.at("poison_ratio").get<double>();
    s.cover_ratio = j.value("cover_ratio", 0.0);
    s.label_mode = j.value("label_mode", std::string("dirty")) == "clean" ? LabelMode::clean
                                                                          : LabelMode::dirty;
    s.patch_size = j.value("patch_size", 3);
    s.patch_x = j.value("patch_x", -1);
    s.patch_y = j.value("patch_y", -1);
    s.patch_pixels = j.value("patch_pixels", std::vector<Real>{});
    s.blend_weight = j.value("blend_weight", Real(0.2));
    s.blend_pattern_seed = j.value("blend_pattern_seed", std::uint64_t(0x5eedb1ed));
    s.sig_delta = j.value("sig_delta", Real(20.0 / 255.0));
    s.sig_freq = j.value("sig_freq", Real(6));
    s.source_class = j.value("source_class", -1);
    s.cover_classes = j.value("cover_classes", std::vector<int>{});
    s.uap_budget = j.value("uap_budget", Real(0));
    const auto d = j.value("uap_delta", std::vector<Real>{});
    s.uap_delta = Eigen::Map<const VecX>(d.data(), static_cast<Eigen::Index>(d.size()));
    return s;
}

nlohmann::json PoisonReport::to_json() const {
    nlohmann::json j;
    j["poisoned_ids"] = poisoned_ids;
    j["cover_ids"] = cover_ids;
    j["target_class_size"] = target_class_size;
    nlohmann::json per;
    for (const auto& [cls, n] : poisoned_per_source_class) per[std::to_string(cls)] = n;
    j["poisoned_per_source_class"] = per;
    return j;
}

VecX blend_pattern(const TriggerSpec& spec, int channels, int height, int width) {
    Rng rng(spec.blend_pattern_seed);
    VecX p(static_cast<Eigen::Index>(channels) * height * width);
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = static_cast<Real>(rng.uniform());
    return p;
}

VecX apply_trigger(const VecX& image, int channels, int height, int width,
                   const TriggerSpec& spec) {
    const int hw = height * width;
    if (image.size() != static_cast<Eigen::Index>(channels) * hw)
        throw ShapeError("apply_trigger: image size mismatch");
    VecX out = image;
    switch (spec.kind) {
        case TriggerKind::patch:
        case TriggerKind::source_specific_patch: {
            const int s = spec.patch_size;
            if (s > height || s > width) throw GeometryError("patch larger than image");
            const int x0 = spec.patch_x >= 0 ? spec.patch_x : width - s;
            const int y0 = spec.patch_y >= 0 ? spec.patch_y : height - s;
            if (x0 + s > width || y0 + s > height)
                throw GeometryError("patch exceeds image bounds");
            const bool custom = !spec.patch_pixels.empty();
            if (custom && spec.patch_pixels.size() != static_cast<std::size_t>(s) * s * channels)
                throw GeometryError("patch pattern size mismatch");
            for (int c = 0; c < channels; ++c)
                for (int y = 0; y < s; ++y)
                    for (int x = 0; x < s; ++x)
                        out(c * hw + (y0 + y) * width + (x0 + x)) =
                            custom ? spec.patch_pixels[static_cast<std::size_t>((c * s + y) * s + x)]
                                   : Real(1);
            break;
        }
        case TriggerKind::blend: {
            const VecX pat = blend_pattern(spec, channels, height, width);
            out = ((Real(1) - spec.blend_weight) * out + spec.blend_weight * pat)
                      .cwiseMax(Real(0))
                      .cwiseMin(Real(1));
            break;
        }
        case TriggerKind::sinusoid: {
            for (int j = 0; j < width; ++j) {
                const Real add = spec.sig_delta *
                                 std::sin(Real(2) * Real(3.14159265358979) * Real(j) *
                                          spec.sig_freq / Real(width));
                for (int c = 0; c < channels; ++c)
                    for (int i = 0; i < height; ++i) {
                        Real& v = out(c * hw + i * width + j);
                        v = std::clamp(v + add, Real(0), Real(1));
                    }
            }
            break;
        }
        case TriggerKind::uap: {
            if (spec.uap_delta.size() != out.size())
                throw ShapeError("uap perturbation shape mismatch");
            out = (out + spec.uap_delta).cwiseMax(Real(0)).cwiseMin(Real(1));
            break;
        }
    }
    return out;
}

std::pair<LabeledDataset, PoisonReport> poison_dataset(const LabeledDataset& dataset,
                                                       const TriggerSpec& spec,
                                                       std::uint64_t rng_seed) {
    spec.validate(dataset.num_classes);
    const int t = spec.target_class;
    const auto& target_ids = dataset.class_ids(t);
    if (target_ids.empty()) throw ParamError("target class empty");
    Rng rng(derive_seed(rng_seed, "poison"));

    LabeledDataset out = dataset;
    out.rebuild_index();
    PoisonReport report;
    const int c = dataset.channels, h = dataset.height, w = dataset.width;

    auto trigger_row = [&](int row) {
        const VecX img = out.images.row(row).transpose();
        out.images.row(row) = apply_trigger(img, c, h, w, spec).transpose();
    };

    if (spec.poison_ratio > 0 && spec.label_mode == LabelMode::dirty) {
        const auto n_t = static_cast<double>(target_ids.size());
        const int n_poison = static_cast<int>(
            std::floor(n_t * spec.poison_ratio / (1.0 - spec.poison_ratio) + 1e-9));
        std::vector<int> pool;
        for (int cls = 0; cls < dataset.num_classes; ++cls) {
            if (cls == t) continue;
            if (spec.kind == TriggerKind::source_specific_patch && cls != spec.source_class)
                continue;
            const auto& cid = dataset.class_ids(cls);
            pool.insert(pool.end(), cid.begin(), cid.end());
        }
        std::sort(pool.begin(), pool.end());
        if (n_poison > static_cast<int>(pool.size()))
            throw InsufficientPoolError("not enough non-target samples for requested ratio");
        rng.shuffle(pool);
        pool.resize(static_cast<std::size_t>(n_poison));
        std::sort(pool.begin(), pool.end());

        int next_id = 0;
        for (int id : dataset.ids) next_id = std::max(next_id, id + 1);
        const int old_n = out.size();
        RowMatX images(old_n + n_poison, out.images.cols());
        images.topRows(old_n) = out.images;
        VecXi labels(old_n + n_poison);
        labels.head(old_n) = out.labels;
        auto& flags = out.mutable_poison_flags();
        flags.resize(static_cast<std::size_t>(old_n + n_poison), 0);
        for (int i = 0; i < n_poison; ++i) {
            const int src_row = dataset.row_of(pool[static_cast<std::size_t>(i)]);
            const VecX img = dataset.images.row(src_row).transpose();
            images.row(old_n + i) = apply_trigger(img, c, h, w, spec).transpose();
            labels(old_n + i) = t;
            flags[static_cast<std::size_t>(old_n + i)] = 1;
            out.ids.push_back(next_id);
            report.poisoned_ids.push_back(next_id);
            ++report.poisoned_per_source_class[dataset.labels(src_row)];
            ++next_id;
        }
        out.images = std::move(images);
        out.labels = std::move(labels);
        out.rebuild_index();

        // Cover samples: triggered in place, labels kept, not flagged.
        const int n_cover =
            static_cast<int>(floor_count(spec.cover_ratio, static_cast<std::size_t>(n_poison)));
        if (n_cover > 0) {
            std::vector<int> cover_pool;
            for (int cls : spec.cover_classes) {
                const auto& cid = dataset.class_ids(cls);
                cover_pool.insert(cover_pool.end(), cid.begin(), cid.end());
            }
            std::sort(cover_pool.begin(), cover_pool.end());
            if (n_cover > static_cast<int>(cover_pool.size()))
                throw InsufficientPoolError("not enough cover-class samples");
            rng.shuffle(cover_pool);
            cover_pool.resize(static_cast<std::size_t>(n_cover));
            std::sort(cover_pool.begin(), cover_pool.end());
            for (int id : cover_pool) {
                trigger_row(out.row_of(id));
                report.cover_ids.push_back(id);
            }
        }
    } else if (spec.poison_ratio > 0) {  // clean-label: trigger in place within the target class
        const int n_poison = static_cast<int>(floor_count(spec.poison_ratio, target_ids.size()));
        std::vector<int> pool = target_ids;
        std::sort(pool.begin(), pool.end());
        rng.shuffle(pool);
        pool.resize(static_cast<std::size_t>(n_poison));
        std::sort(pool.begin(), pool.end());
        auto& flags = out.mutable_poison_flags();
        for (int id : pool) {
            const int row = out.row_of(id);
            trigger_row(row);
            flags[static_cast<std::size_t>(row)] = 1;
            report.poisoned_ids.push_back(id);
            ++report.poisoned_per_source_class[t];
        }
    }

    report.target_class_size = static_cast<int>(out.class_ids(t).size());
    return {std::move(out), std::move(report)};
}

}  // namespace trustcore
