#include "trustcore/pipeline.hpp"

#include "trustcore/plot.hpp"
#include "trustcore/tensor_io.hpp"

#include <algorithm>
#include <chrono>
#include <iostream>

namespace trustcore {

std::string to_string(ThreatMode m) {
    switch (m) {
        case ThreatMode::none: return "none";
        case ThreatMode::dataset: return "dataset";
        case ThreatMode::encoder: return "encoder";
        case ThreatMode::adaptive: return "adaptive";
        case ThreatMode::dual: return "dual";
    }
    throw ParamError("bad threat mode");
}

ThreatMode threat_mode_from_string(const std::string& s) {
    if (s == "none") return ThreatMode::none;
    if (s == "dataset") return ThreatMode::dataset;
    if (s == "encoder") return ThreatMode::encoder;
    if (s == "adaptive") return ThreatMode::adaptive;
    if (s == "dual") return ThreatMode::dual;
    throw ParamError("unknown threat mode: " + s);
}

const std::vector<std::string> kStageNames = {
    "ingest", "pretrain", "attack", "train-baseline", "sift", "expand", "filter",
    "bootstrap", "eval"};

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------
namespace {

nlohmann::json train_opts_to_json(const TrainOpts& o) {
    return {{"epochs", o.epochs},
            {"batch_size", o.batch_size},
            {"learning_rate", o.learning_rate},
            {"optimizer", o.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
            {"momentum", o.momentum}};
}

TrainOpts train_opts_from_json(const nlohmann::json& j, TrainOpts base = {}) {
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.momentum = j.value("momentum", base.momentum);
    const std::string opt = j.value("optimizer", std::string("sgd"));
    base.optimizer = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    return base;
}

}  // namespace

void PipelineConfig::validate() const {
    split.validate();
    encoder.validate();
    sift.validate();
    expand.validate();
    filter.validate();
    bootstrap.validate();
    switch (threat) {
        case ThreatMode::none:
            break;
        case ThreatMode::dataset:
            if (!has_dataset_trigger) throw ParamError("dataset threat needs a dataset trigger");
            break;
        case ThreatMode::encoder:
            if (!has_encoder_trigger) throw ParamError("encoder threat needs an encoder trigger");
            break;
        case ThreatMode::adaptive:
            // One shared trigger drives both sides.
            if (!has_dataset_trigger) throw ParamError("adaptive threat needs a shared trigger");
            if (has_encoder_trigger)
                throw ParamError("adaptive threat uses the shared dataset trigger; drop the encoder trigger");
            break;
        case ThreatMode::dual:
            if (!has_dataset_trigger || !has_encoder_trigger)
                throw ParamError("dual threat needs both triggers");
            break;
    }
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["deterministic"] = deterministic;
    j["threat"] = to_string(threat);
    j["data"] = {{"source", source},
                 {"glyphs",
                  {{"num_classes", glyphs.num_classes},
                   {"per_class", glyphs.per_class},
                   {"size", glyphs.size},
                   {"seed", glyphs.seed}}},
                 {"cifar_dir", cifar_dir},
                 {"dataset_dir", dataset_dir},
                 {"split",
                  {{"pretrain_fraction", split.pretrain_fraction},
                   {"downstream_fraction", split.downstream_fraction},
                   {"test_fraction", split.test_fraction},
                   {"rng_seed", split.rng_seed}}}};
    j["models"] = {{"encoder",
                    {{"block_channels", encoder.block_channels},
                     {"kernel", encoder.kernel},
                     {"in_channels", encoder.in_channels}}},
                   {"head", {{"hidden1", head.hidden1}, {"hidden2", head.hidden2}}},
                   {"pretrain", train_opts_to_json(pretrain)},
                   {"head_train", train_opts_to_json(head_train)}};
    j["attack"] = nlohmann::json::object();
    if (has_dataset_trigger) j["attack"]["dataset_trigger"] = dataset_trigger.to_json();
    if (has_encoder_trigger) j["attack"]["encoder_trigger"] = encoder_trigger.to_json();
    j["attack"]["encoder_attack"] = {{"max_epochs", encoder_attack.max_epochs},
                                     {"batch_size", encoder_attack.batch_size},
                                     {"learning_rate", encoder_attack.learning_rate},
                                     {"lambda_align", encoder_attack.lambda_align},
                                     {"lambda_utility", encoder_attack.lambda_utility},
                                     {"min_alignment", encoder_attack.min_alignment}};
    j["attack"]["uap"] = {{"iterations", uap.iterations},
                          {"step", uap.step},
                          {"batch_size", uap.batch_size},
                          {"num_layers", uap.num_layers}};
    j["sift"] = {{"num_layers", sift.num_layers},
                 {"neighbors", sift.neighbors},
                 {"alpha", sift.alpha},
                 {"min_pts", sift.min_pts},
                 {"eps_quantile", sift.eps_quantile},
                 {"eps_override", sift.eps_override}};
    j["expand"] = {{"r_expand", expand.r_expand},
                   {"target_ratio", expand.target_ratio},
                   {"lambda", expand.lambda},
                   {"confusion",
                    {{"steps", expand.confusion.steps},
                     {"batch_size", expand.confusion.batch_size},
                     {"learning_rate", expand.confusion.learning_rate},
                     {"momentum", expand.confusion.momentum}}},
                   {"head_retrain", train_opts_to_json(expand.head_retrain)}};
    j["filter"] = {{"acc_min", filter.acc_min},
                   {"recover_epochs", filter.recover_epochs},
                   {"recover_lr", filter.recover_lr},
                   {"keep_fraction", filter.keep_fraction},
                   {"unlearn_lr", filter.unlearn_lr},
                   {"unlearn_batch", filter.unlearn_batch},
                   {"unlearn_max_epochs", filter.unlearn_max_epochs},
                   {"recover_batch", filter.recover_batch}};
    j["bootstrap"] = {{"iter1", bootstrap.iter1},
                      {"iter2", bootstrap.iter2},
                      {"gamma1", bootstrap.gamma1},
                      {"gamma2", bootstrap.gamma2},
                      {"gamma3", bootstrap.gamma3},
                      {"epochs_per_iter", bootstrap.epochs_per_iter},
                      {"rho", bootstrap.rho},
                      {"train", train_opts_to_json(bootstrap.train)}};
    j["eval"] = {{"plot_histogram", plot_histogram}};
    return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", std::uint64_t(1));
    c.deterministic = j.value("deterministic", false);
    c.threat = threat_mode_from_string(j.value("threat", std::string("dataset")));
    if (j.contains("data")) {
        const auto& d = j.at("data");
        c.source = d.value("source", std::string("glyphs"));
        if (d.contains("glyphs")) {
            const auto& g = d.at("glyphs");
            c.glyphs.num_classes = g.value("num_classes", 10);
            c.glyphs.per_class = g.value("per_class", 3200);
            c.glyphs.size = g.value("size", 32);
            c.glyphs.seed = g.value("seed", std::uint64_t(1));
        }
        c.cifar_dir = d.value("cifar_dir", std::string());
        c.dataset_dir = d.value("dataset_dir", std::string());
        if (d.contains("split")) {
            const auto& s = d.at("split");
            c.split.pretrain_fraction = s.value("pretrain_fraction", 0.5);
            c.split.downstream_fraction = s.value("downstream_fraction", 0.4);
            c.split.test_fraction = s.value("test_fraction", 0.1);
            c.split.rng_seed = s.value("rng_seed", std::uint64_t(0));
        }
    }
    if (j.contains("models")) {
        const auto& m = j.at("models");
        if (m.contains("encoder")) {
            const auto& e = m.at("encoder");
            c.encoder.block_channels =
                e.value("block_channels", std::vector<int>{32, 64, 128, 256});
            c.encoder.kernel = e.value("kernel", 3);
            c.encoder.in_channels = e.value("in_channels", 3);
        }
        if (m.contains("head")) {
            c.head.hidden1 = m.at("head").value("hidden1", 256);
            c.head.hidden2 = m.at("head").value("hidden2", 128);
        }
        if (m.contains("pretrain")) {
            TrainOpts base;
            base.epochs = 20;
            base.batch_size = 128;
            c.pretrain = train_opts_from_json(m.at("pretrain"), base);
        } else {
            c.pretrain.epochs = 20;
            c.pretrain.batch_size = 128;
        }
        if (m.contains("head_train")) c.head_train = train_opts_from_json(m.at("head_train"));
    } else {
        c.pretrain.epochs = 20;
        c.pretrain.batch_size = 128;
    }
    if (j.contains("attack")) {
        const auto& a = j.at("attack");
        if (a.contains("dataset_trigger")) {
            c.dataset_trigger = TriggerSpec::from_json(a.at("dataset_trigger"));
            c.has_dataset_trigger = true;
        }
        if (a.contains("encoder_trigger")) {
            c.encoder_trigger = TriggerSpec::from_json(a.at("encoder_trigger"));
            c.has_encoder_trigger = true;
        }
        if (a.contains("encoder_attack")) {
            const auto& e = a.at("encoder_attack");
            c.encoder_attack.max_epochs = e.value("max_epochs", 30);
            c.encoder_attack.batch_size = e.value("batch_size", 64);
            c.encoder_attack.learning_rate = e.value("learning_rate", Real(1e-3));
            c.encoder_attack.lambda_align = e.value("lambda_align", Real(1));
            c.encoder_attack.lambda_utility = e.value("lambda_utility", Real(1));
            c.encoder_attack.min_alignment = e.value("min_alignment", Real(0.9));
        }
        if (a.contains("uap")) {
            const auto& u = a.at("uap");
            c.uap.iterations = u.value("iterations", 200);
            c.uap.step = u.value("step", Real(0));
            c.uap.batch_size = u.value("batch_size", 128);
            c.uap.num_layers = u.value("num_layers", 3);
        }
    }
    if (j.contains("sift")) {
        const auto& s = j.at("sift");
        c.sift.num_layers = s.value("num_layers", 3);
        c.sift.neighbors = s.value("neighbors", 50);
        c.sift.alpha = s.value("alpha", 0.01);
        c.sift.min_pts = s.value("min_pts", 0);
        c.sift.eps_quantile = s.value("eps_quantile", Real(0.90));
        c.sift.eps_override = s.value("eps_override", Real(0));
    }
    if (j.contains("expand")) {
        const auto& e = j.at("expand");
        c.expand.r_expand = e.value("r_expand", 0.05);
        c.expand.target_ratio = e.value("target_ratio", 0.20);
        c.expand.lambda = e.value("lambda", Real(0.5));
        if (e.contains("confusion")) {
            const auto& ct = e.at("confusion");
            c.expand.confusion.steps = ct.value("steps", 0);
            c.expand.confusion.batch_size = ct.value("batch_size", 256);
            c.expand.confusion.learning_rate = ct.value("learning_rate", Real(0.002));
            c.expand.confusion.momentum = ct.value("momentum", Real(0));
        }
        if (e.contains("head_retrain"))
            c.expand.head_retrain = train_opts_from_json(e.at("head_retrain"));
    }
    if (j.contains("filter")) {
        const auto& f = j.at("filter");
        c.filter.acc_min = f.value("acc_min", Real(0.20));
        c.filter.recover_epochs = f.value("recover_epochs", 120);
        c.filter.recover_lr = f.value("recover_lr", Real(0.01));
        c.filter.keep_fraction = f.value("keep_fraction", 0.90);
        c.filter.unlearn_lr = f.value("unlearn_lr", Real(0.01));
        c.filter.unlearn_batch = f.value("unlearn_batch", 128);
        c.filter.unlearn_max_epochs = f.value("unlearn_max_epochs", 50);
        c.filter.recover_batch = f.value("recover_batch", 64);
    }
    if (j.contains("bootstrap")) {
        const auto& b = j.at("bootstrap");
        c.bootstrap.iter1 = b.value("iter1", 10);
        c.bootstrap.iter2 = b.value("iter2", 10);
        c.bootstrap.gamma1 = b.value("gamma1", 0.02);
        c.bootstrap.gamma2 = b.value("gamma2", 0.02);
        c.bootstrap.gamma3 = b.value("gamma3", 0.05);
        c.bootstrap.epochs_per_iter = b.value("epochs_per_iter", 5);
        c.bootstrap.rho = b.value("rho", 0.90);
        if (b.contains("train")) c.bootstrap.train = train_opts_from_json(b.at("train"));
    }
    if (j.contains("eval")) c.plot_histogram = j.at("eval").value("plot_histogram", true);
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
    return from_json(read_json(path));
}

std::uint64_t PipelineConfig::config_hash() const { return fnv1a(to_json().dump()); }

// ---------------------------------------------------------------------------
// Stage plumbing
// ---------------------------------------------------------------------------
namespace {

struct PipelineState {
    PipelineConfig cfg;
    fs::path out;
    bool resume = false;

    LabeledDataset pretrain_ds, downstream_clean, test_ds;
    LabeledDataset downstream;  // post-attack working copy
    Encoder encoder_clean;
    Encoder encoder;  // post-attack working encoder
    bool encoder_attacked = false;
    bool dataset_poisoned = false;
    TriggerSpec dataset_trigger;  // effective (uap delta filled in)
    TriggerSpec encoder_trigger;
    Head baseline_head;
    SiftResult sift;
    CleanPool pool;
    ChannelPartition partition;
    BootstrapResult boot;
    EvalReport report;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
};

fs::path stage_dir(const PipelineState& s, int index) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d_", index + 1);
    return s.out / "stages" / (buf + kStageNames[static_cast<std::size_t>(index)]);
}

// A stage's hash covers only the config sections it can observe, so runs
// differing in later-stage settings still share earlier artifacts.
std::uint64_t stage_hash(const PipelineConfig& cfg, int index) {
    static const std::vector<std::vector<std::string>> deps = {
        /*ingest*/ {"data"},
        /*pretrain*/ {"data", "models"},
        /*attack*/ {"data", "models", "attack", "threat", "sift"},
        /*train-baseline*/ {"data", "models", "attack", "threat", "sift"},
        /*sift*/ {"data", "models", "attack", "threat", "sift"},
        /*expand*/ {"data", "models", "attack", "threat", "sift", "expand"},
        /*filter*/ {"data", "models", "attack", "threat", "sift", "expand", "filter"},
        /*bootstrap*/
        {"data", "models", "attack", "threat", "sift", "expand", "filter", "bootstrap"},
        /*eval*/
        {"data", "models", "attack", "threat", "sift", "expand", "filter", "bootstrap", "eval"},
    };
    const nlohmann::json j = cfg.to_json();
    std::uint64_t h = fnv1a(&cfg.seed, sizeof cfg.seed);
    const bool det = cfg.deterministic;
    h = fnv1a(&det, sizeof det, h);
    for (const auto& key : deps[static_cast<std::size_t>(index)])
        h = fnv1a(j.at(key).dump(), h);
    return h;
}

bool stage_done(const PipelineState& s, int index) {
    const fs::path marker = stage_dir(s, index) / "done.json";
    if (!s.resume || !fs::exists(marker)) return false;
    try {
        return read_json(marker).at("config_hash").get<std::uint64_t>() ==
               stage_hash(s.cfg, index);
    } catch (const std::exception&) {
        return false;
    }
}

void mark_done(const PipelineState& s, int index, double seconds) {
    write_json(stage_dir(s, index) / "done.json",
               {{"stage", kStageNames[static_cast<std::size_t>(index)]},
                {"config_hash", stage_hash(s.cfg, index)},
                {"wall_seconds", seconds}});
}

int target_class_of(const PipelineState& s) {
    if (s.dataset_poisoned) return s.dataset_trigger.target_class;
    if (s.encoder_attacked) return s.encoder_trigger.target_class;
    if (s.cfg.has_dataset_trigger) return s.cfg.dataset_trigger.target_class;
    return 0;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------
void stage_ingest(PipelineState& s) {
    const fs::path dir = stage_dir(s, 0);
    if (stage_done(s, 0)) {
        s.pretrain_ds = load_dataset(dir / "pretrain");
        s.downstream_clean = load_dataset(dir / "downstream");
        s.test_ds = load_dataset(dir / "test");
        return;
    }
    LabeledDataset full;
    if (s.cfg.source == "glyphs") {
        full = generate_glyphs(s.cfg.glyphs.num_classes, s.cfg.glyphs.per_class,
                               s.cfg.glyphs.size, s.cfg.glyphs.seed);
    } else if (s.cfg.source == "cifar10") {
        full = load_cifar10(s.cfg.cifar_dir, false);
    } else if (s.cfg.source == "dataset_dir") {
        full = load_dataset(s.cfg.dataset_dir);
    } else {
        throw ParamError("unknown data source: " + s.cfg.source);
    }
    SplitSpec split_spec = s.cfg.split;
    if (split_spec.rng_seed == 0) split_spec.rng_seed = derive_seed(s.cfg.seed, "split");
    SplitResult parts = split(full, split_spec);
    s.pretrain_ds = std::move(parts.pretrain);
    s.downstream_clean = std::move(parts.downstream);
    s.test_ds = std::move(parts.test);
    fs::create_directories(dir);
    save_dataset(dir / "pretrain", s.pretrain_ds);
    save_dataset(dir / "downstream", s.downstream_clean);
    save_dataset(dir / "test", s.test_ds);
}

void stage_pretrain(PipelineState& s) {
    const fs::path dir = stage_dir(s, 1);
    if (stage_done(s, 1)) {
        s.encoder_clean = load_encoder(dir / "encoder");
        return;
    }
    TrainOpts opts = s.cfg.pretrain;
    opts.rng_seed = derive_seed(s.cfg.seed, "pretrain");
    s.encoder_clean = pretrain_encoder(s.pretrain_ds, s.cfg.encoder, opts, s.cfg.head);
    fs::create_directories(dir);
    save_checkpoint(dir / "encoder", s.encoder_clean, nullptr, s.pretrain_ds.num_classes,
                    opts.rng_seed);
}

void stage_attack(PipelineState& s) {
    const fs::path dir = stage_dir(s, 2);
    const ThreatMode threat = s.cfg.threat;
    if (stage_done(s, 2)) {
        s.downstream = load_dataset(dir / "downstream");
        s.encoder = load_encoder(dir / "encoder");
        const auto meta = read_json(dir / "attack.json");
        s.dataset_poisoned = meta.at("dataset_poisoned").get<bool>();
        s.encoder_attacked = meta.at("encoder_attacked").get<bool>();
        if (s.dataset_poisoned)
            s.dataset_trigger = TriggerSpec::from_json(meta.at("dataset_trigger"));
        if (s.encoder_attacked)
            s.encoder_trigger = TriggerSpec::from_json(meta.at("encoder_trigger"));
        return;
    }
    s.downstream = s.downstream_clean;
    s.downstream.rebuild_index();
    s.encoder = s.encoder_clean;
    nlohmann::json meta;
    meta["dataset_poisoned"] = false;
    meta["encoder_attacked"] = false;

    const bool wants_encoder_side = threat == ThreatMode::encoder || threat == ThreatMode::dual ||
                                    (threat == ThreatMode::adaptive &&
                                     s.cfg.dataset_trigger.kind != TriggerKind::uap);
    const bool wants_dataset_side = threat == ThreatMode::dataset ||
                                    threat == ThreatMode::adaptive || threat == ThreatMode::dual;

    TriggerSpec dataset_spec = s.cfg.dataset_trigger;
    if (threat == ThreatMode::adaptive && dataset_spec.kind == TriggerKind::uap) {
        // The adaptive attacker runs the seed sifting themselves against the
        // victim encoder and crafts the perturbation toward the target seeds.
        Rng arng(derive_seed(s.cfg.seed, "attacker-head"));
        TapModel attacker{s.encoder,
                          make_head(s.encoder, s.downstream_clean.num_classes, s.cfg.head, arng)};
        TrainOpts hopts = s.cfg.head_train;
        hopts.rng_seed = derive_seed(s.cfg.seed, "attacker-head-train");
        train_head(attacker.encoder, attacker.head, s.downstream_clean, hopts);
        const SiftResult attacker_sift = sift_seeds(attacker, s.downstream_clean, s.cfg.sift);
        UapOpts uopts = s.cfg.uap;
        uopts.rng_seed = derive_seed(s.cfg.seed, "uap");
        const UapResult uap = craft_uap_trigger(
            attacker, s.downstream_clean,
            attacker_sift.for_class(dataset_spec.target_class).seeds, dataset_spec.uap_budget,
            uopts);
        dataset_spec.uap_delta = uap.delta;
    }

    fs::create_directories(dir);
    if (wants_encoder_side) {
        TriggerSpec espec = threat == ThreatMode::adaptive ? dataset_spec : s.cfg.encoder_trigger;
        // Reference targets: downstream samples of the target class.
        const auto& tclass = s.downstream_clean.class_ids(espec.target_class);
        const std::size_t n_ref = std::min<std::size_t>(tclass.size(), 64);
        RowMatX refs(static_cast<Eigen::Index>(n_ref), s.downstream_clean.images.cols());
        for (std::size_t i = 0; i < n_ref; ++i)
            refs.row(static_cast<Eigen::Index>(i)) =
                s.downstream_clean.images.row(s.downstream_clean.row_of(tclass[i]));
        EncoderAttackOpts aopts = s.cfg.encoder_attack;
        aopts.rng_seed = derive_seed(s.cfg.seed, "encoder-attack");
        EncoderAttackResult res =
            inject_encoder_backdoor(s.encoder, s.downstream_clean, refs, espec, aopts);
        if (!res.success)
            throw Error("encoder backdoor injection missed its alignment target (" +
                        std::to_string(res.alignment) + ")");
        s.encoder = std::move(res.encoder);
        s.encoder_attacked = true;
        s.encoder_trigger = espec;
        meta["encoder_attacked"] = true;
        meta["encoder_trigger"] = espec.to_json();
        meta["alignment"] = res.alignment;
        meta["utility"] = res.utility;
    }
    if (wants_dataset_side) {
        auto [poisoned, report] =
            poison_dataset(s.downstream_clean, dataset_spec, derive_seed(s.cfg.seed, "poison"));
        s.downstream = std::move(poisoned);
        s.dataset_poisoned = true;
        s.dataset_trigger = dataset_spec;
        meta["dataset_poisoned"] = true;
        meta["dataset_trigger"] = dataset_spec.to_json();
        meta["poison_report"] = report.to_json();
    }
    save_dataset(dir / "downstream", s.downstream);
    save_checkpoint(dir / "encoder", s.encoder, nullptr, s.downstream.num_classes, s.cfg.seed);
    write_json(dir / "attack.json", meta);
}

void stage_baseline(PipelineState& s) {
    const fs::path dir = stage_dir(s, 3);
    if (stage_done(s, 3)) {
        s.baseline_head = load_head(dir / "model");
        const auto j = read_json(dir / "baseline.json");
        s.report.baseline_acc = j.at("acc").get<Real>();
        s.report.baseline_asr = j.at("asr").get<Real>();
        s.report.baseline_asr_e = j.at("asr_e").get<Real>();
        s.report.baseline_asr_d = j.at("asr_d").get<Real>();
        return;
    }
    Rng rng(derive_seed(s.cfg.seed, "baseline-head"));
    s.baseline_head = make_head(s.encoder, s.downstream.num_classes, s.cfg.head, rng);
    TrainOpts opts = s.cfg.head_train;
    opts.rng_seed = derive_seed(s.cfg.seed, "baseline-train");
    train_head(s.encoder, s.baseline_head, s.downstream, opts);

    s.report.baseline_acc = accuracy(s.encoder, s.baseline_head, s.test_ds);
    if (s.dataset_poisoned)
        s.report.baseline_asr_d =
            attack_success_rate(s.encoder, s.baseline_head, s.test_ds, s.dataset_trigger);
    if (s.encoder_attacked)
        s.report.baseline_asr_e =
            attack_success_rate(s.encoder, s.baseline_head, s.test_ds, s.encoder_trigger);
    s.report.baseline_asr = s.dataset_poisoned ? s.report.baseline_asr_d
                                               : (s.encoder_attacked ? s.report.baseline_asr_e
                                                                     : Real(-1));
    fs::create_directories(dir);
    save_checkpoint(dir / "model", s.encoder, &s.baseline_head, s.downstream.num_classes,
                    opts.rng_seed);
    write_json(dir / "baseline.json", {{"acc", s.report.baseline_acc},
                                       {"asr", s.report.baseline_asr},
                                       {"asr_e", s.report.baseline_asr_e},
                                       {"asr_d", s.report.baseline_asr_d}});
}

void stage_sift(PipelineState& s) {
    const fs::path dir = stage_dir(s, 4);
    if (stage_done(s, 4)) {
        s.sift = load_sift_result(dir / "sift.json");
        return;
    }
    const TapModel model{s.encoder, s.baseline_head};
    s.sift = sift_seeds(model, s.downstream, s.cfg.sift);
    for (const auto& cs : s.sift.per_class)
        if (cs.shortfall)
            std::cerr << "[sift] class " << cs.cls << " candidate shortfall (" << cs.seeds.size()
                      << " seeds)\n";
    fs::create_directories(dir);
    save_sift_result(dir / "sift.json", s.sift);
}

void stage_expand(PipelineState& s) {
    const fs::path dir = stage_dir(s, 5);
    if (stage_done(s, 5)) {
        s.pool = CleanPool::load_jsonl(dir / "pool.jsonl");
        return;
    }
    ExpansionParams params = s.cfg.expand;
    params.rng_seed = derive_seed(s.cfg.seed, "expand");
    s.pool = expand_seed(s.encoder, s.downstream, s.sift, params);
    fs::create_directories(dir);
    s.pool.save_jsonl(dir / "pool.jsonl");
}

void stage_filter(PipelineState& s) {
    const fs::path dir = stage_dir(s, 6);
    if (stage_done(s, 6)) {
        s.partition = ChannelPartition::from_json(read_json(dir / "partition.json"));
        return;
    }
    FilterParams params = s.cfg.filter;
    params.rng_seed = derive_seed(s.cfg.seed, "filter");
    const Encoder unlearned = selective_unlearn(s.encoder, s.baseline_head, s.downstream, params);
    const std::vector<VecX> masks =
        recover_mask(unlearned, s.baseline_head, s.downstream, s.pool.ids(), params);
    s.partition = threshold_channels(masks, params);
    for (const auto& w : s.partition.warnings) std::cerr << "[filter] " << w << "\n";
    fs::create_directories(dir);
    write_json(dir / "partition.json", s.partition.to_json());
}

void stage_bootstrap(PipelineState& s) {
    const fs::path dir = stage_dir(s, 7);
    if (stage_done(s, 7)) {
        s.boot.encoder = load_encoder(dir / "model");
        s.boot.head = load_head(dir / "model");
        s.boot.pool = CleanPool::load_jsonl(dir / "pool.jsonl");
        s.boot.audit = BootstrapAudit::load_jsonl(dir / "audit.jsonl");
        return;
    }
    BootstrapParams params = s.cfg.bootstrap;
    params.rng_seed = derive_seed(s.cfg.seed, "bootstrap");
    const Encoder reinit =
        apply_partition(s.encoder, s.partition, PartitionMode::reinit,
                        derive_seed(s.cfg.seed, "reinit"));
    s.boot = run_bootstrap(reinit, s.partition, s.downstream, s.pool, params);
    fs::create_directories(dir);
    save_checkpoint(dir / "model", s.boot.encoder, &s.boot.head, s.downstream.num_classes,
                    params.rng_seed);
    s.boot.pool.save_jsonl(dir / "pool.jsonl");
    s.boot.audit.save_jsonl(dir / "audit.jsonl");
}

void stage_eval(PipelineState& s) {
    const fs::path dir = stage_dir(s, 8);
    if (stage_done(s, 8)) {
        s.report = EvalReport::from_json(read_json(dir / "report.json"));
        return;
    }
    s.report.seed = s.cfg.seed;
    s.report.acc = accuracy(s.boot.encoder, s.boot.head, s.test_ds);
    const VecX pca = per_class_accuracy(s.boot.encoder, s.boot.head, s.test_ds);
    s.report.per_class_acc.assign(pca.data(), pca.data() + pca.size());
    if (s.dataset_poisoned)
        s.report.asr_d =
            attack_success_rate(s.boot.encoder, s.boot.head, s.test_ds, s.dataset_trigger);
    if (s.encoder_attacked)
        s.report.asr_e =
            attack_success_rate(s.boot.encoder, s.boot.head, s.test_ds, s.encoder_trigger);
    s.report.asr = s.dataset_poisoned ? s.report.asr_d
                                      : (s.encoder_attacked ? s.report.asr_e : Real(-1));
    s.report.seed_metrics = sift_report(s.sift.all_seeds(), s.downstream, target_class_of(s));
    s.report.expanded_pool = pool_report(s.pool, s.downstream);
    s.report.final_pool = pool_report(s.boot.pool, s.downstream);
    s.report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - s.started).count();

    fs::create_directories(dir);
    if (s.cfg.plot_histogram) {
        const VecX losses =
            per_sample_losses(s.boot.encoder, s.boot.head, s.downstream, s.downstream.ids);
        plot_loss_histogram(losses, s.downstream.evaluation_only_poison_flags(),
                            dir / "loss_histogram.png");
    }
    write_json(dir / "report.json", s.report.to_json());
    std::ofstream txt(dir / "report.txt");
    txt << s.report.table();
}

using StageFn = void (*)(PipelineState&);
const StageFn kStageFns[] = {stage_ingest, stage_pretrain, stage_attack,
                             stage_baseline, stage_sift,    stage_expand,
                             stage_filter,  stage_bootstrap, stage_eval};

}  // namespace

EvalReport run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir, bool resume,
                        const std::string& last_stage) {
    cfg.validate();
    if (cfg.deterministic) Eigen::setNbThreads(1);
    const auto last_it = std::find(kStageNames.begin(), kStageNames.end(), last_stage);
    if (last_it == kStageNames.end()) throw ParamError("unknown stage: " + last_stage);
    const int last = static_cast<int>(last_it - kStageNames.begin());

    PipelineState s;
    s.cfg = cfg;
    s.out = out_dir;
    s.resume = resume;
    fs::create_directories(out_dir / "stages");
    write_json(out_dir / "config.json", cfg.to_json());

    for (int i = 0; i <= last; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const bool already = stage_done(s, i);
        try {
            kStageFns[i](s);
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(kStageNames[static_cast<std::size_t>(i)], e.what());
        }
        if (!already) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            fs::create_directories(stage_dir(s, i));
            mark_done(s, i, secs);
            std::cerr << "[pipeline] " << kStageNames[static_cast<std::size_t>(i)] << " done in "
                      << secs << " s\n";
        }
    }
    return s.report;
}

}  // namespace trustcore
