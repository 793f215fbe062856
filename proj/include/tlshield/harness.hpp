#pragma once

#include <chrono>
#include <filesystem>
#include <iomanip>

#include <json.hpp>

#include "tlshield/attack.hpp"
#include "tlshield/config.hpp"
#include "tlshield/model_store.hpp"
#include "tlshield/train.hpp"

namespace tlshield {

using json = nlohmann::json;

// Desk-scale reference architecture: 3 conv blocks (8/16/32 filters, 3x3,
// stride 1, same padding) + Flatten + Dense(64) + Dense(K).
inline Network desk_teacher_arch(int num_classes, std::size_t H = 24, std::size_t W = 24,
                                 std::size_t channels = 1, std::uint64_t init_seed = 1) {
    Network net;
    net.input_shape = Shape{channels, H, W};
    net.num_classes = static_cast<std::size_t>(num_classes);
    net.add(Conv2DLayer(channels, 8, 3, 1, 1));
    net.add(ReLULayer{});
    net.add(Conv2DLayer(8, 16, 3, 1, 1));
    net.add(ReLULayer{});
    net.add(Conv2DLayer(16, 32, 3, 1, 1));
    net.add(ReLULayer{});
    net.add(FlattenLayer{});
    net.add(DenseLayer(32 * H * W, 64));
    net.add(ReLULayer{});
    net.add(DenseLayer(64, static_cast<std::size_t>(num_classes)));
    std::mt19937 rng(static_cast<std::uint32_t>(init_seed));
    for (Layer& l : net.layers) {
        if (auto* d = std::get_if<DenseLayer>(&l)) glorot_uniform(d->w, d->in, d->out, rng);
        if (auto* c = std::get_if<Conv2DLayer>(&l))
            glorot_uniform(c->w, c->in_ch * c->kh * c->kw, c->out_ch * c->kh * c->kw, rng);
    }
    net.validate();
    return net;
}

// Freeze boundary "after conv block 2" for the desk architecture.
constexpr std::size_t kDeskMidCutoff = 4;

inline std::size_t last_frozen_layer(const Network& net) {
    std::size_t last = 0;
    bool any = false;
    for (std::size_t l = 0; l < net.layers.size(); ++l)
        if (net.frozen[l]) {
            last = l;
            any = true;
        }
    if (!any) throw std::runtime_error("network has no frozen layer");
    return last;
}

// Training optimizer for the desk task; Adadelta is the stable default here.
inline OptimizerConfig desk_optimizer(const std::string& kind, float lr) {
    OptimizerConfig oc;
    if (kind == "adadelta") {
        oc.kind = OptimizerConfig::Adadelta;
        oc.adadelta.learning_rate = lr;
    } else if (kind == "sgd") {
        oc.kind = OptimizerConfig::SGD;
        oc.sgd = {lr, 0.9f};
    } else {
        throw std::runtime_error("optimizer must be adadelta|sgd");
    }
    return oc;
}

struct ExperimentConfig {
    // task
    int K = 10;
    int per_class = 200;
    std::uint64_t teacher_data_seed = 7;
    std::uint64_t student_data_seed = 17;
    int teacher_epochs = 15;
    float teacher_lr = 1.0f;
    std::uint64_t teacher_init_seed = 1;
    std::string optimizer = "adadelta";
    // student
    std::vector<int> student_classes;  // empty = all K classes
    FreezePolicy student_policy = FreezePolicy::deep();
    int student_epochs = 30;
    float student_lr = 1.0f;
    std::uint64_t student_seed = 2;
    // registry
    int registry_span = 3;  // circulant span; 0 = pairwise complete
    FreezePolicy diff_policy = FreezePolicy::deep();
    int iteration_times = 5;
    float plan_max_ratio = 0.6f;
    std::vector<float> plan_ratios;  // optional explicit per-layer ratios
    BuildOptions build;
    // attack
    AttackConfig attack;
    bool attack_layer_auto = true;  // last frozen layer of the student
    int n_targeted = 100;
    int n_nontargeted = 100;
    std::uint64_t attack_seed = 23;
    // defense
    EnsembleConfig ensemble;
    // sweep
    std::string sweep_axis = "none";
    std::vector<double> sweep_values;
    // misc
    std::size_t batch_size = 32;
    bool zero_timings = false;
    float adaptive_ratio_delta = 0.1f;

    int student_num_classes() const {
        return student_classes.empty() ? K : static_cast<int>(student_classes.size());
    }
};

inline ExperimentConfig experiment_config_from(const Config& cfg) {
    ExperimentConfig e;
    e.K = static_cast<int>(cfg.get_int("task.classes", e.K));
    e.per_class = static_cast<int>(cfg.get_int("task.per_class", e.per_class));
    e.teacher_data_seed = static_cast<std::uint64_t>(cfg.get_int("task.teacher_data_seed", 7));
    e.student_data_seed = static_cast<std::uint64_t>(cfg.get_int("task.student_data_seed", 17));
    e.teacher_epochs = static_cast<int>(cfg.get_int("task.teacher_epochs", e.teacher_epochs));
    e.teacher_lr = static_cast<float>(cfg.get_float("task.teacher_lr", e.teacher_lr));
    e.optimizer = cfg.get_str("task.optimizer", e.optimizer);

    for (double v : cfg.get_list("student.classes")) e.student_classes.push_back(static_cast<int>(v));
    std::string pol = cfg.get_str("student.policy", "deep");
    if (pol == "deep") e.student_policy = FreezePolicy::deep();
    else if (pol == "mid") e.student_policy = FreezePolicy::mid(
        static_cast<std::size_t>(cfg.get_int("student.cutoff", static_cast<long>(kDeskMidCutoff))));
    else if (pol == "full") e.student_policy = FreezePolicy::full();
    else throw std::runtime_error("student.policy must be deep|mid|full");
    e.student_epochs = static_cast<int>(cfg.get_int("student.epochs", e.student_epochs));
    e.student_lr = static_cast<float>(cfg.get_float("student.lr", e.student_lr));
    e.student_seed = static_cast<std::uint64_t>(cfg.get_int("student.seed", 2));

    e.registry_span = static_cast<int>(cfg.get_int("registry.span", e.registry_span));
    std::string dpol = cfg.get_str("registry.policy", "deep");
    if (dpol == "deep") e.diff_policy = FreezePolicy::deep();
    else if (dpol == "mid") e.diff_policy = FreezePolicy::mid(
        static_cast<std::size_t>(cfg.get_int("registry.cutoff", static_cast<long>(kDeskMidCutoff))));
    else if (dpol == "full") e.diff_policy = FreezePolicy::full();
    else throw std::runtime_error("registry.policy must be deep|mid|full");
    e.iteration_times = static_cast<int>(cfg.get_int("registry.iteration_times", e.iteration_times));
    e.plan_max_ratio = static_cast<float>(cfg.get_float("registry.plan_max_ratio", e.plan_max_ratio));
    for (double v : cfg.get_list("registry.ratio")) e.plan_ratios.push_back(static_cast<float>(v));
    e.build.initial_epochs = static_cast<int>(cfg.get_int("registry.initial_epochs", 4));
    e.build.iteration_epochs = static_cast<int>(cfg.get_int("registry.iteration_epochs", 1));
    e.build.seed = static_cast<std::uint64_t>(cfg.get_int("registry.seed", 3));
    e.build.optimizer =
        desk_optimizer(e.optimizer, static_cast<float>(cfg.get_float("registry.lr", 1.0)));

    e.attack.budget = static_cast<float>(cfg.get_float("attack.budget", 0.1));
    e.attack.iterations = static_cast<int>(cfg.get_int("attack.iterations", 2000));
    e.attack.learning_rate = static_cast<float>(cfg.get_float("attack.lr", 1.0));
    e.attack.penalty_weight = static_cast<float>(cfg.get_float("attack.lambda", 1000.0));
    e.attack.candidate_count = static_cast<int>(cfg.get_int("attack.candidates", 5));
    std::string metric = cfg.get_str("attack.metric", "sq_l2_per_elem");
    if (metric == "sq_l2_per_elem") e.attack.metric = FeatureMetric::SquaredL2PerElem;
    else if (metric == "l2") e.attack.metric = FeatureMetric::L2;
    else if (metric == "l1") e.attack.metric = FeatureMetric::L1;
    else throw std::runtime_error("attack.metric must be sq_l2_per_elem|l2|l1");
    if (cfg.has("attack.layer")) {
        e.attack_layer_auto = false;
        e.attack.attack_layer = static_cast<std::size_t>(cfg.get_int("attack.layer", 0));
    }
    e.n_targeted = static_cast<int>(cfg.get_int("attack.n_targeted", e.n_targeted));
    e.n_nontargeted = static_cast<int>(cfg.get_int("attack.n_nontargeted", e.n_nontargeted));
    e.attack_seed = static_cast<std::uint64_t>(cfg.get_int("attack.seed", 23));

    e.ensemble.k = static_cast<int>(cfg.get_int("ensemble.k", 5));
    e.ensemble.t = static_cast<int>(cfg.get_int("ensemble.t", 1));
    e.ensemble.selection_seed = static_cast<std::uint64_t>(cfg.get_int("ensemble.seed", 11));

    e.sweep_axis = cfg.get_str("sweep.axis", "none");
    e.sweep_values = cfg.get_list("sweep.values");
    e.zero_timings = cfg.get_bool("report.zero_timings", false);
    e.adaptive_ratio_delta = static_cast<float>(cfg.get_float("adaptive.ratio_delta", 0.1));
    return e;
}

struct MetricsRow {
    double axis_value = 0;
    double accuracy = 0, tpr = 0;
    double reject_rate_targeted = 0, reject_rate_nontargeted = 0;
    double residual_targeted = 0, residual_nontargeted = 0;
    double phase1_ms = 0, total_ms = 0;
};

struct MetricsReport {
    double clean_accuracy = 0, tpr = 0;
    double undefended_targeted_success = 0, undefended_nontargeted_success = 0;
    double reject_rate_targeted = 0, reject_rate_nontargeted = 0;
    double residual_targeted = 0, residual_nontargeted = 0;
    double phase1_ms = 0, total_ms = 0;
    std::string sweep_axis = "none";
    std::vector<MetricsRow> rows;
    json records = json::array();
};

// ---- experiment artifacts, reusable across sweep points ----

struct ExperimentArtifacts {
    DatasetSplit teacher_data;
    DatasetSplit student_data;  // labels remapped to 1..K_s when subset
    Network teacher;
    StudentModel student;
    DifferentiatorRegistry registry;
    PruningPlan plan;
    std::size_t attack_layer = 0;
    double clean_accuracy = 0;  // undefended student accuracy on its test split
};

inline std::vector<std::pair<int, int>> registry_pairs(int K, int span) {
    std::vector<std::pair<int, int>> pairs;
    if (span <= 0 || span >= K) {
        for (int i = 1; i <= K; ++i)
            for (int j = i + 1; j <= K; ++j) pairs.emplace_back(i, j);
        return pairs;
    }
    for (int i = 1; i <= K; ++i) {
        for (int d = 1; d <= span; ++d) {
            int j = (i - 1 + d) % K + 1;
            int a = std::min(i, j), b = std::max(i, j);
            if (std::find(pairs.begin(), pairs.end(), std::make_pair(a, b)) == pairs.end())
                pairs.emplace_back(a, b);
        }
    }
    return pairs;
}

inline DifferentiatorRegistry build_registry(const Network& teacher, const LabeledDataset& train,
                                             int K, int span, const PruningPlan& plan,
                                             FreezePolicy policy, int iteration_times,
                                             const BuildOptions& base_opts) {
    DifferentiatorRegistry reg;
    reg.num_classes = K;
    auto pairs = registry_pairs(K, span);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        BuildOptions opts = base_opts;
        opts.seed = base_opts.seed * 1000003ULL + i;
        reg.diffs.push_back(build_differentiator(teacher, train, ClassPair(pairs[i].first,
                                                                           pairs[i].second),
                                                 plan, policy, iteration_times, opts));
    }
    reg.classify_coverage();
    return reg;
}

inline ExperimentArtifacts build_artifacts(const ExperimentConfig& cfg) {
    ExperimentArtifacts art;
    art.teacher_data = synth_dataset(cfg.K, cfg.per_class, cfg.teacher_data_seed);
    DatasetSplit raw_student = synth_dataset(cfg.K, cfg.per_class, cfg.student_data_seed);
    if (cfg.student_classes.empty()) {
        art.student_data = std::move(raw_student);
    } else {
        art.student_data.train = raw_student.train.filter_classes(cfg.student_classes, true);
        art.student_data.test = raw_student.test.filter_classes(cfg.student_classes, true);
    }

    art.teacher = desk_teacher_arch(cfg.K, 24, 24, 1, cfg.teacher_init_seed);
    {
        NetOptimizer opt(desk_optimizer(cfg.optimizer, cfg.teacher_lr));
        TrainOptions tr{cfg.teacher_epochs, cfg.batch_size, cfg.teacher_data_seed};
        train_epochs(art.teacher, art.teacher_data.train, opt, tr);
    }

    int Ks = cfg.student_num_classes();
    art.student = make_student(art.teacher, Ks, cfg.student_policy, cfg.student_seed);
    {
        TrainOptions tr{cfg.student_epochs, cfg.batch_size, cfg.student_seed};
        fine_tune(art.student, art.student_data.train, tr,
                  desk_optimizer(cfg.optimizer, cfg.student_lr));
    }
    art.clean_accuracy = dataset_accuracy(art.student.network, art.student_data.test);

    art.plan.ratios = cfg.plan_ratios;
    if (art.plan.ratios.empty()) art.plan = default_plan(art.teacher, cfg.plan_max_ratio);
    art.registry = build_registry(art.teacher, art.student_data.train, Ks, cfg.registry_span,
                                  art.plan, cfg.diff_policy, cfg.iteration_times, cfg.build);

    art.attack_layer = cfg.attack_layer_auto ? last_frozen_layer(art.student.network)
                                             : cfg.attack.attack_layer;
    return art;
}

// ---- attack corpus ----

struct AttackCorpus {
    std::vector<AttackPair> targeted;                       // n_targeted pairs
    std::vector<std::vector<AttackPair>> nontargeted;       // per source: candidates
    std::vector<int> nontargeted_source_ids;
};

inline AttackCorpus sample_attack_corpus(const LabeledDataset& test, int n_targeted,
                                         int n_nontargeted, int candidate_count,
                                         std::uint64_t seed) {
    AttackCorpus corpus;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, test.size() - 1);
    for (int i = 0; i < n_targeted; ++i) {
        std::size_t s, t;
        do {
            s = pick(rng);
            t = pick(rng);
        } while (test.labels[s] == test.labels[t]);
        AttackPair p;
        p.source = test.images[s];
        p.source_label = test.labels[s];
        p.source_id = static_cast<int>(s);
        p.target = test.images[t];
        p.target_label = test.labels[t];
        p.target_id = static_cast<int>(t);
        corpus.targeted.push_back(std::move(p));
    }
    for (int i = 0; i < n_nontargeted; ++i) {
        std::size_t s = pick(rng);
        std::vector<AttackPair> cands;
        std::vector<int> used;
        int guard = 0;
        while (static_cast<int>(cands.size()) < candidate_count && guard++ < 10000) {
            std::size_t t = pick(rng);
            if (test.labels[t] == test.labels[s]) continue;
            if (std::find(used.begin(), used.end(), test.labels[t]) != used.end() &&
                static_cast<int>(used.size()) < test.num_classes - 1)
                continue;  // prefer distinct candidate classes while available
            used.push_back(test.labels[t]);
            AttackPair p;
            p.source = test.images[s];
            p.source_label = test.labels[s];
            p.source_id = static_cast<int>(s);
            p.target = test.images[t];
            p.target_label = test.labels[t];
            p.target_id = static_cast<int>(t);
            cands.push_back(std::move(p));
        }
        corpus.nontargeted.push_back(std::move(cands));
        corpus.nontargeted_source_ids.push_back(static_cast<int>(s));
    }
    return corpus;
}

// ---- defended evaluation ----

struct DefenseEvalResult {
    double tpr = 0;
    double reject_targeted = 0, residual_targeted = 0;
    double reject_nontargeted = 0, residual_nontargeted = 0;
    double undefended_targeted = 0, undefended_nontargeted = 0;
    double phase1_ms = 0, total_ms = 0;
    json records = json::array();
};

inline DefenseEvalResult evaluate_defense(const ExperimentArtifacts& art,
                                          const std::vector<AdversarialExample>& targeted,
                                          const std::vector<AdversarialExample>& nontargeted,
                                          const EnsembleConfig& ens, bool zero_timings,
                                          std::size_t max_clean = 200) {
    DefenseEvalResult res;
    const StudentModel& st = art.student;
    const LabeledDataset& test = art.student_data.test;

    using clock = std::chrono::steady_clock;
    double phase1_acc = 0, total_acc = 0;
    std::size_t timed = 0;

    // clean TPR
    std::size_t n_clean = std::min(test.size(), max_clean);
    std::size_t validated_correct = 0;
    for (std::size_t i = 0; i < n_clean; ++i) {
        auto t0 = clock::now();
        Tensor logits = forward(st.network, test.images[i]);
        auto t1 = clock::now();
        Prediction p = two_phase_infer(test.images[i], st, art.registry, ens, i);
        auto t2 = clock::now();
        phase1_acc += std::chrono::duration<double, std::milli>(t1 - t0).count();
        total_acc += std::chrono::duration<double, std::milli>(t1 - t0).count() +
                     std::chrono::duration<double, std::milli>(t2 - t1).count();
        ++timed;
        (void)logits;
        if (!p.rejected && p.label == test.labels[i]) ++validated_correct;
    }
    res.tpr = n_clean ? static_cast<double>(validated_correct) / static_cast<double>(n_clean) : 0;

    auto eval_corpus = [&](const std::vector<AdversarialExample>& corpus, bool targeted_goal,
                           double& undef, double& rej, double& resid, std::uint64_t nonce_base) {
        if (corpus.empty()) return;
        std::size_t n_undef = 0, n_rej = 0, n_resid = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const AdversarialExample& ex = corpus[i];
            int plain = argmax_label(forward(st.network, ex.image));
            bool undef_hit = targeted_goal ? plain == ex.pair.target_label
                                           : plain != ex.pair.source_label;
            if (undef_hit) ++n_undef;
            Prediction p = two_phase_infer(ex.image, st, art.registry, ens, nonce_base + i);
            if (p.rejected) {
                ++n_rej;
            } else {
                bool hit = targeted_goal ? p.label == ex.pair.target_label
                                         : p.label != ex.pair.source_label;
                if (hit) ++n_resid;
            }
            json rec;
            rec["source_id"] = ex.pair.source_id;
            rec["target_id"] = ex.pair.target_id;
            rec["goal"] = targeted_goal ? "targeted" : "nontargeted";
            rec["attack_layer"] = ex.config.attack_layer;
            rec["budget"] = ex.config.budget;
            rec["achieved_dssim"] = ex.achieved_dssim;
            rec["achieved_distance"] = ex.achieved_distance;
            rec["budget_satisfied"] = ex.budget_satisfied;
            rec["prediction_undefended"] = plain;
            rec["prediction_defended"] = p.label;
            res.records.push_back(std::move(rec));
        }
        double n = static_cast<double>(corpus.size());
        undef = n_undef / n;
        rej = n_rej / n;
        resid = n_resid / n;
    };
    eval_corpus(targeted, true, res.undefended_targeted, res.reject_targeted, res.residual_targeted,
                1u << 20);
    eval_corpus(nontargeted, false, res.undefended_nontargeted, res.reject_nontargeted,
                res.residual_nontargeted, 1u << 21);

    if (!zero_timings && timed) {
        res.phase1_ms = phase1_acc / static_cast<double>(timed);
        res.total_ms = total_acc / static_cast<double>(timed);
    }
    return res;
}

inline std::vector<AdversarialExample> generate_targeted_corpus(const Network& net,
                                                                const std::vector<AttackPair>& pairs,
                                                                AttackConfig cfg) {
    std::vector<AdversarialExample> out;
    out.reserve(pairs.size());
    for (const AttackPair& p : pairs) out.push_back(targeted_attack(net, p, cfg));
    return out;
}

inline std::vector<AdversarialExample> generate_nontargeted_corpus(
    const Network& net, const std::vector<std::vector<AttackPair>>& sources, AttackConfig cfg) {
    std::vector<AdversarialExample> out;
    out.reserve(sources.size());
    for (const auto& cands : sources)
        out.push_back(non_targeted_attack(net, cands.front().source, cands.front().source_label,
                                          cands, cfg));
    return out;
}

// ---- run_experiment ----

inline MetricsReport run_experiment(const ExperimentConfig& cfg) {
    ExperimentArtifacts art = build_artifacts(cfg);
    AttackConfig acfg = cfg.attack;
    acfg.attack_layer = art.attack_layer;

    AttackCorpus corpus = sample_attack_corpus(art.student_data.test, cfg.n_targeted,
                                               cfg.n_nontargeted, cfg.attack.candidate_count,
                                               cfg.attack_seed);
    std::vector<AdversarialExample> targeted =
        generate_targeted_corpus(art.student.network, corpus.targeted, acfg);
    std::vector<AdversarialExample> nontargeted =
        generate_nontargeted_corpus(art.student.network, corpus.nontargeted, acfg);

    MetricsReport rep;
    rep.sweep_axis = cfg.sweep_axis;
    DefenseEvalResult base = evaluate_defense(art, targeted, nontargeted, cfg.ensemble,
                                              cfg.zero_timings);
    rep.clean_accuracy = art.clean_accuracy;
    rep.tpr = base.tpr;
    rep.undefended_targeted_success = base.undefended_targeted;
    rep.undefended_nontargeted_success = base.undefended_nontargeted;
    rep.reject_rate_targeted = base.reject_targeted;
    rep.reject_rate_nontargeted = base.reject_nontargeted;
    rep.residual_targeted = base.residual_targeted;
    rep.residual_nontargeted = base.residual_nontargeted;
    rep.phase1_ms = base.phase1_ms;
    rep.total_ms = base.total_ms;
    rep.records = std::move(base.records);

    auto row_from = [&](double axis, const DefenseEvalResult& r) {
        MetricsRow row;
        row.axis_value = axis;
        row.accuracy = art.clean_accuracy;
        row.tpr = r.tpr;
        row.reject_rate_targeted = r.reject_targeted;
        row.reject_rate_nontargeted = r.reject_nontargeted;
        row.residual_targeted = r.residual_targeted;
        row.residual_nontargeted = r.residual_nontargeted;
        row.phase1_ms = r.phase1_ms;
        row.total_ms = r.total_ms;
        return row;
    };

    if (cfg.sweep_axis == "none") {
        rep.rows.push_back(row_from(0.0, base));
    } else if (cfg.sweep_axis == "differentiator_count" || cfg.sweep_axis == "threshold") {
        for (double v : cfg.sweep_values) {
            EnsembleConfig ens = cfg.ensemble;
            if (cfg.sweep_axis == "differentiator_count") ens.k = static_cast<int>(v);
            else ens.t = static_cast<int>(v);
            DefenseEvalResult r = evaluate_defense(art, targeted, nontargeted, ens, cfg.zero_timings);
            rep.rows.push_back(row_from(v, r));
        }
    } else if (cfg.sweep_axis == "budget") {
        for (double v : cfg.sweep_values) {
            AttackConfig sc = acfg;
            sc.budget = static_cast<float>(v);
            auto t = generate_targeted_corpus(art.student.network, corpus.targeted, sc);
            auto nt = generate_nontargeted_corpus(art.student.network, corpus.nontargeted, sc);
            DefenseEvalResult r = evaluate_defense(art, t, nt, cfg.ensemble, cfg.zero_timings);
            MetricsRow row = row_from(v, r);
            row.accuracy = r.undefended_targeted;  // undefended success per budget point
            rep.rows.push_back(row);
        }
    } else if (cfg.sweep_axis == "attack_layer") {
        for (double v : cfg.sweep_values) {
            AttackConfig sc = acfg;
            sc.attack_layer = static_cast<std::size_t>(v);
            auto t = generate_targeted_corpus(art.student.network, corpus.targeted, sc);
            auto nt = generate_nontargeted_corpus(art.student.network, corpus.nontargeted, sc);
            DefenseEvalResult r = evaluate_defense(art, t, nt, cfg.ensemble, cfg.zero_timings);
            MetricsRow row = row_from(v, r);
            row.accuracy = r.undefended_targeted;
            rep.rows.push_back(row);
        }
    } else if (cfg.sweep_axis == "iteration_count") {
        // two-class differentiator accuracy versus prune-retrain iterations
        for (double v : cfg.sweep_values) {
            BuildOptions opts = cfg.build;
            Differentiator d = build_differentiator(art.teacher, art.student_data.train,
                                                    ClassPair(1, 2), art.plan, cfg.diff_policy,
                                                    static_cast<int>(v), opts);
            LabeledDataset held = art.student_data.test.filter_classes({1, 2}, false);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < held.size(); ++i)
                if (differentiator_predict(d, held.images[i]) == held.labels[i]) ++correct;
            MetricsRow row;
            row.axis_value = v;
            row.accuracy = held.size() ? static_cast<double>(correct) /
                                             static_cast<double>(held.size())
                                       : 0.0;
            rep.rows.push_back(row);
        }
    } else {
        throw std::runtime_error("unknown sweep axis: " + cfg.sweep_axis);
    }
    return rep;
}

// ---- adaptive attacker evaluation (defence unknown / ratios unknown / known) ----

// Targeted mimicry against several networks at once: the objective averages the
// internal distance over all of them.
inline AdversarialExample targeted_attack_multi(const std::vector<const Network*>& nets,
                                                const AttackPair& pair, const AttackConfig& cfg) {
    cfg.validate();
    std::vector<InternalFeatures> targets;
    for (const Network* n : nets) targets.push_back(forward_to_layer(*n, pair.target, cfg.attack_layer));

    auto mean_distance = [&](const Tensor& x) {
        double s = 0;
        for (std::size_t i = 0; i < nets.size(); ++i)
            s += feature_distance(forward_to_layer(*nets[i], x, cfg.attack_layer).values,
                                  targets[i].values, cfg.metric);
        return static_cast<float>(s / static_cast<double>(nets.size()));
    };

    Tensor x = pair.source;
    AdversarialExample best;
    best.pair = pair;
    best.config = cfg;
    best.image = pair.source;
    best.achieved_dssim = 0.0f;
    best.achieved_distance = mean_distance(pair.source);

    float inv_n = 1.0f / static_cast<float>(nets.size());
    AdadeltaVec opt({cfg.adadelta_rho, cfg.adadelta_eps, cfg.learning_rate});
    for (int it = 0; it < cfg.iterations; ++it) {
        Tensor g(x.shape);
        double dist = 0;
        for (std::size_t i = 0; i < nets.size(); ++i) {
            float d = 0;
            Tensor gi = feature_loss_input_gradient(*nets[i], x, targets[i], cfg.metric, &d);
            dist += d;
            for (std::size_t j = 0; j < g.numel(); ++j) g.data[j] += inv_n * gi.data[j];
        }
        dist *= inv_n;
        Tensor dgrad;
        float ds = dssim_with_grad(x, pair.source, dgrad, cfg.ssim);
        if (ds <= cfg.budget + 1e-6f && dist < best.achieved_distance) {
            best.image = x;
            best.achieved_dssim = ds;
            best.achieved_distance = static_cast<float>(dist);
        }
        float viol = ds - cfg.budget;
        if (viol > 0.0f) {
            float w = 2.0f * cfg.penalty_weight * viol;
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += w * dgrad.data[i];
        }
        opt.step(x.data, g.data);
        for (float& v : x.data) v = std::clamp(v, 0.0f, 1.0f);
    }
    return best;
}

struct AdaptiveReport {
    double residual_defence_unknown = 0;
    double residual_ratios_unknown = 0;
    double residual_defence_known = 0;
    MetricsReport base;  // mode (a) full metrics
};

inline AdaptiveReport adaptive_eval(const ExperimentConfig& cfg) {
    ExperimentArtifacts art = build_artifacts(cfg);
    AttackConfig acfg = cfg.attack;
    acfg.attack_layer = art.attack_layer;
    int Ks = cfg.student_num_classes();

    AttackCorpus corpus = sample_attack_corpus(art.student_data.test, cfg.n_targeted, 0,
                                               cfg.attack.candidate_count, cfg.attack_seed);

    auto defended_residual = [&](const std::vector<AdversarialExample>& exs) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < exs.size(); ++i) {
            Prediction p = two_phase_infer(exs[i].image, art.student, art.registry, cfg.ensemble,
                                           (1u << 22) + i);
            if (!p.rejected && p.label == exs[i].pair.target_label) ++hits;
        }
        return exs.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(exs.size());
    };

    AdaptiveReport rep;

    // (a) defence unknown: attacks on the student only
    std::vector<AdversarialExample> mode_a =
        generate_targeted_corpus(art.student.network, corpus.targeted, acfg);
    rep.residual_defence_unknown = defended_residual(mode_a);

    // (b) pruning ratios unknown: white-box attacks against a surrogate
    // registry rebuilt with perturbed per-layer ratios
    PruningPlan perturbed = art.plan;
    for (std::size_t i = 0; i < perturbed.ratios.size(); ++i) {
        float delta = (i % 2 == 0) ? cfg.adaptive_ratio_delta : -cfg.adaptive_ratio_delta;
        perturbed.ratios[i] = std::clamp(perturbed.ratios[i] + delta, 0.0f, 0.95f);
    }
    DifferentiatorRegistry surrogate =
        build_registry(art.teacher, art.student_data.train, Ks, cfg.registry_span, perturbed,
                       cfg.diff_policy, cfg.iteration_times, cfg.build);
    std::vector<AdversarialExample> mode_b;
    for (const AttackPair& p : corpus.targeted) {
        std::vector<const Network*> nets{&art.student.network};
        for (std::size_t di : surrogate.lookup(p.target_label))
            nets.push_back(&surrogate.diffs[di].network);
        mode_b.push_back(targeted_attack_multi(nets, p, acfg));
    }
    rep.residual_ratios_unknown = defended_residual(mode_b);

    // (c) defence fully known: white-box attacks against the real differentiators
    std::vector<AdversarialExample> mode_c;
    for (const AttackPair& p : corpus.targeted) {
        std::vector<const Network*> nets{&art.student.network};
        for (std::size_t di : art.registry.lookup(p.target_label))
            nets.push_back(&art.registry.diffs[di].network);
        mode_c.push_back(targeted_attack_multi(nets, p, acfg));
    }
    rep.residual_defence_known = defended_residual(mode_c);

    DefenseEvalResult base = evaluate_defense(art, mode_a, {}, cfg.ensemble, cfg.zero_timings);
    rep.base.clean_accuracy = art.clean_accuracy;
    rep.base.tpr = base.tpr;
    rep.base.undefended_targeted_success = base.undefended_targeted;
    rep.base.reject_rate_targeted = base.reject_targeted;
    rep.base.residual_targeted = base.residual_targeted;
    rep.base.records = std::move(base.records);
    rep.base.sweep_axis = "adaptive_knowledge";
    for (int m = 0; m < 3; ++m) {
        MetricsRow row;
        row.axis_value = m;
        row.residual_targeted = m == 0   ? rep.residual_defence_unknown
                                : m == 1 ? rep.residual_ratios_unknown
                                         : rep.residual_defence_known;
        rep.base.rows.push_back(row);
    }
    return rep;
}

// ---- FGSM evaluation helper ----

struct FgsmEval {
    double undefended_success = 0;  // misclassification rate on the student
    double residual_success = 0;    // accepted and still misclassified
};

inline FgsmEval fgsm_eval(const ExperimentArtifacts& art, float epsilon, std::size_t n,
                          const EnsembleConfig& ens, std::uint64_t seed) {
    const LabeledDataset& test = art.student_data.test;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, test.size() - 1);
    std::size_t undef = 0, resid = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t s = pick(rng);
        Tensor adv = fgsm(art.student.network, test.images[s], test.labels[s], epsilon);
        int plain = argmax_label(forward(art.student.network, adv));
        if (plain != test.labels[s]) ++undef;
        Prediction p = two_phase_infer(adv, art.student, art.registry, ens, (1u << 23) + i);
        if (!p.rejected && p.label != test.labels[s]) ++resid;
    }
    FgsmEval out;
    out.undefended_success = static_cast<double>(undef) / static_cast<double>(n);
    out.residual_success = static_cast<double>(resid) / static_cast<double>(n);
    return out;
}

// ---- reports ----

inline std::string format_fixed(double v, int prec = 6) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(prec) << v;
    return ss.str();
}

inline std::string report_csv(const MetricsReport& rep) {
    std::string out =
        "axis_value,accuracy,tpr,reject_rate_targeted,reject_rate_nontargeted,"
        "residual_targeted,residual_nontargeted,phase1_ms,total_ms\n";
    for (const MetricsRow& r : rep.rows) {
        out += format_fixed(r.axis_value) + "," + format_fixed(r.accuracy) + "," +
               format_fixed(r.tpr) + "," + format_fixed(r.reject_rate_targeted) + "," +
               format_fixed(r.reject_rate_nontargeted) + "," + format_fixed(r.residual_targeted) +
               "," + format_fixed(r.residual_nontargeted) + "," + format_fixed(r.phase1_ms, 3) +
               "," + format_fixed(r.total_ms, 3) + "\n";
    }
    return out;
}

inline json report_json(const MetricsReport& rep) {
    json j;
    j["clean_accuracy"] = rep.clean_accuracy;
    j["tpr"] = rep.tpr;
    j["undefended_targeted_success"] = rep.undefended_targeted_success;
    j["undefended_nontargeted_success"] = rep.undefended_nontargeted_success;
    j["reject_rate_targeted"] = rep.reject_rate_targeted;
    j["reject_rate_nontargeted"] = rep.reject_rate_nontargeted;
    j["residual_targeted"] = rep.residual_targeted;
    j["residual_nontargeted"] = rep.residual_nontargeted;
    j["phase1_ms"] = rep.phase1_ms;
    j["total_ms"] = rep.total_ms;
    j["sweep_axis"] = rep.sweep_axis;
    j["rows"] = json::array();
    for (const MetricsRow& r : rep.rows) {
        json row;
        row["axis_value"] = r.axis_value;
        row["accuracy"] = r.accuracy;
        row["tpr"] = r.tpr;
        row["reject_rate_targeted"] = r.reject_rate_targeted;
        row["reject_rate_nontargeted"] = r.reject_rate_nontargeted;
        row["residual_targeted"] = r.residual_targeted;
        row["residual_nontargeted"] = r.residual_nontargeted;
        row["phase1_ms"] = r.phase1_ms;
        row["total_ms"] = r.total_ms;
        j["rows"].push_back(row);
    }
    j["records"] = rep.records;
    return j;
}

inline MetricsReport report_from_json(const json& j) {
    MetricsReport rep;
    rep.clean_accuracy = j.value("clean_accuracy", 0.0);
    rep.tpr = j.value("tpr", 0.0);
    rep.undefended_targeted_success = j.value("undefended_targeted_success", 0.0);
    rep.undefended_nontargeted_success = j.value("undefended_nontargeted_success", 0.0);
    rep.reject_rate_targeted = j.value("reject_rate_targeted", 0.0);
    rep.reject_rate_nontargeted = j.value("reject_rate_nontargeted", 0.0);
    rep.residual_targeted = j.value("residual_targeted", 0.0);
    rep.residual_nontargeted = j.value("residual_nontargeted", 0.0);
    rep.phase1_ms = j.value("phase1_ms", 0.0);
    rep.total_ms = j.value("total_ms", 0.0);
    rep.sweep_axis = j.value("sweep_axis", "none");
    for (const auto& row : j.value("rows", json::array())) {
        MetricsRow r;
        r.axis_value = row.value("axis_value", 0.0);
        r.accuracy = row.value("accuracy", 0.0);
        r.tpr = row.value("tpr", 0.0);
        r.reject_rate_targeted = row.value("reject_rate_targeted", 0.0);
        r.reject_rate_nontargeted = row.value("reject_rate_nontargeted", 0.0);
        r.residual_targeted = row.value("residual_targeted", 0.0);
        r.residual_nontargeted = row.value("residual_nontargeted", 0.0);
        r.phase1_ms = row.value("phase1_ms", 0.0);
        r.total_ms = row.value("total_ms", 0.0);
        rep.rows.push_back(r);
    }
    if (j.contains("records")) rep.records = j["records"];
    return rep;
}

// Minimal static SVG line plot of one sweep series per metric column.
inline std::string report_svg(const MetricsReport& rep) {
    const int W = 640, H = 400, ML = 60, MB = 40, MT = 20, MR = 20;
    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    if (rep.rows.size() >= 2) {
        double x0 = rep.rows.front().axis_value, x1 = rep.rows.back().axis_value;
        if (x1 == x0) x1 = x0 + 1;
        struct Series {
            const char* name;
            const char* color;
            double MetricsRow::*field;
        };
        const Series series[] = {
            {"tpr", "#1f77b4", &MetricsRow::tpr},
            {"reject_targeted", "#2ca02c", &MetricsRow::reject_rate_targeted},
            {"residual_targeted", "#d62728", &MetricsRow::residual_targeted},
            {"accuracy", "#9467bd", &MetricsRow::accuracy},
        };
        auto sx = [&](double x) { return ML + (x - x0) / (x1 - x0) * (W - ML - MR); };
        auto sy = [&](double y) { return H - MB - y * (H - MB - MT); };
        svg << "<line x1='" << ML << "' y1='" << H - MB << "' x2='" << W - MR << "' y2='"
            << H - MB << "' stroke='black'/>\n";
        svg << "<line x1='" << ML << "' y1='" << MT << "' x2='" << ML << "' y2='" << H - MB
            << "' stroke='black'/>\n";
        int li = 0;
        for (const Series& s : series) {
            svg << "<polyline fill='none' stroke='" << s.color << "' stroke-width='2' points='";
            for (const MetricsRow& r : rep.rows)
                svg << sx(r.axis_value) << "," << sy(std::clamp(r.*(s.field), 0.0, 1.0)) << " ";
            svg << "'/>\n";
            svg << "<text x='" << W - 180 << "' y='" << MT + 16 * (li + 1) << "' fill='" << s.color
                << "' font-size='12'>" << s.name << "</text>\n";
            ++li;
        }
        svg << "<text x='" << W / 2 << "' y='" << H - 8 << "' font-size='12' text-anchor='middle'>"
            << rep.sweep_axis << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

// Writes report.csv + report.json (+ sweep.svg when a sweep is present).
inline void emit_report(const MetricsReport& rep, const std::string& out_dir, bool with_svg = true) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream f(out_dir + "/" + name, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("unwritable output path: " + out_dir + "/" + name);
        f << content;
    };
    write("report.csv", report_csv(rep));
    write("report.json", report_json(rep).dump(2) + "\n");
    if (with_svg && rep.sweep_axis != "none") write("sweep.svg", report_svg(rep));
}

}  // namespace tlshield
