// tlshield command line front end.
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime failure.

#include <iostream>

#include <CLI11.hpp>

#include "tlshield/harness.hpp"
#include "tlshield/image_io.hpp"

using namespace tlshield;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    long seed = -1;  // -1 = take seeds from the config
};

void add_common(CLI::App* cmd, CommonArgs& a, bool config_required = true) {
    auto* c = cmd->add_option("--config", a.config_path, "experiment config file (INI)");
    if (config_required) c->required();
    cmd->add_option("--out", a.out_dir, "output directory");
    cmd->add_option("--seed", a.seed, "override the master seed");
}

ExperimentConfig load_experiment(const CommonArgs& a) {
    ExperimentConfig e;
    try {  // config problems are usage errors (exit 2), not runtime failures
        Config cfg = a.config_path.empty() ? Config() : Config::load(a.config_path);
        e = experiment_config_from(cfg);
    } catch (const std::exception& ex) {
        throw std::invalid_argument(ex.what());
    }
    if (a.seed >= 0) {
        std::uint64_t s = static_cast<std::uint64_t>(a.seed);
        e.teacher_data_seed = s * 31 + 7;
        e.student_data_seed = s * 31 + 17;
        e.teacher_init_seed = s * 31 + 1;
        e.student_seed = s * 31 + 2;
        e.build.seed = s * 31 + 3;
        e.attack_seed = s * 31 + 23;
        e.ensemble.selection_seed = s * 31 + 11;
    }
    return e;
}

void ensure_out(const std::string& dir) { std::filesystem::create_directories(dir); }

int cmd_train_teacher(const CommonArgs& a) {
    ExperimentConfig e = load_experiment(a);
    ensure_out(a.out_dir);
    DatasetSplit data = synth_dataset(e.K, e.per_class, e.teacher_data_seed);
    Network teacher = desk_teacher_arch(e.K, 24, 24, 1, e.teacher_init_seed);
    NetOptimizer opt(desk_optimizer(e.optimizer, e.teacher_lr));
    TrainOptions tr{e.teacher_epochs, e.batch_size, e.teacher_data_seed};
    std::vector<float> losses = train_epochs(teacher, data.train, opt, tr);
    save_network(teacher, a.out_dir + "/teacher.tls");
    std::cout << "teacher accuracy " << dataset_accuracy(teacher, data.test) << ", final loss "
              << (losses.empty() ? 0.0f : losses.back()) << "\n";
    std::cout << "wrote " << a.out_dir << "/teacher.tls\n";
    return 0;
}

int cmd_make_student(const CommonArgs& a, const std::string& teacher_path) {
    ExperimentConfig e = load_experiment(a);
    ensure_out(a.out_dir);
    Network teacher = load_network(teacher_path);
    DatasetSplit raw = synth_dataset(e.K, e.per_class, e.student_data_seed);
    DatasetSplit data;
    if (e.student_classes.empty()) {
        data = std::move(raw);
    } else {
        data.train = raw.train.filter_classes(e.student_classes, true);
        data.test = raw.test.filter_classes(e.student_classes, true);
    }
    StudentModel st = make_student(teacher, e.student_num_classes(), e.student_policy,
                                   e.student_seed);
    TrainOptions tr{e.student_epochs, e.batch_size, e.student_seed};
    fine_tune(st, data.train, tr, desk_optimizer(e.optimizer, e.student_lr));
    save_student(st, a.out_dir + "/student.tls");
    std::cout << "student accuracy " << dataset_accuracy(st.network, data.test) << "\n";
    std::cout << "wrote " << a.out_dir << "/student.tls\n";
    return 0;
}

int cmd_build_registry(const CommonArgs& a, const std::string& teacher_path) {
    ExperimentConfig e = load_experiment(a);
    ensure_out(a.out_dir);
    Network teacher = load_network(teacher_path);
    DatasetSplit raw = synth_dataset(e.K, e.per_class, e.student_data_seed);
    LabeledDataset train = e.student_classes.empty()
                               ? raw.train
                               : raw.train.filter_classes(e.student_classes, true);
    PruningPlan plan;
    plan.ratios = e.plan_ratios;
    if (plan.ratios.empty()) plan = default_plan(teacher, e.plan_max_ratio);
    DifferentiatorRegistry reg =
        build_registry(teacher, train, e.student_num_classes(), e.registry_span, plan,
                       e.diff_policy, e.iteration_times, e.build);
    save_registry(reg, teacher, a.out_dir + "/registry.tls");
    MemoryReport mem = memory_report(reg, teacher);
    json j;
    j["differentiators"] = reg.diffs.size();
    j["reused_parameter_bytes"] = mem.reused_parameter_bytes;
    j["private_parameter_bytes"] = mem.private_parameter_bytes;
    j["tag_bytes"] = mem.tag_bytes;
    j["total_bytes"] = mem.total();
    j["overhead_ratio"] = mem.overhead_ratio();
    std::cout << j.dump(2) << "\n";
    std::cout << "wrote " << a.out_dir << "/registry.tls\n";
    return 0;
}

int cmd_attack(const CommonArgs& a, const std::string& student_path,
               const std::string& import_dir, bool do_fgsm, float fgsm_eps) {
    ExperimentConfig e = load_experiment(a);
    ensure_out(a.out_dir);
    StudentModel st = load_student(student_path);

    LabeledDataset pool;
    if (!import_dir.empty()) {
        pool = ingest_dataset(import_dir);
        if (pool.image_shape() != st.network.input_shape)
            throw std::runtime_error("imported images do not match the student input shape");
    } else {
        DatasetSplit raw = synth_dataset(e.K, e.per_class, e.student_data_seed);
        pool = e.student_classes.empty() ? raw.test
                                         : raw.test.filter_classes(e.student_classes, true);
    }

    AttackConfig acfg = e.attack;
    if (e.attack_layer_auto) acfg.attack_layer = last_frozen_layer(st.network);

    AttackCorpus corpus = sample_attack_corpus(pool, e.n_targeted, e.n_nontargeted,
                                               acfg.candidate_count, e.attack_seed);
    json records = json::array();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < corpus.targeted.size(); ++i) {
        AdversarialExample ex = do_fgsm
                                    ? [&] {
                                          AdversarialExample f;
                                          f.pair = corpus.targeted[i];
                                          f.image = fgsm(st.network, corpus.targeted[i].source,
                                                         corpus.targeted[i].source_label, fgsm_eps);
                                          f.achieved_dssim =
                                              dssim(f.image, corpus.targeted[i].source, acfg.ssim);
                                          f.config = acfg;
                                          return f;
                                      }()
                                    : targeted_attack(st.network, corpus.targeted[i], acfg);
        int pred = argmax_label(forward(st.network, ex.image));
        bool hit = do_fgsm ? pred != ex.pair.source_label : pred == ex.pair.target_label;
        if (hit) ++hits;
        std::string name = "adv_" + std::to_string(i) + ".png";
        write_png(ex.image, a.out_dir + "/" + name);
        json rec;
        rec["image"] = name;
        rec["source_id"] = ex.pair.source_id;
        rec["target_id"] = ex.pair.target_id;
        rec["source_label"] = ex.pair.source_label;
        rec["target_label"] = ex.pair.target_label;
        rec["achieved_dssim"] = ex.achieved_dssim;
        rec["achieved_distance"] = ex.achieved_distance;
        rec["budget_satisfied"] = ex.budget_satisfied;
        rec["prediction"] = pred;
        rec["success"] = hit;
        records.push_back(std::move(rec));
    }
    json out;
    out["attack"] = do_fgsm ? "fgsm" : "mimicry";
    out["attack_layer"] = acfg.attack_layer;
    out["budget"] = acfg.budget;
    out["success_rate"] = corpus.targeted.empty()
                              ? 0.0
                              : static_cast<double>(hits) /
                                    static_cast<double>(corpus.targeted.size());
    out["records"] = std::move(records);
    std::ofstream f(a.out_dir + "/attacks.json", std::ios::trunc);
    f << out.dump(2) << "\n";
    std::cout << "success rate " << out["success_rate"] << " over " << corpus.targeted.size()
              << " pairs\nwrote " << a.out_dir << "/attacks.json\n";
    return 0;
}

int cmd_defend_eval(const CommonArgs& a) {
    ExperimentConfig e = load_experiment(a);
    ensure_out(a.out_dir);
    MetricsReport rep = run_experiment(e);
    emit_report(rep, a.out_dir);
    std::cout << "tpr " << rep.tpr << ", undefended targeted "
              << rep.undefended_targeted_success << ", residual targeted "
              << rep.residual_targeted << "\n";
    std::cout << "wrote " << a.out_dir << "/report.{csv,json}\n";
    return 0;
}

int cmd_adaptive_eval(const CommonArgs& a) {
    ExperimentConfig e = load_experiment(a);
    ensure_out(a.out_dir);
    AdaptiveReport rep = adaptive_eval(e);
    emit_report(rep.base, a.out_dir);
    json j;
    j["residual_defence_unknown"] = rep.residual_defence_unknown;
    j["residual_ratios_unknown"] = rep.residual_ratios_unknown;
    j["residual_defence_known"] = rep.residual_defence_known;
    std::ofstream f(a.out_dir + "/adaptive.json", std::ios::trunc);
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    std::cout << "wrote " << a.out_dir << "/adaptive.json\n";
    return 0;
}

int cmd_report(const std::string& in_path, const std::string& out_dir) {
    std::ifstream f(in_path);
    if (!f) throw std::runtime_error("cannot open report: " + in_path);
    json j = json::parse(f);
    MetricsReport rep = report_from_json(j);
    emit_report(rep, out_dir);
    std::cout << "wrote " << out_dir << "/report.{csv,json}\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"transfer-learning misclassification defense workbench"};
    app.require_subcommand(1);

    CommonArgs tt, ms, br, at, de, ae;
    std::string teacher_path = "teacher.tls", student_path = "student.tls";
    std::string import_dir, report_in, report_out = ".";
    bool do_fgsm = false;
    float fgsm_eps = 0.1f;

    auto* c_tt = app.add_subcommand("train-teacher", "train the desk-scale teacher");
    add_common(c_tt, tt);
    auto* c_ms = app.add_subcommand("make-student", "transfer-learn a student from a teacher");
    add_common(c_ms, ms);
    c_ms->add_option("--teacher", teacher_path, "teacher archive");
    auto* c_br = app.add_subcommand("build-registry", "build the differentiator registry");
    add_common(c_br, br);
    c_br->add_option("--teacher", teacher_path, "teacher archive");
    auto* c_at = app.add_subcommand("attack", "craft adversarial examples against a student");
    add_common(c_at, at);
    c_at->add_option("--student", student_path, "student archive");
    c_at->add_option("--import", import_dir, "PNG dataset directory (one subdir per class)");
    c_at->add_flag("--fgsm", do_fgsm, "use FGSM instead of internal-feature mimicry");
    c_at->add_option("--epsilon", fgsm_eps, "FGSM step size");
    auto* c_de = app.add_subcommand("defend-eval", "end-to-end defended evaluation");
    add_common(c_de, de);
    auto* c_ae = app.add_subcommand("adaptive-eval", "adaptive attacker evaluation");
    add_common(c_ae, ae);
    auto* c_rp = app.add_subcommand("report", "re-emit CSV/SVG from a report.json");
    c_rp->add_option("--in", report_in, "report.json path")->required();
    c_rp->add_option("--out", report_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (c_tt->parsed()) return cmd_train_teacher(tt);
        if (c_ms->parsed()) return cmd_make_student(ms, teacher_path);
        if (c_br->parsed()) return cmd_build_registry(br, teacher_path);
        if (c_at->parsed()) return cmd_attack(at, student_path, import_dir, do_fgsm, fgsm_eps);
        if (c_de->parsed()) return cmd_defend_eval(de);
        if (c_ae->parsed()) return cmd_adaptive_eval(ae);
        if (c_rp->parsed()) return cmd_report(report_in, report_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
