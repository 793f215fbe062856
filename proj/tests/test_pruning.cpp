#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tlshield/harness.hpp"

using namespace tlshield;

namespace {

struct Fixture {
    DatasetSplit data;
    Network teacher;
    PruningPlan plan;
    BuildOptions opts;
};

const Fixture& fixture() {
    static Fixture f = [] {
        Fixture r;
        r.data = synth_dataset(10, 40, 7);
        r.teacher = desk_teacher_arch(10, 24, 24, 1, 1);
        NetOptimizer opt(desk_optimizer("adadelta", 1.0f));
        train_epochs(r.teacher, r.data.train, opt, {15, 32, 1});
        r.plan.ratios = {0.5f, 0.5f, 0.5f, 0.5f, 0.3f};
        r.opts.initial_epochs = 10;
        r.opts.iteration_epochs = 4;
        r.opts.batch_size = 8;
        r.opts.seed = 3;
        r.opts.optimizer = desk_optimizer("adadelta", 1.0f);
        return r;
    }();
    return f;
}

float diff_accuracy(const Differentiator& d, const LabeledDataset& test) {
    LabeledDataset held = test.filter_classes(d.classes, false);
    int ok = 0;
    for (std::size_t i = 0; i < held.size(); ++i)
        ok += differentiator_predict(d, held.images[i]) == held.labels[i];
    return static_cast<float>(ok) / static_cast<float>(held.size());
}

}  // namespace

TEST_CASE("activation profiles match hand oracles") {
    SUBCASE("all-zero image on a bias-free net scores zero everywhere") {
        Network net;
        net.input_shape = Shape{1, 4, 4};
        net.num_classes = 2;
        std::mt19937 rng(3);
        Conv2DLayer c(1, 4, 3, 1, 1);
        glorot_uniform(c.w, 9, 36, rng);
        net.add(std::move(c));
        net.add(FlattenLayer{});
        DenseLayer d(64, 2);
        glorot_uniform(d.w, 64, 2, rng);
        net.add(std::move(d));
        LabeledDataset ds;
        ds.channels = 1;
        ds.height = 4;
        ds.width = 4;
        ds.num_classes = 2;
        ds.images.push_back(Tensor(Shape{1, 4, 4}));
        ds.labels.push_back(1);
        ActivationProfile p = profile_activations(net, ds);
        for (const auto& layer : p.layer_scores)
            for (float s : layer) CHECK(s == 0.0f);
    }
    SUBCASE("single dense layer, one sample: score is |w*x| per connection") {
        Network net;
        net.input_shape = Shape{3};
        net.num_classes = 2;
        DenseLayer d(3, 2);
        d.w.data = {0.5f, -1.0f, 2.0f, 1.5f, 0.25f, -0.75f};
        net.add(std::move(d));
        LabeledDataset ds;
        ds.channels = 1;
        ds.height = 1;
        ds.width = 3;
        ds.num_classes = 2;
        ds.images.push_back(Tensor(Shape{3}, {2.0f, -1.0f, 0.5f}));
        ds.labels.push_back(1);
        ds.images[0].shape = Shape{3};
        ActivationProfile p = profile_activations(net, ds);
        std::vector<float> want = {1.0f, 1.0f, 1.0f, 3.0f, 0.25f, 0.375f};
        REQUIRE(p.layer_scores[0].size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(p.layer_scores[0][i] == doctest::Approx(want[i]));
    }
    SUBCASE("duplicating every sample leaves the profile unchanged") {
        const Fixture& f = fixture();
        LabeledDataset sub = f.data.train.filter_classes({1, 2}, false);
        ActivationProfile a = profile_activations(f.teacher, sub);
        LabeledDataset dup = sub;
        for (std::size_t i = 0; i < sub.size(); ++i) {
            dup.images.push_back(sub.images[i]);
            dup.labels.push_back(sub.labels[i]);
        }
        ActivationProfile b = profile_activations(f.teacher, dup);
        for (std::size_t l = 0; l < a.layer_scores.size(); ++l)
            for (std::size_t u = 0; u < a.layer_scores[l].size(); ++u)
                CHECK(a.layer_scores[l][u] == doctest::Approx(b.layer_scores[l][u]).epsilon(1e-5));
    }
    SUBCASE("empty dataset is rejected") {
        LabeledDataset empty;
        CHECK_THROWS_AS(profile_activations(fixture().teacher, empty), std::invalid_argument);
    }
}

TEST_CASE("prune_layer selection rules") {
    Conv2DLayer conv(2, 10, 3, 1, 1);
    std::fill(conv.w.data.begin(), conv.w.data.end(), 1.0f);
    Layer layer = conv;

    SUBCASE("ratio 0 gives an all-ones mask") {
        std::vector<float> scores(10, 1.0f);
        Tensor m = prune_layer(layer, scores, 0.0f);
        for (float v : m.data) CHECK(v == 1.0f);
    }
    SUBCASE("scores 0..9 with ratio 0.3 mask filters 0,1,2") {
        std::vector<float> scores(10);
        std::iota(scores.begin(), scores.end(), 0.0f);
        Layer pruned = layer;
        set_layer_mask(pruned, prune_layer(layer, scores, 0.3f));
        std::vector<bool> m = masked_units(pruned);
        // brute-force oracle: the size-3 subset of minimal total score
        for (std::size_t f = 0; f < 10; ++f) CHECK(m[f] == (f < 3));
    }
    SUBCASE("ratio 0.5 on 5 units masks floor(2.5)=2") {
        DenseLayer d(1, 5);
        Layer dl = d;
        std::vector<float> scores = {3, 1, 4, 1, 5};
        Layer pruned = dl;
        set_layer_mask(pruned, prune_layer(dl, scores, 0.5f));
        std::vector<bool> m = masked_units(pruned);
        CHECK(std::count(m.begin(), m.end(), true) == 2);
        CHECK(m[1]);  // score 1, lower index wins the tie
        CHECK(m[3]);
    }
    SUBCASE("ties break to the lowest index") {
        std::vector<float> scores(10, 7.0f);
        Layer pruned = layer;
        set_layer_mask(pruned, prune_layer(layer, scores, 0.4f));
        std::vector<bool> m = masked_units(pruned);
        for (std::size_t f = 0; f < 10; ++f) CHECK(m[f] == (f < 4));
    }
    SUBCASE("conv filters are masked atomically, bias included") {
        std::vector<float> scores(10);
        std::iota(scores.begin(), scores.end(), 0.0f);
        Layer pruned = layer;
        set_layer_mask(pruned, prune_layer(layer, scores, 0.2f));
        const auto& c = std::get<Conv2DLayer>(pruned);
        std::size_t fs = c.in_ch * c.kh * c.kw;
        for (std::size_t f = 0; f < 10; ++f)
            for (std::size_t i = 0; i < fs; ++i)
                CHECK(c.mask->data[f * fs + i] == (f < 2 ? 0.0f : 1.0f));
        CHECK(c.filter_masked(0));
        CHECK(c.filter_masked(1));
    }
    SUBCASE("ratio 1 is rejected") {
        std::vector<float> scores(10, 1.0f);
        CHECK_THROWS_AS(prune_layer(layer, scores, 1.0f), std::invalid_argument);
    }
    SUBCASE("lowest-score property on random instances vs brute force") {
        std::mt19937 rng(17);
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        for (int t = 0; t < 20; ++t) {
            std::vector<float> scores(10);
            for (float& s : scores) s = u(rng);
            Layer pruned = layer;
            set_layer_mask(pruned, prune_layer(layer, scores, 0.3f));
            std::vector<bool> m = masked_units(pruned);
            for (std::size_t a = 0; a < 10; ++a)
                for (std::size_t b = 0; b < 10; ++b)
                    if (m[a] && !m[b]) CHECK(scores[a] <= scores[b]);
        }
    }
}

TEST_CASE("mask independence: per-layer masks do not depend on other layers") {
    const Fixture& f = fixture();
    LabeledDataset sub = f.data.train.filter_classes({1, 2}, false);
    ActivationProfile act = profile_activations(f.teacher, sub);
    std::vector<std::size_t> prunable = prunable_layers(f.teacher);
    // masks computed in forward order
    std::vector<Tensor> fwd;
    for (std::size_t pi = 0; pi < prunable.size(); ++pi)
        fwd.push_back(prune_layer(f.teacher.layers[prunable[pi]],
                                  act.layer_scores[prunable[pi]], f.plan.ratios[pi]));
    // masks computed in reverse order
    for (std::size_t pi = prunable.size(); pi-- > 0;) {
        Tensor m = prune_layer(f.teacher.layers[prunable[pi]], act.layer_scores[prunable[pi]],
                               f.plan.ratios[pi]);
        CHECK(m.data == fwd[pi].data);
    }
}

TEST_CASE("build_differentiator follows the algorithm contracts") {
    const Fixture& f = fixture();

    SUBCASE("all-zero plan with one iteration equals a plain 2-class student") {
        PruningPlan zero;
        zero.ratios.assign(f.plan.ratios.size(), 0.0f);
        BuildOptions o = f.opts;
        o.initial_epochs = 4;
        o.iteration_epochs = 0;
        Differentiator d = build_differentiator(f.teacher, f.data.train, ClassPair(1, 2), zero,
                                                FreezePolicy::mid(kDeskMidCutoff), 1, o);
        for (std::size_t l = 0; l < d.network.layers.size(); ++l)
            for (bool b : masked_units(d.network.layers[l])) CHECK_FALSE(b);

        LabeledDataset sub = f.data.train.filter_classes({1, 2}, true);
        StudentModel st = make_student(f.teacher, 2, FreezePolicy::mid(kDeskMidCutoff), o.seed);
        fine_tune(st, sub, {o.initial_epochs, o.batch_size, o.seed}, o.optimizer);
        for (std::size_t i = 0; i < sub.size(); ++i)
            CHECK(argmax_label(forward(d.network, sub.images[i])) ==
                  argmax_label(forward(st.network, sub.images[i])));
    }
    SUBCASE("pruned fractions are exact and only unfrozen masks evolve") {
        Differentiator d = build_differentiator(f.teacher, f.data.train, ClassPair(3, 7), f.plan,
                                                FreezePolicy::mid(kDeskMidCutoff), 2, f.opts);
        std::vector<std::size_t> prunable = prunable_layers(d.network);
        for (std::size_t pi = 0; pi < prunable.size(); ++pi) {
            std::vector<bool> m = masked_units(d.network.layers[prunable[pi]]);
            std::size_t want = static_cast<std::size_t>(f.plan.ratios[pi] * m.size());
            CHECK(std::count(m.begin(), m.end(), true) == static_cast<std::ptrdiff_t>(want));
        }
        // frozen-layer masks equal the single-pass teacher masks
        LabeledDataset sub = f.data.train.filter_classes({3, 7}, false);
        ActivationProfile act = profile_activations(f.teacher, sub);
        for (std::size_t pi = 0; pi < prunable.size(); ++pi) {
            std::size_t l = prunable[pi];
            if (!d.network.frozen[l]) continue;
            Tensor want = prune_layer(f.teacher.layers[l], act.layer_scores[l], f.plan.ratios[pi]);
            const auto* c = std::get_if<Conv2DLayer>(&d.network.layers[l]);
            REQUIRE(c);
            CHECK(c->mask->data == want.data);
        }
    }
    SUBCASE("masks are monotone across iteration counts") {
        BuildOptions o = f.opts;
        o.iteration_epochs = 2;
        Differentiator d1 = build_differentiator(f.teacher, f.data.train, ClassPair(2, 9), f.plan,
                                                 FreezePolicy::mid(kDeskMidCutoff), 1, o);
        Differentiator d2 = build_differentiator(f.teacher, f.data.train, ClassPair(2, 9), f.plan,
                                                 FreezePolicy::mid(kDeskMidCutoff), 2, o);
        // same plan ratio keeps mask counts fixed; monotonicity means any unit
        // masked after iteration 1 would stay masked if re-ranked, enforced by
        // the score floor. Directly assert: iteration-1 masks never resurrect.
        (void)d1;
        (void)d2;
        std::vector<std::size_t> prunable = prunable_layers(d2.network);
        for (std::size_t pi = 0; pi < prunable.size(); ++pi) {
            std::vector<bool> m1 = masked_units(d1.network.layers[prunable[pi]]);
            std::vector<bool> m2 = masked_units(d2.network.layers[prunable[pi]]);
            if (d2.network.frozen[prunable[pi]]) continue;
            for (std::size_t u = 0; u < m1.size(); ++u)
                if (m1[u]) CHECK(m2[u]);
        }
    }
    SUBCASE("disjoint class pairs yield different masks under the same plan") {
        BuildOptions o = f.opts;
        o.initial_epochs = 4;
        o.iteration_epochs = 1;
        Differentiator a = build_differentiator(f.teacher, f.data.train, ClassPair(1, 2), f.plan,
                                                FreezePolicy::mid(kDeskMidCutoff), 1, o);
        Differentiator b = build_differentiator(f.teacher, f.data.train, ClassPair(5, 8), f.plan,
                                                FreezePolicy::mid(kDeskMidCutoff), 1, o);
        bool differ = false;
        for (std::size_t l = 0; l < a.network.layers.size(); ++l)
            if (masked_units(a.network.layers[l]) != masked_units(b.network.layers[l]))
                differ = true;
        CHECK(differ);
    }
    SUBCASE("invalid arguments are rejected") {
        CHECK_THROWS_AS(build_differentiator_multi(f.teacher, f.data.train, {1, 1}, f.plan,
                                                   FreezePolicy::deep(), 1, f.opts),
                        std::invalid_argument);
        CHECK_THROWS_AS(build_differentiator(f.teacher, f.data.train, ClassPair(1, 2), f.plan,
                                             FreezePolicy::deep(), 0, f.opts),
                        std::invalid_argument);
    }
}

TEST_CASE("iterated differentiator reaches 0.95 held-out accuracy") {
    const Fixture& f = fixture();
    Differentiator d = build_differentiator(f.teacher, f.data.train, ClassPair(4, 6), f.plan,
                                            FreezePolicy::mid(kDeskMidCutoff), 5, f.opts);
    CHECK(diff_accuracy(d, f.data.test) >= 0.95f);
}

TEST_CASE("cluster_labels groups by profile similarity") {
    SUBCASE("num_clusters = K gives singletons") {
        std::vector<ActivationProfile> profs(4);
        for (int i = 0; i < 4; ++i) profs[i].layer_scores = {{float(i + 1), 1.0f}};
        auto part = cluster_labels(profs, 4);
        REQUIRE(part.size() == 4);
        for (const auto& c : part) CHECK(c.size() == 1);
    }
    SUBCASE("identical pair clusters together against an orthogonal profile") {
        std::vector<ActivationProfile> profs(3);
        profs[0].layer_scores = {{1.0f, 0.0f}};
        profs[1].layer_scores = {{1.0f, 0.0f}};
        profs[2].layer_scores = {{0.0f, 1.0f}};
        auto part = cluster_labels(profs, 2);
        REQUIRE(part.size() == 2);
        for (const auto& c : part)
            if (c.size() == 2) CHECK(((c[0] == 1 && c[1] == 2) || (c[0] == 2 && c[1] == 1)));
    }
    SUBCASE("desk K=10 partition is deterministic across runs") {
        const Fixture& f = fixture();
        std::vector<ActivationProfile> profs;
        for (int cls = 1; cls <= 10; ++cls)
            profs.push_back(
                profile_activations(f.teacher, f.data.train.filter_classes({cls}, false)));
        auto a = cluster_labels(profs, 5);
        auto b = cluster_labels(profs, 5);
        CHECK(a == b);
        std::size_t total = 0;
        for (const auto& c : a) {
            CHECK(!c.empty());
            total += c.size();
        }
        CHECK(total == 10);
    }
    SUBCASE("num_clusters out of range is rejected") {
        std::vector<ActivationProfile> profs(3);
        for (auto& p : profs) p.layer_scores = {{1.0f}};
        CHECK_THROWS_AS(cluster_labels(profs, 0), std::invalid_argument);
        CHECK_THROWS_AS(cluster_labels(profs, 4), std::invalid_argument);
    }
}

TEST_CASE("multi-class differentiator variants") {
    const Fixture& f = fixture();

    SUBCASE("cluster of size 2 behaves like build_differentiator") {
        BuildOptions o = f.opts;
        o.initial_epochs = 4;
        o.iteration_epochs = 1;
        Differentiator a = build_differentiator(f.teacher, f.data.train, ClassPair(1, 5), f.plan,
                                                FreezePolicy::mid(kDeskMidCutoff), 1, o);
        Differentiator b = build_differentiator_multi(f.teacher, f.data.train, {1, 5}, f.plan,
                                                      FreezePolicy::mid(kDeskMidCutoff), 1, o);
        for (std::size_t i = 0; i < f.data.test.size(); ++i)
            CHECK(differentiator_predict(a, f.data.test.images[i]) ==
                  differentiator_predict(b, f.data.test.images[i]));
    }
    SUBCASE("all-zero ratios give a plain m-class student") {
        PruningPlan zero;
        zero.ratios.assign(f.plan.ratios.size(), 0.0f);
        BuildOptions o = f.opts;
        o.initial_epochs = 4;
        o.iteration_epochs = 0;
        Differentiator d = build_differentiator_multi(f.teacher, f.data.train, {2, 4, 6}, zero,
                                                      FreezePolicy::mid(kDeskMidCutoff), 1, o);
        CHECK(d.network.num_classes == 3);
        for (std::size_t l = 0; l < d.network.layers.size(); ++l)
            for (bool b : masked_units(d.network.layers[l])) CHECK_FALSE(b);
    }
}
