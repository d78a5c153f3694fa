#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fedinject/errors.hpp"
#include "fedinject/foundation.hpp"
#include "fedinject/gradcheck.hpp"
#include "fedinject/rng.hpp"

using namespace fedinject;
using namespace fedinject::foundation;
using client::ClientModel;
using client::ClientModelConfig;
using client::ModalityKind;
using client::TaskBatch;
using client::TaskSpec;
using tensor::Tape;
using tensor::Tensor;
using tensor::Val;

namespace {

ClientModelConfig tiny_client_config() {
    ClientModelConfig cfg;
    cfg.encoder_dim = 4;
    cfg.decoder_hidden = 6;
    cfg.tabular_hidden = 5;
    return cfg;
}

FoundationConfig tiny_stub_config() {
    FoundationConfig cfg;
    cfg.vocab_size = 64;
    cfg.embed_dim = 8;
    cfg.backbone_blocks = 2;
    cfg.lora_rank = 2;
    cfg.num_experts = 3;
    cfg.router_hidden = 6;
    return cfg;
}

TaskSpec vital_task(int id = 0) {
    TaskSpec t;
    t.task_id = id;
    t.name = "vitals_risk";
    t.modalities = {ModalityKind::VitalSign};
    t.prompt_text = "will the condition occur for this patient?";
    t.modality_description = "vital sign time series";
    return t;
}

TaskBatch random_batch(const TaskSpec& spec, const client::ModalityShapes& shapes, std::size_t n,
                       std::uint64_t key, double offset = 0.0) {
    TaskBatch b;
    rng::Stream labels(rng::derive(key, "labels"));
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(labels.uniform() < 0.5 ? 0 : 1);
    for (ModalityKind m : spec.modalities) {
        Tensor mat({n, shapes.raw_width(m)});
        rng::Stream s(rng::derive(key, client::modality_name(m)));
        for (std::size_t i = 0; i < n; ++i) {
            const double mu = (b.labels[i] == 1 ? 1.0 : -1.0) + offset;
            for (std::size_t c = 0; c < mat.cols(); ++c) mat.at2(i, c) = mu + s.normal();
        }
        b.features.emplace(m, std::move(mat));
    }
    return b;
}

} // namespace

TEST_CASE("embed_text determinism, permutation, shape") {
    FoundationStub stub(tiny_stub_config(), 4, 7);
    const Tensor a = stub.embed_text("alpha beta gamma");
    const Tensor b = stub.embed_text("alpha beta gamma");
    CHECK(a.bit_equal(b));
    REQUIRE(a.rows() == 3);
    REQUIRE(a.cols() == 8);

    const Tensor swapped = stub.embed_text("beta alpha gamma");
    for (std::size_t c = 0; c < 8; ++c) {
        CHECK(swapped.at2(0, c) == a.at2(1, c));
        CHECK(swapped.at2(1, c) == a.at2(0, c));
        CHECK(swapped.at2(2, c) == a.at2(2, c));
    }
    CHECK_THROWS_AS(stub.embed_text(""), InputError);
}

TEST_CASE("route: zero-initialized router gives exactly uniform weights") {
    FoundationStub stub(tiny_stub_config(), 4, 3);
    std::vector<nn::NamedParam> params = stub.trainable_parameters();
    for (auto& np : params) {
        if (np.name.rfind("router/", 0) == 0) np.param->value.fill(0.0);
    }
    const RouterOutput out = stub.route_alpha(vital_task());
    REQUIRE(out.alpha.size() == 3);
    for (double a : out.alpha) CHECK(a == 1.0 / 3.0);
}

TEST_CASE("route: single expert degenerates to [1]") {
    FoundationConfig cfg = tiny_stub_config();
    cfg.num_experts = 1;
    FoundationStub stub(cfg, 4, 3);
    const RouterOutput out = stub.route_alpha(vital_task());
    REQUIRE(out.alpha.size() == 1);
    CHECK(out.alpha[0] == 1.0);
}

TEST_CASE("route: matches a step-by-step attention trace") {
    FoundationConfig cfg = tiny_stub_config();
    cfg.embed_dim = 4;
    cfg.num_experts = 2;
    cfg.router_hidden = 3;
    FoundationStub stub(cfg, 4, 11);
    const TaskSpec task = vital_task();

    // Independent eager recomputation of the routing pipeline.
    const Tensor m = stub.embed_text(task.modality_description);
    const Tensor t = stub.embed_text(task.prompt_text);
    auto params = stub.trainable_parameters();
    auto get = [&](const std::string& name) -> const Tensor& {
        for (auto& np : params)
            if (np.name == name) return np.param->value;
        FAIL("missing ", name);
        return params[0].param->value;
    };
    auto mm = [](const Tensor& a, const Tensor& b) {
        Tensor y({a.rows(), b.cols()});
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < b.cols(); ++j) {
                double acc = 0;
                for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at2(i, k) * b.at2(k, j);
                y.at2(i, j) = acc;
            }
        return y;
    };
    const Tensor q = mm(m, get("router/wq"));
    const Tensor k = mm(t, get("router/wk"));
    const Tensor v = mm(t, get("router/wv"));
    Tensor scores({q.rows(), k.rows()});
    for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t j = 0; j < k.rows(); ++j) {
            double acc = 0;
            for (std::size_t c = 0; c < q.cols(); ++c) acc += q.at2(i, c) * k.at2(j, c);
            scores.at2(i, j) = acc / std::sqrt(4.0);
        }
    const Tensor attn = tensor::softmax_eager(scores, 1);
    const Tensor ctx = mm(attn, v);
    Tensor pooled({1, ctx.cols()});
    for (std::size_t c = 0; c < ctx.cols(); ++c) {
        double acc = 0;
        for (std::size_t r = 0; r < ctx.rows(); ++r) acc += ctx.at2(r, c);
        pooled.at2(0, c) = acc / static_cast<double>(ctx.rows());
    }
    Tensor h1 = mm(pooled, get("router/mlp/fc1/w"));
    for (std::size_t j = 0; j < h1.cols(); ++j) {
        h1.at2(0, j) += get("router/mlp/fc1/b").at(j);
        h1.at2(0, j) = std::max(0.0, h1.at2(0, j));
    }
    Tensor logits = mm(h1, get("router/mlp/fc2/w"));
    for (std::size_t j = 0; j < logits.cols(); ++j) logits.at2(0, j) += get("router/mlp/fc2/b").at(j);
    const Tensor want = tensor::softmax_eager(logits, 1);

    const RouterOutput got = stub.route_alpha(task);
    REQUIRE(got.alpha.size() == 2);
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(got.alpha[i] == doctest::Approx(want.at(i)).epsilon(1e-12));
}

TEST_CASE("route: contract holds over many random tasks and weights") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        FoundationStub stub(tiny_stub_config(), 4, rng::derive(seed, "router_contract"));
        TaskSpec task = vital_task();
        task.prompt_text = "prompt " + std::to_string(seed) + " about risk";
        task.modality_description = "modality " + std::to_string(seed * 31) + " stream";
        const RouterOutput out = stub.route_alpha(task);
        double sum = 0.0;
        for (double a : out.alpha) {
            CHECK(a >= 0.0);
            sum += a;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("router argmax is stable under positive logit scaling") {
    rng::Stream s(rng::derive(5, "argmax"));
    for (int rep = 0; rep < 200; ++rep) {
        Tensor z({1, 5});
        for (double& v : z.data()) v = 3.0 * s.normal();
        const double c = 0.1 + 5.0 * s.uniform();
        Tensor zs = z;
        for (double& v : zs.data()) v *= c;
        const Tensor a = tensor::softmax_eager(z, 1);
        const Tensor b = tensor::softmax_eager(zs, 1);
        std::size_t ia = 0, ib = 0;
        for (std::size_t i = 1; i < 5; ++i) {
            if (a.at(i) > a.at(ia)) ia = i;
            if (b.at(i) > b.at(ib)) ib = i;
        }
        CHECK(ia == ib);
    }
}

TEST_CASE("align_features: width contract and zero-weight alignment") {
    const auto ccfg = tiny_client_config();
    const auto fcfg = tiny_stub_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel agg(0, specs, ccfg, 21);
    FoundationStub stub(fcfg, ccfg.encoder_dim, 21);
    const TaskBatch batch = random_batch(specs[0], ccfg.shapes, 3, 5);

    Tape tape;
    const Tensor h = tape.value(stub.align_features(tape, agg, specs[0], batch));
    REQUIRE(h.rows() == 3);
    CHECK(h.cols() == 2 * fcfg.embed_dim);

    // Zero alignment weights: the aligned half is exactly zero (bias-free).
    stub.alignment().w.value.fill(0.0);
    Tape tape2;
    const Tensor h0 = tape2.value(stub.align_features(tape2, agg, specs[0], batch));
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < fcfg.embed_dim; ++c) CHECK(h0.at2(r, c) == 0.0);
    // The prompt half survives.
    bool any = false;
    for (std::size_t c = fcfg.embed_dim; c < 2 * fcfg.embed_dim; ++c)
        any = any || h0.at2(0, c) != 0.0;
    CHECK(any);
}

TEST_CASE("align_features matches a hand-traced pipeline") {
    const auto ccfg = tiny_client_config();
    FoundationConfig fcfg = tiny_stub_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel agg(0, specs, ccfg, 33);
    FoundationStub stub(fcfg, ccfg.encoder_dim, 33);
    const TaskBatch batch = random_batch(specs[0], ccfg.shapes, 2, 9);

    // Eager trace: encoder output -> canonical slots -> alignment -> concat prompt.
    Tape enc_tape;
    const Tensor emb = enc_tape.value(
        agg.encode_single(enc_tape, ModalityKind::VitalSign,
                          batch.features.at(ModalityKind::VitalSign)));
    const std::size_t slot = static_cast<std::size_t>(ModalityKind::VitalSign);
    Tensor slotted({2, stub.slot_width()});
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < ccfg.encoder_dim; ++c)
            slotted.at2(r, slot * ccfg.encoder_dim + c) = emb.at2(r, c);
    const Tensor& aw = stub.alignment().w.value;
    Tensor aligned({2, fcfg.embed_dim});
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < fcfg.embed_dim; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < stub.slot_width(); ++k)
                acc += slotted.at2(r, k) * aw.at2(k, j);
            aligned.at2(r, j) = acc;
        }
    const Tensor prompt = stub.embed_text(specs[0].prompt_text);

    Tape tape;
    const Tensor h = tape.value(stub.align_features(tape, agg, specs[0], batch));
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < fcfg.embed_dim; ++j) {
            CHECK(h.at2(r, j) == doctest::Approx(aligned.at2(r, j)).epsilon(1e-12));
            double pm = 0;
            for (std::size_t t = 0; t < prompt.rows(); ++t) pm += prompt.at2(t, j);
            pm /= static_cast<double>(prompt.rows());
            CHECK(h.at2(r, fcfg.embed_dim + j) == doctest::Approx(pm).epsilon(1e-12));
        }
}

TEST_CASE("lora zero-init: logits equal the adapter-free stub bit-exactly") {
    const auto ccfg = tiny_client_config();
    const auto fcfg = tiny_stub_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel agg(0, specs, ccfg, 40);
    FoundationStub stub(fcfg, ccfg.encoder_dim, 40); // B experts start at zero

    for (int rep = 0; rep < 20; ++rep) {
        const TaskBatch batch = random_batch(specs[0], ccfg.shapes, 4, rng::derive(50, "b", rep));
        Tape tape;
        Val h = stub.align_features(tape, agg, specs[0], batch);
        Val alpha = stub.route(tape, specs[0]);
        const Tensor got = tape.value(stub.lora_moe_forward(tape, h, alpha));

        // Frozen-path-only forward on a fresh tape, same kernels.
        Tape ft;
        Val x = ft.constant(tape.value(h));
        for (auto& blk : stub.blocks()) {
            Val pre = tensor::add(tensor::matmul(x, ft.constant(blk.w1.value)),
                                  ft.constant(blk.b1.value));
            Val frozen = tensor::add(
                tensor::matmul(tensor::relu(pre), ft.constant(blk.w2.value)),
                ft.constant(blk.b2.value));
            x = tensor::add(x, frozen);
        }
        auto frozen_params = stub.frozen_parameters();
        const Tensor* hw = nullptr;
        const Tensor* hb = nullptr;
        for (auto& np : frozen_params) {
            if (np.name == "head/w") hw = &np.param->value;
            if (np.name == "head/b") hb = &np.param->value;
        }
        const Tensor want =
            ft.value(tensor::add(tensor::matmul(x, ft.constant(*hw)), ft.constant(*hb)));
        CHECK(got.bit_equal(want));
    }
}

TEST_CASE("expert mixing is linear in alpha for a single block") {
    FoundationConfig cfg = tiny_stub_config();
    cfg.backbone_blocks = 1;
    cfg.num_experts = 3;
    FoundationStub stub(cfg, 4, 60);
    // Give the B matrices real values so adapters act.
    for (auto& np : stub.trainable_parameters()) {
        if (np.name.find("/b") != std::string::npos && np.name.rfind("block", 0) == 0) {
            rng::Stream s(rng::hash_str(np.name));
            for (double& v : np.param->value.data()) v = 0.3 * s.normal();
        }
    }
    const std::size_t w = stub.width();
    Tensor h({2, w});
    rng::Stream hs(rng::derive(61, "h"));
    for (double& v : h.data()) v = hs.normal();

    auto forward = [&](const std::vector<double>& alpha) {
        Tape tape;
        return tape.value(stub.lora_moe_forward(tape, tape.constant(h),
                                                tape.constant(Tensor({1, 3}, alpha))));
    };
    const Tensor frozen = forward({0, 0, 0});
    for (int rep = 0; rep < 10; ++rep) {
        rng::Stream s(rng::derive(62, "alpha", rep));
        std::vector<double> a1 = {s.uniform(), s.uniform(), s.uniform()};
        std::vector<double> a2 = {s.uniform(), s.uniform(), s.uniform()};
        std::vector<double> mix(3);
        for (int i = 0; i < 3; ++i) mix[i] = a1[i] + a2[i];
        const Tensor f1 = forward(a1);
        const Tensor f2 = forward(a2);
        const Tensor fm = forward(mix);
        for (std::size_t i = 0; i < fm.size(); ++i) {
            const double super = (f1.at(i) - frozen.at(i)) + (f2.at(i) - frozen.at(i));
            CHECK(fm.at(i) - frozen.at(i) == doctest::Approx(super).epsilon(1e-9));
        }
    }
}

TEST_CASE("lora_moe_forward rejects mismatched widths") {
    FoundationStub stub(tiny_stub_config(), 4, 70);
    Tape tape;
    Val h = tape.constant(Tensor({2, 5}));
    Val alpha = tape.constant(Tensor({1, 3}, {0.5, 0.25, 0.25}));
    CHECK_THROWS_AS(stub.lora_moe_forward(tape, h, alpha), DimensionError);
}

TEST_CASE("injection: freeze contract, loss trend, gradient check") {
    const auto ccfg = tiny_client_config();
    FoundationConfig fcfg = tiny_stub_config();
    fcfg.embed_dim = 6;
    fcfg.num_experts = 2;
    fcfg.backbone_blocks = 1;
    TaskSpec specs[] = {vital_task()};
    ClientModel agg(0, specs, ccfg, 80);
    FoundationStub stub(fcfg, ccfg.encoder_dim, 80);

    std::vector<Tensor> frozen_before;
    for (auto& np : stub.frozen_parameters()) frozen_before.push_back(np.param->value);

    const TaskBatch batch = random_batch(specs[0], ccfg.shapes, 24, 81);
    tensor::Optimizer opt(tensor::OptKind::Adam, 3e-3);
    std::map<int, TaskBatch> batches = {{0, batch}};

    std::vector<double> losses;
    for (int step = 0; step < 50; ++step) losses.push_back(injection_step(stub, agg, batches, opt));
    int upticks = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) {
        if (losses[i] > losses[i - 1]) ++upticks;
    }
    CHECK(upticks <= 5);
    CHECK(losses.back() < losses.front());

    auto frozen_after = stub.frozen_parameters();
    for (std::size_t i = 0; i < frozen_after.size(); ++i) {
        CHECK(frozen_after[i].param->value.bit_equal(frozen_before[i]));
    }

    // Finite differences over the injection trainables (small batch, tiny net).
    const TaskBatch small = random_batch(specs[0], ccfg.shapes, 3, 83);
    auto objective = [&](Tape& tape) {
        Val h = stub.align_features(tape, agg, specs[0], small);
        Val alpha = stub.route(tape, specs[0]);
        return tensor::cross_entropy(stub.lora_moe_forward(tape, h, alpha), small.labels);
    };
    std::vector<tensor::Parameter*> params;
    for (auto& np : stub.trainable_parameters()) params.push_back(np.param);
    for (auto& np : agg.encoder_parameters()) params.push_back(np.param);
    const auto report = tensor::grad_check(objective, params);
    CHECK(report.max_rel_error < 1e-3);
}

TEST_CASE("zero-shot: same pipeline as training-task inference, capability error") {
    const auto ccfg = tiny_client_config();
    const auto fcfg = tiny_stub_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel agg(0, specs, ccfg, 90);
    FoundationStub stub(fcfg, ccfg.encoder_dim, 90);
    const TaskBatch batch = random_batch(specs[0], ccfg.shapes, 5, 91);

    // A validation task identical to the training task gives identical outputs.
    TaskSpec twin = specs[0];
    twin.role = client::TaskRole::Validation;
    twin.name = "vitals_twin";
    const auto a = zero_shot_infer(stub, agg, specs[0], batch);
    const auto b = zero_shot_infer(stub, agg, twin, batch);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].score == b[i].score);
    }

    // A task needing an untrained modality cannot be handled.
    TaskSpec untrained = specs[0];
    untrained.name = "image_task";
    untrained.modalities = {ModalityKind::Image};
    TaskBatch img;
    img.labels = {0};
    img.features.emplace(ModalityKind::Image, Tensor({1, ccfg.shapes.raw_width(ModalityKind::Image)}));
    CHECK_THROWS_WITH_AS(zero_shot_infer(stub, agg, untrained, img),
                         doctest::Contains("cannot handle"), CapabilityError);
}
