#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fedinject/client_model.hpp"
#include "fedinject/errors.hpp"
#include "fedinject/rng.hpp"

using namespace fedinject;
using namespace fedinject::client;
using tensor::Tape;
using tensor::Tensor;

namespace {

ClientModelConfig small_config() {
    ClientModelConfig cfg;
    cfg.encoder_dim = 4;
    cfg.decoder_hidden = 6;
    cfg.tabular_hidden = 5;
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

TaskSpec lab_task(int id = 1) {
    TaskSpec t;
    t.task_id = id;
    t.name = "lab_flag";
    t.modalities = {ModalityKind::LabResult};
    t.prompt_text = "is the lab panel abnormal?";
    t.modality_description = "laboratory test results";
    return t;
}

TaskSpec two_modality_task(int id = 2) {
    TaskSpec t;
    t.task_id = id;
    t.name = "combined";
    t.modalities = {ModalityKind::VitalSign, ModalityKind::LabResult};
    t.prompt_text = "combined risk?";
    t.modality_description = "vitals and labs";
    return t;
}

Tensor random_features(std::size_t n, std::size_t w, std::uint64_t key) {
    Tensor t({n, w});
    rng::Stream s(key);
    for (double& v : t.data()) v = s.normal();
    return t;
}

// Class-conditional Gaussian task data, separable by `margin`.
TaskDataset synth_dataset(const TaskSpec& spec, const ModalityShapes& shapes, std::size_t n,
                          double margin, std::uint64_t key) {
    TaskDataset data;
    data.spec = spec;
    data.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        rng::Stream s(rng::derive(key, "label", i));
        data.labels[i] = s.uniform() < 0.5 ? 0 : 1;
    }
    for (ModalityKind m : spec.modalities) {
        const std::size_t w = shapes.raw_width(m);
        Tensor mat({n, w});
        for (std::size_t i = 0; i < n; ++i) {
            rng::Stream s(rng::derive(key, modality_name(m), i));
            const double mu = data.labels[i] == 1 ? margin : -margin;
            for (std::size_t c = 0; c < w; ++c) mat.at2(i, c) = mu + s.normal();
        }
        data.features.emplace(m, std::move(mat));
    }
    return data;
}

double train_accuracy(ClientModel& model, int task_id, const TaskDataset& data) {
    Tape tape;
    const TaskBatch batch = data.all();
    const Tensor logits = tape.value(client_forward(tape, model, task_id, batch));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const int pred = logits.at2(i, 1) > logits.at2(i, 0) ? 1 : 0;
        if (pred == batch.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(batch.size());
}

bool snapshots_equal(const ParamSnapshot& a, const ParamSnapshot& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || !t.bit_equal(it->second)) return false;
    }
    return true;
}

} // namespace

TEST_CASE("encode_concat: single modality is the encoder output") {
    const auto cfg = small_config();
    const TaskSpec spec = vital_task();
    TaskSpec specs[] = {spec};
    ClientModel model(0, specs, cfg, 1);

    TaskBatch batch;
    batch.features.emplace(ModalityKind::VitalSign, random_features(3, cfg.shapes.vital_dim, 9));
    batch.labels = {0, 1, 0};

    Tape tape;
    const Tensor cat = tape.value(encode_concat(tape, model, spec, batch));
    Tape tape2;
    const Tensor single = tape2.value(
        model.encode_single(tape2, ModalityKind::VitalSign,
                            batch.features.at(ModalityKind::VitalSign)));
    CHECK(cat.bit_equal(single));
}

TEST_CASE("encode_concat: declared order defines block order") {
    const auto cfg = small_config();
    TaskSpec fwd = two_modality_task();
    TaskSpec rev = fwd;
    rev.modalities = {ModalityKind::LabResult, ModalityKind::VitalSign};
    TaskSpec specs[] = {fwd};
    ClientModel model(0, specs, cfg, 2);

    TaskBatch batch;
    batch.features.emplace(ModalityKind::VitalSign, random_features(2, cfg.shapes.vital_dim, 5));
    batch.features.emplace(ModalityKind::LabResult, random_features(2, cfg.shapes.lab_dim, 6));
    batch.labels = {0, 1};

    Tape t1, t2;
    const Tensor a = t1.value(encode_concat(t1, model, fwd, batch));
    const Tensor b = t2.value(encode_concat(t2, model, rev, batch));
    const std::size_t d = cfg.encoder_dim;
    REQUIRE(a.cols() == 2 * d);
    // Permuting the declared modalities permutes the blocks.
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(a.at2(r, c) == b.at2(r, d + c));
            CHECK(a.at2(r, d + c) == b.at2(r, c));
        }
}

TEST_CASE("encode_concat: missing modality names the modality") {
    const auto cfg = small_config();
    const TaskSpec spec = two_modality_task();
    TaskSpec specs[] = {spec};
    ClientModel model(0, specs, cfg, 3);
    TaskBatch batch;
    batch.features.emplace(ModalityKind::VitalSign, random_features(1, cfg.shapes.vital_dim, 7));
    batch.labels = {1};
    Tape tape;
    CHECK_THROWS_WITH_AS(encode_concat(tape, model, spec, batch),
                         doctest::Contains("lab_result"), InputError);
}

TEST_CASE("client_forward: zero decoder weights give zero logits") {
    const auto cfg = small_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel model(0, specs, cfg, 4);
    for (auto& np : model.named_parameters()) {
        if (np.name.rfind("dec/", 0) == 0) np.param->value.fill(0.0);
    }
    TaskBatch batch;
    batch.features.emplace(ModalityKind::VitalSign, random_features(3, cfg.shapes.vital_dim, 8));
    batch.labels = {0, 0, 0};
    Tape tape;
    const Tensor logits = tape.value(client_forward(tape, model, 0, batch));
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits.at(i) == 0.0);
}

TEST_CASE("client_forward: matches independent matrix arithmetic") {
    const auto cfg = small_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel model(0, specs, cfg, 5);

    TaskBatch batch;
    batch.features.emplace(ModalityKind::VitalSign, random_features(2, cfg.shapes.vital_dim, 11));
    batch.labels = {0, 1};

    // Eager re-computation from the named parameter values.
    auto params = model.named_parameters();
    auto get = [&](const std::string& name) -> const Tensor& {
        for (auto& np : params)
            if (np.name == name) return np.param->value;
        FAIL("missing parameter ", name);
        return params[0].param->value;
    };
    auto matmul_add = [](const Tensor& x, const Tensor& w, const Tensor& b) {
        Tensor y({x.rows(), w.cols()});
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < w.cols(); ++j) {
                double acc = b.at(j);
                for (std::size_t k = 0; k < x.cols(); ++k) acc += x.at2(i, k) * w.at2(k, j);
                y.at2(i, j) = acc;
            }
        return y;
    };
    auto relu_eager = [](Tensor t) {
        for (double& v : t.data()) v = v > 0 ? v : 0;
        return t;
    };

    Tensor h = relu_eager(matmul_add(batch.features.at(ModalityKind::VitalSign),
                                     get("enc/vital_sign/fc1/w"), get("enc/vital_sign/fc1/b")));
    Tensor emb = matmul_add(h, get("enc/vital_sign/fc2/w"), get("enc/vital_sign/fc2/b"));
    Tensor d1 = relu_eager(matmul_add(emb, get("dec/0/fc1/w"), get("dec/0/fc1/b")));
    Tensor want = matmul_add(d1, get("dec/0/fc2/w"), get("dec/0/fc2/b"));

    Tape tape;
    const Tensor got = tape.value(client_forward(tape, model, 0, batch));
    REQUIRE(got.rows() == 2);
    REQUIRE(got.cols() == 2);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
}

TEST_CASE("local_loss: uniform logits give ln 2 and task mean is unweighted") {
    const auto cfg = small_config();
    TaskSpec specs[] = {vital_task(0), lab_task(1), two_modality_task(2)};
    ClientModel model(0, specs, cfg, 6);

    std::map<int, TaskBatch> batches;
    for (const TaskSpec& s : specs) {
        TaskBatch b;
        for (ModalityKind m : s.modalities) {
            b.features.emplace(m, random_features(4, cfg.shapes.raw_width(m),
                                                  rng::derive(13, modality_name(m),
                                                              static_cast<std::uint64_t>(s.task_id))));
        }
        b.labels = {0, 1, 1, 0};
        batches.emplace(s.task_id, b);
    }

    // Zeroed decoders force uniform logits: every task loss is exactly ln 2.
    for (auto& np : model.named_parameters()) {
        if (np.name.rfind("dec/", 0) == 0) np.param->value.fill(0.0);
    }
    {
        Tape tape;
        std::map<int, TaskBatch> one = {{0, batches.at(0)}};
        CHECK(tape.value(local_loss(tape, model, one)).at(0) == doctest::Approx(std::log(2.0)));
    }

    // Reinitialize and check the mean against per-task losses computed alone.
    ClientModel fresh(0, specs, cfg, 6);
    std::vector<double> per_task;
    for (const TaskSpec& s : specs) {
        Tape tape;
        std::map<int, TaskBatch> one = {{s.task_id, batches.at(s.task_id)}};
        per_task.push_back(tape.value(local_loss(tape, fresh, one)).at(0));
    }
    Tape tape;
    const double combined = tape.value(local_loss(tape, fresh, batches)).at(0);
    const double want = (per_task[0] + per_task[1] + per_task[2]) / 3.0;
    CHECK(combined == doctest::Approx(want).epsilon(1e-12));

    std::map<int, TaskBatch> with_empty = batches;
    with_empty.at(1).labels.clear();
    Tape tape2;
    CHECK_THROWS_AS(local_loss(tape2, fresh, with_empty), InputError);
}

TEST_CASE("fedprox penalty: zero at anchor, hand value, lambda scaling") {
    const auto cfg = small_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel model(0, specs, cfg, 7);
    const ParamSnapshot global = model.snapshot();

    {
        Tape tape;
        CHECK(tape.value(fedprox_penalty(tape, model, global, 3.0)).at(0) == 0.0);
    }

    // Perturb two entries by exactly 1: penalty = (lambda/2) * 2.
    auto params = model.named_parameters();
    params[0].param->value.at(0) += 1.0;
    params[0].param->value.at(1) += 1.0;
    {
        Tape tape;
        CHECK(tape.value(fedprox_penalty(tape, model, global, 2.0)).at(0) == doctest::Approx(2.0));
        Tape tape2;
        CHECK(tape2.value(fedprox_penalty(tape2, model, global, 4.0)).at(0) ==
              doctest::Approx(4.0));
        Tape tape3;
        CHECK(tape3.value(fedprox_penalty(tape3, model, global, 0.0)).at(0) == 0.0);
    }

    // Structure mismatch is a contract error.
    TaskSpec other[] = {lab_task()};
    ClientModel different(0, other, cfg, 7);
    Tape tape;
    CHECK_THROWS_AS(fedprox_penalty(tape, model, different, 1.0), ContractError);
}

TEST_CASE("train_local: learns a separable task") {
    ClientModelConfig cfg = small_config();
    cfg.encoder_dim = 8;
    const TaskSpec spec = vital_task();
    TaskSpec specs[] = {spec};
    ClientModel model(0, specs, cfg, 8);
    const TaskDataset data = synth_dataset(spec, cfg.shapes, 128, 1.5, 21);

    TrainLocalConfig tc;
    tc.epochs = 30;
    tc.batch_size = 32;
    tc.lr = 3e-3;
    tc.seed = 99;
    std::map<int, TaskDataset> shard = {{0, data}};
    const auto trace = train_local(model, shard, tc);
    REQUIRE(trace.size() == 30);
    CHECK(trace.back() < trace.front());
    CHECK(train_accuracy(model, 0, data) >= 0.95);
}

TEST_CASE("train_local: zero epochs leave the model bit-identical") {
    const auto cfg = small_config();
    TaskSpec specs[] = {vital_task()};
    ClientModel model(0, specs, cfg, 9);
    const ParamSnapshot before = model.snapshot();
    TrainLocalConfig tc;
    tc.epochs = 0;
    tc.seed = 1;
    std::map<int, TaskDataset> shard = {{0, synth_dataset(vital_task(), cfg.shapes, 16, 1.0, 3)}};
    CHECK(train_local(model, shard, tc).empty());
    CHECK(snapshots_equal(before, model.snapshot()));
}

TEST_CASE("train_local: FedProx lambda=0 matches FedAvg bit-exactly") {
    const auto cfg = small_config();
    TaskSpec specs[] = {vital_task()};
    const TaskDataset data = synth_dataset(vital_task(), cfg.shapes, 64, 1.0, 17);
    std::map<int, TaskDataset> shard = {{0, data}};

    ClientModel avg(0, specs, cfg, 10);
    ClientModel prox(0, specs, cfg, 10);
    const ParamSnapshot anchor = prox.snapshot();

    TrainLocalConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    tc.lr = 1e-3;
    tc.seed = 33;

    train_local(avg, shard, tc);
    tc.algo = FedAlgo::FedProx;
    tc.lambda = 0.0;
    tc.global = &anchor;
    train_local(prox, shard, tc);

    CHECK(snapshots_equal(avg.snapshot(), prox.snapshot()));
}

TEST_CASE("modality sharing and task isolation") {
    const auto cfg = small_config();
    // Tasks 0 and 2 share VitalSign; task 1 is disjoint from task 0.
    TaskSpec specs[] = {vital_task(0), lab_task(1), two_modality_task(2)};
    ClientModel model(0, specs, cfg, 12);

    // Exactly one encoder instance per modality.
    CHECK(model.encoders().size() == 2);

    auto p0 = model.task_parameters(0);
    auto p2 = model.task_parameters(2);
    bool shared_instance = false;
    for (auto& a : p0)
        for (auto& b : p2)
            if (a.param == b.param) shared_instance = true;
    CHECK(shared_instance);

    // Training only task 0 must leave task 1's encoder and decoder untouched,
    // and every other decoder untouched.
    const ParamSnapshot before = model.snapshot();
    TrainLocalConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.lr = 1e-2;
    tc.seed = 77;
    std::map<int, TaskDataset> shard = {{0, synth_dataset(vital_task(0), cfg.shapes, 32, 1.0, 19)}};
    train_local(model, shard, tc);
    const ParamSnapshot after = model.snapshot();

    bool vital_changed = false;
    for (const auto& [name, t] : before) {
        const bool same = t.bit_equal(after.at(name));
        if (name.rfind("enc/lab_result", 0) == 0 || name.rfind("dec/1", 0) == 0 ||
            name.rfind("dec/2", 0) == 0) {
            CHECK(same);
        }
        if (!same && name.rfind("enc/vital_sign", 0) == 0) vital_changed = true;
    }
    CHECK(vital_changed);
}
