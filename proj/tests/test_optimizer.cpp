#include <catch2/catch_amalgamated.hpp>

#include "hymate/param_store.hpp"
#include "hymate/rng.hpp"
#include "hymate/tape.hpp"

using namespace hymate;

TEST_CASE("adam: zero gradient is a fixed point") {
    ParameterStore store;
    store.add("w", Tensor::vec({1.0, -2.0, 3.0}));
    Tensor before = store.value("w");
    adam_step(store, AdamConfig{}, 1);
    CHECK(max_abs_diff(store.value("w"), before) == 0.0);
}

TEST_CASE("adam: first step with unit gradient moves by ~lr") {
    ParameterStore store;
    store.add("w", Tensor::scalar(0.5));
    store.at("w").grad[0] = 1.0;
    AdamConfig cfg;  // defaults lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8
    adam_step(store, cfg, 1);
    // Hand evaluation at t=1: mhat = g, vhat = g^2, step = lr*g/(|g|+eps).
    const double delta = 0.5 - store.value("w").item();
    CHECK(std::abs(delta - 1e-3) < 1e-6);
    // Grads zeroed afterwards.
    CHECK(store.at("w").grad[0] == 0.0);
}

TEST_CASE("adam: t = 0 is a contract violation") {
    ParameterStore store;
    store.add("w", Tensor::scalar(0.0));
    CHECK_THROWS_AS(adam_step(store, AdamConfig{}, 0), ContractViolation);
}

TEST_CASE("adam: identical seeds give bit-identical trajectories") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        ParameterStore store;
        store.add("w", Tensor::glorot(4, 4, rng));
        store.add("b", Tensor::zeros({4}));
        Rng data = rng.substream("data");
        for (std::uint64_t t = 1; t <= 25; ++t) {
            Tensor x = Tensor::zeros({3, 4});
            for (auto& v : x.data()) v = data.normal();
            Tape tape;
            TapeBinding bind(tape, store);
            Var out = tape.affine(tape.constant(x), bind("w"), bind("b"));
            Var loss = tape.mean(tape.square(out));
            tape.backward(loss);
            bind.flush_grads();
            adam_step(store, AdamConfig{}, t);
        }
        return store.snapshot_values();
    };
    auto a = run(7), b = run(7);
    for (const auto& [name, va] : a) {
        const Tensor& vb = b.at(name);
        for (std::size_t i = 0; i < va.numel(); ++i) REQUIRE(va[i] == vb[i]);
    }
}

TEST_CASE("parameter store: duplicate names rejected, sorted iteration") {
    ParameterStore store;
    store.add("b.x", Tensor::scalar(1.0));
    store.add("a.y", Tensor::scalar(2.0));
    CHECK_THROWS_AS(store.add("a.y", Tensor::scalar(3.0)), ContractViolation);
    std::vector<std::string> names;
    for (const auto& [k, e] : store) names.push_back(k);
    CHECK(names == std::vector<std::string>{"a.y", "b.x"});
    CHECK(store.num_scalars() == 2);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(13);
    ParameterStore store;
    store.add("layer.w", Tensor::glorot(3, 5, rng));
    store.add("layer.b", Tensor::randn({3}, rng));
    const std::string path = "/tmp/hymate_test_ckpt.bin";
    save_checkpoint(store, path);
    ParameterStore loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == store.size());
    for (const auto& [name, e] : store) {
        const Tensor& lv = loaded.value(name);
        REQUIRE(lv.same_shape(e.value));
        for (std::size_t i = 0; i < lv.numel(); ++i) REQUIRE(lv[i] == e.value[i]);
    }
}

TEST_CASE("load_matching copies only shape-compatible tensors") {
    Rng rng(1);
    ParameterStore src, dst;
    src.add("shared", Tensor::vec({1.0, 2.0}));
    src.add("head.old", Tensor::vec({9.0}));
    dst.add("shared", Tensor::vec({0.0, 0.0}));
    dst.add("head.new", Tensor::vec({0.0}));
    dst.add("mismatch", Tensor::vec({0.0}));
    src.add("mismatch", Tensor::vec({1.0, 1.0}));
    CHECK(dst.load_matching(src) == 1);
    CHECK(dst.value("shared")[1] == 2.0);
    CHECK(dst.value("head.new")[0] == 0.0);
}
