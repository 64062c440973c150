#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dkgen/losses.hpp"
#include "grad_check.hpp"

using namespace dkgen;

TEST_CASE("uniform logits give steps times ln(vocab)") {
    Tensor logits = Tensor::zeros({3, 2});
    CHECK(nll_loss(logits, {1, 1, 1}).item() ==
          doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("confident correct logits drive the loss toward zero") {
    Tensor logits = Tensor::from({2, 3}, {0, 50, 0, 0, 0, 50});
    CHECK(nll_loss(logits, {1, 2}).item() < 1e-9);
    CHECK(nll_loss(logits, {2, 1}).item() > 90.0);  // wrong targets are punished
}

TEST_CASE("padding targets are excluded from the sum") {
    Tensor logits = Tensor::from({2, 4}, {1, 2, 3, 4, 4, 3, 2, 1});
    const double with_pad = nll_loss(logits, {2, 0}).item();
    const double only_first = nll_loss(slice_rows(logits, 0, 1), {2}).item();
    CHECK(with_pad == doctest::Approx(only_first).epsilon(1e-12));
    CHECK(nll_loss(logits, {0, 0}).item() == 0.0);
}

TEST_CASE("nll is invariant to a constant shift of a step's logits") {
    Tensor a = Tensor::from({1, 3}, {1.0, -2.0, 0.5});
    Tensor b = add_scalar(a, 7.5);
    CHECK(nll_loss(a, {2}).item() == doctest::Approx(nll_loss(b, {2}).item()));
}

TEST_CASE("nll rejects mismatched lengths and out-of-vocab targets") {
    Tensor logits = Tensor::zeros({2, 4});
    CHECK_THROWS_AS(nll_loss(logits, {1}), ShapeError);
    CHECK_THROWS_AS(nll_loss(logits, {1, 9}), DataError);
}

TEST_CASE("pairwise rank loss hits its anchor values") {
    auto loss = [](double p, double n) {
        return pairwise_rank_loss(Tensor::scalar(p), Tensor::scalar(n)).item();
    };
    CHECK(loss(1.0, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(loss(1.0, 0.0) == doctest::Approx(std::log(1.0 + std::exp(-1.0))));
    CHECK(loss(40.0, 0.0) < 1e-12);
    CHECK(loss(1000.0, -1000.0) == 0.0);   // overflow-safe at extreme margins
    CHECK(std::isfinite(loss(-1000.0, 1000.0)));
}

TEST_CASE("pairwise rank loss strictly decreases in the margin") {
    double prev = pairwise_rank_loss(Tensor::scalar(-3.0), Tensor::scalar(0.0)).item();
    for (double s = -2.5; s <= 3.0; s += 0.5) {
        const double cur = pairwise_rank_loss(Tensor::scalar(s), Tensor::scalar(0.0)).item();
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("distillation loss anchors: identity, one-hot versus uniform") {
    // s_att = softmax(0,0) = (0.5, 0.5)
    Tensor att = Tensor::zeros({2});
    CHECK(kd_loss({0.5, 0.5}, att).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(kd_loss({1.0, 0.0}, att).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("distillation loss is non-negative and zero only at equality") {
    Rng rng(8);
    for (int t = 0; t < 10000; ++t) {
        const std::size_t j = 1 + rng.uniform_index(4);
        std::vector<double> rel(j);
        double total = 0.0;
        for (auto& v : rel) {
            v = rng.uniform() + 1e-6;
            total += v;
        }
        for (auto& v : rel) v /= total;
        std::vector<double> att(j);
        for (auto& v : att) v = rng.normal() * 2.0;
        const double l = kd_loss(rel, Tensor::from({j}, std::move(att))).item();
        CHECK(l >= -1e-12);
    }
}

TEST_CASE("distillation loss validates its inputs") {
    CHECK_THROWS_AS(kd_loss({0.6, 0.6}, Tensor::zeros({2})), DataError);
    CHECK_THROWS_AS(kd_loss({0.5, 0.5}, Tensor::zeros({3})), ShapeError);
    CHECK_THROWS_AS(kd_loss({1.5, -0.5}, Tensor::zeros({2})), DataError);
    CHECK_NOTHROW(kd_loss({0.5 + 4e-7, 0.5}, Tensor::zeros({2})));
}

TEST_CASE("total loss mixes components exactly") {
    Tensor g = Tensor::scalar(2.0), r = Tensor::scalar(1.0), k = Tensor::scalar(1.0);
    CHECK(total_loss(g, r, k, 0.5).total.item() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(total_loss(g, r, k, 1.0).total.item() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(total_loss(g, r, k, 0.0).total.item() == doctest::Approx(2.0).epsilon(1e-12));
    auto mixed = total_loss(g, r, k, 0.3);
    CHECK(mixed.total.item() ==
          doctest::Approx(0.3 * 2.0 + 0.7 * (1.0 + 1.0)).epsilon(1e-12));
    auto no_di = total_loss(g, r, k, 0.5, false);
    CHECK(no_di.l_kd.item() == 0.0);
    CHECK(no_di.total.item() == doctest::Approx(0.5 * 2.0 + 0.5 * 1.0).epsilon(1e-12));
    CHECK_THROWS_AS(total_loss(g, r, k, 1.5), DataError);
}

TEST_CASE("loss gradients match finite differences") {
    ParamMap params;
    params["logits"] = Tensor::from({2, 3}, {0.4, -1.2, 0.7, 0.1, 0.3, -0.5}, true);
    params["pos"] = Tensor::scalar(0.8, true);
    params["neg"] = Tensor::scalar(0.2, true);
    params["att"] = Tensor::from({3}, {0.3, -0.4, 0.1}, true);
    const std::vector<double> rel = {0.6, 0.3, 0.1};

    auto loss = [&]() {
        Tensor g = nll_loss(params["logits"], {2, 1});
        Tensor r = pairwise_rank_loss(params["pos"], params["neg"]);
        Tensor k = kd_loss(rel, params["att"]);
        return total_loss(g, r, k, 0.4).total;
    };
    AdamW::zero_grads(params);
    loss().backward();
    auto res = testing::grad_check(params, [&]() { return loss().item(); });
    CAPTURE(res.worst);
    CHECK(res.max_rel_err < 1e-4);
    CHECK(res.max_abs_err_tiny < 1e-8);
}

TEST_CASE("distillation gradient flows into attention only") {
    ParamMap params;
    params["att"] = Tensor::from({2}, {0.5, -0.5}, true);
    Tensor l = kd_loss({0.9, 0.1}, params["att"]);
    AdamW::zero_grads(params);
    l.backward();
    auto res = testing::grad_check(params, [&]() {
        return kd_loss({0.9, 0.1}, params["att"]).item();
    });
    CHECK(res.max_rel_err < 1e-4);
    // analytic gradient of KL wrt raw attention: s_att - s_rel
    const double e0 = std::exp(0.5), e1 = std::exp(-0.5);
    const double satt0 = e0 / (e0 + e1);
    CHECK(params["att"].grad()[0] == doctest::Approx(satt0 - 0.9).epsilon(1e-9));
}
