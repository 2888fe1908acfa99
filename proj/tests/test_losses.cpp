#include <cmath>

#include "adaptseg/errors.hpp"
#include "adaptseg/losses.hpp"
#include "adaptseg/rng.hpp"
#include "testutil.hpp"

// doctest last: torch headers define a conflicting CHECK macro
#include <doctest.h>

using namespace adaptseg;

namespace {

const auto kDouble = torch::TensorOptions().dtype(torch::kFloat64);

}  // namespace

TEST_CASE("cross entropy: probability one on the true class gives zero loss") {
    // logits with a huge margin put softmax probability ~1.0 on class 1
    auto logits = torch::zeros({1, 2, 2, 2}, kDouble);
    logits.index_put_({0, 1}, 60.0);
    auto labels = torch::ones({1, 2, 2}, torch::kLong);
    CHECK(adaptseg::cross_entropy_loss(logits, labels).item<double>() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cross entropy: uniform softmax over two classes costs ln 2") {
    auto logits = torch::zeros({2, 2, 3, 3}, kDouble);
    auto labels = torch::randint(0, 2, {2, 3, 3}, torch::kLong);
    CHECK(adaptseg::cross_entropy_loss(logits, labels).item<double>() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy: single pixel with softmax [0.1, 0.9] and true class 1") {
    auto logits = torch::tensor({std::log(0.1), std::log(0.9)}, kDouble).reshape({1, 2, 1, 1});
    auto labels = torch::ones({1, 1, 1}, torch::kLong);
    CHECK(adaptseg::cross_entropy_loss(logits, labels).item<double>() ==
          doctest::Approx(-std::log(0.9)).epsilon(1e-12));
}

TEST_CASE("cross entropy: labels outside {0,1} are rejected") {
    auto logits = torch::zeros({1, 2, 2, 2}, kDouble);
    CHECK_THROWS_AS(adaptseg::cross_entropy_loss(logits, torch::full({1, 2, 2}, 2, torch::kLong)),
                    ValidationError);
    CHECK_THROWS_AS(adaptseg::cross_entropy_loss(logits, torch::full({1, 2, 2}, -1, torch::kLong)),
                    ValidationError);
}

TEST_CASE("cross entropy: invariant under a per-pixel constant added to all logits") {
    auto logits = torch::randn({2, 2, 4, 4}, kDouble);
    auto labels = torch::randint(0, 2, {2, 4, 4}, torch::kLong);
    auto shift = torch::randn({2, 1, 4, 4}, kDouble) * 5.0;
    const double a = adaptseg::cross_entropy_loss(logits, labels).item<double>();
    const double b = adaptseg::cross_entropy_loss(logits + shift, labels).item<double>();
    CHECK(std::abs(a - b) < 1e-6);
}

TEST_CASE("cross entropy: optional class weights reweight the imbalance") {
    auto labels = torch::tensor({0, 1}, torch::kLong).reshape({1, 1, 2});
    auto weights = torch::tensor({1.0, 3.0}, kDouble);
    auto skewed = torch::zeros({1, 2, 1, 2}, kDouble);
    skewed.index_put_({0, 0, 0, 1}, 2.0);  // push the crack pixel toward background
    const double unweighted = adaptseg::cross_entropy_loss(skewed, labels).item<double>();
    const double weighted = adaptseg::cross_entropy_loss(skewed, labels, weights).item<double>();
    CHECK(weighted > unweighted);
}

TEST_CASE("kld: identical distributions have zero divergence") {
    auto probs = torch::softmax(torch::randn({1, 2, 3, 3}, kDouble), 1);
    CHECK(kld_loss(probs, probs).item<double>() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("kld: hand value for m1=[0.9,0.1] vs m2=[0.5,0.5]") {
    auto m1 = torch::tensor({0.9, 0.1}, kDouble).reshape({1, 2, 1, 1});
    auto m2 = torch::tensor({0.5, 0.5}, kDouble).reshape({1, 2, 1, 1});
    // direct evaluation of KL(m1 || m2)
    const double expected = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
    CHECK(expected == doctest::Approx(0.3680642).epsilon(1e-6));
    CHECK(kld_loss(m2, m1).item<double>() == doctest::Approx(expected).epsilon(1e-12));

    // reversed direction is the other divergence
    const double reversed = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    CHECK(kld_loss(m2, m1, KldDirection::reference_m2).item<double>() ==
          doctest::Approx(reversed).epsilon(1e-12));
}

TEST_CASE("kld: nonnegative on random normalized pairs") {
    for (int trial = 0; trial < 50; ++trial) {
        auto a = torch::softmax(torch::randn({1, 2, 4, 4}, kDouble) * 3.0, 1);
        auto b = torch::softmax(torch::randn({1, 2, 4, 4}, kDouble) * 3.0, 1);
        CHECK(kld_loss(a, b).item<double>() >= -1e-12);
    }
}

TEST_CASE("kld: unnormalized inputs are rejected") {
    auto good = torch::softmax(torch::randn({1, 2, 2, 2}, kDouble), 1);
    auto bad = good * 1.01;
    CHECK_THROWS_AS(kld_loss(bad, good), ValidationError);
    CHECK_THROWS_AS(kld_loss(good, bad), ValidationError);
}

TEST_CASE("total loss: published weights give 0.52 on (0.5, 0.2)") {
    const LossWeights paper{1.0, 0.1};
    auto l = total_segmentation_loss(torch::tensor(0.5, kDouble), torch::tensor(0.2, kDouble), paper);
    CHECK(l.item<double>() == doctest::Approx(0.52).epsilon(1e-12));

    auto ce_only = total_segmentation_loss(torch::tensor(0.7, kDouble), torch::tensor(9.0, kDouble),
                                           LossWeights{1.0, 0.0});
    CHECK(ce_only.item<double>() == doctest::Approx(0.7).epsilon(1e-12));
    auto zero = total_segmentation_loss(torch::tensor(0.7, kDouble), torch::tensor(9.0, kDouble),
                                        LossWeights{0.0, 0.0});
    CHECK(zero.item<double>() == 0.0);
}

TEST_CASE("total loss: linear in each term") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const LossWeights w{rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)};
        const double a = rng.uniform(0.0, 3.0), b = rng.uniform(0.0, 3.0), s = rng.uniform(0.0, 4.0);
        auto t = [&](double ce, double kld) {
            return total_segmentation_loss(torch::tensor(ce, kDouble), torch::tensor(kld, kDouble), w)
                .item<double>();
        };
        CHECK(t(s * a, b) == doctest::Approx(s * t(a, b) + (1 - s) * t(0, b)).epsilon(1e-9));
        CHECK(t(a, s * b) == doctest::Approx(s * t(a, b) + (1 - s) * t(a, 0)).epsilon(1e-9));
    }
}

TEST_CASE("total loss: negative weights are rejected") {
    CHECK_THROWS_AS(
        total_segmentation_loss(torch::tensor(1.0), torch::tensor(1.0), LossWeights{-0.1, 0.1}),
        ConfigError);
}

TEST_CASE("adversarial loss: zero logit costs ln 2 for any label") {
    auto logits = torch::zeros({4}, kDouble);
    auto labels = torch::tensor({0.0, 1.0, 0.0, 1.0}, kDouble);
    CHECK(adversarial_loss(logits, labels).item<double>() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("adversarial loss: confident correct prediction costs ~0") {
    auto logits = torch::tensor({60.0, -60.0}, kDouble);
    auto labels = torch::tensor({1.0, 0.0}, kDouble);
    CHECK(adversarial_loss(logits, labels).item<double>() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("adversarial loss: symmetric under (label, logit) -> (1-label, -logit)") {
    for (int trial = 0; trial < 20; ++trial) {
        auto logits = torch::randn({6}, kDouble) * 3.0;
        auto labels = torch::randint(0, 2, {6}, kDouble);
        const double a = adversarial_loss(logits, labels).item<double>();
        const double b = adversarial_loss(-logits, 1.0 - labels).item<double>();
        CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
}

TEST_CASE("lambda schedule: zero at epoch 0, saturating at the horizon") {
    const LambdaSchedule schedule{10.0, 150};
    CHECK(lambda_schedule(0, schedule) == 0.0);
    const double expected = 2.0 / (1.0 + std::exp(-10.0)) - 1.0;
    CHECK(lambda_schedule(150, schedule) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(lambda_schedule(150, schedule) == doctest::Approx(0.99991).epsilon(1e-4));
}

TEST_CASE("lambda schedule: monotone and in [0, 1)") {
    const LambdaSchedule schedule{10.0, 150};
    double prev = -1.0;
    for (int epoch = 0; epoch <= 300; ++epoch) {
        const double v = lambda_schedule(epoch, schedule);
        CHECK(v >= prev);
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
        prev = v;
    }
    CHECK_THROWS_AS(lambda_schedule(-1, schedule), ValidationError);
    CHECK_THROWS_AS(lambda_schedule(0, LambdaSchedule{0.0, 150}), ConfigError);
}

// Finite-difference oracles (central differences, h = 1e-4) for every loss.

TEST_CASE("gradient check: cross entropy matches finite differences") {
    torch::manual_seed(0);
    auto logits = torch::randn({1, 2, 2, 2}, kDouble).requires_grad_(true);
    auto labels = torch::randint(0, 2, {1, 2, 2}, torch::kLong);

    auto loss = adaptseg::cross_entropy_loss(logits, labels);
    loss.backward();

    const auto fd = testutil::fd_gradient(
        [&labels](const torch::Tensor& x) { return adaptseg::cross_entropy_loss(x, labels).item<double>(); },
        logits.detach());
    CHECK(testutil::rel_err(logits.grad(), fd) < 1e-3);
}

TEST_CASE("gradient check: kld through softmax matches finite differences") {
    torch::manual_seed(1);
    auto ref = torch::softmax(torch::randn({1, 2, 2, 2}, kDouble), 1);
    auto z = torch::randn({1, 2, 2, 2}, kDouble).requires_grad_(true);

    auto loss = kld_loss(torch::softmax(z, 1), ref);
    loss.backward();

    const auto fd = testutil::fd_gradient(
        [&ref](const torch::Tensor& x) { return kld_loss(torch::softmax(x, 1), ref).item<double>(); },
        z.detach());
    CHECK(testutil::rel_err(z.grad(), fd) < 1e-3);
}

TEST_CASE("gradient check: adversarial bce matches finite differences") {
    torch::manual_seed(2);
    auto logits = torch::randn({8}, kDouble).requires_grad_(true);
    auto labels = torch::randint(0, 2, {8}, kDouble);

    auto loss = adversarial_loss(logits, labels);
    loss.backward();

    const auto fd = testutil::fd_gradient(
        [&labels](const torch::Tensor& x) { return adversarial_loss(x, labels).item<double>(); },
        logits.detach());
    CHECK(testutil::rel_err(logits.grad(), fd) < 1e-3);
}
