#include "adaptseg/errors.hpp"
#include "adaptseg/metrics.hpp"
#include "adaptseg/rng.hpp"
#include "testutil.hpp"

// doctest last: torch headers define a conflicting CHECK macro
#include <doctest.h>

using namespace adaptseg;

namespace {

/// Brute-force per-class IoU oracle: plain pixel loops, no confusion matrix.
double brute_force_miou(const torch::Tensor& pred, const torch::Tensor& gt) {
    const auto p = pred.to(torch::kLong).contiguous();
    const auto g = gt.to(torch::kLong).contiguous();
    const auto* pd = p.data_ptr<std::int64_t>();
    const auto* gd = g.data_ptr<std::int64_t>();
    const auto n = p.numel();

    double sum = 0.0;
    int present = 0;
    for (int cls = 0; cls < 2; ++cls) {
        std::int64_t inter = 0, uni = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const bool in_p = pd[i] == cls;
            const bool in_g = gd[i] == cls;
            if (in_p && in_g) ++inter;
            if (in_p || in_g) ++uni;
        }
        if (uni > 0) {
            sum += static_cast<double>(inter) / static_cast<double>(uni);
            ++present;
        }
    }
    return sum / present;
}

}  // namespace

TEST_CASE("accumulate: hand-counted 2x2 case") {
    ConfusionMatrix cm;
    auto gt = torch::tensor({{1, 0}, {0, 0}}, torch::kLong);
    auto pred = torch::zeros({2, 2}, torch::kLong);
    cm.accumulate(pred, gt);
    CHECK(cm.at(0, 0) == 3);
    CHECK(cm.at(0, 1) == 0);
    CHECK(cm.at(1, 0) == 1);
    CHECK(cm.at(1, 1) == 0);
    CHECK(cm.total() == 4);
}

TEST_CASE("accumulate: perfect background prediction") {
    ConfusionMatrix cm;
    auto zeros = torch::zeros({10, 10}, torch::kLong);
    cm.accumulate(zeros, zeros);
    CHECK(cm.at(0, 0) == 100);
    CHECK(cm.total() == 100);
}

TEST_CASE("accumulate: order independent and additive") {
    Rng rng(4);
    auto p1 = torch::randint(0, 2, {8, 8}, torch::kLong);
    auto g1 = torch::randint(0, 2, {8, 8}, torch::kLong);
    auto p2 = torch::randint(0, 2, {8, 8}, torch::kLong);
    auto g2 = torch::randint(0, 2, {8, 8}, torch::kLong);

    ConfusionMatrix ab, ba, a, b;
    ab.accumulate(p1, g1);
    ab.accumulate(p2, g2);
    ba.accumulate(p2, g2);
    ba.accumulate(p1, g1);
    a.accumulate(p1, g1);
    b.accumulate(p2, g2);
    a += b;
    CHECK(ab == ba);
    CHECK(ab == a);
}

TEST_CASE("accumulate rejects out-of-range values") {
    ConfusionMatrix cm;
    auto good = torch::zeros({2, 2}, torch::kLong);
    CHECK_THROWS_AS(cm.accumulate(torch::full({2, 2}, 2, torch::kLong), good), ValidationError);
    CHECK_THROWS_AS(cm.accumulate(good, torch::full({2, 2}, -1, torch::kLong)), ValidationError);
    CHECK_THROWS_AS(cm.accumulate(torch::zeros({2, 3}, torch::kLong), good), ValidationError);
}

TEST_CASE("miou: hand-computed values") {
    ConfusionMatrix cm;
    cm.at(0, 0) = 3;
    cm.at(1, 0) = 1;
    const auto r = miou(cm);
    CHECK(*r.iou_background == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(*r.iou_crack == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.miou == doctest::Approx(0.375).epsilon(1e-12));
}

TEST_CASE("miou: perfect prediction") {
    ConfusionMatrix cm;
    cm.at(0, 0) = 90;
    cm.at(1, 1) = 10;
    const auto r = miou(cm);
    CHECK(*r.iou_background == 1.0);
    CHECK(*r.iou_crack == 1.0);
    CHECK(r.miou == 1.0);
}

TEST_CASE("miou: classes absent from gt and pred are excluded from the mean") {
    ConfusionMatrix cm;
    cm.at(0, 0) = 64;  // all background everywhere
    const auto r = miou(cm);
    CHECK(*r.iou_background == 1.0);
    CHECK(!r.iou_crack.has_value());
    CHECK(r.miou == 1.0);

    ConfusionMatrix empty;
    CHECK_THROWS_AS(miou(empty), ValidationError);
}

TEST_CASE("miou equals the brute-force set oracle on random masks, exactly") {
    torch::manual_seed(123);
    for (int trial = 0; trial < 200; ++trial) {
        // vary the crack density so some masks are single-class
        const double density = trial % 10 == 0 ? 0.0 : 0.3;
        auto pred = (torch::rand({16, 16}) < density).to(torch::kLong);
        auto gt = (torch::rand({16, 16}) < density).to(torch::kLong);
        ConfusionMatrix cm;
        cm.accumulate(pred, gt);
        CHECK(miou(cm).miou == brute_force_miou(pred, gt));
    }
}

TEST_CASE("union matrix equals the matrix of the concatenated dataset") {
    torch::manual_seed(7);
    auto p1 = torch::randint(0, 2, {12, 12}, torch::kLong);
    auto g1 = torch::randint(0, 2, {12, 12}, torch::kLong);
    auto p2 = torch::randint(0, 2, {12, 12}, torch::kLong);
    auto g2 = torch::randint(0, 2, {12, 12}, torch::kLong);

    ConfusionMatrix separate_sum, concatenated;
    ConfusionMatrix m1, m2;
    m1.accumulate(p1, g1);
    m2.accumulate(p2, g2);
    separate_sum += m1;
    separate_sum += m2;
    concatenated.accumulate(torch::cat({p1, p2}), torch::cat({g1, g2}));
    CHECK(separate_sum == concatenated);
}

TEST_CASE("argmax is invariant under a per-pixel constant on all channels") {
    torch::manual_seed(9);
    auto logits = torch::randn({2, 2, 8, 8});
    auto shift = torch::randn({2, 1, 8, 8}) * 10.0;
    CHECK(torch::equal(logits.argmax(1), (logits + shift).argmax(1)));
}

TEST_CASE("evaluate: aggregation is dataset-wide and duplication-invariant") {
    torch::manual_seed(31);
    auto bundle = build_model(testutil::tiny_arch(16), 1);
    auto params = synth_domain_a(8);
    params.height = params.width = 16;
    auto data = generate_synthetic_domain(params, 3);

    MemorySource single(std::vector<DomainSample>{data.samples[0]});
    MemorySource doubled(std::vector<DomainSample>{data.samples[0], data.samples[0]});
    const auto m_single = evaluate(bundle, single, 1, 4);
    const auto m_double = evaluate(bundle, doubled, 1, 4);
    CHECK(m_single.ious.miou == m_double.ious.miou);
    CHECK(m_double.pixels == 2 * m_single.pixels);

    // unlabeled samples are skipped and counted
    auto with_unlabeled = data.samples;
    with_unlabeled[1].label.reset();
    MemorySource mixed(std::move(with_unlabeled));
    const auto m_mixed = evaluate(bundle, mixed, 1, 4);
    CHECK(m_mixed.samples_skipped == 1);
    CHECK(m_mixed.samples_evaluated == 2);

    MemorySource none(std::vector<DomainSample>{[&] {
        auto s = data.samples[0];
        s.label.reset();
        return s;
    }()});
    CHECK_THROWS_AS(evaluate(bundle, none, 1, 4), ValidationError);
}

TEST_CASE("build_report: table3 rows and missing-key errors") {
    ConfusionMatrix cm;
    cm.at(0, 0) = 50;
    cm.at(1, 1) = 25;
    cm.at(1, 0) = 25;
    DatasetMetrics m;
    m.cm = cm;
    m.ious = miou(cm);
    m.pixels = cm.total();
    m.samples_evaluated = 1;

    std::map<std::string, DatasetMetrics> results{{"step1.source", m}, {"step1.target", m}};
    const auto report = build_report(results, ReportLayout::table3);
    CHECK(report.data["layout"] == "table3");
    CHECK(report.rendered.find("step1") != std::string::npos);
    CHECK(report.rendered.find("Source mIoU") != std::string::npos);

    results.erase("step1.target");
    CHECK_THROWS_AS(build_report(results, ReportLayout::table3), ConfigError);
    CHECK_THROWS_AS(build_report({}, ReportLayout::table3), ConfigError);
}

TEST_CASE("build_report: table2 overall column comes from the union matrix") {
    ConfusionMatrix excluded_cm, build_cm;
    excluded_cm.at(0, 0) = 3;
    excluded_cm.at(1, 0) = 1;
    build_cm.at(0, 0) = 2;
    build_cm.at(0, 1) = 1;
    build_cm.at(1, 1) = 1;

    const auto to_metrics = [](const ConfusionMatrix& cm) {
        DatasetMetrics m;
        m.cm = cm;
        m.ious = miou(cm);
        m.pixels = cm.total();
        m.samples_evaluated = 1;
        return m;
    };

    std::map<std::string, DatasetMetrics> results;
    for (const char* step : {"step1", "step2"}) {
        results[std::string(step) + ".source"] = to_metrics(excluded_cm);
        results[std::string(step) + ".excluded"] = to_metrics(excluded_cm);
        results[std::string(step) + ".buildcrack"] = to_metrics(build_cm);
    }
    const auto report = build_report(results, ReportLayout::table2, "volker");

    // union: [[5,1],[1,1]] -> iou_bg = 5/7, iou_crack = 1/3
    ConfusionMatrix union_cm = excluded_cm;
    union_cm += build_cm;
    const double expected = miou(union_cm).miou;
    CHECK(report.data["step1"]["overall_target_miou"].get<double>() ==
          doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.5 * (5.0 / 7.0 + 1.0 / 3.0)).epsilon(1e-12));
    CHECK(report.rendered.find("volker") != std::string::npos);

    results.erase("step2.buildcrack");
    CHECK_THROWS_AS(build_report(results, ReportLayout::table2, "volker"), ConfigError);
}

TEST_CASE("write_report emits json and text") {
    testutil::TempDir tmp;
    ConfusionMatrix cm;
    cm.at(0, 0) = 10;
    cm.at(1, 1) = 10;
    DatasetMetrics m;
    m.cm = cm;
    m.ious = miou(cm);
    std::map<std::string, DatasetMetrics> results{{"run.source", m}, {"run.target", m}};
    write_report(build_report(results, ReportLayout::table4), tmp.path(), "report");
    CHECK(std::filesystem::exists(tmp.path() / "report.json"));
    CHECK(std::filesystem::exists(tmp.path() / "report.txt"));
}
