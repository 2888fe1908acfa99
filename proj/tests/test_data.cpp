#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <fstream>
#include <set>

#include "adaptseg/data.hpp"
#include "adaptseg/errors.hpp"
#include "adaptseg/rng.hpp"
#include "testutil.hpp"

// doctest last: torch headers define a conflicting CHECK macro
#include <doctest.h>

using namespace adaptseg;
namespace fs = std::filesystem;

namespace {

void write_png(const fs::path& path, const cv::Mat& m) {
    fs::create_directories(path.parent_path());
    REQUIRE(cv::imwrite(path.string(), m));
}

/// root/<sub>/images + masks with deterministic content.
void make_sub(const fs::path& root, const std::string& sub, int count, int size,
              bool with_masks = true) {
    for (int i = 0; i < count; ++i) {
        cv::Mat img(size, size, CV_8UC3, cv::Scalar(40 + i, 80, 120 + i));
        cv::circle(img, {size / 2, size / 2}, size / 4, cv::Scalar(200, 200, 200), -1);
        const auto stem = sub + "_" + std::to_string(i);
        write_png(root / sub / "images" / (stem + ".png"), img);
        if (with_masks) {
            cv::Mat mask = cv::Mat::zeros(size, size, CV_8UC1);
            cv::line(mask, {2, 2}, {size - 3, size - 3}, cv::Scalar(255), 1);
            write_png(root / sub / "masks" / (stem + ".png"), mask);
        }
    }
}

Catalog fake_catalog(const std::vector<std::pair<std::string, int>>& sizes) {
    Catalog catalog;
    for (const auto& [name, n] : sizes) {
        CatalogEntry entry;
        entry.name = name;
        entry.labeled = true;
        for (int i = 0; i < n; ++i) {
            char stem[32];
            std::snprintf(stem, sizeof(stem), "%s_%05d", name.c_str(), i);
            entry.stems.push_back(stem);
            entry.image_files.push_back(std::string(stem) + ".png");
            entry.crack_fraction.push_back(0.01);
        }
        catalog.entries.push_back(std::move(entry));
    }
    return catalog;
}

}  // namespace

TEST_CASE("load_tree catalogs a valid tree") {
    testutil::TempDir tmp;
    make_sub(tmp.path(), "volker", 6, 40);
    make_sub(tmp.path(), "cfd", 5, 32);
    make_sub(tmp.path(), "unlabeled", 3, 32, /*with_masks=*/false);

    const auto catalog = load_tree(tmp.path());
    REQUIRE(catalog.entries.size() == 3);
    CHECK(catalog.entries[0].name == "cfd");
    CHECK(catalog.entries[0].stems.size() == 5);
    CHECK(catalog.entries[0].labeled);
    CHECK(catalog.entries[1].name == "unlabeled");
    CHECK(!catalog.entries[1].labeled);
    CHECK(catalog.entries[2].name == "volker");
    CHECK(catalog.entries[2].stems.size() == 6);
    CHECK(catalog.total_images() == 14);

    // crack fractions come from the masks
    for (const double f : catalog.entries[0].crack_fraction) {
        CHECK(f > 0.0);
        CHECK(f < 0.2);
    }
}

TEST_CASE("load_tree rejects an empty root") {
    testutil::TempDir tmp;
    CHECK_THROWS_AS(load_tree(tmp.path()), IngestError);
    CHECK_THROWS_AS(load_tree(tmp.path() / "nope"), IngestError);
}

TEST_CASE("load_tree lists images with missing masks") {
    testutil::TempDir tmp;
    make_sub(tmp.path(), "volker", 3, 32);
    fs::remove(tmp.path() / "volker" / "masks" / "volker_1.png");
    try {
        load_tree(tmp.path());
        FAIL("expected IngestError");
    } catch (const IngestError& e) {
        CHECK(std::string(e.what()).find("volker_1") != std::string::npos);
    }
}

TEST_CASE("load_tree names pairs with mismatched mask sizes") {
    testutil::TempDir tmp;
    make_sub(tmp.path(), "cfd", 2, 32);
    write_png(tmp.path() / "cfd" / "masks" / "cfd_0.png", cv::Mat::zeros(16, 16, CV_8UC1));
    try {
        load_tree(tmp.path());
        FAIL("expected IngestError");
    } catch (const IngestError& e) {
        const std::string what = e.what();
        CHECK(what.find("cfd_0") != std::string::npos);
        CHECK(what.find("16x16") != std::string::npos);
    }
}

TEST_CASE("make_splits: 4:1 per sub-dataset with train = floor(4n/5)") {
    const auto catalog = fake_catalog({{"hundred", 100}, {"volker", 427}});
    const auto split = make_splits(catalog, std::nullopt, 7);

    CHECK(split.train_ids.at("hundred").size() == 80);
    CHECK(split.val_ids.at("hundred").size() == 20);
    // 427 -> 341 train / 86 val
    CHECK(split.train_ids.at("volker").size() == 341);
    CHECK(split.val_ids.at("volker").size() == 86);
    CHECK(split.target_ids.empty());
}

TEST_CASE("make_splits: deterministic in the seed, reshuffled across seeds") {
    const auto catalog = fake_catalog({{"a", 50}, {"b", 35}});
    const auto s1 = make_splits(catalog, std::nullopt, 7);
    const auto s2 = make_splits(catalog, std::nullopt, 7);
    const auto s3 = make_splits(catalog, std::nullopt, 8);
    CHECK(s1 == s2);
    CHECK(s1.train_ids.at("a").size() == s3.train_ids.at("a").size());
    CHECK(s1.train_ids != s3.train_ids);
}

TEST_CASE("make_splits: exclusion routes the whole sub-dataset to the target") {
    const auto catalog = fake_catalog({{"a", 50}, {"b", 35}});
    const auto split = make_splits(catalog, std::string("b"), 3);
    CHECK(split.train_ids.count("b") == 0);
    CHECK(split.val_ids.count("b") == 0);
    CHECK(split.target_ids.size() == 35);
    for (const auto& [sub, stem] : split.target_ids) CHECK(sub == "b");

    CHECK_THROWS_AS(make_splits(catalog, std::string("nosuch"), 3), ConfigError);
    try {
        make_splits(catalog, std::string("nosuch"), 3);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("a, b") != std::string::npos);
    }
}

TEST_CASE("make_splits: train, val and target partition the catalog exactly") {
    Rng rng(99);
    std::vector<std::pair<std::string, int>> sizes;
    for (int i = 0; i < 5; ++i) {
        sizes.emplace_back("sub" + std::to_string(i), static_cast<int>(rng.uniform_int(1, 40)));
    }
    const auto catalog = fake_catalog(sizes);
    const auto split = make_splits(catalog, std::string("sub2"), 17);

    std::set<std::pair<std::string, std::string>> seen;
    std::size_t total = 0;
    const auto add_all = [&](const std::map<std::string, std::vector<std::string>>& m) {
        for (const auto& [sub, stems] : m) {
            for (const auto& stem : stems) {
                CHECK(seen.emplace(sub, stem).second);
                ++total;
            }
        }
    };
    add_all(split.train_ids);
    add_all(split.val_ids);
    for (const auto& id : split.target_ids) {
        CHECK(seen.insert(id).second);
        ++total;
    }
    CHECK(total == catalog.total_images());

    for (const auto& entry : catalog.entries) {
        if (entry.name == "sub2") continue;
        const auto n = entry.stems.size();
        CHECK(split.train_ids.at(entry.name).size() == n * 4 / 5);
        CHECK(split.val_ids.at(entry.name).size() == n - n * 4 / 5);
    }
}

TEST_CASE("manifest round-trips and is byte-stable") {
    testutil::TempDir tmp;
    const auto catalog = fake_catalog({{"a", 23}, {"b", 11}});
    const auto split = make_splits(catalog, std::string("a"), 5);

    const auto p1 = tmp.path() / "m1.csv";
    const auto p2 = tmp.path() / "m2.csv";
    write_manifest(split, p1);
    write_manifest(split, p2);

    std::ifstream f1(p1), f2(p2);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());

    const auto loaded = read_manifest(p1);
    CHECK(loaded == split);
}

TEST_CASE("preprocess resizes, scales and binarizes") {
    cv::Mat img(40, 40, CV_8UC3, cv::Scalar(128, 64, 255));
    cv::Mat mask = cv::Mat::zeros(40, 40, CV_8UC1);
    mask.at<std::uint8_t>(10, 10) = 200;  // nonzero = crack, regardless of value

    auto sample = preprocess(img, &mask, {32, 32}, "sub", Domain::source);
    CHECK(sample.image.sizes() == torch::IntArrayRef({3, 32, 32}));
    CHECK(sample.image.min().item<float>() >= 0.0f);
    CHECK(sample.image.max().item<float>() <= 1.0f);
    REQUIRE(sample.label.has_value());
    CHECK(sample.label->sizes() == torch::IntArrayRef({32, 32}));

    auto unique = std::get<0>(torch::_unique(*sample.label));
    for (std::int64_t i = 0; i < unique.numel(); ++i) {
        const auto v = unique[i].item<std::int64_t>();
        CHECK((v == 0 || v == 1));
    }

    // all-background stays all-background under nearest neighbor
    cv::Mat empty_mask = cv::Mat::zeros(40, 40, CV_8UC1);
    auto bg = preprocess(img, &empty_mask, {64, 64}, "sub", Domain::source);
    CHECK(bg.label->sum().item<std::int64_t>() == 0);

    // nearest-neighbor upscale multiplies crack area exactly
    cv::Mat one = cv::Mat::zeros(8, 8, CV_8UC1);
    one.at<std::uint8_t>(3, 3) = 255;
    cv::Mat img8(8, 8, CV_8UC3, cv::Scalar(1, 2, 3));
    auto up = preprocess(img8, &one, {16, 16}, "sub", Domain::source);
    CHECK(up.label->sum().item<std::int64_t>() == 4);

    cv::Mat wrong = cv::Mat::zeros(16, 16, CV_8UC1);
    CHECK_THROWS_AS(preprocess(img, &wrong, {32, 32}, "sub", Domain::source), ValidationError);
    CHECK_THROWS_AS(preprocess(cv::Mat(), nullptr, {32, 32}, "sub", Domain::source), ValidationError);
}

TEST_CASE("disk source loads samples through the split helpers") {
    testutil::TempDir tmp;
    make_sub(tmp.path(), "a", 10, 40);
    make_sub(tmp.path(), "b", 5, 40);
    const auto catalog = load_tree(tmp.path());
    const auto split = make_splits(catalog, std::string("b"), 1);

    auto train = make_train_source(catalog, split, {32, 32});
    auto val = make_val_source(catalog, split, {32, 32});
    auto excluded = make_excluded_source(catalog, split, {32, 32});
    CHECK(train.size() == 8);
    CHECK(val.size() == 2);
    CHECK(excluded.size() == 5);
    CHECK(train.labeled());

    auto s = train.get(0);
    CHECK(s.image.sizes() == torch::IntArrayRef({3, 32, 32}));
    CHECK(s.label.has_value());
    CHECK(s.domain == Domain::source);
    CHECK(excluded.get(0).domain == Domain::target);

    auto whole = make_tree_source(catalog, {32, 32}, Domain::target);
    CHECK(whole.size() == 15);
}

TEST_CASE("seg batches: counting, partial batch, reproducibility") {
    auto pool = testutil::tiny_pool(81, 42, 16);
    SegBatchStream stream(pool, 8, 7);
    CHECK(stream.batches_per_epoch() == 11);

    stream.start_epoch(0);
    std::vector<std::int64_t> sizes;
    std::vector<double> sums;
    while (auto batch = stream.next()) {
        sizes.push_back(batch->images.size(0));
        sums.push_back(batch->images.sum().item<double>());
        CHECK(batch->labels.size(0) == batch->images.size(0));
    }
    REQUIRE(sizes.size() == 11);
    CHECK(sizes.back() == 1);
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) CHECK(sizes[i] == 8);

    // same (seed, epoch) -> identical order; another epoch -> reshuffled
    stream.start_epoch(0);
    std::vector<double> sums_again;
    while (auto batch = stream.next()) sums_again.push_back(batch->images.sum().item<double>());
    CHECK(sums == sums_again);

    stream.start_epoch(1);
    std::vector<double> sums_e1;
    while (auto batch = stream.next()) sums_e1.push_back(batch->images.sum().item<double>());
    CHECK(sums != sums_e1);

    auto pool80 = testutil::tiny_pool(80, 43, 16);
    CHECK(SegBatchStream(pool80, 8, 7).batches_per_epoch() == 10);
}

TEST_CASE("seg batches require labels") {
    auto params = synth_domain_a(1);
    params.height = params.width = 16;
    auto dataset = generate_synthetic_domain(params, 3);
    dataset.samples[1].label.reset();
    MemorySource pool(std::move(dataset.samples));
    CHECK(!pool.labeled());
    SegBatchStream stream(pool, 2, 0);
    stream.start_epoch(0);
    CHECK_THROWS_AS(
        [&] {
            while (stream.next()) {
            }
        }(),
        ValidationError);
}

TEST_CASE("adversarial batches are balanced every batch") {
    auto source = testutil::tiny_pool(10, 1, 16, Domain::source);
    auto target = testutil::tiny_pool(3, 2, 16, Domain::target);

    AdvBatchStream stream(source, target, 4, 9);
    CHECK(stream.batches_per_epoch() == 5);
    stream.start_epoch(0);
    int batches = 0;
    while (auto batch = stream.next()) {
        const auto b = batch->images.size(0);
        CHECK(b % 2 == 0);
        CHECK(batch->domain_labels.sum().item<double>() == doctest::Approx(b / 2.0));
        // first half source (0), second half target (1)
        CHECK(batch->domain_labels.slice(0, 0, b / 2).sum().item<double>() == 0.0);
        ++batches;
    }
    CHECK(batches == 5);

    CHECK_THROWS_AS(AdvBatchStream(source, target, 7, 9), ConfigError);

    // swapped pool sizes keep source-first ordering
    AdvBatchStream swapped(target, source, 4, 9);
    swapped.start_epoch(0);
    auto first = swapped.next().value();
    CHECK(first.domain_labels.slice(0, 0, 2).sum().item<double>() == 0.0);
    CHECK(first.domain_labels.slice(0, 2, 4).sum().item<double>() == 2.0);
}

TEST_CASE("concat source spans its parts") {
    auto a = std::make_shared<MemorySource>(testutil::tiny_pool(3, 5, 16));
    auto b = std::make_shared<MemorySource>(testutil::tiny_pool(2, 6, 16));
    ConcatSource both({a, b});
    CHECK(both.size() == 5);
    CHECK(both.labeled());
    CHECK(torch::equal(both.get(3).image, b->get(0).image));
    CHECK_THROWS_AS(both.get(5), std::out_of_range);
}
