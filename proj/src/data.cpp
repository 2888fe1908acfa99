#include "adaptseg/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "adaptseg/rng.hpp"

namespace fs = std::filesystem;

namespace adaptseg {

int CatalogEntry::index_of(const std::string& stem) const {
    const auto it = std::lower_bound(stems.begin(), stems.end(), stem);
    if (it == stems.end() || *it != stem) {
        throw IngestError("sub-dataset '" + name + "' has no sample '" + stem + "'");
    }
    return static_cast<int>(it - stems.begin());
}

const CatalogEntry* Catalog::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

std::size_t Catalog::total_images() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.stems.size();
    return n;
}

namespace {

bool has_image_extension(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::uint64_t hash_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!in) break;
    }
    return h;
}

}  // namespace

Catalog load_tree(const fs::path& root) {
    if (!fs::exists(root) || !fs::is_directory(root)) {
        throw IngestError("dataset root does not exist: " + root.string());
    }

    Catalog catalog;
    catalog.root = root;
    std::vector<std::string> problems;
    std::map<std::uint64_t, std::string> content_hashes;

    std::vector<fs::path> subdirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) subdirs.push_back(entry.path());
    }
    std::sort(subdirs.begin(), subdirs.end());

    for (const auto& sub : subdirs) {
        const auto images_dir = sub / "images";
        if (!fs::is_directory(images_dir)) continue;
        const auto masks_dir = sub / "masks";

        CatalogEntry entry;
        entry.name = sub.filename().string();
        entry.labeled = fs::is_directory(masks_dir);

        std::vector<fs::path> image_paths;
        for (const auto& f : fs::directory_iterator(images_dir)) {
            if (f.is_regular_file() && has_image_extension(f.path())) image_paths.push_back(f.path());
        }
        std::sort(image_paths.begin(), image_paths.end());

        for (const auto& img_path : image_paths) {
            const auto stem = img_path.stem().string();
            const cv::Mat image = cv::imread(img_path.string(), cv::IMREAD_COLOR);
            if (image.empty()) {
                problems.push_back("undecodable image: " + img_path.string());
                continue;
            }

            const auto h = hash_file(img_path);
            const auto dup = content_hashes.find(h);
            if (dup != content_hashes.end()) {
                std::cerr << "warning: byte-identical images " << dup->second << " and "
                          << img_path.string() << " (duplicate removal is an upstream concern)\n";
            } else {
                content_hashes.emplace(h, img_path.string());
            }

            if (entry.labeled) {
                const auto mask_path = masks_dir / (stem + ".png");
                if (!fs::exists(mask_path)) {
                    problems.push_back("missing mask for labeled image: " + img_path.string() +
                                       " (expected " + mask_path.string() + ")");
                    continue;
                }
                const cv::Mat mask = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
                if (mask.empty()) {
                    problems.push_back("undecodable mask: " + mask_path.string());
                    continue;
                }
                if (mask.rows != image.rows || mask.cols != image.cols) {
                    std::ostringstream msg;
                    msg << "mask size " << mask.cols << "x" << mask.rows << " does not match image "
                        << image.cols << "x" << image.rows << " for pair (" << img_path.string() << ", "
                        << mask_path.string() << ")";
                    problems.push_back(msg.str());
                    continue;
                }
                entry.crack_fraction.push_back(static_cast<double>(cv::countNonZero(mask)) /
                                               (static_cast<double>(mask.rows) * mask.cols));
            }
            entry.stems.push_back(stem);
            entry.image_files.push_back(img_path.filename().string());
        }

        if (!entry.stems.empty() || !image_paths.empty()) catalog.entries.push_back(std::move(entry));
    }

    if (!problems.empty()) {
        std::string msg = "dataset tree has " + std::to_string(problems.size()) + " problem(s):";
        for (const auto& p : problems) msg += "\n  " + p;
        throw IngestError(msg);
    }
    if (catalog.entries.empty()) {
        throw IngestError("no sub-datasets found under " + root.string() +
                          " (expected <sub>/images/*.png|jpg)");
    }
    return catalog;
}

SplitSpec make_splits(const Catalog& catalog, const std::optional<std::string>& excluded,
                      std::uint64_t seed) {
    if (excluded && catalog.find(*excluded) == nullptr) {
        std::string valid;
        for (const auto& e : catalog.entries) valid += (valid.empty() ? "" : ", ") + e.name;
        throw ConfigError("unknown sub-dataset '" + *excluded + "' (valid: " + valid + ")");
    }

    SplitSpec split;
    split.excluded = excluded;
    split.seed = seed;

    for (const auto& entry : catalog.entries) {
        if (excluded && entry.name == *excluded) {
            for (const auto& stem : entry.stems) split.target_ids.emplace_back(entry.name, stem);
            continue;
        }
        auto stems = entry.stems;
        Rng rng(Rng::mix(seed, Rng::hash_string(entry.name)));
        rng.shuffle(stems);

        // 4:1 per sub-dataset: train = floor(4n/5), val = the rest.
        const auto n = stems.size();
        const auto n_train = n * 4 / 5;
        std::vector<std::string> train(stems.begin(), stems.begin() + static_cast<long>(n_train));
        std::vector<std::string> val(stems.begin() + static_cast<long>(n_train), stems.end());
        std::sort(train.begin(), train.end());
        std::sort(val.begin(), val.end());
        split.train_ids[entry.name] = std::move(train);
        split.val_ids[entry.name] = std::move(val);
    }
    return split;
}

void write_manifest(const SplitSpec& split, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write manifest: " + path.string());
    out << "# adaptseg split manifest\n";
    out << "# seed=" << split.seed << "\n";
    out << "# excluded=" << (split.excluded ? *split.excluded : "") << "\n";
    for (const auto& [sub, stems] : split.train_ids) {
        for (const auto& stem : stems) out << sub << "," << stem << ",train\n";
    }
    for (const auto& [sub, stems] : split.val_ids) {
        for (const auto& stem : stems) out << sub << "," << stem << ",val\n";
    }
    auto target = split.target_ids;
    std::sort(target.begin(), target.end());
    for (const auto& [sub, stem] : target) out << sub << "," << stem << ",target\n";
}

SplitSpec read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot read manifest: " + path.string());
    SplitSpec split;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                const auto key = line.substr(1, eq - 1);
                const auto value = line.substr(eq + 1);
                if (key.find("seed") != std::string::npos) {
                    split.seed = std::stoull(value);
                } else if (key.find("excluded") != std::string::npos && !value.empty()) {
                    split.excluded = value;
                }
            }
            continue;
        }
        std::istringstream fields(line);
        std::string sub, stem, kind;
        if (!std::getline(fields, sub, ',') || !std::getline(fields, stem, ',') ||
            !std::getline(fields, kind)) {
            throw IngestError("malformed manifest line " + std::to_string(lineno) + ": " + line);
        }
        if (kind == "train") {
            split.train_ids[sub].push_back(stem);
        } else if (kind == "val") {
            split.val_ids[sub].push_back(stem);
        } else if (kind == "target") {
            split.target_ids.emplace_back(sub, stem);
        } else {
            throw IngestError("unknown split kind '" + kind + "' at manifest line " +
                              std::to_string(lineno));
        }
    }
    return split;
}

DomainSample preprocess(const cv::Mat& image, const cv::Mat* mask, std::pair<int, int> size,
                        std::string sub_dataset, Domain domain) {
    if (image.empty()) throw ValidationError("cannot preprocess an empty image");
    const auto [height, width] = size;
    if (height <= 0 || width <= 0) throw ValidationError("preprocess size must be positive");

    cv::Mat rgb;
    switch (image.channels()) {
        case 1: cv::cvtColor(image, rgb, cv::COLOR_GRAY2RGB); break;
        case 3: cv::cvtColor(image, rgb, cv::COLOR_BGR2RGB); break;
        case 4: cv::cvtColor(image, rgb, cv::COLOR_BGRA2RGB); break;
        default: throw ValidationError("unsupported channel count: " + std::to_string(image.channels()));
    }
    cv::Mat resized;
    cv::resize(rgb, resized, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    cv::Mat as_float;
    resized.convertTo(as_float, CV_32FC3, 1.0 / 255.0);

    DomainSample sample;
    sample.sub_dataset = std::move(sub_dataset);
    sample.domain = domain;
    sample.image =
        torch::from_blob(as_float.data, {height, width, 3}, torch::kFloat32).permute({2, 0, 1}).clone();

    if (mask != nullptr) {
        if (mask->rows != image.rows || mask->cols != image.cols) {
            throw ValidationError("mask size does not match image size");
        }
        cv::Mat gray;
        if (mask->channels() != 1) {
            cv::cvtColor(*mask, gray, cv::COLOR_BGR2GRAY);
        } else {
            gray = *mask;
        }
        // Binarize (nonzero = crack) before the nearest-neighbor resize so no
        // interpolated values appear.
        cv::Mat binary = gray != 0;  // 0 or 255
        cv::Mat small;
        cv::resize(binary, small, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
        auto label = torch::from_blob(small.data, {height, width}, torch::kUInt8).clone();
        sample.label = (label > 127).to(torch::kLong);
    }
    return sample;
}

DomainSample load_sample(const Catalog& catalog, const std::string& sub_dataset,
                         const std::string& stem, std::pair<int, int> size, Domain domain) {
    const auto* entry = catalog.find(sub_dataset);
    if (entry == nullptr) throw IngestError("unknown sub-dataset: " + sub_dataset);
    const int idx = entry->index_of(stem);

    const auto image_path = catalog.root / sub_dataset / "images" / entry->image_files[idx];
    const cv::Mat image = cv::imread(image_path.string(), cv::IMREAD_COLOR);
    if (image.empty()) throw IngestError("cannot decode image: " + image_path.string());

    cv::Mat mask;
    const bool has_mask = entry->labeled;
    if (has_mask) {
        const auto mask_path = catalog.root / sub_dataset / "masks" / (stem + ".png");
        mask = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
        if (mask.empty()) throw IngestError("cannot decode mask: " + mask_path.string());
    }
    return preprocess(image, has_mask ? &mask : nullptr, size, sub_dataset, domain);
}

DiskSource::DiskSource(Catalog catalog, std::vector<std::pair<std::string, std::string>> ids,
                       std::pair<int, int> size, Domain domain)
    : catalog_(std::move(catalog)), ids_(std::move(ids)), size_(size), domain_(domain) {}

DomainSample DiskSource::get(std::size_t index) const {
    const auto& [sub, stem] = ids_.at(index);
    return load_sample(catalog_, sub, stem, size_, domain_);
}

bool DiskSource::labeled() const {
    std::set<std::string> subs;
    for (const auto& [sub, stem] : ids_) subs.insert(sub);
    for (const auto& sub : subs) {
        const auto* entry = catalog_.find(sub);
        if (entry == nullptr || !entry->labeled) return false;
    }
    return !ids_.empty();
}

bool MemorySource::labeled() const {
    if (samples_.empty()) return false;
    return std::all_of(samples_.begin(), samples_.end(),
                       [](const DomainSample& s) { return s.label.has_value(); });
}

std::size_t ConcatSource::size() const {
    std::size_t n = 0;
    for (const auto& p : parts_) n += p->size();
    return n;
}

DomainSample ConcatSource::get(std::size_t index) const {
    for (const auto& p : parts_) {
        if (index < p->size()) return p->get(index);
        index -= p->size();
    }
    throw std::out_of_range("ConcatSource index out of range");
}

bool ConcatSource::labeled() const {
    return !parts_.empty() && std::all_of(parts_.begin(), parts_.end(),
                                          [](const auto& p) { return p->labeled(); });
}

namespace {

std::vector<std::pair<std::string, std::string>> ids_from_map(
    const std::map<std::string, std::vector<std::string>>& per_sub) {
    std::vector<std::pair<std::string, std::string>> ids;
    for (const auto& [sub, stems] : per_sub) {
        for (const auto& stem : stems) ids.emplace_back(sub, stem);
    }
    return ids;
}

}  // namespace

DiskSource make_train_source(const Catalog& catalog, const SplitSpec& split, std::pair<int, int> size) {
    return DiskSource(catalog, ids_from_map(split.train_ids), size, Domain::source);
}

DiskSource make_val_source(const Catalog& catalog, const SplitSpec& split, std::pair<int, int> size) {
    return DiskSource(catalog, ids_from_map(split.val_ids), size, Domain::source);
}

DiskSource make_excluded_source(const Catalog& catalog, const SplitSpec& split,
                                std::pair<int, int> size) {
    return DiskSource(catalog, split.target_ids, size, Domain::target);
}

DiskSource make_tree_source(const Catalog& catalog, std::pair<int, int> size, Domain domain) {
    std::vector<std::pair<std::string, std::string>> ids;
    for (const auto& entry : catalog.entries) {
        for (const auto& stem : entry.stems) ids.emplace_back(entry.name, stem);
    }
    return DiskSource(catalog, ids, size, domain);
}

SegBatch stack_seg_batch(const SampleSource& source, const std::vector<std::size_t>& indices) {
    std::vector<torch::Tensor> images, labels;
    images.reserve(indices.size());
    labels.reserve(indices.size());
    for (const auto i : indices) {
        auto sample = source.get(i);
        if (!sample.label) {
            throw ValidationError("unlabeled sample in segmentation batch (sub-dataset '" +
                                  sample.sub_dataset + "')");
        }
        images.push_back(sample.image);
        labels.push_back(*sample.label);
    }
    return {torch::stack(images), torch::stack(labels)};
}

SegBatchStream::SegBatchStream(const SampleSource& source, int batch_size, std::uint64_t seed)
    : source_(&source), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (source.size() == 0) throw ConfigError("segmentation pool is empty");
    start_epoch(0);
}

void SegBatchStream::start_epoch(int epoch) {
    order_.resize(source_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(Rng::mix(seed_, static_cast<std::uint64_t>(epoch) + 0x9e37u));
    rng.shuffle(order_);
    pos_ = 0;
}

int SegBatchStream::batches_per_epoch() const {
    return static_cast<int>((source_->size() + batch_size_ - 1) / batch_size_);
}

std::optional<SegBatch> SegBatchStream::next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const auto end = std::min(pos_ + static_cast<std::size_t>(batch_size_), order_.size());
    std::vector<std::size_t> indices(order_.begin() + static_cast<long>(pos_),
                                     order_.begin() + static_cast<long>(end));
    pos_ = end;
    return stack_seg_batch(*source_, indices);
}

AdvBatchStream::AdvBatchStream(const SampleSource& source, const SampleSource& target, int batch_size,
                               std::uint64_t seed)
    : source_(&source), target_(&target), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 2 || batch_size % 2 != 0) {
        throw ConfigError("adversarial batch_size must be even (got " + std::to_string(batch_size) +
                          "); every batch holds an equal number of source and target samples");
    }
    if (source.size() == 0 || target.size() == 0) {
        throw ConfigError("adversarial phase needs non-empty source and target pools");
    }
    start_epoch(0);
}

void AdvBatchStream::start_epoch(int epoch) {
    source_is_large_ = source_->size() >= target_->size();
    const auto& large = source_is_large_ ? *source_ : *target_;
    const auto& small = source_is_large_ ? *target_ : *source_;

    large_order_.resize(large.size());
    for (std::size_t i = 0; i < large_order_.size(); ++i) large_order_[i] = i;
    Rng rng(Rng::mix(seed_, static_cast<std::uint64_t>(epoch) + 0xadabu));
    rng.shuffle(large_order_);

    // The smaller pool is resampled with replacement to pair every chunk of
    // the larger pool's epoch.
    small_picks_.assign(large_order_.size(), 0);
    for (auto& pick : small_picks_) {
        pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(small.size()) - 1));
    }
    pos_ = 0;
}

int AdvBatchStream::batches_per_epoch() const {
    const auto half = static_cast<std::size_t>(batch_size_ / 2);
    const auto large_n = std::max(source_->size(), target_->size());
    return static_cast<int>((large_n + half - 1) / half);
}

std::optional<AdvBatch> AdvBatchStream::next() {
    if (pos_ >= large_order_.size()) return std::nullopt;
    const auto half = static_cast<std::size_t>(batch_size_ / 2);
    const auto end = std::min(pos_ + half, large_order_.size());

    std::vector<torch::Tensor> source_images, target_images;
    for (std::size_t i = pos_; i < end; ++i) {
        const auto large_idx = large_order_[i];
        const auto small_idx = small_picks_[i];
        if (source_is_large_) {
            source_images.push_back(source_->get(large_idx).image);
            target_images.push_back(target_->get(small_idx).image);
        } else {
            source_images.push_back(source_->get(small_idx).image);
            target_images.push_back(target_->get(large_idx).image);
        }
    }
    pos_ = end;

    const auto chunk = static_cast<std::int64_t>(source_images.size());
    std::vector<torch::Tensor> all = std::move(source_images);
    all.insert(all.end(), target_images.begin(), target_images.end());
    return AdvBatch{torch::stack(all),
                    torch::cat({torch::zeros({chunk}), torch::ones({chunk})}).to(torch::kFloat32)};
}

}  // namespace adaptseg
