#ifndef ADAPTSEG_DATA_HPP
#define ADAPTSEG_DATA_HPP

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adaptseg/errors.hpp"

namespace cv {
class Mat;
}

namespace adaptseg {

enum class Domain { source, target };

/// One RGB image plus optional binary label map.
/// image: [3,H,W] float32 in [0,1]; label: [H,W] int64 in {0,1}.
struct DomainSample {
    torch::Tensor image;
    std::optional<torch::Tensor> label;
    std::string sub_dataset;
    Domain domain = Domain::source;
};

struct CatalogEntry {
    std::string name;
    std::vector<std::string> stems;        // sorted
    std::vector<std::string> image_files;  // parallel to stems, relative to <sub>/images/
    bool labeled = false;                  // masks/ directory present
    std::vector<double> crack_fraction;    // per stem; empty when unlabeled

    int index_of(const std::string& stem) const;
};

/// Catalog of a dataset tree: root/<sub>/images/*.{png,jpg} (+ masks/*.png).
struct Catalog {
    std::filesystem::path root;
    std::vector<CatalogEntry> entries;    // sorted by name

    const CatalogEntry* find(const std::string& name) const;
    std::size_t total_images() const;
};

/// Scans and validates a dataset tree. Every image in a labeled sub-dataset
/// must have a same-stem, same-size mask; violations raise IngestError
/// listing the offending files. Byte-identical image files only warn.
Catalog load_tree(const std::filesystem::path& root);

/// Leave-one-sub-dataset-out split at 4:1 per sub-dataset
/// (train = floor(4n/5), val = n - train), deterministic in the seed.
struct SplitSpec {
    std::optional<std::string> excluded;
    std::map<std::string, std::vector<std::string>> train_ids;
    std::map<std::string, std::vector<std::string>> val_ids;
    std::vector<std::pair<std::string, std::string>> target_ids;  // (sub_dataset, stem)
    std::uint64_t seed = 0;

    bool operator==(const SplitSpec&) const = default;
};

SplitSpec make_splits(const Catalog& catalog, const std::optional<std::string>& excluded,
                      std::uint64_t seed);

/// Manifest format: one `sub_dataset,stem,split` line per sample with
/// split in {train, val, target}; header comments carry seed/excluded.
void write_manifest(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec read_manifest(const std::filesystem::path& path);

/// Bilinear-resizes the image to (height, width) and scales to [0,1];
/// masks are binarized (nonzero = crack) and resized nearest-neighbor.
DomainSample preprocess(const cv::Mat& image, const cv::Mat* mask, std::pair<int, int> size,
                        std::string sub_dataset, Domain domain);

/// Loads and preprocesses one catalog sample from disk.
DomainSample load_sample(const Catalog& catalog, const std::string& sub_dataset,
                         const std::string& stem, std::pair<int, int> size, Domain domain);

/// Uniform access to a sample set, by index.
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual DomainSample get(std::size_t index) const = 0;
    virtual bool labeled() const = 0;
};

/// Lazily loads samples from a catalog tree.
class DiskSource : public SampleSource {
public:
    DiskSource(Catalog catalog, std::vector<std::pair<std::string, std::string>> ids,
               std::pair<int, int> size, Domain domain);

    std::size_t size() const override { return ids_.size(); }
    DomainSample get(std::size_t index) const override;
    bool labeled() const override;

private:
    Catalog catalog_;
    std::vector<std::pair<std::string, std::string>> ids_;
    std::pair<int, int> size_;
    Domain domain_;
};

class MemorySource : public SampleSource {
public:
    explicit MemorySource(std::vector<DomainSample> samples) : samples_(std::move(samples)) {}

    std::size_t size() const override { return samples_.size(); }
    DomainSample get(std::size_t index) const override { return samples_.at(index); }
    bool labeled() const override;

private:
    std::vector<DomainSample> samples_;
};

/// Concatenation of pools (e.g. excluded sub-dataset + external target).
class ConcatSource : public SampleSource {
public:
    explicit ConcatSource(std::vector<std::shared_ptr<SampleSource>> parts)
        : parts_(std::move(parts)) {}

    std::size_t size() const override;
    DomainSample get(std::size_t index) const override;
    bool labeled() const override;

private:
    std::vector<std::shared_ptr<SampleSource>> parts_;
};

// Split -> source helpers.
DiskSource make_train_source(const Catalog& catalog, const SplitSpec& split, std::pair<int, int> size);
DiskSource make_val_source(const Catalog& catalog, const SplitSpec& split, std::pair<int, int> size);
/// The excluded sub-dataset routed to the target domain.
DiskSource make_excluded_source(const Catalog& catalog, const SplitSpec& split, std::pair<int, int> size);
/// A whole tree as one target pool (e.g. an external target dataset).
DiskSource make_tree_source(const Catalog& catalog, std::pair<int, int> size, Domain domain);

struct SegBatch {
    torch::Tensor images;  // [B,3,H,W]
    torch::Tensor labels;  // [B,H,W] int64
};

struct AdvBatch {
    torch::Tensor images;         // [B,3,H,W], first half source, second half target
    torch::Tensor domain_labels;  // [B] float32 in {0,1}
};

/// Shuffled epochs over a labeled pool; the final partial batch is kept.
/// Batch order is a pure function of (seed, epoch, batch_size).
class SegBatchStream {
public:
    SegBatchStream(const SampleSource& source, int batch_size, std::uint64_t seed);

    void start_epoch(int epoch);
    std::optional<SegBatch> next();
    int batches_per_epoch() const;

private:
    const SampleSource* source_;
    int batch_size_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

/// Mixed source/target batches with exactly batch_size/2 samples per domain;
/// the smaller pool is resampled with replacement to cover the larger pool's
/// epoch. batch_size must be even. Labels are never attached.
class AdvBatchStream {
public:
    AdvBatchStream(const SampleSource& source, const SampleSource& target, int batch_size,
                   std::uint64_t seed);

    void start_epoch(int epoch);
    std::optional<AdvBatch> next();
    int batches_per_epoch() const;

private:
    const SampleSource* source_;
    const SampleSource* target_;
    int batch_size_;
    std::uint64_t seed_;
    std::vector<std::size_t> large_order_;   // shuffled indices of the larger pool
    std::vector<std::size_t> small_picks_;   // with-replacement picks of the smaller pool
    bool source_is_large_ = true;
    std::size_t pos_ = 0;
};

/// Stacks samples [begin, end) of `source` into one labeled batch.
SegBatch stack_seg_batch(const SampleSource& source, const std::vector<std::size_t>& indices);

}  // namespace adaptseg

#endif
