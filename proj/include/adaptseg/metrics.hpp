#ifndef ADAPTSEG_METRICS_HPP
#define ADAPTSEG_METRICS_HPP

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "adaptseg/data.hpp"
#include "adaptseg/model.hpp"

namespace adaptseg {

/// 2x2 pixel confusion matrix; rows = ground truth, cols = prediction.
/// Accumulation is associative and commutative; shards may be summed.
class ConfusionMatrix {
public:
    static constexpr int kClasses = 2;

    /// counts[gt][pred] += 1 per pixel. pred and gt are [H,W] integer maps
    /// restricted to {0,1} (ValidationError otherwise).
    void accumulate(const torch::Tensor& pred, const torch::Tensor& gt);

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);

    std::int64_t at(int gt, int pred) const { return counts_[gt][pred]; }
    std::int64_t& at(int gt, int pred) { return counts_[gt][pred]; }
    std::int64_t total() const;

    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::array<std::array<std::int64_t, kClasses>, kClasses> counts_{};
};

/// Per-class intersection-over-union. A class absent from both ground truth
/// and prediction is excluded from the mean.
struct IouResult {
    std::optional<double> iou_background;
    std::optional<double> iou_crack;
    double miou = 0.0;
};

/// iou_c = TP_c / (TP_c + FP_c + FN_c). Throws ValidationError on an empty
/// matrix.
IouResult miou(const ConfusionMatrix& cm);

struct DatasetMetrics {
    ConfusionMatrix cm;
    IouResult ious;
    std::int64_t pixels = 0;
    int samples_evaluated = 0;
    int samples_skipped = 0;  // unlabeled samples
};

/// Runs the bundle on every labeled sample of the pool under the given
/// domain's path, argmaxes the two logit channels, and aggregates one
/// dataset-wide confusion matrix. Unlabeled samples are skipped with a
/// warning and counted.
DatasetMetrics evaluate(ModelBundle& bundle, const SampleSource& pool, int domain_id,
                        int batch_size = 8);

enum class ReportLayout { table2, table3, table4 };

/// Machine-readable report plus a rendered fixed-width table.
struct EvalReport {
    nlohmann::json data;
    std::string rendered;
};

/// Builds the report for the given layout.
///  - table2: keys "<step>.<pool>" for step in {step1, step2} and pool in
///    {source, excluded, buildcrack}; the overall column is computed from
///    the union confusion matrix of excluded + buildcrack.
///  - table3/table4: keys "<row>.source" and "<row>.target", one row each.
/// Missing keys raise ConfigError naming them.
EvalReport build_report(const std::map<std::string, DatasetMetrics>& results, ReportLayout layout,
                        const std::string& row_label = "");

/// Writes <stem>.json and <stem>.txt under dir.
void write_report(const EvalReport& report, const std::filesystem::path& dir,
                  const std::string& stem);

nlohmann::json metrics_to_json(const DatasetMetrics& m);

}  // namespace adaptseg

#endif
