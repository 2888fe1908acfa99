#include "adaptseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace adaptseg {

void ConfusionMatrix::accumulate(const torch::Tensor& pred, const torch::Tensor& gt) {
    if (pred.sizes() != gt.sizes()) throw ValidationError("pred/gt shapes differ");
    auto p = pred.reshape(-1).to(torch::kLong);
    auto g = gt.reshape(-1).to(torch::kLong);
    if (p.numel() == 0) return;
    const auto pmin = p.min().item<std::int64_t>();
    const auto pmax = p.max().item<std::int64_t>();
    const auto gmin = g.min().item<std::int64_t>();
    const auto gmax = g.max().item<std::int64_t>();
    if (pmin < 0 || pmax >= kClasses || gmin < 0 || gmax >= kClasses) {
        throw ValidationError("confusion matrix values must lie in {0,1}");
    }
    // counts[gt][pred] via the 4 joint masks.
    for (int gi = 0; gi < kClasses; ++gi) {
        for (int pi = 0; pi < kClasses; ++pi) {
            counts_[gi][pi] += ((g == gi) & (p == pi)).sum().item<std::int64_t>();
        }
    }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    for (int gi = 0; gi < kClasses; ++gi) {
        for (int pi = 0; pi < kClasses; ++pi) counts_[gi][pi] += other.counts_[gi][pi];
    }
    return *this;
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t n = 0;
    for (const auto& row : counts_) {
        for (const auto c : row) n += c;
    }
    return n;
}

IouResult miou(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ValidationError("confusion matrix is empty");

    IouResult result;
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < ConfusionMatrix::kClasses; ++c) {
        const auto tp = cm.at(c, c);
        std::int64_t row = 0, col = 0;
        for (int j = 0; j < ConfusionMatrix::kClasses; ++j) {
            row += cm.at(c, j);  // ground truth c
            col += cm.at(j, c);  // predicted c
        }
        const auto denom = row + col - tp;  // TP + FP + FN
        std::optional<double> iou;
        if (denom > 0) {
            iou = static_cast<double>(tp) / static_cast<double>(denom);
            sum += *iou;
            ++present;
        }
        if (c == 0) result.iou_background = iou; else result.iou_crack = iou;
    }
    result.miou = sum / present;
    return result;
}

DatasetMetrics evaluate(ModelBundle& bundle, const SampleSource& pool, int domain_id, int batch_size) {
    if (batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
    DatasetMetrics metrics;

    bundle.eval();
    torch::NoGradGuard guard;

    std::vector<torch::Tensor> images, labels;
    const auto flush = [&] {
        if (images.empty()) return;
        const auto x = torch::stack(images);
        const auto logits = bundle.forward_decoder(bundle.forward_encoder(x, domain_id), domain_id);
        const auto pred = logits.argmax(/*dim=*/1);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            metrics.cm.accumulate(pred[static_cast<std::int64_t>(i)], labels[i]);
        }
        metrics.samples_evaluated += static_cast<int>(images.size());
        images.clear();
        labels.clear();
    };

    for (std::size_t i = 0; i < pool.size(); ++i) {
        auto sample = pool.get(i);
        if (!sample.label) {
            ++metrics.samples_skipped;
            continue;
        }
        images.push_back(sample.image);
        labels.push_back(*sample.label);
        if (static_cast<int>(images.size()) == batch_size) flush();
    }
    flush();

    if (metrics.samples_skipped > 0) {
        std::cerr << "warning: skipped " << metrics.samples_skipped
                  << " unlabeled sample(s) during evaluation\n";
    }
    if (metrics.samples_evaluated == 0) {
        throw ValidationError("evaluation pool has no labeled samples");
    }
    metrics.pixels = metrics.cm.total();
    metrics.ious = miou(metrics.cm);
    return metrics;
}

nlohmann::json metrics_to_json(const DatasetMetrics& m) {
    nlohmann::json j;
    j["miou"] = m.ious.miou;
    j["iou_background"] = m.ious.iou_background ? nlohmann::json(*m.ious.iou_background) : nlohmann::json();
    j["iou_crack"] = m.ious.iou_crack ? nlohmann::json(*m.ious.iou_crack) : nlohmann::json();
    j["pixels"] = m.pixels;
    j["samples_evaluated"] = m.samples_evaluated;
    j["samples_skipped"] = m.samples_skipped;
    j["confusion"] = {{m.cm.at(0, 0), m.cm.at(0, 1)}, {m.cm.at(1, 0), m.cm.at(1, 1)}};
    return j;
}

namespace {

std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%7.2f", 100.0 * fraction);
    return buf;
}

const DatasetMetrics& require(const std::map<std::string, DatasetMetrics>& results,
                              const std::string& key, const char* layout) {
    const auto it = results.find(key);
    if (it == results.end()) {
        throw ConfigError(std::string("layout ") + layout + " requires result '" + key + "'");
    }
    return it->second;
}

double union_miou(const DatasetMetrics& a, const DatasetMetrics& b) {
    ConfusionMatrix cm = a.cm;
    cm += b.cm;
    return miou(cm).miou;
}

}  // namespace

EvalReport build_report(const std::map<std::string, DatasetMetrics>& results, ReportLayout layout,
                        const std::string& row_label) {
    if (results.empty()) throw ConfigError("no evaluation results to report");

    EvalReport report;
    std::ostringstream table;

    if (layout == ReportLayout::table2) {
        const auto& s1_source = require(results, "step1.source", "table2");
        const auto& s1_excluded = require(results, "step1.excluded", "table2");
        const auto& s1_build = require(results, "step1.buildcrack", "table2");
        const auto& s2_source = require(results, "step2.source", "table2");
        const auto& s2_excluded = require(results, "step2.excluded", "table2");
        const auto& s2_build = require(results, "step2.buildcrack", "table2");

        const double s1_overall = union_miou(s1_excluded, s1_build);
        const double s2_overall = union_miou(s2_excluded, s2_build);

        report.data["layout"] = "table2";
        report.data["row"] = row_label;
        for (const auto& [key, m] : results) report.data["pools"][key] = metrics_to_json(m);
        report.data["step1"]["overall_target_miou"] = s1_overall;
        report.data["step2"]["overall_target_miou"] = s2_overall;

        table << "Percentages are mIoU x 100; Overall is the union confusion matrix of\n"
                 "the excluded pool and the external target pool.\n\n";
        table << "            |                Step 1                 |                Step 2\n";
        table << "Excluded    |  Source Excluded BuildCrk  Overall    |  Source Excluded BuildCrk  Overall\n";
        table << "------------+---------------------------------------+--------------------------------------\n";
        char row[256];
        std::snprintf(row, sizeof(row), "%-12s| %s %s %s %s   | %s %s %s %s\n",
                      row_label.empty() ? "-" : row_label.c_str(), pct(s1_source.ious.miou).c_str(),
                      pct(s1_excluded.ious.miou).c_str(), pct(s1_build.ious.miou).c_str(),
                      pct(s1_overall).c_str(), pct(s2_source.ious.miou).c_str(),
                      pct(s2_excluded.ious.miou).c_str(), pct(s2_build.ious.miou).c_str(),
                      pct(s2_overall).c_str());
        table << row;
    } else {
        // table3: one (source, target) pair per row. table4: same shape with
        // a method column, for ablation-style comparisons.
        std::set<std::string> rows;
        for (const auto& [key, m] : results) {
            const auto dot = key.rfind('.');
            if (dot == std::string::npos) throw ConfigError("result keys must look like <row>.<pool>");
            rows.insert(key.substr(0, dot));
        }
        report.data["layout"] = layout == ReportLayout::table3 ? "table3" : "table4";

        table << (layout == ReportLayout::table3 ? "Run" : "Method")
              << "                 | Source mIoU | Target mIoU\n";
        table << "---------------------+-------------+------------\n";
        const char* which = layout == ReportLayout::table3 ? "table3" : "table4";
        for (const auto& row_name : rows) {
            const auto& src = require(results, row_name + ".source", which);
            const auto& tgt = require(results, row_name + ".target", which);
            report.data["rows"][row_name]["source"] = metrics_to_json(src);
            report.data["rows"][row_name]["target"] = metrics_to_json(tgt);
            char row[160];
            std::snprintf(row, sizeof(row), "%-21s|   %s   |  %s\n", row_name.c_str(),
                          pct(src.ious.miou).c_str(), pct(tgt.ious.miou).c_str());
            table << row;
        }
    }

    report.rendered = table.str();
    return report;
}

void write_report(const EvalReport& report, const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    {
        std::ofstream json_out(dir / (stem + ".json"));
        if (!json_out) throw IngestError("cannot write report JSON under " + dir.string());
        json_out << report.data.dump(2) << "\n";
    }
    std::ofstream text_out(dir / (stem + ".txt"));
    if (!text_out) throw IngestError("cannot write report table under " + dir.string());
    text_out << report.rendered;
}

}  // namespace adaptseg
