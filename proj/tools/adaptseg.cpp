// adaptseg: two-step incremental unsupervised domain adaptation for binary
// crack segmentation. Subcommands: prepare, train, eval, sweep, synth.

#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptseg/checkpoint.hpp"
#include "adaptseg/data.hpp"
#include "adaptseg/errors.hpp"
#include "adaptseg/metrics.hpp"
#include "adaptseg/rng.hpp"
#include "adaptseg/run_config.hpp"
#include "adaptseg/synth.hpp"
#include "adaptseg/trainer.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace adaptseg;

namespace {

std::string self_path(const char* argv0) {
    std::error_code ec;
    const auto exe = fs::read_symlink("/proc/self/exe", ec);
    if (!ec) return exe.string();
    return argv0;
}

RunConfig preload_config(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) return RunConfig::load(argv[i + 1]);
        if (arg.rfind("--config=", 0) == 0) return RunConfig::load(arg.substr(9));
    }
    return RunConfig{};
}

struct PoolSet {
    std::shared_ptr<SampleSource> source_val;
    std::shared_ptr<SampleSource> excluded;  // may be null
    std::shared_ptr<SampleSource> external;  // may be null
};

PoolSet build_eval_pools(const std::string& manifest, const std::string& root,
                         const std::string& target_root, std::pair<int, int> size) {
    PoolSet pools;
    if (manifest.empty() || root.empty()) {
        throw ConfigError("eval needs --manifest and --root for the source pool");
    }
    const auto catalog = load_tree(root);
    const auto split = read_manifest(manifest);
    pools.source_val = std::make_shared<DiskSource>(make_val_source(catalog, split, size));
    if (!split.target_ids.empty()) {
        pools.excluded = std::make_shared<DiskSource>(make_excluded_source(catalog, split, size));
    }
    if (!target_root.empty()) {
        const auto target_catalog = load_tree(target_root);
        pools.external =
            std::make_shared<DiskSource>(make_tree_source(target_catalog, size, Domain::target));
    }
    return pools;
}

DatasetMetrics evaluate_pool(ModelBundle& bundle, const SampleSource& pool, int domain_id,
                             int batch_size, const std::string& pool_name) {
    try {
        return evaluate(bundle, pool, domain_id, batch_size);
    } catch (const std::exception& e) {
        throw IngestError("pool '" + pool_name + "': " + e.what());
    }
}

// ----------------------------------------------------------------- prepare

int cmd_prepare(const std::string& root, const std::string& exclude, std::uint64_t seed,
                const std::string& output_dir) {
    if (root.empty()) {
        throw ConfigError("no dataset root: pass --root or set ADAPTSEG_DATA_ROOT");
    }
    const auto catalog = load_tree(root);
    const auto excluded = exclude.empty() ? std::nullopt : std::optional<std::string>(exclude);
    const auto split = make_splits(catalog, excluded, seed);

    fs::create_directories(output_dir);
    const auto manifest_path = fs::path(output_dir) / "split_manifest.csv";
    write_manifest(split, manifest_path);

    // Catalog summary next to the manifest, one row per sub-dataset.
    nlohmann::json summary_json = nlohmann::json::array();
    std::ostringstream table;
    table << "Sub-dataset          Size  Labeled  %Crack   Train    Val  Target\n";
    table << "-----------------------------------------------------------------\n";
    for (const auto& entry : catalog.entries) {
        double mean_fraction = 0.0;
        for (const double f : entry.crack_fraction) mean_fraction += f;
        if (!entry.crack_fraction.empty()) {
            mean_fraction /= static_cast<double>(entry.crack_fraction.size());
        }
        const bool is_excluded = excluded && entry.name == *excluded;
        const auto train_n = is_excluded ? 0 : split.train_ids.at(entry.name).size();
        const auto val_n = is_excluded ? 0 : split.val_ids.at(entry.name).size();
        const auto target_n = is_excluded ? entry.stems.size() : 0;

        char row[160];
        std::snprintf(row, sizeof(row), "%-20s %5zu  %-7s %6.2f  %6zu %6zu  %6zu\n",
                      entry.name.c_str(), entry.stems.size(), entry.labeled ? "yes" : "no",
                      100.0 * mean_fraction, train_n, val_n, target_n);
        table << row;
        summary_json.push_back({{"name", entry.name},
                                {"size", entry.stems.size()},
                                {"labeled", entry.labeled},
                                {"crack_percent", 100.0 * mean_fraction},
                                {"train", train_n},
                                {"val", val_n},
                                {"target", target_n}});
    }
    std::ofstream(fs::path(output_dir) / "catalog_summary.txt") << table.str();
    std::ofstream(fs::path(output_dir) / "catalog_summary.json")
        << nlohmann::json{{"root", root},
                          {"seed", seed},
                          {"excluded", exclude},
                          {"sub_datasets", summary_json}}
               .dump(2)
        << "\n";

    std::cout << table.str() << "\nmanifest: " << manifest_path.string() << "\n";
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
    int step = 1;
    std::string manifest, root, target_root, from_checkpoint, output_dir;
    int input_size = 0;  // 0 = from config
};

int cmd_train(RunConfig cfg, const TrainArgs& args) {
    if (args.manifest.empty() || args.root.empty()) {
        throw ConfigError("train needs --manifest and --root");
    }
    if (args.input_size > 0) {
        cfg.data.input_height = args.input_size;
        cfg.data.input_width = args.input_size;
    }
    ArchConfig arch = cfg.model;
    arch.input_height = cfg.data.input_height;
    arch.input_width = cfg.data.input_width;

    TrainConfig train_cfg = cfg.train;
    train_cfg.output_dir = args.output_dir;
    train_cfg.validate();

    const auto catalog = load_tree(args.root);
    const auto split = read_manifest(args.manifest);
    const std::pair<int, int> size{arch.input_height, arch.input_width};
    const auto train_source = make_train_source(catalog, split, size);
    const auto val_source = make_val_source(catalog, split, size);

    fs::create_directories(train_cfg.output_dir);
    cfg.io.output_dir = train_cfg.output_dir.string();
    cfg.save(train_cfg.output_dir / "run_config.ini");

    if (args.step == 1) {
        torch::manual_seed(train_cfg.seed);
        auto bundle = build_model(arch, 1);
        const auto record = train_step1(bundle, train_source, val_source, train_cfg);
        std::cout << "step 1 best: epoch " << record.epoch << " source mIoU "
                  << 100.0 * record.source_miou << " -> " << record.path.string() << "\n";
        return 0;
    }

    if (args.from_checkpoint.empty()) {
        throw ConfigError("train --step 2 needs --from-checkpoint <step1 checkpoint>");
    }
    auto loaded = load_checkpoint(args.from_checkpoint);
    if (loaded.bundle.num_domains() != 1 || loaded.bundle.has_frozen_m1()) {
        throw ConfigError("--from-checkpoint must be a step-1 (one-domain) checkpoint");
    }
    if (loaded.meta.arch.input_height != arch.input_height ||
        loaded.meta.arch.input_width != arch.input_width) {
        throw ConfigError("checkpoint input size differs from the configured input size");
    }

    std::vector<std::shared_ptr<SampleSource>> target_parts;
    if (!split.target_ids.empty()) {
        target_parts.push_back(
            std::make_shared<DiskSource>(make_excluded_source(catalog, split, size)));
    }
    if (!args.target_root.empty()) {
        const auto target_catalog = load_tree(args.target_root);
        target_parts.push_back(
            std::make_shared<DiskSource>(make_tree_source(target_catalog, size, Domain::target)));
    }
    if (target_parts.empty()) {
        throw ConfigError("step 2 needs a target pool: exclude a sub-dataset in the manifest "
                          "and/or pass --target-root");
    }
    ConcatSource target_pool(std::move(target_parts));

    torch::manual_seed(train_cfg.seed);
    auto bundle = std::move(loaded.bundle);
    bundle.add_domain();
    bundle.set_trainability(Phase::step2);
    const auto record = train_step2(bundle, train_source, val_source, target_pool, train_cfg);
    std::cout << "step 2 best: epoch " << record.epoch << " source mIoU "
              << 100.0 * record.source_miou;
    if (record.target_miou) std::cout << " target mIoU " << 100.0 * *record.target_miou;
    std::cout << " -> " << record.path.string() << "\n";
    return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
    std::string layout = "table3";
    std::string step1_checkpoint, step2_checkpoint;
    std::string manifest, root, target_root;
    std::string row_label;
    std::string output_dir = "eval";
    int batch_size = 8;
};

int cmd_eval(const EvalArgs& args) {
    if (args.step1_checkpoint.empty() && args.step2_checkpoint.empty()) {
        throw ConfigError("eval needs --step1-checkpoint and/or --step2-checkpoint");
    }

    struct Row {
        std::string name;
        LoadedCheckpoint ckpt;
        int domain;
    };
    std::vector<Row> rows;
    if (!args.step1_checkpoint.empty()) {
        auto l = load_checkpoint(args.step1_checkpoint);
        rows.push_back({"step1", std::move(l), 1});
    }
    if (!args.step2_checkpoint.empty()) {
        auto l = load_checkpoint(args.step2_checkpoint);
        const int domain = l.bundle.num_domains();
        rows.push_back({"step2", std::move(l), domain});
    }

    const auto& arch0 = rows.front().ckpt.meta.arch;
    for (const auto& row : rows) {
        if (row.ckpt.meta.arch.input_height != arch0.input_height ||
            row.ckpt.meta.arch.input_width != arch0.input_width) {
            throw ConfigError("checkpoints disagree on input size; evaluate them separately");
        }
    }
    const std::pair<int, int> size{arch0.input_height, arch0.input_width};
    const auto pools = build_eval_pools(args.manifest, args.root, args.target_root, size);

    std::map<std::string, DatasetMetrics> results;
    ReportLayout layout;
    if (args.layout == "table2") {
        layout = ReportLayout::table2;
        if (rows.size() != 2) throw ConfigError("table2 needs both step-1 and step-2 checkpoints");
        if (!pools.excluded) throw ConfigError("table2 needs a manifest with an excluded sub-dataset");
        if (!pools.external) throw ConfigError("table2 needs --target-root for the external target pool");
        for (auto& row : rows) {
            results[row.name + ".source"] = evaluate_pool(row.ckpt.bundle, *pools.source_val,
                                                          row.domain, args.batch_size, "source");
            results[row.name + ".excluded"] = evaluate_pool(row.ckpt.bundle, *pools.excluded,
                                                            row.domain, args.batch_size, "excluded");
            results[row.name + ".buildcrack"] = evaluate_pool(
                row.ckpt.bundle, *pools.external, row.domain, args.batch_size, "target-root");
        }
    } else if (args.layout == "table3" || args.layout == "table4") {
        layout = args.layout == "table3" ? ReportLayout::table3 : ReportLayout::table4;
        std::vector<std::shared_ptr<SampleSource>> target_parts;
        if (pools.excluded) target_parts.push_back(pools.excluded);
        if (pools.external) target_parts.push_back(pools.external);
        if (target_parts.empty()) {
            throw ConfigError("no target pool: exclude a sub-dataset or pass --target-root");
        }
        ConcatSource target(std::move(target_parts));
        for (auto& row : rows) {
            results[row.name + ".source"] = evaluate_pool(row.ckpt.bundle, *pools.source_val,
                                                          row.domain, args.batch_size, "source");
            results[row.name + ".target"] =
                evaluate_pool(row.ckpt.bundle, target, row.domain, args.batch_size, "target");
        }
    } else {
        throw ConfigError("unknown layout '" + args.layout + "' (table2|table3|table4)");
    }

    const auto report = build_report(results, layout, args.row_label);
    write_report(report, args.output_dir, "eval_report");
    std::cout << report.rendered;
    std::cout << "\nreport: " << (fs::path(args.output_dir) / "eval_report.json").string() << "\n";
    return 0;
}

// ------------------------------------------------------------------- sweep

struct SweepArgs {
    std::string manifest, root, target_root, from_checkpoint, output_dir = "sweep";
    std::string config_path;
    std::vector<double> ce_grid, kld_grid;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

int cmd_sweep(const SweepArgs& args, const std::string& self) {
    if (args.manifest.empty() || args.root.empty()) {
        throw ConfigError("sweep needs --manifest and --root");
    }

    // Default grid: the two supplementary slices (the lambda_ce = 1 row and
    // the lambda_kld = 0.1 column). Explicit grids run their cross product.
    std::vector<std::pair<double, double>> cells;
    const auto add_cell = [&cells](double ce, double kld) {
        for (const auto& c : cells) {
            if (c.first == ce && c.second == kld) return;
        }
        cells.emplace_back(ce, kld);
    };
    if (args.ce_grid.empty() && args.kld_grid.empty()) {
        for (int k = 1; k <= 10; ++k) add_cell(1.0, k / 10.0);
        for (int k = 1; k <= 10; ++k) add_cell(k / 10.0, 0.1);
    } else {
        const auto ces = args.ce_grid.empty() ? std::vector<double>{1.0} : args.ce_grid;
        const auto klds = args.kld_grid.empty() ? std::vector<double>{0.1} : args.kld_grid;
        for (const double ce : ces) {
            for (const double kld : klds) add_cell(ce, kld);
        }
    }

    fs::create_directories(args.output_dir);
    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream table;
    table << "lambda_ce  lambda_kld  source mIoU  target mIoU  status\n";
    table << "------------------------------------------------------\n";

    for (const auto& [ce, kld] : cells) {
        char cell_name[64];
        std::snprintf(cell_name, sizeof(cell_name), "cell_ce%.2f_kld%.2f", ce, kld);
        const auto cell_dir = fs::path(args.output_dir) / cell_name;
        const auto best_path = cell_dir / "best.json";

        std::string status = "ok";
        if (fs::exists(best_path)) {
            status = "resumed";
        } else {
            std::ostringstream cmd;
            cmd << '"' << self << '"' << " train --step 2"
                << " --manifest \"" << args.manifest << '"' << " --root \"" << args.root << '"'
                << " --from-checkpoint \"" << args.from_checkpoint << '"' << " --output-dir \""
                << cell_dir.string() << '"' << " --lambda-ce " << ce << " --lambda-kld " << kld;
            if (!args.target_root.empty()) cmd << " --target-root \"" << args.target_root << '"';
            if (!args.config_path.empty()) cmd << " --config \"" << args.config_path << '"';
            if (args.seed_given) cmd << " --seed " << args.seed;
            std::cout << "[sweep] " << cell_name << "\n";
            const int rc = std::system(cmd.str().c_str());
            if (rc != 0) status = "failed";
        }

        nlohmann::json row{{"lambda_ce", ce}, {"lambda_kld", kld}, {"status", status}};
        char line[160];
        if (status != "failed" && fs::exists(best_path)) {
            nlohmann::json best;
            std::ifstream(best_path) >> best;
            const double src = best.value("source_miou", 0.0);
            const double tgt = best.value("target_miou", -1.0);
            row["source_miou"] = src;
            if (tgt >= 0.0) row["target_miou"] = tgt;
            std::snprintf(line, sizeof(line), "%9.2f  %10.2f  %11.2f  %11.2f  %s\n", ce, kld,
                          100.0 * src, tgt >= 0 ? 100.0 * tgt : -1.0, status.c_str());
        } else {
            status = "failed";
            row["status"] = status;
            std::snprintf(line, sizeof(line), "%9.2f  %10.2f  %11s  %11s  %s\n", ce, kld, "-", "-",
                          status.c_str());
        }
        table << line;
        rows.push_back(row);
    }

    std::ofstream(fs::path(args.output_dir) / "sweep_report.json")
        << nlohmann::json{{"cells", rows}}.dump(2) << "\n";
    std::ofstream(fs::path(args.output_dir) / "sweep_report.txt") << table.str();
    std::cout << table.str();
    return 0;
}

// ------------------------------------------------------------------- synth

int cmd_synth(const std::string& out, int n, std::uint64_t seed, int size) {
    auto a = synth_domain_a(Rng::mix(seed, 0xa));
    auto b = synth_domain_b(Rng::mix(seed, 0xb));
    a.height = a.width = size;
    b.height = b.width = size;

    const auto da = generate_synthetic_domain(a, n, Domain::source, "cracks_a");
    write_dataset_tree(da, fs::path(out) / "domain_a", "cracks_a");
    const auto db = generate_synthetic_domain(b, n, Domain::target, "cracks_b");
    write_dataset_tree(db, fs::path(out) / "domain_b", "cracks_b");

    double fa = 0.0, fb = 0.0;
    for (const double f : da.crack_fractions) fa += f;
    for (const double f : db.crack_fractions) fb += f;
    std::cout << "domain_a: " << n << " images, mean crack " << 100.0 * fa / n << "%\n"
              << "domain_b: " << n << " images, mean crack " << 100.0 * fb / n << "%\n"
              << "trees: " << (fs::path(out) / "domain_a").string() << ", "
              << (fs::path(out) / "domain_b").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig cfg;
    try {
        cfg = preload_config(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    CLI::App app{"adaptseg: two-step incremental unsupervised domain adaptation "
                 "for binary crack segmentation"};
    app.require_subcommand(1);
    std::string config_path;

    auto* prepare =
        app.add_subcommand("prepare", "Scan a dataset tree and write a 4:1 split manifest");
    std::string p_root = cfg.data.root, p_exclude = cfg.data.excluded, p_out = "prepared";
    std::uint64_t p_seed = cfg.train.seed;
    prepare->add_option("--root", p_root, "dataset tree root")->envname("ADAPTSEG_DATA_ROOT");
    prepare->add_option("--exclude", p_exclude, "sub-dataset routed to the target domain");
    prepare->add_option("--seed", p_seed, "shuffle seed");
    prepare->add_option("--output-dir", p_out, "where the manifest and summary go");
    prepare->add_option("--config", config_path, "run config file");

    auto* train = app.add_subcommand("train", "Run step-1 or step-2 training");
    TrainArgs t;
    t.output_dir = cfg.io.output_dir;
    train->add_option("--step", t.step, "1 or 2")->required()->check(CLI::Range(1, 2));
    train->add_option("--manifest", t.manifest, "split manifest from prepare")->required();
    train->add_option("--root", t.root, "source dataset root")->envname("ADAPTSEG_DATA_ROOT");
    train->add_option("--target-root", t.target_root, "external target dataset root");
    train->add_option("--from-checkpoint", t.from_checkpoint, "step-1 checkpoint (step 2 only)");
    train->add_option("--output-dir", t.output_dir, "checkpoints and logs directory");
    train->add_option("--input-size", t.input_size, "square input resolution");
    train->add_option("--epochs", cfg.train.step1_epochs, "step-1 epochs");
    train->add_option("--step2-epochs", cfg.train.step2_total_epochs, "step-2 total epochs");
    train->add_option("--seg-epochs", cfg.train.seg_epochs_per_cycle,
                      "m: segmentation epochs per cycle");
    train->add_option("--adv-epochs", cfg.train.adv_epochs_per_cycle,
                      "n: adversarial epochs per cycle");
    train->add_option("--lr", cfg.train.lr, "learning rate");
    train->add_option("--batch-size", cfg.train.batch_size, "mini-batch size");
    train->add_option("--lambda-ce", cfg.train.loss_weights.lambda_ce, "cross-entropy weight");
    train->add_option("--lambda-kld", cfg.train.loss_weights.lambda_kld, "KL-divergence weight");
    train->add_option("--gamma", cfg.train.grl_gamma, "GRL schedule gain");
    train->add_option("--seed", cfg.train.seed, "run seed");
    train->add_flag("--routing-check,!--no-routing-check", cfg.train.routing_check_each_cycle,
                    "verify gradient routing each cycle");
    train->add_option("--config", config_path, "run config file");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints and render report tables");
    EvalArgs e;
    eval_cmd->add_option("--layout", e.layout, "table2 | table3 | table4");
    eval_cmd->add_option("--step1-checkpoint", e.step1_checkpoint, "step-1 checkpoint");
    eval_cmd->add_option("--step2-checkpoint", e.step2_checkpoint, "step-2 checkpoint");
    eval_cmd->add_option("--manifest", e.manifest, "split manifest");
    eval_cmd->add_option("--root", e.root, "source dataset root")->envname("ADAPTSEG_DATA_ROOT");
    eval_cmd->add_option("--target-root", e.target_root, "external target dataset root");
    eval_cmd->add_option("--row-label", e.row_label, "row label (table2)");
    eval_cmd->add_option("--output-dir", e.output_dir, "report directory");
    eval_cmd->add_option("--batch-size", e.batch_size, "evaluation batch size");
    eval_cmd->add_option("--config", config_path, "run config file");

    auto* sweep =
        app.add_subcommand("sweep", "Grid of step-2 runs over (lambda_ce, lambda_kld)");
    SweepArgs s;
    sweep->add_option("--manifest", s.manifest, "split manifest")->required();
    sweep->add_option("--root", s.root, "source dataset root")->envname("ADAPTSEG_DATA_ROOT");
    sweep->add_option("--target-root", s.target_root, "external target dataset root");
    sweep->add_option("--from-checkpoint", s.from_checkpoint, "step-1 checkpoint")->required();
    sweep->add_option("--output-dir", s.output_dir, "sweep output directory");
    sweep->add_option("--lambda-ce-grid", s.ce_grid, "explicit lambda_ce values")->delimiter(',');
    sweep->add_option("--lambda-kld-grid", s.kld_grid, "explicit lambda_kld values")->delimiter(',');
    auto* sweep_seed = sweep->add_option("--seed", s.seed, "seed forwarded to every cell");
    sweep->add_option("--config", s.config_path, "run config forwarded to every cell");

    auto* synth = app.add_subcommand("synth", "Generate the two synthetic crack domains");
    std::string sy_out = "synth";
    int sy_n = 64, sy_size = 256;
    std::uint64_t sy_seed = 0;
    synth->add_option("--out,--output-dir", sy_out, "output directory");
    synth->add_option("--n", sy_n, "images per domain")->required()->check(CLI::PositiveNumber);
    synth->add_option("--seed", sy_seed, "generator seed");
    synth->add_option("--size", sy_size, "square image size")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& help) {
        return app.exit(help);
    } catch (const CLI::ParseError& parse_error) {
        app.exit(parse_error);
        return 2;
    }

    try {
        if (app.got_subcommand(prepare)) return cmd_prepare(p_root, p_exclude, p_seed, p_out);
        if (app.got_subcommand(train)) return cmd_train(cfg, t);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(e);
        if (app.got_subcommand(sweep)) {
            s.seed_given = sweep_seed->count() > 0;
            return cmd_sweep(s, self_path(argv[0]));
        }
        if (app.got_subcommand(synth)) return cmd_synth(sy_out, sy_n, sy_seed, sy_size);
    } catch (const ConfigError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const IngestError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
