#include "adaptseg/run_config.hpp"

#include <fstream>
#include <sstream>

namespace adaptseg {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (const int x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
    return out;
}

std::vector<int> parse_ints(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigError("bad integer list for " + key + ": " + s);
        }
    }
    return out;
}

bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("bad boolean for " + key + ": " + s);
}

}  // namespace

std::string RunConfig::to_ini() const {
    std::ostringstream out;
    out << "[data]\n";
    out << "root = " << data.root << "\n";
    out << "target_root = " << data.target_root << "\n";
    out << "excluded = " << data.excluded << "\n";
    out << "input_height = " << data.input_height << "\n";
    out << "input_width = " << data.input_width << "\n";
    out << "\n[train]\n";
    out << "lr = " << train.lr << "\n";
    out << "batch_size = " << train.batch_size << "\n";
    out << "beta1 = " << train.beta1 << "\n";
    out << "beta2 = " << train.beta2 << "\n";
    out << "step1_epochs = " << train.step1_epochs << "\n";
    out << "step2_epochs = " << train.step2_total_epochs << "\n";
    out << "seg_epochs = " << train.seg_epochs_per_cycle << "\n";
    out << "adv_epochs = " << train.adv_epochs_per_cycle << "\n";
    out << "lambda_ce = " << train.loss_weights.lambda_ce << "\n";
    out << "lambda_kld = " << train.loss_weights.lambda_kld << "\n";
    out << "gamma = " << train.grl_gamma << "\n";
    out << "seed = " << train.seed << "\n";
    out << "routing_check = " << (train.routing_check_each_cycle ? "true" : "false") << "\n";
    out << "\n[model]\n";
    out << "encoder_widths = " << join_ints(model.encoder_widths) << "\n";
    out << "encoder_units = " << join_ints(model.encoder_units) << "\n";
    out << "decoder_units = " << join_ints(model.decoder_units) << "\n";
    out << "discriminator_widths = " << join_ints(model.discriminator_widths) << "\n";
    out << "discriminator_leaky_slope = " << model.discriminator_leaky_slope << "\n";
    out << "adapt_downsamplers = " << (model.adapt_downsamplers ? "true" : "false") << "\n";
    out << "\n[io]\n";
    out << "output_dir = " << io.output_dir << "\n";
    return out.str();
}

RunConfig RunConfig::from_ini(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            if (section != "data" && section != "train" && section != "model" && section != "io") {
                throw ConfigError("unknown config section [" + section + "] at line " +
                                  std::to_string(lineno));
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key = value at config line " + std::to_string(lineno));
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        const auto full = section + "." + key;

        try {
            if (full == "data.root") cfg.data.root = value;
            else if (full == "data.target_root") cfg.data.target_root = value;
            else if (full == "data.excluded") cfg.data.excluded = value;
            else if (full == "data.input_height") cfg.data.input_height = std::stoi(value);
            else if (full == "data.input_width") cfg.data.input_width = std::stoi(value);
            else if (full == "train.lr") cfg.train.lr = std::stod(value);
            else if (full == "train.batch_size") cfg.train.batch_size = std::stoi(value);
            else if (full == "train.beta1") cfg.train.beta1 = std::stod(value);
            else if (full == "train.beta2") cfg.train.beta2 = std::stod(value);
            else if (full == "train.step1_epochs") cfg.train.step1_epochs = std::stoi(value);
            else if (full == "train.step2_epochs") cfg.train.step2_total_epochs = std::stoi(value);
            else if (full == "train.seg_epochs") cfg.train.seg_epochs_per_cycle = std::stoi(value);
            else if (full == "train.adv_epochs") cfg.train.adv_epochs_per_cycle = std::stoi(value);
            else if (full == "train.lambda_ce") cfg.train.loss_weights.lambda_ce = std::stod(value);
            else if (full == "train.lambda_kld") cfg.train.loss_weights.lambda_kld = std::stod(value);
            else if (full == "train.gamma") cfg.train.grl_gamma = std::stod(value);
            else if (full == "train.seed") cfg.train.seed = std::stoull(value);
            else if (full == "train.routing_check") cfg.train.routing_check_each_cycle = parse_bool(value, full);
            else if (full == "model.encoder_widths") cfg.model.encoder_widths = parse_ints(value, full);
            else if (full == "model.encoder_units") cfg.model.encoder_units = parse_ints(value, full);
            else if (full == "model.decoder_units") cfg.model.decoder_units = parse_ints(value, full);
            else if (full == "model.discriminator_widths") cfg.model.discriminator_widths = parse_ints(value, full);
            else if (full == "model.discriminator_leaky_slope") cfg.model.discriminator_leaky_slope = std::stod(value);
            else if (full == "model.adapt_downsamplers") cfg.model.adapt_downsamplers = parse_bool(value, full);
            else if (full == "io.output_dir") cfg.io.output_dir = value;
            else throw ConfigError("unknown config key '" + full + "' at line " + std::to_string(lineno));
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("bad value for " + full + " at line " + std::to_string(lineno) + ": " + value);
        }
    }
    return cfg;
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config: " + path.string());
    out << to_ini();
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_ini(buf.str());
}

bool RunConfig::operator==(const RunConfig& other) const {
    return data == other.data && train == other.train && model == other.model && io == other.io;
}

}  // namespace adaptseg
