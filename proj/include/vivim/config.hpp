#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vivim/common.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Training configuration. File format is flat `key = value` lines with `#`
// comments; every key is also a CLI flag and the CLI wins on conflicts.
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch = 4;  // clips per optimizer step
    std::size_t frames = 5;
    std::size_t size = 64;  // square frames
    std::size_t train_clips = 200;
    std::size_t eval_clips = 50;
    double lr_start = 3e-3;
    double lr_end = 3e-4;
    double difficulty = 0.5;
    double lambda1 = 0.3;  // affine constraint weight
    double lambda2 = 0.3;  // boundary cross-entropy weight
    bool scan_tf = true;
    bool scan_tb = true;
    bool scan_sp = true;
    bool bac = true;  // boundary-aware constraint (head + both extra losses)
    std::uint64_t seed = 1;
    std::string affine_ckpt;  // pretrained estimator; empty = pretrain in place

    void validate() const {
        if (epochs == 0 || batch == 0 || frames == 0) throw Error("config: counts must be positive");
        if (size == 0 || size % 32 != 0) throw Error("config: size must be a positive multiple of 32");
        if (train_clips < batch) throw Error("config: train_clips must cover one batch");
        if (eval_clips == 0) throw Error("config: eval_clips must be positive");
        if (!(lr_end > 0.0) || !(lr_start >= lr_end))
            throw Error("config: need lr_start >= lr_end > 0");
        if (difficulty < 0.0 || difficulty > 1.0) throw Error("config: difficulty must lie in [0, 1]");
        if (lambda1 < 0.0 || lambda2 < 0.0) throw Error("config: loss weights must be nonnegative");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw FormatError(str_cat("config: bad boolean for ", key, ": '", v, "'"));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    T out{};
    in >> out;
    if (in.fail() || !in.eof())
        throw FormatError(str_cat("config: bad value for ", key, ": '", v, "'"));
    return out;
}

}  // namespace detail

// Key/value pairs in file order; malformed lines are errors, unknown keys
// are left to the applier so it can name them.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError(str_cat("config line ", lineno, ": expected key = value"));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw FormatError(str_cat("config line ", lineno, ": empty key"));
        out.emplace_back(key, val);
    }
    return out;
}

inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& val) {
    if (key == "epochs") cfg.epochs = detail::parse_number<std::size_t>(key, val);
    else if (key == "batch") cfg.batch = detail::parse_number<std::size_t>(key, val);
    else if (key == "frames") cfg.frames = detail::parse_number<std::size_t>(key, val);
    else if (key == "size") cfg.size = detail::parse_number<std::size_t>(key, val);
    else if (key == "train_clips") cfg.train_clips = detail::parse_number<std::size_t>(key, val);
    else if (key == "eval_clips") cfg.eval_clips = detail::parse_number<std::size_t>(key, val);
    else if (key == "lr_start") cfg.lr_start = detail::parse_number<double>(key, val);
    else if (key == "lr_end") cfg.lr_end = detail::parse_number<double>(key, val);
    else if (key == "difficulty") cfg.difficulty = detail::parse_number<double>(key, val);
    else if (key == "lambda1") cfg.lambda1 = detail::parse_number<double>(key, val);
    else if (key == "lambda2") cfg.lambda2 = detail::parse_number<double>(key, val);
    else if (key == "scan_tf") cfg.scan_tf = detail::parse_bool(key, val);
    else if (key == "scan_tb") cfg.scan_tb = detail::parse_bool(key, val);
    else if (key == "scan_sp") cfg.scan_sp = detail::parse_bool(key, val);
    else if (key == "bac") cfg.bac = detail::parse_bool(key, val);
    else if (key == "seed") cfg.seed = detail::parse_number<std::uint64_t>(key, val);
    else if (key == "affine_ckpt") cfg.affine_ckpt = val;
    else throw FormatError(str_cat("config: unknown key '", key, "'"));
}

inline TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    for (const auto& [key, val] : parse_config_text(text)) apply_config_entry(cfg, key, val);
    cfg.validate();
    return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(str_cat("config: cannot open ", path.string()));
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_train_config(buf.str());
}

inline std::string config_to_text(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "epochs = " << cfg.epochs << "\n";
    out << "batch = " << cfg.batch << "\n";
    out << "frames = " << cfg.frames << "\n";
    out << "size = " << cfg.size << "\n";
    out << "train_clips = " << cfg.train_clips << "\n";
    out << "eval_clips = " << cfg.eval_clips << "\n";
    out << "lr_start = " << cfg.lr_start << "\n";
    out << "lr_end = " << cfg.lr_end << "\n";
    out << "difficulty = " << cfg.difficulty << "\n";
    out << "lambda1 = " << cfg.lambda1 << "\n";
    out << "lambda2 = " << cfg.lambda2 << "\n";
    out << "scan_tf = " << (cfg.scan_tf ? "true" : "false") << "\n";
    out << "scan_tb = " << (cfg.scan_tb ? "true" : "false") << "\n";
    out << "scan_sp = " << (cfg.scan_sp ? "true" : "false") << "\n";
    out << "bac = " << (cfg.bac ? "true" : "false") << "\n";
    out << "seed = " << cfg.seed << "\n";
    if (!cfg.affine_ckpt.empty()) out << "affine_ckpt = " << cfg.affine_ckpt << "\n";
    return out.str();
}

}  // namespace vivim
