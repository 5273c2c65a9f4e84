#ifndef HSRDIFF_CONFIG_HPP
#define HSRDIFF_CONFIG_HPP

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hsrdiff/cdformer.hpp"
#include "hsrdiff/degradation.hpp"
#include "hsrdiff/training.hpp"

namespace hsrdiff {

// Line-oriented `key = value` file with [section] headers; '#' starts a
// comment. Every key must be consumed by the command reading the file.
class config_file {
public:
    static config_file parse(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw io_error("cannot open config: " + path);
        config_file cfg;
        cfg.path_ = path;
        std::string line, section;
        std::int64_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw validation_error(detail::concat(path, ":", line_no,
                                                          ": malformed section header"));
                section = line.substr(1, line.size() - 2);
                trim(section);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw validation_error(detail::concat(path, ":", line_no,
                                                      ": expected `key = value`"));
            std::string key = line.substr(0, eq), value = line.substr(eq + 1);
            trim(key);
            trim(value);
            if (key.empty())
                throw validation_error(detail::concat(path, ":", line_no, ": empty key"));
            const std::string full = section.empty() ? key : section + "." + key;
            if (!cfg.values_.emplace(full, value).second)
                throw validation_error(detail::concat(path, ":", line_no, ": duplicate key ", full));
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end())
            throw validation_error(detail::concat(path_, ": missing required key ", key));
        consumed_.insert(it->first);
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) {
        return has(key) ? get_string(key) : fallback;
    }

    std::int64_t get_int(const std::string& key) { return to_int(key, get_string(key)); }
    std::int64_t get_int(const std::string& key, std::int64_t fallback) {
        return has(key) ? get_int(key) : fallback;
    }

    double get_double(const std::string& key) { return to_double(key, get_string(key)); }
    double get_double(const std::string& key, double fallback) {
        return has(key) ? get_double(key) : fallback;
    }

    // `start:patch` pairs separated by commas, e.g. "0:16, 40:32, 60:64"
    std::vector<std::pair<std::int64_t, std::int64_t>> get_stages(const std::string& key) {
        std::vector<std::pair<std::int64_t, std::int64_t>> out;
        if (!has(key)) return out;
        std::string s = get_string(key);
        std::size_t pos = 0;
        while (pos < s.size()) {
            auto comma = s.find(',', pos);
            if (comma == std::string::npos) comma = s.size();
            std::string item = s.substr(pos, comma - pos);
            trim(item);
            if (!item.empty()) {
                const auto colon = item.find(':');
                if (colon == std::string::npos)
                    throw validation_error(detail::concat(path_, ": stage list entry `", item,
                                                          "` must look like epoch:patch"));
                std::string a = item.substr(0, colon), b = item.substr(colon + 1);
                trim(a);
                trim(b);
                out.emplace_back(to_int(key, a), to_int(key, b));
            }
            pos = comma + 1;
        }
        return out;
    }

    // all keys parsed must have been read by now
    void reject_unknown() const {
        for (const auto& [key, value] : values_)
            if (!consumed_.count(key))
                throw validation_error(detail::concat(path_, ": unknown key ", key));
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    static void trim(std::string& s) {
        const auto notspace = [](unsigned char c) { return !std::isspace(c); };
        s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
        s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
    }

    std::int64_t to_int(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            const long long parsed = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return parsed;
        } catch (const std::exception&) {
            throw validation_error(detail::concat(path_, ": key ", key,
                                                  " expects an integer, got `", v, "`"));
        }
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            const double parsed = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return parsed;
        } catch (const std::exception&) {
            throw validation_error(detail::concat(path_, ": key ", key,
                                                  " expects a number, got `", v, "`"));
        }
    }

    std::string path_;
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

// Everything a run needs, assembled from one config file.
struct run_config {
    scene_config scene;
    std::int64_t factor = 4;
    double kernel_sigma = 0;  // 0 = factor/2
    std::int64_t msi_bands = 3;
    model_config model;
    train_config train;
    std::int64_t schedule_T = 2000;
    double beta_start = 1e-6, beta_end = 1e-2;
    refine_variance variance = refine_variance::eq6;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    std::string data_dir = ".";
    std::string checkpoint_path = "model.ckpt";
    std::string log_path = "train.log";

    spatial_degradation make_degradation() const {
        return spatial_degradation::make(factor, kernel_sigma);
    }

    noise_schedule make_schedule() const {
        return build_training_schedule(schedule_T, beta_start, beta_end);
    }
};

inline run_config load_run_config(const std::string& path) {
    auto f = config_file::parse(path);
    run_config rc;

    rc.seed = static_cast<std::uint64_t>(f.get_int("run.seed", 0));

    rc.scene.endmembers = f.get_int("scene.endmembers", 4);
    rc.scene.bands = f.get_int("scene.bands", 16);
    rc.scene.height = f.get_int("scene.height", 64);
    rc.scene.width = f.get_int("scene.width", 64);
    rc.scene.smoothness = f.get_double("scene.smoothness", 8.0);
    rc.msi_bands = f.get_int("scene.msi_bands", 3);

    rc.factor = f.get_int("degradation.factor", 4);
    rc.kernel_sigma = f.get_double("degradation.kernel_sigma", 0.0);

    rc.model.channels = f.get_int("model.channels", 32);
    rc.model.n_layers = f.get_int("model.layers", 4);
    rc.model.heads = f.get_int("model.heads", 4);
    rc.model.window = f.get_int("model.window", 8);
    rc.model.ffn_expand = f.get_int("model.ffn_expand", 2);
    rc.model.nle_scale = f.get_double("model.nle_scale", 5000.0);
    const std::string anchor = f.get_string("model.residual", "upsampled_y");
    if (anchor == "zt") {
        rc.model.residual_zt = true;
    } else if (anchor != "upsampled_y") {
        throw validation_error("model.residual must be `upsampled_y` or `zt`");
    }

    rc.schedule_T = f.get_int("schedule.T", 2000);
    rc.beta_start = f.get_double("schedule.beta_start", 1e-6);
    rc.beta_end = f.get_double("schedule.beta_end", 1e-2);
    const std::string var = f.get_string("schedule.variance", "eq6");
    if (var == "posterior") {
        rc.variance = refine_variance::posterior;
    } else if (var != "eq6") {
        throw validation_error("schedule.variance must be `eq6` or `posterior`");
    }

    rc.train.lr = f.get_double("train.lr", 1e-4);
    rc.train.beta1 = f.get_double("train.beta1", 0.9);
    rc.train.beta2 = f.get_double("train.beta2", 0.999);
    rc.train.adam_eps = f.get_double("train.adam_eps", 1e-8);
    rc.train.clip_norm = f.get_double("train.clip_norm", 1.0);
    rc.train.batch_size = f.get_int("train.batch_size", 1);
    rc.train.epochs = f.get_int("train.epochs", 1);
    rc.train.steps_per_epoch = f.get_int("train.steps_per_epoch", 50);
    rc.train.stages = f.get_stages("train.stages");
    rc.train.full_res_epoch = f.get_int("train.full_res_epoch", -1);
    rc.train.checkpoint_every = f.get_int("train.checkpoint_every", 0);
    rc.train.seed = rc.seed;

    rc.out_dir = f.get_string("io.out_dir", ".");
    rc.data_dir = f.get_string("io.data_dir", ".");
    rc.checkpoint_path = f.get_string("io.checkpoint", "model.ckpt");
    rc.log_path = f.get_string("io.log", "train.log");

    f.reject_unknown();
    return rc;
}

// Cross-field checks shared by generate and train; fails before any compute.
inline void validate_run_config(const run_config& rc, bool for_training,
                                std::int64_t scene_h, std::int64_t scene_w) {
    rc.scene.validate();
    if (rc.factor < 2) throw validation_error("degradation.factor must be >= 2");
    if (rc.msi_bands < 1 || rc.msi_bands >= rc.scene.bands)
        throw validation_error("scene.msi_bands must satisfy 0 < b < bands");
    if (scene_h % rc.factor != 0 || scene_w % rc.factor != 0)
        throw validation_error(detail::concat("scene ", scene_h, "x", scene_w,
                                              " is not divisible by factor ", rc.factor));
    if (!for_training) return;

    rc.model.validate();
    rc.train.validate();
    if (rc.schedule_T < 1) throw validation_error("schedule.T must be >= 1");
    std::int64_t min_patch = std::min(scene_h, scene_w);
    for (const auto& [start, patch] : rc.train.stages) {
        if (patch % rc.factor != 0)
            throw validation_error(detail::concat("stage patch ", patch,
                                                  " is not divisible by factor ", rc.factor));
        if (patch > std::min(scene_h, scene_w))
            throw validation_error(detail::concat("stage patch ", patch, " exceeds the scene"));
        min_patch = std::min(min_patch, patch);
    }
    if (rc.model.window > min_patch)
        throw validation_error(detail::concat("attention window ", rc.model.window,
                                              " exceeds the smallest training patch ", min_patch));
}

}  // namespace hsrdiff

#endif  // HSRDIFF_CONFIG_HPP
