#include "afnet/config.hpp"

#include <fstream>
#include <sstream>

namespace afnet {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (...) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const int d = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (...) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

}  // namespace

bool apply_train_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "learning_rate") cfg.learning_rate = parse_double(value, key);
    else if (key == "beta1") cfg.beta1 = parse_double(value, key);
    else if (key == "beta2") cfg.beta2 = parse_double(value, key);
    else if (key == "epochs") cfg.epochs = parse_int(value, key);
    else if (key == "batch_size") cfg.batch_size = parse_int(value, key);
    else return false;
    return true;
}

std::vector<std::pair<std::string, std::string>> train_config_echo(const TrainConfig& cfg) {
    char buf[48];
    std::vector<std::pair<std::string, std::string>> kv;
    std::snprintf(buf, sizeof buf, "%.17g", cfg.learning_rate);
    kv.emplace_back("learning_rate", buf);
    std::snprintf(buf, sizeof buf, "%.17g", cfg.beta1);
    kv.emplace_back("beta1", buf);
    std::snprintf(buf, sizeof buf, "%.17g", cfg.beta2);
    kv.emplace_back("beta2", buf);
    kv.emplace_back("epochs", std::to_string(cfg.epochs));
    kv.emplace_back("batch_size", std::to_string(cfg.batch_size));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    return kv;
}

LoadedConfig parse_config_text(const std::string& text, const std::string& origin) {
    LoadedConfig out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + " line " + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + " line " + std::to_string(lineno) + ": empty key");
        try {
            bool known = apply_model_config_kv(out.model, key, value);
            if (key == "seed") out.train.seed = out.model.seed;
            if (!known) known = apply_train_config_kv(out.train, key, value);
            if (!known)
                throw ConfigError("unknown key '" + key + "'");
        } catch (const ConfigError& e) {
            throw ConfigError(origin + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

LoadedConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("load_config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str(), path);
}

}  // namespace afnet
