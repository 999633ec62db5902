#include "treeqn/config.hpp"

#include <fstream>
#include <sstream>

namespace treeqn {

namespace {
std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}
}  // namespace

FlatConfig FlatConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str());
}

FlatConfig FlatConfig::from_string(const std::string& text) {
    FlatConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        cfg.values_[key] = value;
    }
    return cfg;
}

const std::string& FlatConfig::get_str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw MissingKeyError(key);
    return it->second;
}

double FlatConfig::get_double(const std::string& key) const {
    const std::string& s = get_str(key);
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw std::runtime_error("config key " + key + ": '" + s + "' is not a number");
    }
    if (pos != s.size()) throw std::runtime_error("config key " + key + ": '" + s + "' is not a number");
    return v;
}

long long FlatConfig::get_int(const std::string& key) const {
    const std::string& s = get_str(key);
    std::size_t pos = 0;
    long long v = 0;
    bool ok = true;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        ok = false;
    }
    if (!ok || pos != s.size()) {
        // Accept scientific notation for counts (4e5 and friends).
        const double d = get_double(key);
        v = static_cast<long long>(d);
        if (static_cast<double>(v) != d)
            throw std::runtime_error("config key " + key + ": '" + s + "' is not an integer");
    }
    return v;
}

bool FlatConfig::get_bool(const std::string& key) const {
    const std::string& s = get_str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::runtime_error("config key " + key + ": '" + s + "' is not a boolean");
}

std::string FlatConfig::serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

}  // namespace treeqn
