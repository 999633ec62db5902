#pragma once

#include <map>
#include <stdexcept>
#include <string>

namespace treeqn {

struct MissingKeyError : std::runtime_error {
    explicit MissingKeyError(const std::string& key)
        : std::runtime_error("missing config key: " + key), key(key) {}
    std::string key;
};

// Flat "key = value" config files: one key per line, '#' starts a comment.
// Serialization is canonical (sorted keys) so snapshots are byte-stable.
class FlatConfig {
public:
    static FlatConfig from_file(const std::string& path);
    static FlatConfig from_string(const std::string& text);

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::string& get_str(const std::string& key) const;
    double get_double(const std::string& key) const;
    long long get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return values_; }
    std::string serialize() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace treeqn
