#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mpmnet/error.hpp"

namespace mpmnet::cfg {

// Flat `key = value` text; '#' starts a comment; later keys win.
class Config {
public:
    static Config from_file(const std::string& path);
    static Config from_text(const std::string& text);

    // "key=value" strings, e.g. from CLI flags.
    void apply_overrides(const std::vector<std::string>& overrides);
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    std::string str(const std::string& key, const std::string& def) const;
    std::string require(const std::string& key) const;
    double num(const std::string& key, double def) const;
    std::int64_t integer(const std::string& key, std::int64_t def) const;
    bool flag(const std::string& key, bool def) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace mpmnet::cfg
