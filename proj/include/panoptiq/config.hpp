#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace panoptiq {

// Flat `key = value` configuration with `#` comments. Numeric values accept
// "pi" / "-pi"; lists are comma separated (`grid = 48,36,8`).
class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path);
    static Config from_string(const std::string& text);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, int value);
    void set(const std::string& key, bool value);

    std::string get_str(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    std::vector<double> get_list(const std::string& key,
                                 const std::vector<double>& fallback) const;

    // Canonical text form: sorted keys, one per line. Used for hashing and
    // checkpoint sidecars.
    std::string canonical() const;
    std::uint64_t hash() const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

    // Parses a scalar that may be "pi"-valued.
    static double parse_number(const std::string& token);

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace panoptiq
