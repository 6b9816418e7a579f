#pragma once

// Flat key=value config with a phase.key namespace. Flags override file
// values; the resolved set is dumped next to every run's outputs.

#include <map>
#include <string>

namespace physar {

class KeyValueConfig {
public:
    static KeyValueConfig load(const std::string& path);

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    // Sorted dump; byte-stable for identical contents.
    void dump(const std::string& path) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

// Data root resolution: absolute paths pass through; relative paths resolve
// against PHYSAR_DATA_DIR when set, else the working directory.
std::string resolve_data_path(const std::string& path);

}  // namespace physar
