#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlshield {

// Flat key-value configuration with INI-style [section] headers; keys are
// stored as "section.key". '#' and ';' start comments.
class Config {
  public:
    Config() = default;

    static Config parse(std::istream& in) {
        Config cfg;
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw std::runtime_error("config line " + std::to_string(lineno) +
                                             ": malformed section header");
                section = strip(s.substr(1, s.size() - 2));
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config line " + std::to_string(lineno) +
                                         ": expected key = value");
            std::string key = strip(s.substr(0, eq));
            std::string val = strip(s.substr(eq + 1));
            if (auto hash = val.find('#'); hash != std::string::npos) val = strip(val.substr(0, hash));
            cfg.values_[section.empty() ? key : section + "." + key] = val;
        }
        return cfg;
    }

    static Config load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open config file: " + path);
        return parse(f);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    std::string require_str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::runtime_error("missing config key: " + key);
        return it->second;
    }

    long get_int(const std::string& key, long dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        return parse_num<long>(key, it->second);
    }

    double get_float(const std::string& key, double dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        return parse_num<double>(key, it->second);
    }

    bool get_bool(const std::string& key, bool dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
        if (it->second == "false" || it->second == "0" || it->second == "no") return false;
        throw std::runtime_error("config key " + key + ": expected a boolean, got '" + it->second + "'");
    }

    std::vector<double> get_list(const std::string& key, std::vector<double> dflt = {}) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        std::vector<double> out;
        std::stringstream ss(it->second);
        std::string item;
        while (std::getline(ss, item, ',')) {
            std::string t = strip(item);
            if (!t.empty()) out.push_back(parse_num<double>(key, t));
        }
        return out;
    }

    const std::map<std::string, std::string>& items() const { return values_; }

  private:
    static std::string strip(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        std::size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    template <typename T>
    static T parse_num(const std::string& key, const std::string& v) {
        std::stringstream ss(v);
        T out;
        if (!(ss >> out) || !(ss >> std::ws).eof())
            throw std::runtime_error("config key " + key + ": bad number '" + v + "'");
        return out;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace tlshield
