#pragma once

// Minimal reader for the TOML-style configuration files used by the workbench:
//
//   # comment
//   [section.sub]
//   key = value        # trailing comment
//   name = "quoted string"
//
// Values are kept as strings and converted on access. Sections and keys keep
// the line they were defined on so error messages can point at the file.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "droopid/errors.hpp"

namespace droopid {

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

inline std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') {
        s.remove_prefix(1);
    }
    double value = 0.0;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end || s.empty()) {
        return std::nullopt;
    }
    return value;
}

inline std::optional<long long> parse_int(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') {
        s.remove_prefix(1);
    }
    long long value = 0;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end || s.empty()) {
        return std::nullopt;
    }
    return value;
}

}  // namespace detail

struct ConfigValue {
    std::string text;
    int line = 0;
};

class ConfigSection {
public:
    ConfigSection() = default;
    ConfigSection(std::string name, int line) : name_(std::move(name)), line_(line) {}

    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] int line() const noexcept { return line_; }
    [[nodiscard]] const std::map<std::string, ConfigValue>& values() const noexcept { return values_; }

    [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, ConfigValue value) { values_[key] = std::move(value); }

    [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second.text;
    }

    [[nodiscard]] double get_double(const std::string& key) const {
        const auto& v = require(key);
        const auto parsed = detail::parse_double(v.text);
        if (!parsed) {
            throw ConfigError(where(v) + "expected a number for '" + key + "', got '" + v.text + "'");
        }
        return *parsed;
    }

    [[nodiscard]] double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    [[nodiscard]] long long get_int(const std::string& key) const {
        const auto& v = require(key);
        const auto parsed = detail::parse_int(v.text);
        if (!parsed) {
            throw ConfigError(where(v) + "expected an integer for '" + key + "', got '" + v.text + "'");
        }
        return *parsed;
    }

    [[nodiscard]] long long get_int(const std::string& key, long long fallback) const {
        return has(key) ? get_int(key) : fallback;
    }

    [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const auto& v = require(key);
        if (v.text == "true") return true;
        if (v.text == "false") return false;
        throw ConfigError(where(v) + "expected true or false for '" + key + "', got '" + v.text + "'");
    }

    [[nodiscard]] const ConfigValue& require(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) {
            throw ConfigError("line " + std::to_string(line_) + ": section [" + name_ + "] is missing key '" +
                              key + "'");
        }
        return it->second;
    }

private:
    [[nodiscard]] static std::string where(const ConfigValue& v) { return "line " + std::to_string(v.line) + ": "; }

    std::string name_;
    int line_ = 0;
    std::map<std::string, ConfigValue> values_;
};

class ConfigFile {
public:
    /// Keys before the first section header land in the unnamed section "".
    static ConfigFile parse(std::istream& in) {
        ConfigFile file;
        std::string current;
        file.sections_[current] = ConfigSection(current, 0);
        std::string raw;
        int line_no = 0;
        while (std::getline(in, raw)) {
            ++line_no;
            std::string_view line = strip_comment(raw);
            line = detail::trim(line);
            if (line.empty()) {
                continue;
            }
            if (line.front() == '[') {
                if (line.back() != ']' || line.size() < 3) {
                    throw ConfigError("line " + std::to_string(line_no) + ": malformed section header '" +
                                      std::string(line) + "'");
                }
                current = std::string(detail::trim(line.substr(1, line.size() - 2)));
                if (file.sections_.count(current) != 0 && !current.empty()) {
                    throw ConfigError("line " + std::to_string(line_no) + ": duplicate section [" + current + "]");
                }
                file.sections_[current] = ConfigSection(current, line_no);
                file.order_.push_back(current);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                                  std::string(line) + "'");
            }
            const std::string key(detail::trim(line.substr(0, eq)));
            std::string_view value = detail::trim(line.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError("line " + std::to_string(line_no) + ": empty key");
            }
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
                value = value.substr(1, value.size() - 2);
            }
            auto& section = file.sections_[current];
            if (section.has(key)) {
                throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
            }
            section.set(key, ConfigValue{std::string(value), line_no});
        }
        return file;
    }

    static ConfigFile parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw ConfigError("cannot open config file '" + path + "'");
        }
        try {
            return parse(in);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ": " + e.what());
        }
    }

    [[nodiscard]] bool has(const std::string& section) const { return sections_.count(section) != 0; }

    [[nodiscard]] const ConfigSection& section(const std::string& name) const {
        const auto it = sections_.find(name);
        if (it == sections_.end()) {
            throw ConfigError("missing section [" + name + "]");
        }
        return it->second;
    }

    /// Section or an empty placeholder, for optional sections.
    [[nodiscard]] ConfigSection section_or_empty(const std::string& name) const {
        const auto it = sections_.find(name);
        return it == sections_.end() ? ConfigSection(name, 0) : it->second;
    }

    /// Named sections in file order.
    [[nodiscard]] const std::vector<std::string>& section_names() const noexcept { return order_; }

private:
    static std::string_view strip_comment(std::string_view line) {
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') {
                quoted = !quoted;
            } else if (line[i] == '#' && !quoted) {
                return line.substr(0, i);
            }
        }
        return line;
    }

    std::map<std::string, ConfigSection> sections_;
    std::vector<std::string> order_;
};

}  // namespace droopid
