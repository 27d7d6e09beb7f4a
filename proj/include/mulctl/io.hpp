#pragma once

// Deterministic artifact outputs: CSV tables with full-precision numeric
// cells, FNV-1a content hashing for run-directory names, and JSON files.
// Nothing environment-dependent (timestamps, hostnames, locales) ever enters
// a file, so rerunning the same effective configuration reproduces every
// output byte for byte.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace mulctl::io {

// %.17g round-trips every finite double exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Cell {
    std::variant<std::monostate, double, long long, std::string> v;

    Cell() = default;
    Cell(double d) : v(d) {}
    Cell(int i) : v(static_cast<long long>(i)) {}
    Cell(long i) : v(static_cast<long long>(i)) {}
    Cell(long long i) : v(i) {}
    Cell(const char* s) : v(std::string(s)) {}
    Cell(std::string s) : v(std::move(s)) {}
    Cell(bool) = delete;  // write 0/1 or a word explicitly

    std::string text() const {
        if (std::holds_alternative<std::monostate>(v)) return {};
        if (std::holds_alternative<double>(v)) return format_double(std::get<double>(v));
        if (std::holds_alternative<long long>(v)) return std::to_string(std::get<long long>(v));
        return std::get<std::string>(v);
    }
};

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path, std::ios::binary), cols_(header.size()) {
        if (!out_) throw std::runtime_error("cannot open " + path.string());
        for (std::size_t i = 0; i < header.size(); ++i)
            out_ << (i ? "," : "") << header[i];
        out_ << '\n';
    }

    void row(const std::vector<Cell>& cells) {
        if (cells.size() != cols_)
            throw std::logic_error("csv row width mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i)
            out_ << (i ? "," : "") << cells[i].text();
        out_ << '\n';
    }

private:
    std::ofstream out_;
    std::size_t cols_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a offset basis
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;  // FNV-1a prime
    }
    return h;
}

// First 12 hex digits of the FNV-1a hash: the run-directory tag.
inline std::string hash_tag(std::string_view s) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(s)));
    return std::string(buf, 12);
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text(path, j.dump(2) + "\n");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// Aligned key/value listing of a JSON document for --summary output; nested
// objects flatten to dotted keys, arrays print inline.
inline std::vector<std::pair<std::string, std::string>> flatten_json(
    const nlohmann::json& j, const std::string& prefix = "") {
    std::vector<std::pair<std::string, std::string>> rows;
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) {
            const std::string key = prefix.empty() ? k : prefix + "." + k;
            auto sub = flatten_json(v, key);
            rows.insert(rows.end(), sub.begin(), sub.end());
        }
    } else {
        rows.emplace_back(prefix, j.dump());
    }
    return rows;
}

inline std::string summary_table(const nlohmann::json& j) {
    const auto rows = flatten_json(j);
    std::size_t w = 0;
    for (const auto& [k, v] : rows) w = std::max(w, k.size());
    std::string out;
    for (const auto& [k, v] : rows) {
        out += k;
        out.append(w - k.size() + 2, ' ');
        out += v;
        out += '\n';
    }
    return out;
}

}  // namespace mulctl::io
