#pragma once

#include "core.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

namespace aomisreg {

struct RunConfig {
    int d_sub = 40;
    double obscuration = 0.14;
    double pitch_m = 0.2;
    double tau_s = 1e-3;
    double g_int = 0.5;
    double g_leak = 0.0;
    int n_mod = 500;
    double clip = 1.0;
    std::uint64_t seed = 1;

    LoopConfig loop() const {
        LoopConfig c;
        c.tau_wfs = c.tau_lat = c.tau_dm = c.tau_rtc = tau_s;
        c.g_int = g_int;
        c.g_leak = g_leak;
        c.n_mod = n_mod;
        c.clip = clip;
        return c;
    }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view v, std::string_view key, int line) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError("line " + std::to_string(line) + ": bad value for '" +
                          std::string(key) + "'");
    return out;
}

}  // namespace detail

// `key = value` lines, '#' starts a comment, unknown keys rejected.
inline RunConfig parse_config(std::istream& in) {
    RunConfig c;
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string_view s = raw;
        if (auto h = s.find('#'); h != std::string_view::npos) s = s.substr(0, h);
        s = detail::trim(s);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("line " + std::to_string(line) + ": expected key = value");
        const auto key = detail::trim(s.substr(0, eq));
        const auto val = detail::trim(s.substr(eq + 1));
        using detail::parse_number;
        if (key == "d_sub") c.d_sub = parse_number<int>(val, key, line);
        else if (key == "obscuration") c.obscuration = parse_number<double>(val, key, line);
        else if (key == "pitch_m") c.pitch_m = parse_number<double>(val, key, line);
        else if (key == "tau_s") c.tau_s = parse_number<double>(val, key, line);
        else if (key == "g_int") c.g_int = parse_number<double>(val, key, line);
        else if (key == "g_leak") c.g_leak = parse_number<double>(val, key, line);
        else if (key == "n_mod") c.n_mod = parse_number<int>(val, key, line);
        else if (key == "clip") c.clip = parse_number<double>(val, key, line);
        else if (key == "seed") c.seed = parse_number<std::uint64_t>(val, key, line);
        else
            throw ConfigError("line " + std::to_string(line) + ": unknown key '" +
                              std::string(key) + "'");
    }
    make_annulus_masks(c.d_sub, c.obscuration);
    if (!(c.pitch_m > 0)) throw ConfigError("pitch_m must be positive");
    c.loop().validate(0);
    return c;
}

inline RunConfig parse_config_string(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    return parse_config(in);
}

}  // namespace aomisreg
