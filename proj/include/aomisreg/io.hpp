#pragma once

#include "core.hpp"
#include "loop.hpp"
#include "optics.hpp"
#include "turbulence.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace aomisreg {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated file");
    return v;
}

inline void put_magic(std::ostream& os, const char (&m)[5], std::uint32_t version) {
    os.write(m, 4);
    put<std::uint32_t>(os, version);
}

inline std::uint32_t expect_magic(std::istream& is, const char (&m)[5]) {
    char got[4];
    if (!is.read(got, 4)) throw IoError("truncated file");
    if (std::memcmp(got, m, 4) != 0) throw IoError(std::string("bad magic, expected ") + m);
    return get<std::uint32_t>(is);
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read " + p.string());
    return is;
}

}  // namespace detail

// ---------------------------------------------------------------- AOIM

inline void write_im(std::ostream& os, const InteractionMatrix& im) {
    const int d = im.d_sub, d2 = d * d;
    detail::put_magic(os, "AOIM", 1);
    detail::put<std::uint32_t>(os, im.n_items());
    detail::put<std::uint32_t>(os, d);
    for (int m = 0; m < im.n_items(); ++m)
        for (int i = 0; i < 2 * d2; ++i) detail::put<float>(os, float(im.data(i, m)));
    for (const Mask* mk : {&im.mask_wfs, &im.mask_valid})
        for (int i = 0; i < d2; ++i) detail::put<std::uint8_t>(os, mk->data()[i]);
}

// The format carries neither amplitude nor item labels; they are restored
// as 1 um and 1..n.
inline InteractionMatrix read_im(std::istream& is) {
    if (detail::expect_magic(is, "AOIM") != 1) throw IoError("unsupported AOIM version");
    const auto n = detail::get<std::uint32_t>(is), d = detail::get<std::uint32_t>(is);
    if (d == 0 || d > 4096 || n > (1u << 20)) throw IoError("implausible AOIM header");
    const int d2 = int(d * d);
    InteractionMatrix im;
    im.d_sub = int(d);
    im.amplitude_um = 1.0;
    im.data.resize(2 * d2, n);
    for (std::uint32_t m = 0; m < n; ++m)
        for (int i = 0; i < 2 * d2; ++i) im.data(i, m) = detail::get<float>(is);
    for (Mask* mk : {&im.mask_wfs, &im.mask_valid}) {
        mk->resize(d, d);
        for (int i = 0; i < d2; ++i) mk->data()[i] = detail::get<std::uint8_t>(is);
    }
    for (std::uint32_t m = 0; m < n; ++m) im.items.push_back(int(m) + 1);
    return im;
}

inline void save_im(const std::filesystem::path& p, const InteractionMatrix& im) {
    auto os = detail::open_out(p);
    write_im(os, im);
}

inline InteractionMatrix load_im(const std::filesystem::path& p) {
    auto is = detail::open_in(p);
    return read_im(is);
}

// ---------------------------------------------------------------- AOTC

inline void write_telemetry(std::ostream& os, const TelemetryCube& t) {
    detail::put_magic(os, "AOTC", 1);
    detail::put<std::uint32_t>(os, t.n_frames());
    detail::put<std::uint32_t>(os, t.d_act);
    detail::put<double>(os, t.dt);
    detail::put<float>(os, float(t.clip));
    // frames is d_act^2 x n_frames column-major, i.e. frame-major on disk
    for (Eigen::Index i = 0; i < t.frames.size(); ++i) detail::put<float>(os, float(t.frames.data()[i]));
}

inline TelemetryCube read_telemetry(std::istream& is) {
    if (detail::expect_magic(is, "AOTC") != 1) throw IoError("unsupported AOTC version");
    const auto n = detail::get<std::uint32_t>(is), d = detail::get<std::uint32_t>(is);
    if (d == 0 || d > 4096) throw IoError("implausible AOTC header");
    TelemetryCube t;
    t.d_act = int(d);
    t.dt = detail::get<double>(is);
    t.clip = detail::get<float>(is);
    if (!(t.dt > 0)) throw IoError("AOTC dt must be positive");
    t.config.tau_wfs = t.config.tau_lat = t.config.tau_dm = t.config.tau_rtc = t.dt;
    t.config.clip = t.clip;
    t.frames.resize(Eigen::Index(d) * d, n);
    for (Eigen::Index i = 0; i < t.frames.size(); ++i) t.frames.data()[i] = detail::get<float>(is);
    return t;
}

inline void save_telemetry(const std::filesystem::path& p, const TelemetryCube& t) {
    auto os = detail::open_out(p);
    write_telemetry(os, t);
}

inline TelemetryCube load_telemetry(const std::filesystem::path& p) {
    auto is = detail::open_in(p);
    return read_telemetry(is);
}

// ---------------------------------------------------------------- AOSC
// Generic n-d array: rank u32, dims u32 (slowest first), f64 row-major.

struct ArrayFile {
    std::vector<std::uint32_t> dims;
    std::vector<double> data;
};

inline void write_array(std::ostream& os, const ArrayFile& a) {
    std::size_t n = 1;
    for (auto v : a.dims) n *= v;
    if (n != a.data.size()) throw IoError("array dims do not match data");
    detail::put_magic(os, "AOSC", 1);
    detail::put<std::uint32_t>(os, std::uint32_t(a.dims.size()));
    for (auto v : a.dims) detail::put<std::uint32_t>(os, v);
    for (double v : a.data) detail::put<double>(os, v);
}

inline ArrayFile read_array(std::istream& is) {
    if (detail::expect_magic(is, "AOSC") != 1) throw IoError("unsupported AOSC version");
    ArrayFile a;
    const auto rank = detail::get<std::uint32_t>(is);
    if (rank > 8) throw IoError("implausible AOSC rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        a.dims.push_back(detail::get<std::uint32_t>(is));
        n *= a.dims.back();
    }
    if (n > (std::size_t(1) << 32)) throw IoError("implausible AOSC size");
    a.data.resize(n);
    for (auto& v : a.data) v = detail::get<double>(is);
    return a;
}

inline ArrayFile to_array(const Grid& g) {
    ArrayFile a{{std::uint32_t(g.rows()), std::uint32_t(g.cols())}, {}};
    a.data.assign(g.data(), g.data() + g.size());
    return a;
}

inline ArrayFile to_array(const Eigen::MatrixXd& m) {
    ArrayFile a{{std::uint32_t(m.rows()), std::uint32_t(m.cols())}, {}};
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) a.data.push_back(m(r, c));
    return a;
}

inline Grid to_grid(const ArrayFile& a) {
    if (a.dims.size() != 2) throw IoError("expected a 2-d array");
    Grid g(a.dims[0], a.dims[1]);
    std::copy(a.data.begin(), a.data.end(), g.data());
    return g;
}

inline void save_array(const std::filesystem::path& p, const ArrayFile& a) {
    auto os = detail::open_out(p);
    write_array(os, a);
}

inline ArrayFile load_array(const std::filesystem::path& p) {
    auto is = detail::open_in(p);
    return read_array(is);
}

inline void save_screen(const std::filesystem::path& p, const PhaseScreen& s) { save_array(p, to_array(s.phase)); }

// ---------------------------------------------------------------- CSV

// Cells are kept as text. Numbers are written in shortest round-trip form so
// parse(write(t)) == t exactly.
struct ResultTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    bool operator==(const ResultTable&) const = default;

    static std::string cell(double v) {
        char buf[64];
        auto r = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, r.ptr);
    }
    static std::string cell(int v) { return std::to_string(v); }
    static std::string cell(long v) { return std::to_string(v); }
    static std::string cell(std::size_t v) { return std::to_string(v); }
    static std::string cell(const std::string& v) { return v; }
    static std::string cell(const char* v) { return v; }

    template <class... T>
    void add(const T&... v) {
        if (sizeof...(T) != columns.size()) throw ConfigError("row width does not match the schema");
        rows.push_back({cell(v)...});
    }

    int col(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return int(i);
        throw ConfigError("no column " + name);
    }

    double num(std::size_t r, const std::string& name) const {
        const std::string& s = rows.at(r).at(col(name));
        double v = 0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("not a number: " + s);
        return v;
    }
};

namespace detail {
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}
}  // namespace detail

inline void write_csv(std::ostream& os, const ResultTable& t) {
    auto line = [&](const std::vector<std::string>& r) {
        for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << detail::csv_field(r[i]);
        os << "\r\n";
    };
    line(t.columns);
    for (const auto& r : t.rows) {
        if (r.size() != t.columns.size()) throw ConfigError("incomplete row");
        line(r);
    }
}

inline ResultTable parse_csv(std::istream& is) {
    std::vector<std::vector<std::string>> recs;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, any = false;
    char c;
    auto end_field = [&] {
        rec.push_back(std::move(field));
        field.clear();
    };
    while (is.get(c)) {
        any = true;
        if (quoted) {
            if (c == '"') {
                if (is.peek() == '"') {
                    is.get();
                    field += '"';
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && is.peek() == '\n') is.get();
            end_field();
            recs.push_back(std::move(rec));
            rec.clear();
            any = false;
        } else {
            field += c;
        }
    }
    if (quoted) throw IoError("unterminated quoted field");
    if (any) {
        end_field();
        recs.push_back(std::move(rec));
    }
    if (recs.empty()) throw IoError("empty CSV");
    ResultTable t;
    t.columns = recs.front();
    for (std::size_t i = 1; i < recs.size(); ++i) {
        if (recs[i].size() != t.columns.size()) throw IoError("ragged CSV row " + std::to_string(i));
        t.rows.push_back(std::move(recs[i]));
    }
    return t;
}

inline void save_csv(const std::filesystem::path& p, const ResultTable& t) {
    auto os = detail::open_out(p);
    write_csv(os, t);
    if (!os) throw IoError("write failed: " + p.string());
}

inline ResultTable load_csv(const std::filesystem::path& p) {
    auto is = detail::open_in(p);
    return parse_csv(is);
}

}  // namespace aomisreg
