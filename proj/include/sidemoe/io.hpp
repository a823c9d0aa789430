#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sidemoe/quantizer.hpp"
#include "sidemoe/tensor.hpp"

namespace sidemoe {

// Shortest round-trip decimal rendering; locale-free and deterministic.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// --- tiny binary writer/reader ---------------------------------------------

namespace detail {

struct BinaryWriter {
    std::string bytes;

    template <class T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const std::size_t at = bytes.size();
        bytes.resize(at + sizeof(T));
        std::memcpy(bytes.data() + at, &v, sizeof(T));
    }

    void put_string(const std::string& s) {
        put<std::uint64_t>(s.size());
        bytes.append(s);
    }

    void put_raw(const void* data, std::size_t n) {
        const std::size_t at = bytes.size();
        bytes.resize(at + n);
        std::memcpy(bytes.data() + at, data, n);
    }
};

struct BinaryReader {
    const std::string& bytes;
    std::size_t at = 0;

    template <class T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        if (at + sizeof(T) > bytes.size()) throw IoError("binary container truncated");
        T v;
        std::memcpy(&v, bytes.data() + at, sizeof(T));
        at += sizeof(T);
        return v;
    }

    std::string get_string() {
        const std::uint64_t n = get<std::uint64_t>();
        if (at + n > bytes.size()) throw IoError("binary container truncated");
        std::string s = bytes.substr(at, n);
        at += n;
        return s;
    }

    void get_raw(void* out, std::size_t n) {
        if (at + n > bytes.size()) throw IoError("binary container truncated");
        std::memcpy(out, bytes.data() + at, n);
        at += n;
    }
};

} // namespace detail

// --- dense tensor container --------------------------------------------------

inline constexpr std::uint32_t kTensorMagic = 0x534d544eu; // "SMTN"

inline void append_tensor(detail::BinaryWriter& w, const Tensor& t) {
    w.put(kTensorMagic);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.ndim()));
    for (const std::size_t d : t.shape) w.put<std::uint64_t>(d);
    w.put_raw(t.data.data(), t.size() * sizeof(double));
}

inline Tensor read_tensor(detail::BinaryReader& r) {
    if (r.get<std::uint32_t>() != kTensorMagic) throw IoError("not a tensor container");
    const std::uint32_t ndim = r.get<std::uint32_t>();
    std::vector<std::size_t> shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i)
        shape[i] = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor t(std::move(shape));
    r.get_raw(t.data.data(), t.size() * sizeof(double));
    return t;
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
    detail::BinaryWriter w;
    append_tensor(w, t);
    write_text_atomic(path, w.bytes);
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
    const std::string bytes = read_text(path);
    detail::BinaryReader r{bytes};
    return read_tensor(r);
}

// Comma/whitespace separated float list (one tensor, flat).
inline Tensor read_float_csv(const std::filesystem::path& path) {
    const std::string text = read_text(path);
    std::vector<double> values;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() &&
               (text[i] == ',' || text[i] == '\n' || text[i] == '\r' || text[i] == ' ' ||
                text[i] == '\t'))
            ++i;
        if (i >= text.size()) break;
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + text.size(), v);
        if (ec != std::errc()) throw IoError("cannot parse float in " + path.string());
        if (!std::isfinite(v)) throw NumericError("non-finite value in " + path.string());
        values.push_back(v);
        i = static_cast<std::size_t>(ptr - text.data());
    }
    if (values.empty()) throw ConfigError("empty weight file: " + path.string());
    return Tensor::vector_of(std::move(values));
}

// --- quantized tensor blob + JSON sidecar ------------------------------------

inline constexpr std::uint32_t kQuantMagic = 0x534d5154u; // "SMQT"

inline void append_quantized(detail::BinaryWriter& w, const QuantizedTensor& q) {
    w.put(kQuantMagic);
    w.put<std::uint32_t>(1); // version
    w.put<std::uint32_t>(static_cast<std::uint32_t>(q.params.bits));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(q.shape.size()));
    for (const std::size_t d : q.shape) w.put<std::uint64_t>(d);
    w.put<double>(q.params.scale);
    w.put<std::int32_t>(q.params.zero_point);
    w.put<double>(q.params.r_min);
    w.put<double>(q.params.r_max);
    w.put_raw(q.codes.bytes().data(), q.codes.bytes().size());
}

inline QuantizedTensor read_quantized(detail::BinaryReader& r) {
    if (r.get<std::uint32_t>() != kQuantMagic) throw IoError("not a quantized blob");
    if (r.get<std::uint32_t>() != 1) throw IoError("unsupported quantized blob version");
    QuantizedTensor q;
    q.params.bits = static_cast<int>(r.get<std::uint32_t>());
    const std::uint32_t ndim = r.get<std::uint32_t>();
    q.shape.resize(ndim);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        q.shape[i] = static_cast<std::size_t>(r.get<std::uint64_t>());
        count *= q.shape[i];
    }
    q.params.scale = r.get<double>();
    q.params.zero_point = r.get<std::int32_t>();
    q.params.r_min = r.get<double>();
    q.params.r_max = r.get<double>();
    q.codes = CodeArray(count, q.params.bits);
    r.get_raw(q.codes.bytes().data(), q.codes.bytes().size());
    return q;
}

inline void write_quantized_blob(const std::filesystem::path& path, const QuantizedTensor& q) {
    detail::BinaryWriter w;
    append_quantized(w, q);
    write_text_atomic(path, w.bytes);
}

inline QuantizedTensor read_quantized_blob(const std::filesystem::path& path) {
    const std::string bytes = read_text(path);
    detail::BinaryReader r{bytes};
    return read_quantized(r);
}

inline nlohmann::json quantized_sidecar(const QuantizedTensor& q) {
    nlohmann::json j;
    j["bits"] = q.params.bits;
    j["shape"] = q.shape;
    j["scale"] = q.params.scale;
    j["zero_point"] = q.params.zero_point;
    j["r_min"] = q.params.r_min;
    j["r_max"] = q.params.r_max;
    std::vector<std::uint32_t> codes(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) codes[i] = q.codes.get(i);
    j["codes"] = std::move(codes);
    return j;
}

// --- CSV ---------------------------------------------------------------------

// Comma separator, header row, '.' decimal, LF endings.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ += ',';
            out_ += header[i];
        }
        out_ += '\n';
        columns_ = header.size();
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw DimensionError("CsvWriter: column count mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ += ',';
            out_ += cells[i];
        }
        out_ += '\n';
    }

    const std::string& str() const { return out_; }

private:
    std::string out_;
    std::size_t columns_ = 0;
};

} // namespace sidemoe
