#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "taskvec/matrix.hpp"

namespace taskvec {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
  public:
    enum class Kind {
        MalformedHeader,
        TruncatedBuffer,
        DuplicateName,
        UnsupportedDtype,
        Mismatch,  // tensor name/shape disagreement between checkpoints
        Io,
    };

    CheckpointError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

// ---------------------------------------------------------------------------
// Dtypes and the IEEE binary16 codec
// ---------------------------------------------------------------------------

enum class Dtype { F32, F16, F64 };

inline std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F16: return 2;
        case Dtype::F64: return 8;
    }
    return 0;
}

inline const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "F32";
        case Dtype::F16: return "F16";
        case Dtype::F64: return "F64";
    }
    return "?";
}

inline std::optional<Dtype> parse_dtype(std::string_view s) {
    if (s == "F32") return Dtype::F32;
    if (s == "F16") return Dtype::F16;
    if (s == "F64") return Dtype::F64;
    return std::nullopt;
}

inline double f16_decode(std::uint16_t h) {
    const int exp = (h >> 10) & 0x1F;
    const int frac = h & 0x3FF;
    double v;
    if (exp == 31) {
        v = frac ? std::numeric_limits<double>::quiet_NaN()
                 : std::numeric_limits<double>::infinity();
    } else if (exp == 0) {
        v = std::ldexp(frac, -24);  // subnormal
    } else {
        v = std::ldexp(1024 + frac, exp - 25);
    }
    return (h & 0x8000) ? -v : v;
}

/// Round-to-nearest-even conversion, done directly from the double so no
/// intermediate float rounding step is involved.
inline std::uint16_t f16_encode(double v) {
    const std::uint16_t sign = std::signbit(v) ? 0x8000 : 0;
    if (std::isnan(v)) return sign | 0x7E00;
    const double a = std::fabs(v);
    if (std::isinf(a)) return sign | 0x7C00;
    if (a == 0.0) return sign;
    int e = std::ilogb(a);
    if (e < -14) {
        // below the normal range: quantum is 2^-24
        const double m = std::nearbyint(std::ldexp(a, 24));
        if (m >= 1024.0) return sign | 0x0400;  // rounded up to the smallest normal
        return sign | static_cast<std::uint16_t>(m);
    }
    double m = std::nearbyint(std::ldexp(a, 10 - e));  // in [1024, 2048]
    if (m >= 2048.0) {
        m = 1024.0;
        ++e;
    }
    if (e > 15) return sign | 0x7C00;  // overflow
    return static_cast<std::uint16_t>(sign | ((e + 15) << 10) |
                                      (static_cast<int>(m) - 1024));
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

struct Tensor {
    Dtype dtype = Dtype::F32;
    std::vector<std::int64_t> shape;
    std::vector<double> values;  // row-major, widened to f64 on load

    bool operator==(const Tensor&) const = default;
};

inline std::size_t numel(const std::vector<std::int64_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw std::invalid_argument("numel: negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

struct Checkpoint {
    std::map<std::string, Tensor> tensors;           // name-sorted
    std::map<std::string, std::string> metadata;     // "__metadata__" payload

    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline std::uint64_t load_le64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void store_le(std::uint64_t v, int bytes, std::string& out) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline double decode_scalar(const unsigned char* p, Dtype d) {
    switch (d) {
        case Dtype::F16: {
            const std::uint16_t bits = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
            return f16_decode(bits);
        }
        case Dtype::F32: {
            std::uint32_t bits = 0;
            for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
            return static_cast<double>(std::bit_cast<float>(bits));
        }
        case Dtype::F64: {
            return std::bit_cast<double>(load_le64(p));
        }
    }
    return 0.0;
}

inline void encode_scalar(double v, Dtype d, std::string& out) {
    switch (d) {
        case Dtype::F16:
            store_le(f16_encode(v), 2, out);
            break;
        case Dtype::F32:
            store_le(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4, out);
            break;
        case Dtype::F64:
            store_le(std::bit_cast<std::uint64_t>(v), 8, out);
            break;
    }
}

// SAX scan that only checks the root object for duplicate keys; the full
// parse below would silently collapse them.
struct RootKeyScan {
    int depth = 0;
    std::set<std::string> seen;
    std::string duplicate;

    bool null() { return true; }
    bool boolean(bool) { return true; }
    bool number_integer(std::int64_t) { return true; }
    bool number_unsigned(std::uint64_t) { return true; }
    bool number_float(double, const std::string&) { return true; }
    bool string(std::string&) { return true; }
    bool binary(nlohmann::json::binary_t&) { return true; }
    bool start_object(std::size_t) {
        ++depth;
        return true;
    }
    bool key(std::string& k) {
        if (depth == 1 && !seen.insert(k).second) {
            duplicate = k;
            return false;
        }
        return true;
    }
    bool end_object() {
        --depth;
        return true;
    }
    bool start_array(std::size_t) { return true; }
    bool end_array() { return true; }
    bool parse_error(std::size_t, const std::string&, const nlohmann::json::exception&) {
        return false;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// safetensors-layout reader / writer
//
// File layout (little-endian): bytes 0-7 hold an unsigned 64-bit JSON header
// length H, bytes 8..8+H the UTF-8 JSON header, and the rest the raw tensor
// buffers with offsets relative to the end of the header. The writer emits
// names sorted lexicographically with contiguous offsets, so writing is
// canonical: write(read(write(c))) is byte-identical to write(c).
// ---------------------------------------------------------------------------

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open '" + path + "'");
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!in.good() && !in.eof())
        throw CheckpointError(CheckpointError::Kind::Io, "read failed for '" + path + "'");

    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
    if (raw.size() < 8) {
        throw CheckpointError(CheckpointError::Kind::TruncatedBuffer,
                              "file has " + std::to_string(raw.size()) +
                                  " bytes, too small for the 8-byte header length");
    }
    const std::uint64_t header_len = detail::load_le64(bytes);
    if (header_len > raw.size() - 8) {
        throw CheckpointError(CheckpointError::Kind::TruncatedBuffer,
                              "header length " + std::to_string(header_len) +
                                  " exceeds remaining file size " +
                                  std::to_string(raw.size() - 8));
    }

    const std::string_view header_text(raw.data() + 8, header_len);

    detail::RootKeyScan scan;
    nlohmann::json::sax_parse(header_text, &scan);
    if (!scan.duplicate.empty()) {
        throw CheckpointError(CheckpointError::Kind::DuplicateName,
                              "duplicate tensor name '" + scan.duplicate + "' in header");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                              std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) {
        throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                              "header JSON is not an object");
    }

    const unsigned char* data = bytes + 8 + header_len;
    const std::uint64_t data_len = raw.size() - 8 - header_len;

    Checkpoint out;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) {
                throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                      "__metadata__ is not an object");
            }
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string()) {
                    throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                          "__metadata__ value for '" + k + "' is not a string");
                }
                out.metadata[k] = v.get<std::string>();
            }
            continue;
        }

        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets") || !entry["dtype"].is_string()) {
            throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                  "tensor '" + name + "' entry is missing dtype/shape/data_offsets");
        }

        const auto dtype = parse_dtype(entry["dtype"].get<std::string>());
        if (!dtype) {
            throw CheckpointError(CheckpointError::Kind::UnsupportedDtype,
                                  "tensor '" + name + "' has unsupported dtype '" +
                                      entry["dtype"].get<std::string>() + "'");
        }

        Tensor t;
        t.dtype = *dtype;
        if (!entry["shape"].is_array()) {
            throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                  "tensor '" + name + "' shape is not an array");
        }
        for (const auto& dim : entry["shape"]) {
            if (!dim.is_number_integer() && !dim.is_number_unsigned()) {
                throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                      "tensor '" + name + "' shape holds a non-integer");
            }
            const auto val = dim.get<std::int64_t>();
            if (val < 0) {
                throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                      "tensor '" + name + "' shape holds a negative dimension");
            }
            t.shape.push_back(val);
        }

        const auto& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned()) {
            throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                  "tensor '" + name + "' data_offsets must be [begin, end]");
        }
        const std::uint64_t begin = offs[0].get<std::uint64_t>();
        const std::uint64_t end = offs[1].get<std::uint64_t>();
        if (begin > end || end > data_len) {
            throw CheckpointError(CheckpointError::Kind::TruncatedBuffer,
                                  "tensor '" + name + "' data_offsets [" + std::to_string(begin) +
                                      ", " + std::to_string(end) + ") exceed data size " +
                                      std::to_string(data_len));
        }
        const std::size_t count = numel(t.shape);
        const std::size_t want = count * dtype_size(t.dtype);
        if (end - begin != want) {
            throw CheckpointError(CheckpointError::Kind::MalformedHeader,
                                  "tensor '" + name + "' buffer is " + std::to_string(end - begin) +
                                      " bytes but shape needs " + std::to_string(want));
        }

        t.values.resize(count);
        const unsigned char* p = data + begin;
        const std::size_t step = dtype_size(t.dtype);
        for (std::size_t i = 0; i < count; ++i, p += step)
            t.values[i] = detail::decode_scalar(p, t.dtype);
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
    nlohmann::json header = nlohmann::json::object();
    if (!c.metadata.empty()) header["__metadata__"] = c.metadata;

    std::string payload;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.tensors) {  // std::map iterates name-sorted
        const std::size_t count = numel(t.shape);
        if (t.values.size() != count) {
            throw std::invalid_argument("write_checkpoint: tensor '" + name + "' has " +
                                        std::to_string(t.values.size()) + " values for shape of " +
                                        std::to_string(count));
        }
        const std::uint64_t begin = offset;
        for (double v : t.values) detail::encode_scalar(v, t.dtype, payload);
        offset = payload.size();
        header[name] = {{"dtype", dtype_name(t.dtype)},
                        {"shape", t.shape},
                        {"data_offsets", {begin, offset}}};
    }

    const std::string header_text = header.dump();
    std::string prefix;
    detail::store_le(header_text.size(), 8, prefix);

    std::ofstream outf(path, std::ios::binary | std::ios::trunc);
    if (!outf) throw CheckpointError(CheckpointError::Kind::Io, "cannot open '" + path + "' for write");
    outf << prefix << header_text << payload;
    outf.flush();
    if (!outf) throw CheckpointError(CheckpointError::Kind::Io, "write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Task vectors
// ---------------------------------------------------------------------------

/// Per-layer parameter deltas of one fine-tuned model against the shared base.
/// 2-D weight deltas that pass the linear-layer classifier live in
/// linear_layers; everything else (embeddings, norms, biases, higher-rank
/// tensors) is kept flat in residual. The two key sets are disjoint and
/// together cover every tensor of the base.
struct TaskVector {
    std::string source_id;
    std::map<std::string, Matrix> linear_layers;
    std::map<std::string, std::vector<double>> residual;
};

inline const std::vector<std::string>& default_linear_exclusions() {
    static const std::vector<std::string> patterns = {"embed", "norm", "ln", "bias"};
    return patterns;
}

/// A tensor is treated as a linear layer iff it is 2-D with both dimensions
/// >= 2 and its name avoids the (configurable) exclusion substrings.
inline bool classify_linear(const std::string& name, const std::vector<std::int64_t>& shape,
                            const std::vector<std::string>& exclusions = default_linear_exclusions()) {
    if (shape.size() != 2 || shape[0] < 2 || shape[1] < 2) return false;
    for (const auto& pattern : exclusions)
        if (name.find(pattern) != std::string::npos) return false;
    return true;
}

inline std::vector<TaskVector> compute_task_vectors(
    const Checkpoint& base, const std::vector<Checkpoint>& tuned,
    const std::vector<std::string>& ids = {},
    const std::vector<std::string>& exclusions = default_linear_exclusions()) {
    if (!ids.empty() && ids.size() != tuned.size())
        throw std::invalid_argument("compute_task_vectors: ids do not match the model count");

    std::vector<TaskVector> out;
    out.reserve(tuned.size());
    for (std::size_t m = 0; m < tuned.size(); ++m) {
        const std::string id = ids.empty() ? "model-" + std::to_string(m) : ids[m];
        const Checkpoint& model = tuned[m];
        if (model.tensors.size() != base.tensors.size()) {
            throw CheckpointError(CheckpointError::Kind::Mismatch,
                                  "model '" + id + "' has " + std::to_string(model.tensors.size()) +
                                      " tensors, base has " + std::to_string(base.tensors.size()));
        }

        TaskVector tau;
        tau.source_id = id;
        for (const auto& [name, base_tensor] : base.tensors) {
            const auto it = model.tensors.find(name);
            if (it == model.tensors.end()) {
                throw CheckpointError(CheckpointError::Kind::Mismatch,
                                      "tensor '" + name + "' present in base but missing from model '" +
                                          id + "'");
            }
            const Tensor& tuned_tensor = it->second;
            if (tuned_tensor.shape != base_tensor.shape) {
                throw CheckpointError(CheckpointError::Kind::Mismatch,
                                      "tensor '" + name + "' shape differs between base and model '" +
                                          id + "'");
            }

            std::vector<double> delta(base_tensor.values.size());
            for (std::size_t i = 0; i < delta.size(); ++i)
                delta[i] = tuned_tensor.values[i] - base_tensor.values[i];

            if (classify_linear(name, base_tensor.shape, exclusions)) {
                tau.linear_layers.emplace(
                    name, Matrix(static_cast<std::size_t>(base_tensor.shape[0]),
                                 static_cast<std::size_t>(base_tensor.shape[1]), std::move(delta)));
            } else {
                tau.residual.emplace(name, std::move(delta));
            }
        }
        out.push_back(std::move(tau));
    }
    return out;
}

}  // namespace taskvec
