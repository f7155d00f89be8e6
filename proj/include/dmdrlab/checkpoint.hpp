#pragma once

// Checkpoint container and file format.
//
//   DMDRLAB1
//   <name> <ndims> <d1> ... <dk> <byte_offset>
//   ...
//   <blank line>
//   <payload: little-endian float64 values, blob after blob>
//
// Offsets count from the first payload byte. Blobs are contiguous and in
// header order, so the payload length is fixed by the header.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dmdrlab/errors.hpp"
#include "dmdrlab/nets.hpp"
#include "dmdrlab/numcore.hpp"
#include "dmdrlab/rng.hpp"

namespace dmdrlab {

inline constexpr std::string_view kCheckpointMagic = "DMDRLAB1";

struct Blob {
    Shape shape;
    std::vector<double> data;

    friend bool operator==(const Blob&, const Blob&) = default;
};

struct Checkpoint {
    std::vector<std::pair<std::string, Blob>> blobs;

    void put(const std::string& name, Shape shape, std::vector<double> data) {
        if (name.empty() || name.find_first_of(" \t\n\r") != std::string::npos) {
            throw ContractError("checkpoint: invalid blob name '" + name + "'");
        }
        if (shape_size(shape) != data.size()) {
            throw DimensionError("checkpoint: blob '" + name + "' shape " + shape_str(shape) + " holds " +
                                 std::to_string(data.size()) + " values");
        }
        if (has(name)) {
            throw ContractError("checkpoint: duplicate blob '" + name + "'");
        }
        blobs.emplace_back(name, Blob{std::move(shape), std::move(data)});
    }

    bool has(std::string_view name) const {
        for (const auto& b : blobs) {
            if (b.first == name) {
                return true;
            }
        }
        return false;
    }

    const Blob& get(std::string_view name) const {
        for (const auto& b : blobs) {
            if (b.first == name) {
                return b.second;
            }
        }
        throw FormatError("checkpoint: missing blob '" + std::string(name) + "'", 0);
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string header(kCheckpointMagic);
    header += '\n';
    std::size_t offset = 0;
    for (const auto& [name, blob] : ck.blobs) {
        header += name + ' ' + std::to_string(blob.shape.size());
        for (std::size_t d : blob.shape) {
            header += ' ' + std::to_string(d);
        }
        header += ' ' + std::to_string(offset) + '\n';
        offset += 8 * blob.data.size();
    }
    header += '\n';
    std::string out = std::move(header);
    out.reserve(out.size() + offset);
    for (const auto& b : ck.blobs) {
        for (double x : b.second.data) {
            const auto bits = std::bit_cast<std::uint64_t>(x);
            for (int k = 0; k < 8; ++k) {
                out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
            }
        }
    }
    return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
    const std::string magic_line = std::string(kCheckpointMagic) + '\n';
    if (bytes.substr(0, magic_line.size()) != magic_line) {
        throw FormatError("checkpoint: bad magic or unsupported version", 0);
    }
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    std::size_t pos = magic_line.size();
    while (true) {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string_view::npos) {
            throw FormatError("checkpoint: header not terminated", bytes.size());
        }
        const std::string_view line = bytes.substr(pos, nl - pos);
        if (line.empty()) {
            pos = nl + 1;
            break;
        }
        std::istringstream is{std::string(line)};
        Entry e;
        std::size_t ndims = 0;
        if (!(is >> e.name >> ndims) || ndims > 8) {
            throw FormatError("checkpoint: malformed header line", pos);
        }
        e.shape.resize(ndims);
        for (auto& d : e.shape) {
            if (!(is >> d)) {
                throw FormatError("checkpoint: malformed shape", pos);
            }
        }
        std::string extra;
        if (!(is >> e.offset) || (is >> extra)) {
            throw FormatError("checkpoint: malformed offset", pos);
        }
        entries.push_back(std::move(e));
        pos = nl + 1;
    }
    const std::size_t payload = pos;
    std::size_t expected = 0;
    Checkpoint ck;
    for (const auto& e : entries) {
        if (e.offset != expected) {
            throw FormatError("checkpoint: blob '" + e.name + "' offset " + std::to_string(e.offset) +
                                  " is not contiguous (expected " + std::to_string(expected) + ")",
                              payload + e.offset);
        }
        const std::size_t n = shape_size(e.shape);
        if (payload + expected + 8 * n > bytes.size()) {
            throw FormatError("checkpoint: truncated payload in blob '" + e.name + "'", bytes.size());
        }
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) {
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[payload + expected + 8 * i + k]))
                        << (8 * k);
            }
            data[i] = std::bit_cast<double>(bits);
        }
        expected += 8 * n;
        ck.put(e.name, e.shape, std::move(data));
    }
    if (payload + expected != bytes.size()) {
        throw FormatError("checkpoint: " + std::to_string(bytes.size() - payload - expected) + " trailing bytes",
                          payload + expected);
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string bytes = serialize_checkpoint(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot open '" + tmp + "' for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw Error("write to '" + tmp + "' failed");
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw Error("cannot move checkpoint into place at '" + path + "'");
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open checkpoint '" + path + "'");
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Typed packing

inline void put_scalar(Checkpoint& ck, const std::string& name, double v) { ck.put(name, {1}, {v}); }

inline double get_scalar(const Checkpoint& ck, const std::string& name) {
    const Blob& b = ck.get(name);
    if (b.data.size() != 1) {
        throw FormatError("checkpoint: blob '" + name + "' is not a scalar", 0);
    }
    return b.data[0];
}

// Integers up to 2^53 are exact in a double.
inline long get_integer(const Checkpoint& ck, const std::string& name) {
    return static_cast<long>(get_scalar(ck, name));
}

// One byte per value.
inline void put_text(Checkpoint& ck, const std::string& name, std::string_view text) {
    std::vector<double> data(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        data[i] = static_cast<double>(static_cast<unsigned char>(text[i]));
    }
    ck.put(name, {text.size()}, std::move(data));
}

inline std::string get_text(const Checkpoint& ck, const std::string& name) {
    const Blob& b = ck.get(name);
    std::string s(b.data.size(), '\0');
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = static_cast<char>(static_cast<unsigned char>(b.data[i]));
    }
    return s;
}

namespace detail {

inline void split_u64(std::uint64_t x, std::vector<double>& out) {
    out.push_back(static_cast<double>(x >> 32));
    out.push_back(static_cast<double>(x & 0xffffffffu));
}

inline std::uint64_t join_u64(const std::vector<double>& d, std::size_t i) {
    return (static_cast<std::uint64_t>(d[i]) << 32) | static_cast<std::uint64_t>(d[i + 1]);
}

}  // namespace detail

// Words and counter as 32-bit halves, then the spare flag and value.
inline void put_rng(Checkpoint& ck, const std::string& name, const Rng& rng) {
    const RngState s = rng.state();
    std::vector<double> d;
    for (auto w : s.words) {
        detail::split_u64(w, d);
    }
    detail::split_u64(s.counter, d);
    d.push_back(s.has_spare ? 1.0 : 0.0);
    d.push_back(s.spare);
    const std::size_t n = d.size();
    ck.put(name, {n}, std::move(d));
}

inline Rng get_rng(const Checkpoint& ck, const std::string& name) {
    const Blob& b = ck.get(name);
    if (b.data.size() != 12) {
        throw FormatError("checkpoint: rng blob '" + name + "' has the wrong length", 0);
    }
    RngState s;
    for (std::size_t i = 0; i < 4; ++i) {
        s.words[i] = detail::join_u64(b.data, 2 * i);
    }
    s.counter = detail::join_u64(b.data, 8);
    s.has_spare = b.data[10] != 0.0;
    s.spare = b.data[11];
    Rng r;
    r.set_state(s);
    return r;
}

inline std::vector<std::string> param_names(const NetParams& p, const std::string& prefix) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        names.push_back(prefix + ".layer" + std::to_string(l) + ".weight");
        names.push_back(prefix + ".layer" + std::to_string(l) + ".bias");
    }
    for (std::size_t l = 0; l < p.adapters.size(); ++l) {
        if (p.adapters[l]) {
            names.push_back(prefix + ".adapter" + std::to_string(l) + ".down");
            names.push_back(prefix + ".adapter" + std::to_string(l) + ".up");
        }
    }
    return names;
}

// Either the whole parameter set or only the adapters.
inline void put_params(Checkpoint& ck, const std::string& prefix, const NetParams& p, bool adapters_only = false) {
    const auto names = param_names(p, prefix);
    const auto params = p.all_parameters();
    const std::size_t first = adapters_only ? p.base_parameters().size() : 0;
    for (std::size_t i = first; i < params.size(); ++i) {
        ck.put(names[i], params[i].shape(), {params[i].data().begin(), params[i].data().end()});
    }
    put_scalar(ck, prefix + ".adapter_scale", p.adapter_scale);
}

// Writes stored values into an existing, congruent parameter set.
inline void get_params(const Checkpoint& ck, const std::string& prefix, NetParams& p, bool adapters_only = false) {
    const auto names = param_names(p, prefix);
    auto params = p.all_parameters();
    const std::size_t first = adapters_only ? p.base_parameters().size() : 0;
    for (std::size_t i = first; i < params.size(); ++i) {
        const Blob& b = ck.get(names[i]);
        if (b.shape != params[i].shape()) {
            throw FormatError("checkpoint: blob '" + names[i] + "' has shape " + shape_str(b.shape) + ", expected " +
                                  shape_str(params[i].shape()),
                              0);
        }
        std::copy(b.data.begin(), b.data.end(), params[i].data().begin());
    }
    p.adapter_scale = get_scalar(ck, prefix + ".adapter_scale");
}

inline void put_adam(Checkpoint& ck, const std::string& prefix, const AdamState& s) {
    const AdamConfig& c = s.config;
    ck.put(prefix + ".config", {4}, {c.lr, c.beta1, c.beta2, c.eps});
    ck.put(prefix + ".steps", {s.steps.size()}, std::vector<double>(s.steps.begin(), s.steps.end()));
    for (std::size_t i = 0; i < s.m.size(); ++i) {
        ck.put(prefix + ".m" + std::to_string(i), {s.m[i].size()}, s.m[i]);
        ck.put(prefix + ".v" + std::to_string(i), {s.v[i].size()}, s.v[i]);
    }
}

inline void get_adam(const Checkpoint& ck, const std::string& prefix, AdamState& s) {
    const Blob& c = ck.get(prefix + ".config");
    const Blob& steps = ck.get(prefix + ".steps");
    if (c.data.size() != 4 || steps.data.size() != s.steps.size()) {
        throw FormatError("checkpoint: optimizer '" + prefix + "' does not match the parameter set", 0);
    }
    s.config = {c.data[0], c.data[1], c.data[2], c.data[3]};
    for (std::size_t i = 0; i < s.steps.size(); ++i) {
        s.steps[i] = static_cast<long>(steps.data[i]);
        const Blob& m = ck.get(prefix + ".m" + std::to_string(i));
        const Blob& v = ck.get(prefix + ".v" + std::to_string(i));
        if (m.data.size() != s.m[i].size() || v.data.size() != s.v[i].size()) {
            throw FormatError("checkpoint: optimizer '" + prefix + "' moment size mismatch", 0);
        }
        s.m[i] = m.data;
        s.v[i] = v.data;
    }
}

}  // namespace dmdrlab
