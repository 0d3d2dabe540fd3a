#pragma once

// Reader/writer for the safetensors layout:
//
//   [u64 little-endian N][N bytes JSON header][payload]
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets"} with
// offsets relative to the payload start. The reserved "__metadata__" key maps
// to string -> string pairs. Only 2-D F32/F64 tensors are supported.
//
// Writing is canonical: tensors are laid out in name order, the JSON is
// compact with sorted keys, and the header is space-padded to a multiple of
// 8 bytes. write(read(write(x))) therefore reproduces the same bytes.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lora_cl/adapter.hpp"

namespace lora_cl {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

enum class Dtype { f32, f64 };

inline std::string_view to_string(Dtype d) { return d == Dtype::f32 ? "F32" : "F64"; }
inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

struct Tensor {
    Dtype dtype = Dtype::f64;
    Matrix value;
};

struct TensorFile {
    std::map<std::string, std::string> metadata;
    std::map<std::string, Tensor> tensors;
};

namespace detail {

inline constexpr std::uint64_t max_header_bytes = 100'000'000;

inline std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return v;
}

} // namespace detail

inline std::vector<unsigned char> encode_tensor_file(const TensorFile& file) {
    nlohmann::json header = nlohmann::json::object();
    if (!file.metadata.empty()) header["__metadata__"] = file.metadata;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        if (name == "__metadata__") throw ConfigError("tensor name '__metadata__' is reserved");
        const std::uint64_t bytes = t.value.size() * dtype_size(t.dtype);
        header[name] = {{"dtype", to_string(t.dtype)},
                        {"shape", {t.value.rows(), t.value.cols()}},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<unsigned char> out(8 + text.size() + offset);
    const std::uint64_t n = text.size();
    std::memcpy(out.data(), &n, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    unsigned char* payload = out.data() + 8 + text.size();
    for (const auto& [name, t] : file.tensors) {
        if (t.dtype == Dtype::f64) {
            std::memcpy(payload, t.value.values().data(), t.value.size() * 8);
            payload += t.value.size() * 8;
        } else {
            for (double v : t.value.values()) {
                const float f = static_cast<float>(v);
                std::memcpy(payload, &f, 4);
                payload += 4;
            }
        }
    }
    return out;
}

inline TensorFile decode_tensor_file(const std::vector<unsigned char>& bytes) {
    using FE = FormatErrorKind;
    if (bytes.size() < 8) throw FormatError(FE::truncated_header, bytes.size(), "file shorter than 8-byte length prefix");
    const std::uint64_t n = detail::read_u64_le(bytes.data());
    if (n > bytes.size() - 8 || n > detail::max_header_bytes)
        throw FormatError(FE::truncated_header, 0,
                          "header length " + std::to_string(n) + " exceeds file size " + std::to_string(bytes.size()));
    const std::uint64_t payload_start = 8 + n;
    const std::uint64_t payload_size = bytes.size() - payload_start;

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(FE::malformed_header, 8 + e.byte, std::string("invalid JSON: ") + e.what());
    }
    if (!header.is_object()) throw FormatError(FE::malformed_header, 8, "header is not a JSON object");

    TensorFile file;
    struct Span {
        std::uint64_t begin, end;
        std::string name;
    };
    std::vector<Span> spans;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) throw FormatError(FE::malformed_header, 8, "__metadata__ is not an object");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string()) throw FormatError(FE::malformed_header, 8, "__metadata__['" + k + "'] is not a string");
                file.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets"))
            throw FormatError(FE::malformed_header, 8, "tensor '" + name + "' lacks dtype/shape/data_offsets");
        const auto& jd = entry["dtype"];
        if (!jd.is_string()) throw FormatError(FE::malformed_header, 8, "tensor '" + name + "' dtype is not a string");
        Dtype dtype;
        if (jd == "F32") dtype = Dtype::f32;
        else if (jd == "F64") dtype = Dtype::f64;
        else throw FormatError(FE::unknown_dtype, 8, "tensor '" + name + "' has dtype " + jd.dump());

        const auto& js = entry["shape"];
        if (!js.is_array() || js.size() != 2 || !js[0].is_number_unsigned() || !js[1].is_number_unsigned())
            throw FormatError(FE::bad_shape, 8, "tensor '" + name + "' shape must be two non-negative integers");
        const std::uint64_t rows = js[0].get<std::uint64_t>();
        const std::uint64_t cols = js[1].get<std::uint64_t>();
        if (rows > payload_size || cols > payload_size || (rows != 0 && cols > payload_size / rows))
            throw FormatError(FE::truncated_payload, payload_start,
                              "tensor '" + name + "' shape exceeds payload of " + std::to_string(payload_size) + " bytes");
        const std::uint64_t expected = rows * cols * dtype_size(dtype);

        const auto& jo = entry["data_offsets"];
        if (!jo.is_array() || jo.size() != 2 || !jo[0].is_number_unsigned() || !jo[1].is_number_unsigned())
            throw FormatError(FE::malformed_header, 8, "tensor '" + name + "' data_offsets must be two non-negative integers");
        const std::uint64_t begin = jo[0].get<std::uint64_t>();
        const std::uint64_t end = jo[1].get<std::uint64_t>();
        if (begin > end)
            throw FormatError(FE::malformed_header, 8, "tensor '" + name + "' data_offsets are reversed");
        if (end > payload_size)
            throw FormatError(FE::truncated_payload, payload_start + payload_size,
                              "tensor '" + name + "' ends at payload byte " + std::to_string(end) + " but payload has " +
                                  std::to_string(payload_size));
        if (end - begin != expected)
            throw FormatError(FE::bad_shape, payload_start + begin,
                              "tensor '" + name + "' spans " + std::to_string(end - begin) + " bytes, shape needs " +
                                  std::to_string(expected));
        spans.push_back({begin, end, name});

        Matrix m(rows, cols);
        const unsigned char* src = bytes.data() + payload_start + begin;
        auto dst = m.values();
        if (dtype == Dtype::f64) {
            if (!dst.empty()) std::memcpy(dst.data(), src, dst.size() * 8);
        } else {
            for (std::size_t k = 0; k < dst.size(); ++k) {
                float f;
                std::memcpy(&f, src + 4 * k, 4);
                dst[k] = static_cast<double>(f);
            }
        }
        file.tensors.emplace(name, Tensor{dtype, std::move(m)});
    }

    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i].begin < spans[i - 1].end)
            throw FormatError(FE::offset_overlap, payload_start + spans[i].begin,
                              "tensors '" + spans[i - 1].name + "' and '" + spans[i].name + "' overlap");
    return file;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed on '" + path.string() + "'");
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
    return decode_tensor_file(read_file_bytes(path));
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
    write_file_bytes(path, encode_tensor_file(file));
}

// ---------------------------------------------------------------------------
// Adapter files: "<layer>.lora_A" / "<layer>.lora_B" tensor pairs, with
// "scale" and "rank" in the metadata. Tensors that are not part of a pair and
// metadata keys other than scale/rank are kept in `extra_*` and written back.

struct AdapterFile {
    LayerAdapters layers;
    std::map<std::string, Tensor> extra_tensors;
    std::map<std::string, std::string> extra_metadata;
    Dtype dtype = Dtype::f64;
};

inline constexpr std::string_view lora_a_suffix = ".lora_A";
inline constexpr std::string_view lora_b_suffix = ".lora_B";

namespace detail {

inline std::string format_double(double v) {
    // Shortest representation that round-trips.
    return nlohmann::json(v).dump();
}

inline double parse_metadata_double(const std::map<std::string, std::string>& md, const std::string& key) {
    auto it = md.find(key);
    if (it == md.end()) throw FormatError(FormatErrorKind::malformed_header, 8, "metadata lacks '" + key + "'");
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size() || !std::isfinite(v)) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw FormatError(FormatErrorKind::malformed_header, 8, "metadata '" + key + "' is not a number: " + it->second);
    }
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

} // namespace detail

inline TensorFile to_tensor_file(const AdapterFile& af) {
    TensorFile tf;
    tf.metadata = af.extra_metadata;
    tf.tensors = af.extra_tensors;
    if (!af.layers.empty()) {
        const double scale = af.layers.front().scale;
        const std::size_t rank = af.layers.front().rank();
        for (const auto& l : af.layers) {
            l.validate();
            if (l.scale != scale || l.rank() != rank)
                throw ConfigError("adapter file layers must share scale and rank ('" + l.name + "' differs)");
            tf.tensors[l.name + std::string(lora_a_suffix)] = Tensor{af.dtype, l.a};
            tf.tensors[l.name + std::string(lora_b_suffix)] = Tensor{af.dtype, l.b};
        }
        tf.metadata["scale"] = detail::format_double(scale);
        tf.metadata["rank"] = std::to_string(rank);
    }
    return tf;
}

inline AdapterFile from_tensor_file(TensorFile tf) {
    using FE = FormatErrorKind;
    AdapterFile af;
    bool any_f32 = false;
    std::vector<std::string> a_names;
    for (const auto& [name, t] : tf.tensors)
        if (detail::ends_with(name, lora_a_suffix)) a_names.push_back(name);
    for (const auto& name : a_names) {
        const std::string layer = name.substr(0, name.size() - lora_a_suffix.size());
        const std::string b_name = layer + std::string(lora_b_suffix);
        auto b_it = tf.tensors.find(b_name);
        if (b_it == tf.tensors.end()) throw FormatError(FE::missing_tensor, 8, "'" + name + "' has no matching '" + b_name + "'");
        auto a_it = tf.tensors.find(name);
        LoraAdapter ad{a_it->second.value, b_it->second.value, 1.0, layer};
        if (ad.a.rows() == 0 || ad.a.rows() != ad.b.cols())
            throw FormatError(FE::bad_shape, 8, "layer '" + layer + "': A is " + ad.a.shape_str() + ", B is " + ad.b.shape_str());
        if (!ad.a.all_finite() || !ad.b.all_finite())
            throw FormatError(FE::malformed_header, 8, "layer '" + layer + "' has non-finite values");
        any_f32 = any_f32 || a_it->second.dtype == Dtype::f32 || b_it->second.dtype == Dtype::f32;
        af.layers.push_back(std::move(ad));
        tf.tensors.erase(a_it);
        tf.tensors.erase(b_it);
    }
    for (const auto& [name, t] : tf.tensors)
        if (detail::ends_with(name, lora_b_suffix))
            throw FormatError(FE::missing_tensor, 8, "'" + name + "' has no matching lora_A tensor");

    if (!af.layers.empty()) {
        const double scale = detail::parse_metadata_double(tf.metadata, "scale");
        const double rank = detail::parse_metadata_double(tf.metadata, "rank");
        for (auto& l : af.layers) {
            l.scale = scale;
            if (static_cast<double>(l.rank()) != rank)
                throw FormatError(FE::bad_shape, 8, "layer '" + l.name + "' rank " + std::to_string(l.rank()) +
                                                        " disagrees with metadata rank " + tf.metadata["rank"]);
        }
        tf.metadata.erase("scale");
        tf.metadata.erase("rank");
    }
    af.extra_tensors = std::move(tf.tensors);
    af.extra_metadata = std::move(tf.metadata);
    af.dtype = any_f32 ? Dtype::f32 : Dtype::f64;
    return af;
}

inline AdapterFile load_adapter_file(const std::filesystem::path& path) {
    return from_tensor_file(read_tensor_file(path));
}

inline void save_adapter_file(const std::filesystem::path& path, const AdapterFile& af) {
    write_tensor_file(path, to_tensor_file(af));
}

inline void save_adapter(const std::filesystem::path& path, const LoraAdapter& ad, Dtype dtype = Dtype::f64) {
    AdapterFile af;
    af.layers.push_back(ad);
    af.dtype = dtype;
    save_adapter_file(path, af);
}

// Loads a file holding exactly one adapter layer.
inline LoraAdapter load_adapter(const std::filesystem::path& path) {
    AdapterFile af = load_adapter_file(path);
    if (af.layers.size() != 1)
        throw FormatError(FormatErrorKind::missing_tensor, 8,
                          "'" + path.string() + "' holds " + std::to_string(af.layers.size()) + " adapter layers, expected 1");
    return std::move(af.layers.front());
}

// Base weights are stored as one tensor per layer, named by the layer.
inline void save_weights(const std::filesystem::path& path, const BaseWeights& w,
                         std::map<std::string, std::string> metadata = {}) {
    TensorFile tf;
    tf.metadata = std::move(metadata);
    for (const auto& l : w.layers()) tf.tensors[l.name] = Tensor{Dtype::f64, l.weight};
    write_tensor_file(path, tf);
}

inline BaseWeights load_weights(const std::filesystem::path& path) {
    TensorFile tf = read_tensor_file(path);
    std::vector<Layer> layers;
    for (auto& [name, t] : tf.tensors) {
        if (!t.value.all_finite())
            throw FormatError(FormatErrorKind::malformed_header, 8, "tensor '" + name + "' has non-finite values");
        layers.push_back({name, std::move(t.value)});
    }
    return BaseWeights(std::move(layers));
}

} // namespace lora_cl
