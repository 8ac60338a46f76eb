// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

using Metadata = std::map<std::string, std::string>;

// Location and layout of one tensor inside a checkpoint file. Offsets are
// relative to the start of the payload section.
struct TensorInfo {
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t byte_size() const noexcept { return element_count(shape) * dtype_size(dtype); }
};

// Name -> layout, iterated in canonical (byte-lexicographic) order.
using Layout = std::map<std::string, TensorInfo>;

// In-memory checkpoint. std::map keeps tensors in canonical order.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    Metadata metadata;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline bool valid_utf8(std::string_view s) noexcept {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xe0) == 0xc0) {
            len = 2;
            cp = c & 0x1f;
        } else if ((c & 0xf0) == 0xe0) {
            len = 3;
            cp = c & 0x0f;
        } else if ((c & 0xf8) == 0xf0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > s.size()) return false;
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xc0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3f);
        }
        // Reject overlong forms, surrogates and out-of-range code points.
        if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
            cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) {
            return false;
        }
        i += len;
    }
    return true;
}

// Printable UTF-8, no control characters, not the reserved metadata key.
inline bool valid_tensor_name(std::string_view name) noexcept {
    if (name.empty() || name == "__metadata__" || !valid_utf8(name)) return false;
    return std::none_of(name.begin(), name.end(), [](char ch) {
        const auto c = static_cast<unsigned char>(ch);
        return c < 0x20 || c == 0x7f;
    });
}

namespace detail {

struct FileDescriptor {
    int fd = -1;
    explicit FileDescriptor(int f) : fd(f) {}
    FileDescriptor(const FileDescriptor&) = delete;
    FileDescriptor& operator=(const FileDescriptor&) = delete;
    ~FileDescriptor() {
        if (fd >= 0) ::close(fd);
    }
};

inline void pread_exact(int fd, std::byte* dst, std::uint64_t size, std::uint64_t offset,
                        const std::string& path) {
    while (size > 0) {
        const ssize_t got = ::pread(fd, dst, size, static_cast<off_t>(offset));
        if (got < 0 && errno == EINTR) continue;
        if (got <= 0) {
            throw IoError("short read from '" + path + "' at byte " + std::to_string(offset));
        }
        dst += got;
        size -= static_cast<std::uint64_t>(got);
        offset += static_cast<std::uint64_t>(got);
    }
}

struct ParsedHeader {
    Layout layout;
    Metadata metadata;
};

// Byte position of a tensor's key inside the header, for diagnostics.
inline std::uint64_t key_position(std::string_view header, const std::string& name) {
    const auto quoted = nlohmann::json(name).dump();
    const auto at = header.find(quoted);
    return 8 + (at == std::string_view::npos ? 0 : at);
}

// Validates the JSON header against a payload section of `payload_size`
// bytes. Offsets must be in bounds, sized to match dtype*shape and pairwise
// disjoint; gaps and any ordering are accepted.
inline ParsedHeader parse_header(std::string_view header, std::uint64_t payload_size) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed header JSON: ") + e.what(), "",
                          8 + (e.byte > 0 ? e.byte - 1 : 0));
    }
    if (!doc.is_object()) throw FormatError("header is not a JSON object", "", 8);

    const std::uint64_t payload_start = 8 + header.size();
    ParsedHeader out;
    for (const auto& [name, entry] : doc.items()) {
        const auto pos = key_position(header, name);
        if (name == "__metadata__") {
            if (!entry.is_object()) throw FormatError("__metadata__ must be an object", "", pos);
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string()) throw FormatError("metadata value for '" + k + "' is not a string", "", pos);
                out.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!valid_tensor_name(name)) throw FormatError("invalid tensor name", name, pos);
        if (!entry.is_object() || entry.size() != 3 || !entry.contains("dtype") ||
            !entry.contains("shape") || !entry.contains("data_offsets")) {
            throw FormatError("entry must have exactly dtype, shape and data_offsets", name, pos);
        }
        TensorInfo info;
        const auto& dt = entry["dtype"];
        const auto parsed = dt.is_string() ? parse_dtype(dt.get<std::string>()) : std::nullopt;
        if (!parsed) throw FormatError("unknown dtype " + dt.dump(), name, pos);
        info.dtype = *parsed;

        const auto& shape = entry["shape"];
        if (!shape.is_array()) throw FormatError("shape is not an array", name, pos);
        for (const auto& d : shape) {
            if (!d.is_number_unsigned()) throw FormatError("shape entry is not a non-negative integer", name, pos);
            info.shape.push_back(d.get<std::uint64_t>());
        }
        const auto& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned()) {
            throw FormatError("data_offsets must be two non-negative integers", name, pos);
        }
        info.begin = offs[0].get<std::uint64_t>();
        info.end = offs[1].get<std::uint64_t>();
        if (info.begin > info.end) {
            throw FormatError("data_offsets begin exceeds end", name, payload_start + info.begin);
        }
        if (info.end > payload_size) {
            throw FormatError("data_offsets out of bounds (payload is " + std::to_string(payload_size) +
                                  " bytes)",
                              name, payload_start + info.end);
        }
        if (info.end - info.begin != info.byte_size()) {
            throw FormatError("data_offsets span " + std::to_string(info.end - info.begin) +
                                  " bytes but dtype and shape need " + std::to_string(info.byte_size()),
                              name, payload_start + info.begin);
        }
        out.layout.emplace(name, std::move(info));
    }

    std::vector<std::pair<std::string, const TensorInfo*>> by_offset;
    for (const auto& [name, info] : out.layout) by_offset.emplace_back(name, &info);
    std::sort(by_offset.begin(), by_offset.end(), [](const auto& a, const auto& b) {
        return a.second->begin != b.second->begin ? a.second->begin < b.second->begin
                                                  : a.second->end < b.second->end;
    });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        const auto& prev = *by_offset[i - 1].second;
        const auto& cur = *by_offset[i].second;
        // Zero-length tensors occupy no bytes and cannot overlap anything.
        if (cur.begin < prev.end && cur.begin != cur.end) {
            throw FormatError("overlapping data_offsets with '" + by_offset[i - 1].first + "'",
                              by_offset[i].first, payload_start + cur.begin);
        }
    }
    return out;
}

}  // namespace detail

// Read-only handle on a checkpoint file. Opening parses and validates the
// header only; payloads are read on demand with pread, so one handle may be
// shared by threads loading distinct tensors concurrently.
class CheckpointFile {
public:
    static CheckpointFile open(const std::filesystem::path& path) {
        const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
        if (fd < 0) {
            throw IoError("cannot open '" + path.string() + "': " + std::strerror(errno));
        }
        auto state = std::make_shared<State>(fd);
        state->path = path;

        struct stat st {};
        if (::fstat(fd, &st) != 0) throw IoError("cannot stat '" + path.string() + "'");
        const auto file_size = static_cast<std::uint64_t>(st.st_size);
        if (file_size < 8) {
            throw FormatError("truncated file: " + std::to_string(file_size) +
                                  " bytes, header length needs 8",
                              "", file_size);
        }
        std::byte len_bytes[8];
        detail::pread_exact(fd, len_bytes, 8, 0, path.string());
        std::uint64_t header_len = 0;
        for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | static_cast<std::uint8_t>(len_bytes[i]);
        if (header_len > file_size - 8) {
            throw FormatError("truncated file: header length " + std::to_string(header_len) +
                                  " exceeds remaining " + std::to_string(file_size - 8) + " bytes",
                              "", 8);
        }
        std::string header(header_len, '\0');
        detail::pread_exact(fd, reinterpret_cast<std::byte*>(header.data()), header_len, 8, path.string());
        if (!valid_utf8(header)) throw FormatError("header is not valid UTF-8", "", 8);

        auto parsed = detail::parse_header(header, file_size - 8 - header_len);
        state->layout = std::move(parsed.layout);
        state->metadata = std::move(parsed.metadata);
        state->payload_start = 8 + header_len;

        CheckpointFile f;
        f.state_ = std::move(state);
        return f;
    }

    const std::filesystem::path& path() const noexcept { return state_->path; }
    const Layout& layout() const noexcept { return state_->layout; }
    const Metadata& metadata() const noexcept { return state_->metadata; }
    bool contains(const std::string& name) const { return state_->layout.count(name) != 0; }

    const TensorInfo& info(const std::string& name) const {
        auto it = state_->layout.find(name);
        if (it == state_->layout.end()) {
            throw ValidationError("no tensor '" + name + "' in '" + state_->path.string() + "'");
        }
        return it->second;
    }

    // Loads one tensor in its stored dtype.
    Tensor load(const std::string& name) const {
        const auto& ti = info(name);
        Tensor t(ti.dtype, ti.shape);
        read_range(t.data.data(), ti.begin, ti.byte_size());
        return t;
    }

    // Loads one tensor widened to F32. BF16 payloads are converted in bounded
    // chunks so only the F32 result is resident in full.
    Tensor load_f32(const std::string& name) const {
        const auto& ti = info(name);
        if (ti.dtype == DType::F32) return load(name);
        Tensor out(DType::F32, ti.shape);
        auto dst = out.f32();
        constexpr std::size_t chunk = 1 << 20;
        ByteBuffer scratch(std::min<std::size_t>(chunk, dst.size()) * 2);
        for (std::size_t at = 0; at < dst.size(); at += chunk) {
            const std::size_t n = std::min(chunk, dst.size() - at);
            read_range(scratch.data(), ti.begin + at * 2, n * 2);
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t bits;
                std::memcpy(&bits, scratch.data() + i * 2, 2);
                dst[at + i] = bf16_to_f32(bits);
            }
        }
        return out;
    }

    Checkpoint load_all() const {
        Checkpoint c;
        c.metadata = state_->metadata;
        for (const auto& [name, ti] : state_->layout) c.tensors.emplace(name, load(name));
        return c;
    }

    // Total payload bytes read through this handle (and its copies).
    std::uint64_t payload_bytes_read() const noexcept { return state_->bytes_read.load(); }

private:
    struct State {
        explicit State(int fd) : file(fd) {}
        detail::FileDescriptor file;
        std::filesystem::path path;
        Layout layout;
        Metadata metadata;
        std::uint64_t payload_start = 0;
        std::atomic<std::uint64_t> bytes_read{0};
    };

    CheckpointFile() = default;

    void read_range(std::byte* dst, std::uint64_t begin, std::uint64_t size) const {
        detail::pread_exact(state_->file.fd, dst, size, state_->payload_start + begin, state_->path.string());
        state_->bytes_read += size;
    }

    std::shared_ptr<State> state_;
};

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) { return CheckpointFile::open(path); }

// Streams a checkpoint to disk one tensor at a time. The full layout is fixed
// up front so the header can be written first; tensors must then arrive in
// canonical name order. Output goes to a temporary sibling file that is
// renamed into place by finish(), so failures never leave a partial file.
class CheckpointWriter {
public:
    struct Entry {
        DType dtype;
        Shape shape;
    };

    CheckpointWriter(std::filesystem::path path, const std::map<std::string, Entry>& entries,
                     const Metadata& metadata = {})
        : path_(std::move(path)), tmp_path_(path_.string() + ".partial") {
        nlohmann::json header = nlohmann::json::object();
        std::uint64_t offset = 0;
        for (const auto& [name, e] : entries) {
            if (!valid_tensor_name(name)) throw ValidationError("invalid tensor name '" + name + "'");
            const std::uint64_t size = element_count(e.shape) * dtype_size(e.dtype);
            header[name] = {{"dtype", std::string(dtype_name(e.dtype))},
                            {"shape", e.shape},
                            {"data_offsets", {offset, offset + size}}};
            order_.push_back({name, e.dtype, e.shape});
            offset += size;
        }
        if (!metadata.empty()) header["__metadata__"] = metadata;

        std::string text = header.dump();
        // Pad with spaces so the payload starts 8-byte aligned.
        text.append((8 - text.size() % 8) % 8, ' ');

        out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
        if (!out_) throw IoError("cannot create '" + tmp_path_.string() + "'");
        std::uint64_t n = text.size();
        char len[8];
        for (int i = 0; i < 8; ++i) len[i] = static_cast<char>((n >> (8 * i)) & 0xff);
        out_.write(len, 8);
        out_.write(text.data(), static_cast<std::streamsize>(text.size()));
        check_stream();
    }

    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    ~CheckpointWriter() {
        if (!finished_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_path_, ec);
        }
    }

    // The next tensor in canonical order. F32 input is narrowed when the
    // layout asks for BF16.
    void write(const std::string& name, const Tensor& t) {
        if (next_ >= order_.size() || order_[next_].name != name) {
            throw ValidationError("tensor '" + name + "' written out of canonical order");
        }
        const auto& slot = order_[next_];
        if (t.shape != slot.shape) {
            throw ValidationError("tensor '" + name + "' has shape " + shape_string(t.shape) +
                                  ", layout says " + shape_string(slot.shape));
        }
        if (t.dtype == slot.dtype) {
            out_.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.byte_size()));
        } else if (t.dtype == DType::F32 && slot.dtype == DType::BF16) {
            auto src = t.f32();
            constexpr std::size_t chunk = 1 << 20;
            ByteBuffer scratch(std::min<std::size_t>(chunk, src.size()) * 2);
            for (std::size_t at = 0; at < src.size(); at += chunk) {
                const std::size_t n = std::min(chunk, src.size() - at);
                for (std::size_t i = 0; i < n; ++i) {
                    const std::uint16_t bits = f32_to_bf16(src[at + i]);
                    std::memcpy(scratch.data() + i * 2, &bits, 2);
                }
                out_.write(reinterpret_cast<const char*>(scratch.data()), static_cast<std::streamsize>(n * 2));
            }
        } else {
            throw ValidationError("tensor '" + name + "' is BF16 but layout says F32");
        }
        check_stream();
        ++next_;
    }

    void finish() {
        if (next_ != order_.size()) {
            throw ValidationError("checkpoint incomplete: " + std::to_string(order_.size() - next_) +
                                  " tensors not written");
        }
        out_.close();
        if (!out_) throw IoError("failed to close '" + tmp_path_.string() + "'");
        std::error_code ec;
        std::filesystem::rename(tmp_path_, path_, ec);
        if (ec) throw IoError("cannot move output into '" + path_.string() + "': " + ec.message());
        finished_ = true;
    }

private:
    struct Slot {
        std::string name;
        DType dtype;
        Shape shape;
    };

    void check_stream() {
        if (!out_) throw IoError("write failed for '" + tmp_path_.string() + "'");
    }

    std::filesystem::path path_;
    std::filesystem::path tmp_path_;
    std::ofstream out_;
    std::vector<Slot> order_;
    std::size_t next_ = 0;
    bool finished_ = false;
};

inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::map<std::string, CheckpointWriter::Entry> entries;
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.data.size() != t.size() * dtype_size(t.dtype)) {
            throw ValidationError("tensor '" + name + "' payload does not match its shape");
        }
        entries.emplace(name, CheckpointWriter::Entry{t.dtype, t.shape});
    }
    CheckpointWriter w(path, entries, ckpt.metadata);
    for (const auto& [name, t] : ckpt.tensors) w.write(name, t);
    w.finish();
}

// ---------------------------------------------------------------------------
// Compatibility

inline Layout layout_of(const Layout& l) { return l; }
inline Layout layout_of(const CheckpointFile& f) { return f.layout(); }
inline Layout layout_of(const Checkpoint& c) {
    Layout l;
    for (const auto& [name, t] : c.tensors) l.emplace(name, TensorInfo{t.dtype, t.shape, 0, 0});
    return l;
}

struct CompatMismatch {
    enum class Reason { missing, shape_differs, dtype_differs };

    std::string name;
    std::size_t model_index = 0;  // the checkpoint lacking the tensor, or differing from the first
    Reason reason = Reason::missing;

    std::string reason_string() const {
        switch (reason) {
            case Reason::missing: return "missing-in-model-" + std::to_string(model_index);
            case Reason::shape_differs: return "shape-differs";
            case Reason::dtype_differs: return "dtype-differs";
        }
        return "unknown";
    }

    friend bool operator==(const CompatMismatch&, const CompatMismatch&) = default;
};

struct CompatReport {
    std::set<std::string> shared_names;
    std::vector<CompatMismatch> mismatches;

    bool ok() const noexcept { return mismatches.empty(); }

    std::vector<std::string> describe() const {
        std::vector<std::string> lines;
        for (const auto& m : mismatches) {
            lines.push_back(m.name + ": " + m.reason_string() +
                            (m.reason == CompatMismatch::Reason::missing ? "" : " (model " + std::to_string(m.model_index) + ")"));
        }
        return lines;
    }
};

// Compares every checkpoint against the first. A tensor present in model k
// but absent from model 0 is reported as missing-in-model-0.
inline CompatReport validate_compat(std::span<const Layout> layouts) {
    CompatReport report;
    if (layouts.empty()) throw ValidationError("validate_compat needs at least one checkpoint");
    const Layout& first = layouts.front();
    for (const auto& [name, ti] : first) {
        bool everywhere = true;
        for (std::size_t k = 1; k < layouts.size(); ++k) {
            auto it = layouts[k].find(name);
            if (it == layouts[k].end()) {
                report.mismatches.push_back({name, k, CompatMismatch::Reason::missing});
                everywhere = false;
            } else if (it->second.shape != ti.shape) {
                report.mismatches.push_back({name, k, CompatMismatch::Reason::shape_differs});
            } else if (it->second.dtype != ti.dtype) {
                report.mismatches.push_back({name, k, CompatMismatch::Reason::dtype_differs});
            }
        }
        if (everywhere) report.shared_names.insert(name);
    }
    std::set<std::string> reported_extra;
    for (std::size_t k = 1; k < layouts.size(); ++k) {
        for (const auto& [name, ti] : layouts[k]) {
            if (!first.count(name) && reported_extra.insert(name).second) {
                report.mismatches.push_back({name, 0, CompatMismatch::Reason::missing});
            }
        }
    }
    return report;
}

template <typename T>
CompatReport validate_compat(std::span<const T> ckpts) {
    std::vector<Layout> layouts;
    layouts.reserve(ckpts.size());
    for (const auto& c : ckpts) layouts.push_back(layout_of(c));
    return validate_compat(std::span<const Layout>(layouts));
}

template <typename T>
CompatReport validate_compat(const std::vector<T>& ckpts) {
    return validate_compat(std::span<const T>(ckpts));
}

}  // namespace mergeforge
