#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vivim/boundary.hpp"
#include "vivim/common.hpp"
#include "vivim/net.hpp"
#include "vivim/tensor.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, a section table of (name, offset, length), then
// one little-endian 64-bit float blob per named parameter. Integers in the
// table are little-endian 64-bit; doubles are serialised through their bit
// patterns, so a round trip is bitwise exact on any host.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[9] = "VIVIMCK1";

using SectionList = std::vector<std::pair<std::string, std::vector<double>>>;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& buf, std::size_t& pos) {
    if (pos + 8 > buf.size()) throw FormatError("checkpoint: truncated integer");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
}

}  // namespace detail

inline void checkpoint_save(const std::filesystem::path& path, const SectionList& sections) {
    std::string table;
    std::size_t header = 8 + 8;  // magic + section count
    for (const auto& [name, values] : sections) header += 8 + name.size() + 16;
    std::size_t offset = header;
    for (const auto& [name, values] : sections) {
        if (name.empty()) throw Error("checkpoint_save: empty section name");
        detail::put_u64(table, name.size());
        table += name;
        detail::put_u64(table, offset);
        detail::put_u64(table, values.size() * 8);
        offset += values.size() * 8;
    }
    std::string out;
    out.reserve(offset);
    out.append(kCheckpointMagic, 8);
    detail::put_u64(out, sections.size());
    out += table;
    for (const auto& [name, values] : sections)
        for (double v : values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError(str_cat("checkpoint_save: cannot open ", path.string()));
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError(str_cat("checkpoint_save: short write to ", path.string()));
}

inline SectionList checkpoint_load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(str_cat("checkpoint_load: cannot open ", path.string()));
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || buf.compare(0, 8, kCheckpointMagic, 8) != 0)
        throw FormatError(str_cat("checkpoint_load: bad magic in ", path.string()));
    std::size_t pos = 8;
    const std::uint64_t count = detail::get_u64(buf, pos);
    struct Entry {
        std::string name;
        std::uint64_t offset, bytes;
    };
    std::vector<Entry> entries;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = detail::get_u64(buf, pos);
        if (pos + name_len > buf.size()) throw FormatError("checkpoint_load: truncated name");
        Entry e;
        e.name = buf.substr(pos, name_len);
        pos += name_len;
        e.offset = detail::get_u64(buf, pos);
        e.bytes = detail::get_u64(buf, pos);
        if (e.bytes % 8 != 0) throw FormatError("checkpoint_load: blob length not 8-aligned");
        entries.push_back(std::move(e));
    }
    SectionList sections;
    for (const Entry& e : entries) {
        if (e.offset + e.bytes > buf.size())
            throw FormatError(str_cat("checkpoint_load: truncated blob for ", e.name));
        std::vector<double> values(e.bytes / 8);
        std::size_t p = e.offset;
        for (double& v : values) v = std::bit_cast<double>(detail::get_u64(buf, p));
        for (const auto& [seen, ignored] : sections)
            if (seen == e.name)
                throw FormatError(str_cat("checkpoint_load: duplicate section ", e.name));
        sections.emplace_back(e.name, std::move(values));
    }
    return sections;
}

// ---------------------------------------------------------------------------
// Model glue. Network parameters keep their visitor names; the affine
// estimator's live under "affine.". Loading restores every parameter
// bitwise into the existing tensors and rejects both unknown file sections
// and parameters the file lacks.
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, Tensor>> named_params(VivimNet& net,
                                                                AffineEstimator* est = nullptr) {
    std::vector<std::pair<std::string, Tensor>> out;
    net.visit_params([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    if (est)
        est->visit_params("affine.",
                          [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

inline void checkpoint_save_model(const std::filesystem::path& path, VivimNet& net,
                                  AffineEstimator* est = nullptr) {
    SectionList sections;
    for (auto& [name, t] : named_params(net, est)) sections.emplace_back(name, t.to_vector());
    checkpoint_save(path, sections);
}

namespace detail {

// Validates the full name/size correspondence before touching any tensor,
// so a failed load leaves the model as it was.
inline void restore_params(const SectionList& sections,
                           std::vector<std::pair<std::string, Tensor>> params) {
    std::map<std::string, const std::vector<double>*> by_name;
    for (const auto& [name, values] : sections) by_name[name] = &values;
    for (const auto& [name, t] : params) {
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw FormatError(str_cat("checkpoint: file lacks parameter ", name));
        if (it->second->size() != t.numel())
            throw FormatError(str_cat("checkpoint: size mismatch for ", name, ": file has ",
                                      it->second->size(), ", model needs ", t.numel()));
    }
    if (by_name.size() != params.size())
        for (const auto& [name, values] : by_name) {
            bool known = false;
            for (const auto& [pname, t] : params) known = known || pname == name;
            if (!known) throw FormatError(str_cat("checkpoint: unknown parameter ", name));
        }
    for (auto& [name, t] : params) {
        const std::vector<double>& src = *by_name[name];
        double* dst = t.mut_data();
        for (std::size_t i = 0; i < t.numel(); ++i) dst[i] = src[i];
    }
}

}  // namespace detail

inline void checkpoint_load_model(const std::filesystem::path& path, VivimNet& net,
                                  AffineEstimator* est = nullptr) {
    detail::restore_params(checkpoint_load(path), named_params(net, est));
}

inline void checkpoint_save_estimator(const std::filesystem::path& path, AffineEstimator& est) {
    SectionList sections;
    est.visit_params("affine.", [&](const std::string& name, Tensor& t) {
        sections.emplace_back(name, t.to_vector());
    });
    checkpoint_save(path, sections);
}

inline void checkpoint_load_estimator(const std::filesystem::path& path, AffineEstimator& est) {
    std::vector<std::pair<std::string, Tensor>> params;
    est.visit_params("affine.",
                     [&](const std::string& name, Tensor& t) { params.emplace_back(name, t); });
    detail::restore_params(checkpoint_load(path), std::move(params));
}

}  // namespace vivim
