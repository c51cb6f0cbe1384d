#ifndef CORRDISTILL_FEATURE_STORE_HPP
#define CORRDISTILL_FEATURE_STORE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "corrdistill/binary_io.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

namespace fs = std::filesystem;

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::uint32_t kLabelFileVersion = 1;

// h x w grid of D-dimensional tokens, float32 row-major (h, w, D).
struct FeatureMap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t dim = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t d)
        : height(h), width(w), dim(d), data(static_cast<std::size_t>(h) * w * d, 0.0f) {}

    std::size_t tokens() const { return static_cast<std::size_t>(height) * width; }

    float& at(std::uint32_t r, std::uint32_t c, std::uint32_t k) {
        return data[(static_cast<std::size_t>(r) * width + c) * dim + k];
    }
    float at(std::uint32_t r, std::uint32_t c, std::uint32_t k) const {
        return data[(static_cast<std::size_t>(r) * width + c) * dim + k];
    }

    // (h*w) x D token matrix, upcast to real64.
    Matrix token_matrix() const {
        Matrix m(static_cast<Eigen::Index>(tokens()), static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < data.size(); ++i) m.data()[i] = static_cast<double>(data[i]);
        return m;
    }

    static FeatureMap from_tokens(std::uint32_t h, std::uint32_t w, const Matrix& tokens) {
        if (static_cast<std::size_t>(tokens.rows()) != static_cast<std::size_t>(h) * w) {
            throw ShapeError("FeatureMap::from_tokens: token count does not match grid");
        }
        FeatureMap f(h, w, static_cast<std::uint32_t>(tokens.cols()));
        for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = static_cast<float>(tokens.data()[i]);
        return f;
    }

    bool operator==(const FeatureMap&) const = default;
};

struct LabelMap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> labels;

    LabelMap() = default;
    LabelMap(std::uint32_t h, std::uint32_t w, std::uint8_t fill = kIgnoreLabel)
        : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(std::uint32_t r, std::uint32_t c) { return labels[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t at(std::uint32_t r, std::uint32_t c) const {
        return labels[static_cast<std::size_t>(r) * width + c];
    }

    bool operator==(const LabelMap&) const = default;
};

// ---------------------------------------------------------------------------
// Binary formats

inline void write_feature_file(const fs::path& path, const FeatureMap& f) {
    if (f.data.size() != f.tokens() * f.dim) throw ShapeError("write_feature_file: payload size mismatch");
    if (f.height == 0 || f.width == 0 || f.dim == 0) throw ShapeError("write_feature_file: zero extent");
    for (float v : f.data) {
        if (!std::isfinite(v)) throw FormatError(FormatErrorKind::non_finite, "write_feature_file: non-finite value");
    }
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDFM", kFeatureFileVersion);
    binio::write_le<std::uint32_t>(os, f.height);
    binio::write_le<std::uint32_t>(os, f.width);
    binio::write_le<std::uint32_t>(os, f.dim);
    binio::write_le_array<float>(os, f.data);
    binio::finish(os, path);
}

inline FeatureMap read_feature_file(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "feature file '" + path.string() + "'";
    binio::expect_magic(is, "CDFM", kFeatureFileVersion, what);
    const auto h = binio::read_le<std::uint32_t>(is, what);
    const auto w = binio::read_le<std::uint32_t>(is, what);
    const auto d = binio::read_le<std::uint32_t>(is, what);
    if (h == 0 || w == 0 || d == 0) {
        throw FormatError(FormatErrorKind::invalid_header, what + ": zero extent in header");
    }
    // Compare against the real remaining size before allocating.
    const auto here = is.tellg();
    is.seekg(0, std::ios::end);
    const auto remaining = static_cast<std::uintmax_t>(is.tellg() - here);
    is.seekg(here);
    const std::uintmax_t expected = static_cast<std::uintmax_t>(h) * w * d * sizeof(float);
    if (remaining < expected) throw FormatError(FormatErrorKind::truncated, what + ": payload truncated");
    FeatureMap f(h, w, d);
    binio::read_le_array<float>(is, f.data, what);
    for (float v : f.data) {
        if (!std::isfinite(v)) throw FormatError(FormatErrorKind::non_finite, what + ": non-finite value");
    }
    return f;
}

inline void write_label_file(const fs::path& path, const LabelMap& l) {
    if (l.labels.size() != static_cast<std::size_t>(l.height) * l.width) {
        throw ShapeError("write_label_file: payload size mismatch");
    }
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDLM", kLabelFileVersion);
    binio::write_le<std::uint32_t>(os, l.height);
    binio::write_le<std::uint32_t>(os, l.width);
    binio::write_le_array<std::uint8_t>(os, l.labels);
    binio::finish(os, path);
}

inline LabelMap read_label_file(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "label file '" + path.string() + "'";
    binio::expect_magic(is, "CDLM", kLabelFileVersion, what);
    const auto h = binio::read_le<std::uint32_t>(is, what);
    const auto w = binio::read_le<std::uint32_t>(is, what);
    if (h == 0 || w == 0) throw FormatError(FormatErrorKind::invalid_header, what + ": zero extent in header");
    LabelMap l(h, w);
    binio::read_le_array<std::uint8_t>(is, l.labels, what);
    return l;
}

// ---------------------------------------------------------------------------
// Resolution alignment

// Majority vote over factor x factor patches. Ignore pixels do not vote; an
// all-ignore patch stays ignore; ties go to the smallest class id.
inline LabelMap pool_labels(const LabelMap& l, std::uint32_t factor) {
    if (factor == 0) throw ShapeError("pool_labels: factor must be positive");
    if (l.height % factor != 0 || l.width % factor != 0) {
        throw ShapeError("pool_labels: " + std::to_string(l.height) + "x" + std::to_string(l.width) +
                         " not divisible by " + std::to_string(factor));
    }
    if (factor == 1) return l;
    LabelMap out(l.height / factor, l.width / factor);
    std::array<std::uint32_t, 256> counts{};
    for (std::uint32_t r = 0; r < out.height; ++r) {
        for (std::uint32_t c = 0; c < out.width; ++c) {
            counts.fill(0);
            for (std::uint32_t dr = 0; dr < factor; ++dr) {
                for (std::uint32_t dc = 0; dc < factor; ++dc) {
                    ++counts[l.at(r * factor + dr, c * factor + dc)];
                }
            }
            std::uint8_t best = kIgnoreLabel;
            std::uint32_t best_count = 0;
            for (std::uint32_t k = 0; k < kIgnoreLabel; ++k) {
                if (counts[k] > best_count) {
                    best_count = counts[k];
                    best = static_cast<std::uint8_t>(k);
                }
            }
            out.at(r, c) = best;
        }
    }
    return out;
}

namespace detail {

struct LerpTap {
    std::uint32_t lo;
    std::uint32_t hi;
    double frac;
};

// Half-pixel-center source taps for one output axis.
inline std::vector<LerpTap> bilinear_taps(std::uint32_t in, std::uint32_t factor) {
    std::vector<LerpTap> taps(static_cast<std::size_t>(in) * factor);
    for (std::size_t x = 0; x < taps.size(); ++x) {
        double src = (static_cast<double>(x) + 0.5) / factor - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::uint32_t>(std::floor(src));
        const auto hi = std::min(lo + 1, in - 1);
        taps[x] = {lo, hi, src - lo};
    }
    return taps;
}

}  // namespace detail

// Bilinear upsampling of an (h*w) x D token matrix to (h*f*w*f) x D.
inline Matrix upsample_tokens(const Matrix& tokens, std::uint32_t h, std::uint32_t w, std::uint32_t factor) {
    if (factor == 0) throw ShapeError("upsample: factor must be >= 1");
    if (static_cast<std::size_t>(tokens.rows()) != static_cast<std::size_t>(h) * w) {
        throw ShapeError("upsample: token count does not match grid");
    }
    if (factor == 1) return tokens;
    const auto ys = detail::bilinear_taps(h, factor);
    const auto xs = detail::bilinear_taps(w, factor);
    const std::size_t out_w = xs.size();
    Matrix out(static_cast<Eigen::Index>(ys.size() * out_w), tokens.cols());
    for (std::size_t y = 0; y < ys.size(); ++y) {
        const auto& ty = ys[y];
        for (std::size_t x = 0; x < out_w; ++x) {
            const auto& tx = xs[x];
            const auto idx = [&](std::uint32_t r, std::uint32_t c) {
                return static_cast<Eigen::Index>(static_cast<std::size_t>(r) * w + c);
            };
            const double w00 = (1.0 - ty.frac) * (1.0 - tx.frac);
            const double w01 = (1.0 - ty.frac) * tx.frac;
            const double w10 = ty.frac * (1.0 - tx.frac);
            const double w11 = ty.frac * tx.frac;
            out.row(static_cast<Eigen::Index>(y * out_w + x)) =
                w00 * tokens.row(idx(ty.lo, tx.lo)) + w01 * tokens.row(idx(ty.lo, tx.hi)) +
                w10 * tokens.row(idx(ty.hi, tx.lo)) + w11 * tokens.row(idx(ty.hi, tx.hi));
        }
    }
    return out;
}

inline FeatureMap upsample_features(const FeatureMap& f, std::uint32_t factor) {
    if (factor == 1) return f;
    Matrix up = upsample_tokens(f.token_matrix(), f.height, f.width, factor);
    return FeatureMap::from_tokens(f.height * factor, f.width * factor, up);
}

// Token mean, L2-normalized.
inline Vector pooled_embedding(const Matrix& tokens) {
    if (tokens.rows() == 0) throw DegenerateError("pooled_embedding: no tokens");
    Vector mean = tokens.colwise().mean().transpose();
    const double n = mean.norm();
    if (!(n >= kNormEps)) throw DegenerateError("pooled_embedding: mean token is zero");
    return mean / n;
}

inline Vector pooled_embedding(const FeatureMap& f) { return pooled_embedding(f.token_matrix()); }

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, val };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "val"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    throw FormatError(FormatErrorKind::parse, "unknown split '" + s + "'");
}

struct ManifestRecord {
    std::string id;
    fs::path feature_path;
    std::optional<fs::path> label_path;
    Split split = Split::train;
};

struct Manifest {
    std::vector<ManifestRecord> records;

    std::vector<const ManifestRecord*> of_split(Split s) const {
        std::vector<const ManifestRecord*> out;
        for (const auto& r : records) {
            if (r.split == s) out.push_back(&r);
        }
        return out;
    }
};

inline void validate_manifest(const Manifest& m, bool check_files) {
    std::set<std::string> seen;
    for (const auto& r : m.records) {
        if (r.id.empty()) throw FormatError(FormatErrorKind::parse, "manifest: empty id");
        if (!seen.insert(r.id).second) throw FormatError(FormatErrorKind::parse, "manifest: duplicate id '" + r.id + "'");
        if (check_files) {
            if (!fs::exists(r.feature_path)) {
                throw FormatError(FormatErrorKind::io, "manifest: missing feature file '" + r.feature_path.string() + "'");
            }
            if (r.label_path && !fs::exists(*r.label_path)) {
                throw FormatError(FormatErrorKind::io, "manifest: missing label file '" + r.label_path->string() + "'");
            }
        }
    }
}

// One JSON object per line; relative paths resolve against the manifest's directory.
inline Manifest read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatErrorKind::io, "cannot open manifest '" + path.string() + "'");
    const fs::path base = path.parent_path();
    const auto resolve = [&](const std::string& p) {
        fs::path q(p);
        return q.is_absolute() ? q : base / q;
    };
    Manifest m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestRecord r;
            r.id = j.at("id").get<std::string>();
            r.feature_path = resolve(j.at("feature_path").get<std::string>());
            if (j.contains("label_path") && !j.at("label_path").is_null()) {
                r.label_path = resolve(j.at("label_path").get<std::string>());
            }
            r.split = parse_split(j.at("split").get<std::string>());
            m.records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(FormatErrorKind::parse,
                              "manifest '" + path.string() + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    validate_manifest(m, true);
    return m;
}

inline void write_manifest(const fs::path& path, const Manifest& m) {
    validate_manifest(m, false);
    auto os = binio::open_out(path);
    for (const auto& r : m.records) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["feature_path"] = r.feature_path.generic_string();
        j["label_path"] = r.label_path ? nlohmann::ordered_json(r.label_path->generic_string()) : nullptr;
        j["split"] = to_string(r.split);
        os << j.dump() << '\n';
    }
    binio::finish(os, path);
}

struct Sample {
    std::string id;
    FeatureMap features;
    std::optional<LabelMap> labels;
};

inline std::vector<Sample> load_split(const Manifest& m, Split s) {
    std::vector<Sample> out;
    for (const auto* r : m.of_split(s)) {
        Sample smp{r->id, read_feature_file(r->feature_path), std::nullopt};
        if (r->label_path) smp.labels = read_label_file(*r->label_path);
        out.push_back(std::move(smp));
    }
    return out;
}

// ---------------------------------------------------------------------------
// kNN index over image embeddings

inline constexpr std::size_t kDefaultNeighbors = 7;

struct KnnIndex {
    std::size_t k = kDefaultNeighbors;
    std::map<std::string, Vector> embeddings;
    std::map<std::string, std::vector<std::string>> neighbors;

    const std::vector<std::string>& of(const std::string& id) const {
        auto it = neighbors.find(id);
        if (it == neighbors.end()) throw ContractError("knn index has no entry for '" + id + "'");
        return it->second;
    }
};

// Exact cosine kNN; ties broken by ascending id, self excluded.
inline KnnIndex build_knn_index(std::span<const std::pair<std::string, Vector>> items,
                                std::size_t k = kDefaultNeighbors) {
    if (items.size() < k + 1) {
        throw SizeError("build_knn_index: need at least " + std::to_string(k + 1) + " images, got " +
                        std::to_string(items.size()));
    }
    KnnIndex index;
    index.k = k;
    for (const auto& [id, e] : items) {
        if (!index.embeddings.emplace(id, e).second) throw ContractError("build_knn_index: duplicate id '" + id + "'");
    }
    // Iterate in id order so output is independent of input order.
    std::vector<std::pair<const std::string*, const Vector*>> sorted;
    for (const auto& [id, e] : index.embeddings) sorted.emplace_back(&id, &e);
    for (const auto& [id, e] : sorted) {
        std::vector<std::pair<double, const std::string*>> cand;
        cand.reserve(sorted.size() - 1);
        for (const auto& [other, oe] : sorted) {
            if (other == id) continue;
            cand.emplace_back(e->dot(*oe), other);
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                          [](const auto& l, const auto& r) {
                              if (l.first != r.first) return l.first > r.first;
                              return *l.second < *r.second;
                          });
        auto& list = index.neighbors[*id];
        for (std::size_t i = 0; i < k; ++i) list.push_back(*cand[i].second);
    }
    return index;
}

inline KnnIndex build_knn_index(std::span<const Sample> samples, std::size_t k = kDefaultNeighbors) {
    std::vector<std::pair<std::string, Vector>> items;
    items.reserve(samples.size());
    for (const auto& s : samples) items.emplace_back(s.id, pooled_embedding(s.features));
    return build_knn_index(std::span<const std::pair<std::string, Vector>>(items), k);
}

inline void write_knn_index(const fs::path& path, const KnnIndex& index) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [id, list] : index.neighbors) j[id] = list;
    auto os = binio::open_out(path);
    os << j.dump(2) << '\n';
    binio::finish(os, path);
}

inline KnnIndex read_knn_index(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatErrorKind::io, "cannot open knn index '" + path.string() + "'");
    KnnIndex index;
    try {
        const auto j = nlohmann::json::parse(is);
        std::optional<std::size_t> k;
        for (const auto& [id, list] : j.items()) {
            auto ids = list.get<std::vector<std::string>>();
            if (k && *k != ids.size()) throw FormatError(FormatErrorKind::parse, "knn index: ragged neighbor lists");
            k = ids.size();
            if (std::find(ids.begin(), ids.end(), id) != ids.end()) {
                throw FormatError(FormatErrorKind::parse, "knn index: '" + id + "' lists itself");
            }
            index.neighbors[id] = std::move(ids);
        }
        index.k = k.value_or(kDefaultNeighbors);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::parse, "knn index '" + path.string() + "': " + e.what());
    }
    return index;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_FEATURE_STORE_HPP
