#include "deviant/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace deviant {

std::string to_string(ScoringMode m) {
    switch (m) {
        case ScoringMode::Full: return "full";
        case ScoringMode::IdeOnly: return "ide-only";
        case ScoringMode::NveOnly: return "nve-only";
        case ScoringMode::MatchingOnly: return "matching-only";
    }
    return "full";
}

ScoringMode scoring_mode_from_string(const std::string& s) {
    if (s == "full") return ScoringMode::Full;
    if (s == "ide-only") return ScoringMode::IdeOnly;
    if (s == "nve-only") return ScoringMode::NveOnly;
    if (s == "matching-only") return ScoringMode::MatchingOnly;
    throw ConfigError("unknown scoring mode '" + s + "'");
}

std::string to_string(Upsample u) { return u == Upsample::Bilinear ? "bilinear" : "nearest"; }

Upsample upsample_from_string(const std::string& s) {
    if (s == "bilinear") return Upsample::Bilinear;
    if (s == "nearest") return Upsample::Nearest;
    throw ConfigError("unknown upsample mode '" + s + "'");
}

std::size_t top_fraction_count(std::size_t n) {
    if (n == 0) throw ContractError("image score of an empty patch set");
    return (n + 99) / 100;
}

double image_score(std::span<const float> patch_scores) {
    const std::size_t k = top_fraction_count(patch_scores.size());
    std::vector<float> s(patch_scores.begin(), patch_scores.end());
    std::partial_sort(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end(), std::greater<>());
    double acc = 0;
    for (std::size_t i = 0; i < k; ++i) acc += s[i];
    return acc / static_cast<double>(k);
}

std::vector<float> upsample_map(std::span<const float> g_scores, std::size_t grid, std::size_t height,
                                std::size_t width, Upsample mode) {
    if (g_scores.size() != grid * grid || grid == 0) throw DimensionError("upsample_map: expected g*g scores");
    if (height == 0 || width == 0) throw ContractError("upsample_map: empty output size");
    std::vector<float> out(height * width);
    if (mode == Upsample::Nearest) {
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                out[y * width + x] = g_scores[(y * grid / height) * grid + x * grid / width];
        return out;
    }
    auto coord = [grid](std::size_t i, std::size_t n) {
        return n == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(grid - 1) / static_cast<double>(n - 1);
    };
    for (std::size_t y = 0; y < height; ++y) {
        const double sy = coord(y, height);
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), grid - 1);
        const std::size_t y1 = std::min(y0 + 1, grid - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double sx = coord(x, width);
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), grid - 1);
            const std::size_t x1 = std::min(x0 + 1, grid - 1);
            const double fx = sx - static_cast<double>(x0);
            const double top = (1 - fx) * g_scores[y0 * grid + x0] + fx * g_scores[y0 * grid + x1];
            const double bot = (1 - fx) * g_scores[y1 * grid + x0] + fx * g_scores[y1 * grid + x1];
            out[y * width + x] = static_cast<float>((1 - fy) * top + fy * bot);
        }
    }
    return out;
}

template <typename T>
Var score_patches_graph(Tape<T>& tape, Var bank, const Tensor<T>& qdev, std::span<const double> normal_distance) {
    const auto& b = tape.value(bank);
    if (b.rank() != 2 || qdev.rank() != 2 || b.shape[1] != qdev.shape[1]) {
        throw DimensionError("score_patches_graph: bank " + shape_to_string(b.shape) + " vs deviations " +
                             shape_to_string(qdev.shape));
    }
    const std::size_t n = qdev.shape[0];
    if (normal_distance.size() != n) throw DimensionError("score_patches_graph: one normal distance per patch");
    const Var f = tape.constant(qdev);
    const Var inv = tape.transpose(tape.safe_reciprocal(tape.row_dot(bank, bank), T(kTinyTokenNorm2)));
    const Var coef = tape.mul_row(tape.matmul(f, tape.transpose(bank)), inv);
    const Var proj = tape.matmul(coef, bank);
    const Var cos = tape.row_dot(tape.normalize_rows(f, T(kZeroNorm)), tape.normalize_rows(proj, T(kZeroNorm)));
    Tensor<T> half_dq = Tensor<T>::zeros({n, 1});
    for (std::size_t i = 0; i < n; ++i) half_dq.data[i] = static_cast<T>(0.5 * normal_distance[i]);
    const Var raw = tape.add(tape.scale(cos, T(0.5)), tape.constant(std::move(half_dq)));
    return tape.clamp(raw, T(0), T(1));
}

template Var score_patches_graph<float>(Tape<float>&, Var, const Tensor<float>&, std::span<const double>);
template Var score_patches_graph<double>(Tape<double>&, Var, const Tensor<double>&, std::span<const double>);

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace

ReferenceContext::ReferenceContext(const FeatureSet& ds, std::span<const std::size_t> normal_ids,
                                   std::span<const std::size_t> abnormal_ids, const Checkpoint* ck,
                                   const ScoringConfig& cfg)
    : cfg_(cfg), n_patches_(ds.n_patches), channels_(ds.channels), grid_(ds.grid()) {
    if (normal_ids.empty() || abnormal_ids.empty()) {
        throw ContractError("scoring needs at least one normal and one abnormal reference");
    }
    if (cfg_.height == 0) cfg_.height = grid_ * 14;
    if (cfg_.width == 0) cfg_.width = grid_ * 14;
    const Tensor<float> normals = ds.stack(normal_ids);
    const Tensor<float> abn = ds.stack(abnormal_ids);
    const auto mask = ds.stack_masks(abnormal_ids);
    checksum_ = 14695981039346656037ull;
    checksum_ = fnv1a(checksum_, normals.data.data(), normals.numel() * sizeof(float));
    checksum_ = fnv1a(checksum_, abn.data.data(), abn.numel() * sizeof(float));
    checksum_ = fnv1a(checksum_, mask.data(), mask.size());
    pool_.emplace(normals);

    const std::size_t c = channels_;
    std::vector<std::size_t> masked;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) masked.push_back(i);
    if (masked.empty()) throw MaskError("abnormal references contain no anomalous patch");

    if (cfg_.mode == ScoringMode::MatchingOnly) {
        masked_refs_ = Tensor<float>::zeros({masked.size(), c});
        for (std::size_t s = 0; s < masked.size(); ++s)
            std::copy_n(abn.data.data() + masked[s] * c, c, masked_refs_.data.data() + s * c);
        return;
    }
    const DeviationField field = denoise_query(abn, *pool_, cfg_.nve);
    if (cfg_.mode == ScoringMode::NveOnly) {
        bank_ = Tensor<float>::zeros({1, c});
        std::vector<double> acc(c, 0.0);
        for (const std::size_t i : masked)
            for (std::size_t j = 0; j < c; ++j) acc[j] += field.denoised.data[i * c + j];
        for (std::size_t j = 0; j < c; ++j) bank_.data[j] = static_cast<float>(acc[j] / static_cast<double>(masked.size()));
        return;
    }
    if (ck == nullptr) throw ContractError("scoring mode '" + to_string(cfg_.mode) + "' needs a checkpoint");
    if (ck->ide.channels != c) {
        throw DimensionError("checkpoint expects " + std::to_string(ck->ide.channels) + " channels, features have " +
                             std::to_string(c));
    }
    IdeParams<float> params = ck->params;
    params.set_requires_grad(false);
    Tape<float> tape;
    const auto vars = bind_parameters(tape, params);
    const Tensor<float>& values = cfg_.mode == ScoringMode::IdeOnly ? field.residuals : field.denoised;
    const auto out = ide_forward(tape, vars, ck->ide, abn, values, mask, grid_, false, nullptr);
    bank_ = tape.value(out.deviations);
}

ReferenceContext::ReferenceContext(const FeatureSet& ds, const EpisodeManifest& m, const Checkpoint* ck,
                                   const ScoringConfig& cfg)
    : ReferenceContext(ds, m.normal_ids, m.abnormal_ids, ck, cfg) {}

ScoreDetail ReferenceContext::score_detail(std::span<const float> query) const {
    const std::size_t n = n_patches_, c = channels_;
    if (query.size() != n * c) throw DimensionError("query must have N*C features");
    const Tensor<float> q = Tensor<float>::matrix(n, c, std::vector<float>(query.begin(), query.end()));
    ScoreDetail out;
    out.map.grid = grid_;
    out.map.height = cfg_.height;
    out.map.width = cfg_.width;
    out.map.patch_scores.resize(n);
    out.projected = Tensor<float>::zeros({n, c});

    if (cfg_.mode == ScoringMode::MatchingOnly) {
        out.residuals = residual_deviations(q, *pool_);
        out.denoised = out.residuals;
        out.normal_distance.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto f = to_double(q.row(i));
            out.normal_distance[i] = nearest_normal(q.row(i), *pool_).distance;
            double best = -1.0;
            for (std::size_t s = 0; s < masked_refs_.shape[0]; ++s) {
                const auto r = to_double(masked_refs_.row(s));
                best = std::max(best, cosine<double>(f, r));
            }
            out.map.patch_scores[i] =
                static_cast<float>(std::clamp(0.5 * (best + out.normal_distance[i]), 0.0, 1.0));
        }
    } else {
        DeviationField field = denoise_query(q, *pool_, cfg_.nve);
        out.normal_distance = field.nearest_distance;
        out.residuals = std::move(field.residuals);
        out.denoised = std::move(field.denoised);
        const Tensor<float>& dev = cfg_.mode == ScoringMode::IdeOnly ? out.residuals : out.denoised;
        const Tensor<double> bank = bank_.cast<double>();
        for (std::size_t i = 0; i < n; ++i) {
            const auto f = to_double(dev.row(i));
            const auto proj = project<double>(f, bank);
            for (std::size_t j = 0; j < c; ++j) out.projected.data[i * c + j] = static_cast<float>(proj[j]);
            const double raw = 0.5 * (cosine<double>(f, proj) + out.normal_distance[i]);
            out.map.patch_scores[i] = static_cast<float>(std::clamp(raw, 0.0, 1.0));
        }
    }
    out.map.image_score = static_cast<float>(image_score(out.map.patch_scores));
    out.map.pixel_map = upsample_map(out.map.patch_scores, grid_, cfg_.height, cfg_.width, cfg_.upsample);
    return out;
}

ScoreMap ReferenceContext::score(std::span<const float> query) const { return score_detail(query).map; }

ScoreMap score_episode(const FeatureSet& ds, const Episode& ep, const Checkpoint* ck, const ScoringConfig& cfg) {
    const ReferenceContext ctx(ds, ep.normals, ep.abnormals, ck, cfg);
    return ctx.score(ds.image(ep.query));
}

namespace {
constexpr char kSmMagic[4] = {'I', 'D', 'S', 'M'};
}

std::vector<std::uint8_t> encode_score_map(const ScoreMap& m) {
    if (m.pixel_map.size() != m.height * m.width) throw DimensionError("score map pixel buffer is not H*W");
    detail::ByteWriter w;
    for (const char ch : kSmMagic) w.u8(static_cast<std::uint8_t>(ch));
    w.u32(static_cast<std::uint32_t>(m.height));
    w.u32(static_cast<std::uint32_t>(m.width));
    w.u32(static_cast<std::uint32_t>(m.patch_scores.size()));
    w.f32s(m.pixel_map);
    w.f32s(m.patch_scores);
    w.f32(m.image_score);
    return std::move(w.buffer());
}

ScoreMap decode_score_map(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    auto magic = r.bytes(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kSmMagic)) throw FormatError("bad magic, expected IDSM", 0);
    ScoreMap m;
    m.height = r.u32("height");
    m.width = r.u32("width");
    const std::size_t n = r.u32("patch count");
    const std::size_t g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) throw FormatError("patch count is not a perfect square", 12);
    m.grid = g;
    if ((m.height * m.width + n + 1) * 4 != r.remaining()) {
        throw FormatError("score map payload size disagrees with its header", r.offset());
    }
    m.pixel_map.resize(m.height * m.width);
    m.patch_scores.resize(n);
    r.f32s(m.pixel_map, "pixel map");
    r.f32s(m.patch_scores, "patch scores");
    m.image_score = r.f32("image score");
    return m;
}

void write_score_map(const std::filesystem::path& path, const ScoreMap& m) {
    detail::write_file_bytes(path, encode_score_map(m));
}

ScoreMap read_score_map(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("score map not found: " + path.string());
    return decode_score_map(detail::read_file_bytes(path));
}

void DeviationExport::append(std::size_t image_id, const ScoreDetail& d) {
    const std::size_t n = d.residuals.rows(), c = d.residuals.cols();
    if (channels == 0) channels = c;
    if (c != channels || d.denoised.numel() != n * c || d.projected.numel() != n * c) {
        throw DimensionError("deviation export: inconsistent block widths");
    }
    for (std::size_t p = 0; p < n; ++p) {
        image_ids.push_back(static_cast<std::uint32_t>(image_id));
        patch_ids.push_back(static_cast<std::uint32_t>(p));
        for (const Tensor<float>* t : {&d.residuals, &d.denoised, &d.projected}) {
            const auto row = t->row(p);
            rows.insert(rows.end(), row.begin(), row.end());
        }
    }
}

namespace {
constexpr char kDvMagic[4] = {'I', 'D', 'D', 'V'};
}

std::vector<std::uint8_t> encode_deviation_export(const DeviationExport& e) {
    if (e.patch_ids.size() != e.size() || e.rows.size() != e.size() * 3 * e.channels) {
        throw DimensionError("deviation export: row buffers disagree");
    }
    detail::ByteWriter w;
    for (const char ch : kDvMagic) w.u8(static_cast<std::uint8_t>(ch));
    w.u32(1);
    w.u64(e.size());
    w.u32(static_cast<std::uint32_t>(e.channels));
    const std::size_t width = 3 * e.channels;
    for (std::size_t i = 0; i < e.size(); ++i) {
        w.u32(e.image_ids[i]);
        w.u32(e.patch_ids[i]);
        w.f32s(std::span<const float>(e.rows.data() + i * width, width));
    }
    return std::move(w.buffer());
}

DeviationExport decode_deviation_export(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    auto magic = r.bytes(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kDvMagic)) throw FormatError("bad magic, expected IDDV", 0);
    if (const auto v = r.u32("version"); v != 1) throw FormatError("unsupported IDDV version " + std::to_string(v), 4);
    const std::uint64_t n = r.u64("row count");
    DeviationExport e;
    e.channels = r.u32("channels");
    const std::size_t width = 3 * e.channels;
    if ((8 + 4 * width) * n != r.remaining()) {
        throw FormatError("deviation export payload size disagrees with its header", r.offset());
    }
    e.image_ids.resize(n);
    e.patch_ids.resize(n);
    e.rows.resize(n * width);
    for (std::size_t i = 0; i < n; ++i) {
        e.image_ids[i] = r.u32("image id");
        e.patch_ids[i] = r.u32("patch id");
        r.f32s(std::span<float>(e.rows.data() + i * width, width), "row");
    }
    return e;
}

void write_deviation_export(const std::filesystem::path& path, const DeviationExport& e) {
    detail::write_file_bytes(path, encode_deviation_export(e));
}

DeviationExport read_deviation_export(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("deviation export not found: " + path.string());
    return decode_deviation_export(detail::read_file_bytes(path));
}

std::string format_score_table(std::span<const std::size_t> ids, std::span<const float> scores) {
    if (ids.size() != scores.size()) throw DimensionError("score table: ids and scores differ in length");
    std::string out;
    char buf[64];
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu\t%.9g\n", ids[i], static_cast<double>(scores[i]));
        out += buf;
    }
    return out;
}

std::vector<std::pair<std::size_t, float>> parse_score_table(const std::string& text) {
    std::vector<std::pair<std::size_t, float>> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("score table line " + std::to_string(lineno) + " has no tab");
        std::size_t id = 0;
        const auto [p, ec] = std::from_chars(line.data(), line.data() + tab, id);
        if (ec != std::errc() || p != line.data() + tab) {
            throw FormatError("score table line " + std::to_string(lineno) + " has a bad image id");
        }
        try {
            std::size_t used = 0;
            const float s = std::stof(line.substr(tab + 1), &used);
            if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
            out.emplace_back(id, s);
        } catch (const std::exception&) {
            throw FormatError("score table line " + std::to_string(lineno) + " has a bad score");
        }
    }
    return out;
}

}  // namespace deviant
