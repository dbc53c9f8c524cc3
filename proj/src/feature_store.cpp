#include "deviant/feature_store.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"

namespace deviant {

namespace {

constexpr char kMagic[4] = {'I', 'D', 'F', 'S'};

std::size_t isqrt_exact(std::size_t n) {
    auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    return g * g == n ? g : 0;
}

// Uniform index in [0, n).
std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// k distinct elements of `from`, in draw order (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> from, std::size_t k,
                                                    Rng& rng) {
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + uniform_index(rng, from.size() - i);
        std::swap(from[i], from[j]);
    }
    from.resize(k);
    return from;
}

struct PoolIndex {
    std::vector<std::size_t> normals;
    std::map<std::string, std::vector<std::size_t>> by_type;
};

PoolIndex index_pool(const FeatureSet& fs) {
    PoolIndex idx;
    for (std::size_t i = 0; i < fs.n_images; ++i) {
        if (fs.is_normal(i)) idx.normals.push_back(i);
        else idx.by_type[fs.anomaly_types[i]].push_back(i);
    }
    return idx;
}

std::vector<std::size_t> without(const std::vector<std::size_t>& v, std::size_t x) {
    std::vector<std::size_t> out;
    out.reserve(v.size());
    for (const std::size_t e : v)
        if (e != x) out.push_back(e);
    return out;
}

}  // namespace

FeatureSet FeatureSet::empty(std::size_t n_patches, std::size_t channels) {
    FeatureSet fs;
    fs.n_patches = n_patches;
    fs.channels = channels;
    return fs;
}

std::size_t FeatureSet::grid() const {
    const std::size_t g = isqrt_exact(n_patches);
    if (g == 0) throw InvariantError("patch count " + std::to_string(n_patches) + " is not a perfect square");
    return g;
}

void FeatureSet::add_image(std::span<const float> feats, std::span<const std::uint8_t> mask,
                           std::uint8_t label, std::string anomaly_type) {
    if (feats.size() != n_patches * channels) throw DimensionError("add_image: feature block has wrong size");
    if (mask.size() != n_patches) throw DimensionError("add_image: mask has wrong size");
    features.insert(features.end(), feats.begin(), feats.end());
    masks.insert(masks.end(), mask.begin(), mask.end());
    labels.push_back(label);
    anomaly_types.push_back(std::move(anomaly_type));
    ++n_images;
}

void FeatureSet::validate() const {
    if (features.size() != n_images * n_patches * channels || labels.size() != n_images ||
        masks.size() != n_images * n_patches || anomaly_types.size() != n_images) {
        throw DimensionError("feature set buffers disagree with the declared dimensions");
    }
    if (n_patches == 0 || channels == 0) throw InvariantError("feature set needs at least one patch and channel");
    grid();
    for (std::size_t i = 0; i < n_images; ++i) {
        if (labels[i] > 1) throw InvariantError("image " + std::to_string(i) + " has label " + std::to_string(labels[i]));
        std::size_t set = 0;
        for (const std::uint8_t b : mask(i)) {
            if (b > 1) throw InvariantError("image " + std::to_string(i) + " has a non-binary mask entry");
            set += b;
        }
        if (labels[i] == 0 && set != 0) {
            throw InvariantError("normal image " + std::to_string(i) + " has " + std::to_string(set) +
                                 " anomalous mask bits");
        }
        if (labels[i] == 1 && set == 0) {
            throw InvariantError("abnormal image " + std::to_string(i) + " has an empty mask");
        }
    }
    for (const float v : features) {
        if (!std::isfinite(v)) throw InvariantError("feature set contains a non-finite value");
    }
}

Tensor<float> FeatureSet::stack(std::span<const std::size_t> ids) const {
    std::vector<float> data;
    data.reserve(ids.size() * n_patches * channels);
    for (const std::size_t id : ids) {
        if (id >= n_images) throw ContractError("image id " + std::to_string(id) + " out of range");
        auto img = image(id);
        data.insert(data.end(), img.begin(), img.end());
    }
    return Tensor<float>::matrix(ids.size() * n_patches, channels, std::move(data));
}

std::vector<std::uint8_t> FeatureSet::stack_masks(std::span<const std::size_t> ids) const {
    std::vector<std::uint8_t> out;
    out.reserve(ids.size() * n_patches);
    for (const std::size_t id : ids) {
        if (id >= n_images) throw ContractError("image id " + std::to_string(id) + " out of range");
        auto m = mask(id);
        out.insert(out.end(), m.begin(), m.end());
    }
    return out;
}

std::vector<std::uint8_t> encode_feature_set(const FeatureSet& fs) {
    fs.validate();
    detail::ByteWriter w;
    for (const char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
    w.u32(kFeatureFileVersion);
    w.u32(static_cast<std::uint32_t>(fs.n_images));
    w.u32(static_cast<std::uint32_t>(fs.n_patches));
    w.u32(static_cast<std::uint32_t>(fs.channels));
    const std::size_t mask_bytes = (fs.n_patches + 7) / 8;
    for (std::size_t i = 0; i < fs.n_images; ++i) {
        w.u8(fs.labels[i]);
        const std::string& type = fs.anomaly_types[i];
        if (type.size() > 0xFFFF) throw ContractError("anomaly type tag longer than 65535 bytes");
        w.u16(static_cast<std::uint16_t>(type.size()));
        w.text(type);
        std::vector<std::uint8_t> packed(mask_bytes, 0);
        auto m = fs.mask(i);
        for (std::size_t p = 0; p < fs.n_patches; ++p)
            if (m[p]) packed[p / 8] |= static_cast<std::uint8_t>(1u << (p % 8));
        w.bytes(packed);
        w.f32s(fs.image(i));
    }
    return std::move(w.buffer());
}

FeatureSet decode_feature_set(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    auto magic = r.bytes(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kMagic)) throw FormatError("bad magic, expected IDFS", 0);
    const std::uint64_t version_at = r.offset();
    const std::uint32_t version = r.u32("version");
    if (version != kFeatureFileVersion) {
        throw FormatError("unsupported feature file version " + std::to_string(version), version_at);
    }
    FeatureSet fs;
    fs.n_images = r.u32("n_images");
    fs.n_patches = r.u32("n_patches");
    fs.channels = r.u32("channels");
    if (fs.n_patches == 0 || fs.channels == 0) throw FormatError("zero patch or channel count", 12);
    const std::size_t mask_bytes = (fs.n_patches + 7) / 8;
    // Minimum bytes per image: label, tag length, mask, features.
    const std::size_t per_image = 1 + 2 + mask_bytes + fs.n_patches * fs.channels * 4;
    // Reserve only when the header is plausible; per-field reads report truncation.
    if (r.remaining() / per_image >= fs.n_images) fs.features.reserve(fs.n_images * fs.n_patches * fs.channels);
    for (std::size_t i = 0; i < fs.n_images; ++i) {
        fs.labels.push_back(r.u8("label"));
        const std::uint16_t len = r.u16("anomaly type length");
        fs.anomaly_types.push_back(r.text(len, "anomaly type"));
        const std::uint64_t mask_at = r.offset();
        auto packed = r.bytes(mask_bytes, "mask");
        for (std::size_t p = 0; p < fs.n_patches; ++p)
            fs.masks.push_back(static_cast<std::uint8_t>((packed[p / 8] >> (p % 8)) & 1u));
        for (std::size_t p = fs.n_patches; p < mask_bytes * 8; ++p) {
            if ((packed[p / 8] >> (p % 8)) & 1u) throw FormatError("mask padding bits are not zero", mask_at + p / 8);
        }
        const std::size_t base = fs.features.size();
        fs.features.resize(base + fs.n_patches * fs.channels);
        r.f32s(std::span<float>(fs.features).subspan(base), "features");
    }
    if (!r.at_end()) throw FormatError("trailing bytes after the last image", r.offset());
    fs.validate();
    return fs;
}

void write_feature_file(const std::filesystem::path& path, const FeatureSet& fs) {
    detail::write_file_bytes(path, encode_feature_set(fs));
}

FeatureSet read_feature_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("feature file not found: " + path.string());
    try {
        return decode_feature_set(detail::read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> pixels, std::size_t height,
                                          std::size_t width, std::size_t grid) {
    if (pixels.size() != height * width) throw DimensionError("downsample_mask: pixel count is not H*W");
    if (grid == 0) throw ContractError("downsample_mask: grid must be positive");
    const std::size_t cell_h = (height + grid - 1) / grid;
    const std::size_t cell_w = (width + grid - 1) / grid;
    std::vector<std::uint8_t> out(grid * grid, 0);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            if (pixels[y * width + x]) out[(y / cell_h) * grid + x / cell_w] = 1;
    return out;
}

std::vector<std::uint8_t> upsample_mask(std::span<const std::uint8_t> patches, std::size_t grid,
                                        std::size_t height, std::size_t width) {
    if (patches.size() != grid * grid) throw DimensionError("upsample_mask: patch count is not g*g");
    std::vector<std::uint8_t> out(height * width, 0);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            out[y * width + x] = patches[(y * grid / height) * grid + x * grid / width];
    return out;
}

void ShotCounts::validate() const {
    if (l1 == 0 || l2 == 0) throw ConfigError("shot counts L1 and L2 must be at least 1");
    if (!allow_l1_le_l2 && l1 <= l2) {
        throw ConfigError("L1 (" + std::to_string(l1) + ") must exceed L2 (" + std::to_string(l2) +
                          ") unless the override is set");
    }
}

Episode build_training_episode(const FeatureSet& pool, ShotCounts shots, Rng& rng) {
    shots.validate();
    const PoolIndex idx = index_pool(pool);
    auto eligible_types = [&](std::size_t q) {
        std::vector<std::string> types;
        for (const auto& [type, ids] : idx.by_type) {
            const std::size_t n = ids.size() - static_cast<std::size_t>(std::count(ids.begin(), ids.end(), q));
            if (n >= shots.l2) types.push_back(type);
        }
        return types;
    };
    std::vector<std::size_t> candidates;
    std::size_t best_normals = 0, best_type = 0;
    for (std::size_t q = 0; q < pool.n_images; ++q) {
        const std::size_t normals = idx.normals.size() - (pool.is_normal(q) ? 1 : 0);
        best_normals = std::max(best_normals, normals);
        for (const auto& [type, ids] : idx.by_type) {
            const std::size_t n = ids.size() - static_cast<std::size_t>(std::count(ids.begin(), ids.end(), q));
            best_type = std::max(best_type, n);
        }
        if (normals >= shots.l1 && !eligible_types(q).empty()) candidates.push_back(q);
    }
    if (candidates.empty()) {
        std::string why = "no legal training episode:";
        if (best_normals < shots.l1)
            why += " need " + std::to_string(shots.l1) + " normal references besides the query, have at most " +
                   std::to_string(best_normals) + ";";
        if (best_type < shots.l2)
            why += " need " + std::to_string(shots.l2) +
                   " abnormal references of one type besides the query, have at most " + std::to_string(best_type) + ";";
        if (pool.n_images == 0) why += " pool is empty;";
        throw CapacityError(why);
    }
    Episode ep;
    ep.query = candidates[uniform_index(rng, candidates.size())];
    const auto types = eligible_types(ep.query);
    ep.anomaly_type = types[uniform_index(rng, types.size())];
    ep.normals = sample_without_replacement(without(idx.normals, ep.query), shots.l1, rng);
    ep.abnormals = sample_without_replacement(without(idx.by_type.at(ep.anomaly_type), ep.query), shots.l2, rng);
    return ep;
}

std::string to_string(Setting s) { return s == Setting::General ? "general" : "hard"; }

Setting setting_from_string(std::string_view s) {
    if (s == "general") return Setting::General;
    if (s == "hard") return Setting::Hard;
    throw ConfigError("unknown setting '" + std::string(s) + "' (expected general or hard)");
}

EpisodeManifest build_inference_manifest(const FeatureSet& dataset, ShotCounts shots, std::uint64_t seed,
                                         Setting setting, std::string dataset_id) {
    shots.validate();
    const PoolIndex idx = index_pool(dataset);
    if (idx.normals.size() < shots.l1) {
        throw CapacityError("manifest needs " + std::to_string(shots.l1) + " normal images, dataset has " +
                            std::to_string(idx.normals.size()));
    }
    std::vector<std::string> types;
    std::size_t largest = 0;
    for (const auto& [type, ids] : idx.by_type) {
        largest = std::max(largest, ids.size());
        if (ids.size() >= shots.l2) types.push_back(type);
    }
    if (types.empty()) {
        throw CapacityError("manifest needs " + std::to_string(shots.l2) +
                            " abnormal images of one type, largest type has " + std::to_string(largest));
    }
    Rng rng(seed);
    EpisodeManifest m;
    m.dataset = std::move(dataset_id);
    m.seed = seed;
    m.l1 = shots.l1;
    m.l2 = shots.l2;
    m.setting = setting;
    m.anomaly_type = types[uniform_index(rng, types.size())];
    m.normal_ids = sample_without_replacement(idx.normals, shots.l1, rng);
    m.abnormal_ids = sample_without_replacement(idx.by_type.at(m.anomaly_type), shots.l2, rng);
    return m;
}

std::vector<std::size_t> hard_filter(const FeatureSet& dataset, const EpisodeManifest& manifest) {
    if (manifest.setting != Setting::Hard) throw ContractError("hard_filter requires a Hard-setting manifest");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < dataset.n_images; ++i) {
        if (!dataset.is_normal(i) && dataset.anomaly_types[i] == manifest.anomaly_type) continue;
        out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> query_ids(const FeatureSet& dataset, const EpisodeManifest& manifest) {
    if (manifest.setting == Setting::Hard) return hard_filter(dataset, manifest);
    std::vector<std::size_t> out(dataset.n_images);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

void check_manifest(const FeatureSet& dataset, const EpisodeManifest& manifest) {
    if (manifest.normal_ids.empty() || manifest.abnormal_ids.empty()) {
        throw InvariantError("manifest must list at least one normal and one abnormal reference");
    }
    std::set<std::size_t> seen;
    for (const std::size_t id : manifest.normal_ids) {
        if (id >= dataset.n_images) throw InvariantError("manifest normal id " + std::to_string(id) + " out of range");
        if (!dataset.is_normal(id)) throw InvariantError("manifest normal id " + std::to_string(id) + " is abnormal");
        if (!seen.insert(id).second) throw InvariantError("manifest repeats image " + std::to_string(id));
    }
    for (const std::size_t id : manifest.abnormal_ids) {
        if (id >= dataset.n_images) throw InvariantError("manifest abnormal id " + std::to_string(id) + " out of range");
        if (dataset.is_normal(id)) throw InvariantError("manifest abnormal id " + std::to_string(id) + " is normal");
        if (dataset.anomaly_types[id] != manifest.anomaly_type) {
            throw InvariantError("manifest abnormal id " + std::to_string(id) + " is of type '" +
                                 dataset.anomaly_types[id] + "', not '" + manifest.anomaly_type + "'");
        }
        if (!seen.insert(id).second) throw InvariantError("manifest repeats image " + std::to_string(id));
    }
}

std::string manifest_to_json(const EpisodeManifest& m) {
    nlohmann::ordered_json j;
    j["dataset"] = m.dataset;
    j["seed"] = m.seed;
    j["L1"] = m.l1;
    j["L2"] = m.l2;
    j["setting"] = to_string(m.setting);
    j["normal_ids"] = m.normal_ids;
    j["abnormal_ids"] = m.abnormal_ids;
    j["anomaly_type"] = m.anomaly_type;
    return j.dump(2) + "\n";
}

EpisodeManifest manifest_from_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), e.byte);
    }
    static const std::set<std::string> keys = {"dataset", "seed", "L1", "L2", "setting",
                                               "normal_ids", "abnormal_ids", "anomaly_type"};
    if (!j.is_object()) throw FormatError("manifest must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (!keys.count(k)) throw FormatError("manifest has unknown key '" + k + "'");
    }
    for (const auto& k : keys) {
        if (!j.contains(k)) throw FormatError("manifest is missing key '" + k + "'");
    }
    try {
        EpisodeManifest m;
        m.dataset = j.at("dataset").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.l1 = j.at("L1").get<std::size_t>();
        m.l2 = j.at("L2").get<std::size_t>();
        m.setting = setting_from_string(j.at("setting").get<std::string>());
        m.normal_ids = j.at("normal_ids").get<std::vector<std::size_t>>();
        m.abnormal_ids = j.at("abnormal_ids").get<std::vector<std::size_t>>();
        m.anomaly_type = j.at("anomaly_type").get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest field has the wrong type: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(e.what());
    }
}

void write_manifest(const std::filesystem::path& path, const EpisodeManifest& m) {
    detail::write_file_text(path, manifest_to_json(m));
}

EpisodeManifest read_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("manifest not found: " + path.string());
    const auto bytes = detail::read_file_bytes(path);
    return manifest_from_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace deviant
