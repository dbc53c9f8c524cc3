#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deviant/tensor.hpp"

namespace deviant {

// Patch features for a set of images: n_images x n_patches x channels, plus a
// per-patch anomaly bit, a 0/1 image label and an opaque anomaly-type tag.
struct FeatureSet {
    std::size_t n_images = 0;
    std::size_t n_patches = 0;
    std::size_t channels = 0;
    std::vector<float> features;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> masks;  // n_images * n_patches, each 0 or 1
    std::vector<std::string> anomaly_types;

    static FeatureSet empty(std::size_t n_patches, std::size_t channels);

    std::size_t grid() const;
    std::span<const float> image(std::size_t i) const {
        return {features.data() + i * n_patches * channels, n_patches * channels};
    }
    std::span<float> image(std::size_t i) {
        return {features.data() + i * n_patches * channels, n_patches * channels};
    }
    std::span<const float> patch(std::size_t i, std::size_t p) const {
        return {features.data() + (i * n_patches + p) * channels, channels};
    }
    std::span<const std::uint8_t> mask(std::size_t i) const {
        return {masks.data() + i * n_patches, n_patches};
    }
    bool is_normal(std::size_t i) const { return labels.at(i) == 0; }

    // Appends one image. The mask must have n_patches entries.
    void add_image(std::span<const float> feats, std::span<const std::uint8_t> mask,
                   std::uint8_t label, std::string anomaly_type = {});

    // Throws DimensionError / InvariantError when a structural or domain
    // invariant does not hold.
    void validate() const;

    // Rows of the given images' patches stacked as (ids.size()*N) x C.
    Tensor<float> stack(std::span<const std::size_t> ids) const;
    // Masks of the given images concatenated.
    std::vector<std::uint8_t> stack_masks(std::span<const std::size_t> ids) const;

    bool operator==(const FeatureSet&) const = default;
};

inline constexpr std::uint32_t kFeatureFileVersion = 1;

std::vector<std::uint8_t> encode_feature_set(const FeatureSet& fs);
FeatureSet decode_feature_set(std::span<const std::uint8_t> bytes);
void write_feature_file(const std::filesystem::path& path, const FeatureSet& fs);
FeatureSet read_feature_file(const std::filesystem::path& path);

// Max-pools an H x W binary mask onto a g x g grid; a patch is set iff any
// covered pixel is set. Sizes not divisible by g are zero-padded on the
// bottom/right to the next multiple.
std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> pixels, std::size_t height,
                                          std::size_t width, std::size_t grid);

// Nearest-neighbour expansion of a g x g patch mask to H x W.
std::vector<std::uint8_t> upsample_mask(std::span<const std::uint8_t> patches, std::size_t grid,
                                        std::size_t height, std::size_t width);

using Rng = std::mt19937_64;

struct Episode {
    std::size_t query = 0;
    std::vector<std::size_t> normals;
    std::vector<std::size_t> abnormals;
    std::string anomaly_type;
};

struct ShotCounts {
    std::size_t l1 = 2;
    std::size_t l2 = 1;
    bool allow_l1_le_l2 = false;
    void validate() const;
};

// Samples a training episode from a pool. The query is uniform over images
// for which a legal reference set exists; the anomaly type is uniform over
// types with enough images once the query is excluded; references are drawn
// without replacement.
Episode build_training_episode(const FeatureSet& pool, ShotCounts shots, Rng& rng);

enum class Setting { General, Hard };

std::string to_string(Setting s);
Setting setting_from_string(std::string_view s);

struct EpisodeManifest {
    std::string dataset;
    std::uint64_t seed = 0;
    std::size_t l1 = 0;
    std::size_t l2 = 0;
    Setting setting = Setting::General;
    std::vector<std::size_t> normal_ids;
    std::vector<std::size_t> abnormal_ids;
    std::string anomaly_type;

    bool operator==(const EpisodeManifest&) const = default;
};

// Fixed reference set for a whole dataset: a uniformly chosen anomaly type
// among those with at least L2 images, then L1 normals and L2 abnormals of
// that type without replacement.
EpisodeManifest build_inference_manifest(const FeatureSet& dataset, ShotCounts shots,
                                         std::uint64_t seed, Setting setting,
                                         std::string dataset_id = {});

// Queries excluding every anomalous image of the manifest's anomaly type.
std::vector<std::size_t> hard_filter(const FeatureSet& dataset, const EpisodeManifest& manifest);

// All images for General, hard_filter() for Hard.
std::vector<std::size_t> query_ids(const FeatureSet& dataset, const EpisodeManifest& manifest);

// Checks that every id is in range and of the right class and type.
void check_manifest(const FeatureSet& dataset, const EpisodeManifest& manifest);

std::string manifest_to_json(const EpisodeManifest& m);
EpisodeManifest manifest_from_json(std::string_view text);
void write_manifest(const std::filesystem::path& path, const EpisodeManifest& m);
EpisodeManifest read_manifest(const std::filesystem::path& path);

}  // namespace deviant
