#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deviant/autodiff.hpp"
#include "deviant/feature_store.hpp"
#include "deviant/optim.hpp"
#include "deviant/tensor.hpp"

namespace deviant {

// Attention logits are divided by sqrt(head_dim) (PerHead) or sqrt(C) (FullWidth).
enum class AttentionScale { PerHead, FullWidth };

struct IdeConfig {
    std::size_t tokens = 45;     // M
    std::size_t channels = 384;  // C
    std::size_t heads = 8;
    std::size_t ffn_mult = 4;
    double dropout = 0.1;
    AttentionScale scale = AttentionScale::PerHead;
    bool residuals = true;
    bool posenc = true;

    std::size_t head_dim() const { return channels / heads; }
    double attention_scale() const;
    void validate() const;
    // M*C + 3(C^2 + C) + (C*4C + 4C) + (4C*C + C) for ffn_mult = 4.
    std::size_t parameter_count() const;
};

inline constexpr double kMaskBias = -1e9;

template <typename T>
struct IdeParams {
    Tensor<T> tokens;  // M x C
    Tensor<T> wq, bq, wk, bk, wv, bv;
    Tensor<T> w1, b1, w2, b2;

    // Tokens ~ N(0, 0.02^2); linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0.
    static IdeParams init(const IdeConfig& cfg, std::uint64_t seed);

    std::vector<Tensor<T>*> tensors();
    std::vector<const Tensor<T>*> tensors() const;
    static const std::vector<std::string>& names();
    std::size_t count() const;
    void zero_grad();
    void set_requires_grad(bool on);

    template <typename U>
    IdeParams<U> cast() const {
        IdeParams<U> out;
        auto dst = out.tensors();
        auto src = tensors();
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
        return out;
    }
};

// 2-D sinusoidal encoding for `images` stacked g x g grids (restarting per
// image): channels [0, C/2) encode the row, [C/2, C) the column, each half as
// interleaved sin/cos pairs with wavelengths 10000^(2i/(C/2)).
template <typename T>
Tensor<T> positional_encoding(std::size_t grid, std::size_t channels, std::size_t images);

// Additive attention bias over keys: 0 for anomalous patches, kMaskBias else.
template <typename T>
Tensor<T> attention_bias(std::span<const std::uint8_t> mask, std::size_t rows);

template <typename T>
struct IdeVars {
    Var tokens, wq, bq, wk, bk, wv, bv, w1, b1, w2, b2;
};

template <typename T>
IdeVars<T> bind_parameters(Tape<T>& tape, IdeParams<T>& params);

template <typename T>
struct IdeOutput {
    Var deviations;               // T*, M x C
    std::vector<Var> attention;   // per head, M x P, after masking (before dropout)
    Var attended;                 // concatenated head outputs before any residual, M x C
};

// Masked cross-attention of the tokens over abnormal-reference patches
// followed by a feed-forward block. Keys come from `features` (+ positional
// encoding), values from `values` (denoised deviations).
template <typename T>
IdeOutput<T> ide_forward(Tape<T>& tape, const IdeVars<T>& vars, const IdeConfig& cfg, const Tensor<T>& features,
                         const Tensor<T>& values, std::span<const std::uint8_t> mask, std::size_t grid,
                         bool train, Rng* rng);

struct DualLossWeights {
    double lambda1 = 1.0;
    double lambda2 = 0.8;
};

template <typename T>
struct DualLoss {
    Var total;
    Var discriminability;
    Var orthogonality;
};

// lambda1 * mean over masked rows of d_cos(f_den,i, closest token)
// + lambda2 * mean over ordered token pairs m1 != m2 of cosine^2.
// The closest-token choice is made on values and held fixed for backward.
template <typename T>
DualLoss<T> dual_loss(Tape<T>& tape, Var deviations, const Tensor<T>& values, std::span<const std::uint8_t> mask,
                      DualLossWeights w);

// Checkpoint ("IDCK"): header, named f32 parameter blocks, metadata blocks
// and optionally the optimizer state.
struct Checkpoint {
    IdeConfig ide;
    IdeParams<float> params;
    std::map<std::string, std::string> meta;
    std::optional<std::uint64_t> optimizer_steps;
    std::vector<AdamWSlot<float>> optimizer_slots;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

extern template struct IdeParams<float>;
extern template struct IdeParams<double>;

}  // namespace deviant
