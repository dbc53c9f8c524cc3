#include "deviant/ide.hpp"

#include <cmath>
#include <random>

#include <json.hpp>

#include "binary_io.hpp"

namespace deviant {

double IdeConfig::attention_scale() const {
    return 1.0 / std::sqrt(static_cast<double>(scale == AttentionScale::FullWidth ? channels : head_dim()));
}

void IdeConfig::validate() const {
    if (tokens == 0) throw ConfigError("ide: token count must be positive");
    if (channels == 0 || heads == 0) throw ConfigError("ide: channels and heads must be positive");
    if (channels % heads != 0) {
        throw ConfigError("ide: channels (" + std::to_string(channels) + ") not divisible by heads (" +
                          std::to_string(heads) + ")");
    }
    if (posenc && channels % 4 != 0) throw ConfigError("ide: positional encoding needs channels divisible by 4");
    if (ffn_mult == 0) throw ConfigError("ide: ffn multiplier must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("ide: dropout must lie in [0, 1)");
}

std::size_t IdeConfig::parameter_count() const {
    const std::size_t c = channels, h = ffn_mult * channels;
    return tokens * c + 3 * (c * c + c) + (c * h + h) + (h * c + c);
}

template <typename T>
IdeParams<T> IdeParams<T>::init(const IdeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t c = cfg.channels, h = cfg.ffn_mult * cfg.channels;
    Rng rng(seed);
    IdeParams p;
    std::normal_distribution<double> tok(0.0, 0.02);
    p.tokens = Tensor<T>::zeros({cfg.tokens, c});
    for (auto& v : p.tokens.data) v = static_cast<T>(tok(rng));
    auto linear = [&](std::size_t in, std::size_t out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        auto w = Tensor<T>::zeros({in, out});
        for (auto& v : w.data) v = static_cast<T>(u(rng));
        return w;
    };
    p.wq = linear(c, c);
    p.bq = Tensor<T>::zeros({1, c});
    p.wk = linear(c, c);
    p.bk = Tensor<T>::zeros({1, c});
    p.wv = linear(c, c);
    p.bv = Tensor<T>::zeros({1, c});
    p.w1 = linear(c, h);
    p.b1 = Tensor<T>::zeros({1, h});
    p.w2 = linear(h, c);
    p.b2 = Tensor<T>::zeros({1, c});
    p.set_requires_grad(true);
    return p;
}

template <typename T>
std::vector<Tensor<T>*> IdeParams<T>::tensors() {
    return {&tokens, &wq, &bq, &wk, &bk, &wv, &bv, &w1, &b1, &w2, &b2};
}

template <typename T>
std::vector<const Tensor<T>*> IdeParams<T>::tensors() const {
    return {&tokens, &wq, &bq, &wk, &bk, &wv, &bv, &w1, &b1, &w2, &b2};
}

template <typename T>
const std::vector<std::string>& IdeParams<T>::names() {
    static const std::vector<std::string> n = {"tokens", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                                               "attn.bv", "ffn.w1",  "ffn.b1",  "ffn.w2",  "ffn.b2"};
    return n;
}

template <typename T>
std::size_t IdeParams<T>::count() const {
    std::size_t n = 0;
    for (const auto* t : tensors()) n += t->numel();
    return n;
}

template <typename T>
void IdeParams<T>::zero_grad() {
    for (auto* t : tensors()) t->zero_grad();
}

template <typename T>
void IdeParams<T>::set_requires_grad(bool on) {
    for (auto* t : tensors()) {
        t->requires_grad = on;
        t->zero_grad();
    }
}

template <typename T>
Tensor<T> positional_encoding(std::size_t grid, std::size_t channels, std::size_t images) {
    if (channels % 4 != 0) throw ConfigError("positional encoding needs channels divisible by 4");
    const std::size_t n = grid * grid, half = channels / 2;
    Tensor<T> pe = Tensor<T>::zeros({images * n, channels});
    for (std::size_t img = 0; img < images; ++img)
        for (std::size_t p = 0; p < n; ++p) {
            const double coord[2] = {static_cast<double>(p / grid), static_cast<double>(p % grid)};
            T* row = pe.data.data() + (img * n + p) * channels;
            for (std::size_t axis = 0; axis < 2; ++axis)
                for (std::size_t i = 0; i < half / 2; ++i) {
                    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
                    row[axis * half + 2 * i] = static_cast<T>(std::sin(coord[axis] * freq));
                    row[axis * half + 2 * i + 1] = static_cast<T>(std::cos(coord[axis] * freq));
                }
        }
    return pe;
}

template <typename T>
Tensor<T> attention_bias(std::span<const std::uint8_t> mask, std::size_t rows) {
    Tensor<T> b = Tensor<T>::zeros({rows, mask.size()});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < mask.size(); ++j) b.data[i * mask.size() + j] = mask[j] ? T(0) : T(kMaskBias);
    return b;
}

template <typename T>
IdeVars<T> bind_parameters(Tape<T>& tape, IdeParams<T>& p) {
    return {tape.parameter(p.tokens), tape.parameter(p.wq), tape.parameter(p.bq), tape.parameter(p.wk),
            tape.parameter(p.bk),     tape.parameter(p.wv), tape.parameter(p.bv), tape.parameter(p.w1),
            tape.parameter(p.b1),     tape.parameter(p.w2), tape.parameter(p.b2)};
}

template <typename T>
IdeOutput<T> ide_forward(Tape<T>& tape, const IdeVars<T>& v, const IdeConfig& cfg, const Tensor<T>& features,
                         const Tensor<T>& values, std::span<const std::uint8_t> mask, std::size_t grid, bool train,
                         Rng* rng) {
    cfg.validate();
    const std::size_t c = cfg.channels, m = cfg.tokens;
    if (features.rank() != 2 || features.shape[1] != c || values.shape != features.shape) {
        throw DimensionError("ide_forward: reference features " + shape_to_string(features.shape) + " and values " +
                             shape_to_string(values.shape) + " must both be P x " + std::to_string(c));
    }
    const std::size_t p = features.shape[0];
    if (mask.size() != p) throw DimensionError("ide_forward: mask length differs from patch count");
    std::size_t anomalous = 0;
    for (const auto b : mask) anomalous += b ? 1 : 0;
    if (anomalous == 0) throw MaskError("ide_forward: abnormal references contain no anomalous patch");
    if (grid * grid == 0 || p % (grid * grid) != 0) {
        throw DimensionError("ide_forward: patch count is not a multiple of the grid size");
    }
    if (train && cfg.dropout > 0 && rng == nullptr) throw ContractError("ide_forward: train mode needs an rng");

    Tensor<T> keys_in = features;
    if (cfg.posenc) {
        const auto pe = positional_encoding<T>(grid, c, p / (grid * grid));
        for (std::size_t i = 0; i < keys_in.numel(); ++i) keys_in.data[i] += pe.data[i];
    }
    const Var kin = tape.constant(std::move(keys_in));
    const Var vin = tape.constant(values);
    const Var q = tape.add_row(tape.matmul(v.tokens, v.wq), v.bq);
    const Var k = tape.add_row(tape.matmul(kin, v.wk), v.bk);
    const Var val = tape.add_row(tape.matmul(vin, v.wv), v.bv);

    const Tensor<T> bias = attention_bias<T>(mask, m);
    const std::size_t d = cfg.head_dim();
    const T scale = static_cast<T>(cfg.attention_scale());
    IdeOutput<T> out;
    std::vector<Var> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Var qh = tape.slice_cols(q, h * d, (h + 1) * d);
        const Var kh = tape.slice_cols(k, h * d, (h + 1) * d);
        const Var vh = tape.slice_cols(val, h * d, (h + 1) * d);
        const Var logits = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
        Var attn = tape.softmax_lastdim(logits, &bias);
        out.attention.push_back(attn);
        if (train && cfg.dropout > 0) {
            std::bernoulli_distribution keep(1.0 - cfg.dropout);
            Tensor<T> drop = Tensor<T>::zeros({m, p});
            const T kept = static_cast<T>(1.0 / (1.0 - cfg.dropout));
            for (auto& x : drop.data) x = keep(*rng) ? kept : T(0);
            attn = tape.mul(attn, tape.constant(std::move(drop)));
        }
        heads.push_back(tape.matmul(attn, vh));
    }
    const Var attended = tape.concat_cols(heads);
    out.attended = attended;
    const Var x = cfg.residuals ? tape.add(v.tokens, attended) : attended;
    const Var hidden = tape.gelu(tape.add_row(tape.matmul(x, v.w1), v.b1));
    const Var ffn = tape.add_row(tape.matmul(hidden, v.w2), v.b2);
    out.deviations = cfg.residuals ? tape.add(x, ffn) : ffn;
    return out;
}

template <typename T>
DualLoss<T> dual_loss(Tape<T>& tape, Var deviations, const Tensor<T>& values, std::span<const std::uint8_t> mask,
                      DualLossWeights w) {
    const Tensor<T>& tv = tape.value(deviations);
    if (tv.rank() != 2 || values.rank() != 2 || tv.shape[1] != values.shape[1]) {
        throw DimensionError("dual_loss: deviation bank " + shape_to_string(tv.shape) + " vs values " +
                             shape_to_string(values.shape));
    }
    if (mask.size() != values.shape[0]) throw DimensionError("dual_loss: mask length differs from value rows");
    const std::size_t m = tv.shape[0], c = tv.shape[1];
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) rows.push_back(i);
    if (rows.empty()) throw ContractError("dual_loss: no anomalous reference patch");

    // Unit-normalized tokens; zero tokens stay zero so their cosine is 0.
    const Var tn = tape.normalize_rows(deviations);
    const Tensor<T>& tnv = tape.value(tn);

    Tensor<T> fsel = Tensor<T>::zeros({rows.size(), c});
    Tensor<T> pick = Tensor<T>::zeros({rows.size(), m});
    for (std::size_t s = 0; s < rows.size(); ++s) {
        const T* f = values.data.data() + rows[s] * c;
        T ss = 0;
        for (std::size_t j = 0; j < c; ++j) ss += f[j] * f[j];
        const T nrm = std::sqrt(ss);
        for (std::size_t j = 0; j < c; ++j) fsel.data[s * c + j] = nrm < T(1e-12) ? T(0) : f[j] / nrm;
        std::size_t best = 0;
        T best_cos = 0;
        for (std::size_t t = 0; t < m; ++t) {
            T dotv = 0;
            for (std::size_t j = 0; j < c; ++j) dotv += fsel.data[s * c + j] * tnv.data[t * c + j];
            if (t == 0 || dotv > best_cos) {
                best = t;
                best_cos = dotv;
            }
        }
        pick.data[s * m + best] = T(1);
    }
    const Var chosen = tape.matmul(tape.constant(std::move(pick)), tn);
    const Var cosines = tape.row_dot(tape.constant(std::move(fsel)), chosen);
    const Var disc = tape.add_scalar(tape.scale(tape.mean(cosines), T(-1)), T(1));

    Var orth;
    if (m < 2) {
        orth = tape.constant(Tensor<T>::scalar(T(0)));
    } else {
        const Var gram = tape.matmul(tn, tape.transpose(tn));
        Tensor<T> off = Tensor<T>::zeros({m, m});
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < m; ++b) off.data[a * m + b] = a == b ? T(0) : T(1);
        const Var sq = tape.mul(tape.mul(gram, gram), tape.constant(std::move(off)));
        orth = tape.scale(tape.sum(sq), T(1) / static_cast<T>(m * (m - 1)));
    }
    DualLoss<T> out;
    out.discriminability = disc;
    out.orthogonality = orth;
    out.total = tape.add(tape.scale(disc, static_cast<T>(w.lambda1)), tape.scale(orth, static_cast<T>(w.lambda2)));
    return out;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kCkMagic[4] = {'I', 'D', 'C', 'K'};
constexpr std::uint32_t kCkVersion = 1;

std::string arch_json(const IdeConfig& c) {
    nlohmann::ordered_json j;
    j["tokens"] = c.tokens;
    j["channels"] = c.channels;
    j["heads"] = c.heads;
    j["ffn_mult"] = c.ffn_mult;
    j["dropout"] = c.dropout;
    j["scale"] = c.scale == AttentionScale::FullWidth ? "full" : "head";
    j["residuals"] = c.residuals;
    j["posenc"] = c.posenc;
    return j.dump();
}

IdeConfig arch_from_json(const std::string& s, std::uint64_t offset) {
    try {
        const auto j = nlohmann::json::parse(s);
        IdeConfig c;
        c.tokens = j.at("tokens").get<std::size_t>();
        c.channels = j.at("channels").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.scale = j.at("scale").get<std::string>() == "full" ? AttentionScale::FullWidth : AttentionScale::PerHead;
        c.residuals = j.at("residuals").get<bool>();
        c.posenc = j.at("posenc").get<bool>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint meta.arch is malformed: ") + e.what(), offset);
    }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    ck.ide.validate();
    detail::ByteWriter w;
    for (const char ch : kCkMagic) w.u8(static_cast<std::uint8_t>(ch));
    w.u32(kCkVersion);
    w.u32(static_cast<std::uint32_t>(ck.ide.tokens));
    w.u32(static_cast<std::uint32_t>(ck.ide.channels));
    w.u32(static_cast<std::uint32_t>(ck.ide.heads));
    const auto tensors = ck.params.tensors();
    const auto& names = IdeParams<float>::names();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        w.u16(static_cast<std::uint16_t>(names[i].size()));
        w.text(names[i]);
        w.u32(static_cast<std::uint32_t>(tensors[i]->rank()));
        for (const auto d : tensors[i]->shape) w.u32(static_cast<std::uint32_t>(d));
        w.f32s(tensors[i]->data);
    }
    std::map<std::string, std::string> meta = ck.meta;
    meta["meta.arch"] = arch_json(ck.ide);
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        w.u16(static_cast<std::uint16_t>(k.size()));
        w.text(k);
        w.u32(static_cast<std::uint32_t>(v.size()));
        w.text(v);
    }
    w.u8(ck.optimizer_steps ? 1 : 0);
    if (ck.optimizer_steps) {
        if (ck.optimizer_slots.size() != tensors.size()) {
            throw ContractError("checkpoint: optimizer state does not cover every parameter");
        }
        w.u64(*ck.optimizer_steps);
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& s = ck.optimizer_slots[i];
            if (s.m.size() != tensors[i]->numel() || s.v.size() != s.m.size() || s.v_max.size() != s.m.size()) {
                throw ContractError("checkpoint: optimizer state shape mismatch for " + names[i]);
            }
            w.f32s(s.m);
            w.f32s(s.v);
            w.f32s(s.v_max);
        }
    }
    return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    auto magic = r.bytes(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kCkMagic)) throw FormatError("bad magic, expected IDCK", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kCkVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    const std::size_t m = r.u32("M"), c = r.u32("C"), h = r.u32("heads");
    const std::uint64_t blocks_at = r.offset();
    const std::uint32_t blocks = r.u32("block count");
    const auto& names = IdeParams<float>::names();
    if (blocks != names.size()) {
        throw FormatError("checkpoint has " + std::to_string(blocks) + " parameter blocks, expected " +
                          std::to_string(names.size()),
                          blocks_at);
    }
    Checkpoint ck;
    auto tensors = ck.params.tensors();
    for (std::size_t i = 0; i < blocks; ++i) {
        const std::uint64_t at = r.offset();
        const std::string name = r.text(r.u16("block name length"), "block name");
        if (name != names[i]) throw FormatError("unexpected parameter block '" + name + "'", at);
        const std::uint32_t rank = r.u32("block rank");
        if (rank > 8) throw FormatError("implausible block rank", at);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("block dims"));
        const std::size_t n = shape_numel(shape);
        if (n > r.remaining() / 4) throw FormatError("truncated parameter block '" + name + "'", r.offset());
        std::vector<float> data(n);
        r.f32s(data, "block payload");
        *tensors[i] = Tensor<float>(shape, std::move(data));
    }
    const std::uint64_t meta_at = r.offset();
    const std::uint32_t nmeta = r.u32("meta count");
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = r.text(r.u16("meta key length"), "meta key");
        std::string v = r.text(r.u32("meta value length"), "meta value");
        ck.meta[std::move(k)] = std::move(v);
    }
    const auto arch = ck.meta.find("meta.arch");
    if (arch == ck.meta.end()) throw FormatError("checkpoint lacks meta.arch", meta_at);
    ck.ide = arch_from_json(arch->second, meta_at);
    ck.meta.erase(arch);
    if (ck.ide.tokens != m || ck.ide.channels != c || ck.ide.heads != h) {
        throw FormatError("checkpoint header disagrees with meta.arch", 8);
    }
    const std::size_t ffn = ck.ide.ffn_mult * c;
    const std::vector<Shape> expected = {{m, c}, {c, c}, {1, c}, {c, c}, {1, c}, {c, c},
                                         {1, c}, {c, ffn}, {1, ffn}, {ffn, c}, {1, c}};
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i]->shape != expected[i]) {
            throw FormatError("parameter '" + names[i] + "' has shape " + shape_to_string(tensors[i]->shape) +
                              ", expected " + shape_to_string(expected[i]));
        }
        if (!tensors[i]->all_finite()) throw FormatError("parameter '" + names[i] + "' is not finite");
    }
    if (r.u8("optimizer flag")) {
        ck.optimizer_steps = r.u64("optimizer steps");
        for (auto* t : tensors) {
            AdamWSlot<float> s;
            s.m.resize(t->numel());
            s.v.resize(t->numel());
            s.v_max.resize(t->numel());
            r.f32s(s.m, "optimizer m");
            r.f32s(s.v, "optimizer v");
            r.f32s(s.v_max, "optimizer v_max");
            ck.optimizer_slots.push_back(std::move(s));
        }
    }
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
    ck.params.set_requires_grad(true);
    return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    detail::write_file_bytes(path, encode_checkpoint(ck));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("checkpoint not found: " + path.string());
    try {
        return decode_checkpoint(detail::read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

#define DEVIANT_INSTANTIATE(T)                                                                                  \
    template struct IdeParams<T>;                                                                               \
    template Tensor<T> positional_encoding<T>(std::size_t, std::size_t, std::size_t);                          \
    template Tensor<T> attention_bias<T>(std::span<const std::uint8_t>, std::size_t);                          \
    template IdeVars<T> bind_parameters<T>(Tape<T>&, IdeParams<T>&);                                            \
    template IdeOutput<T> ide_forward<T>(Tape<T>&, const IdeVars<T>&, const IdeConfig&, const Tensor<T>&,      \
                                         const Tensor<T>&, std::span<const std::uint8_t>, std::size_t, bool,   \
                                         Rng*);                                                                 \
    template DualLoss<T> dual_loss<T>(Tape<T>&, Var, const Tensor<T>&, std::span<const std::uint8_t>,          \
                                      DualLossWeights);

DEVIANT_INSTANTIATE(float)
DEVIANT_INSTANTIATE(double)

#undef DEVIANT_INSTANTIATE

}  // namespace deviant
