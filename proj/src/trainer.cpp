#include "deviant/trainer.hpp"

#include <cmath>
#include <cstdio>

#include <json.hpp>

namespace deviant {

LrSchedule TrainConfig::schedule() const {
    LrSchedule s;
    s.base_lr = base_lr;
    s.warmup_start_lr = warmup_start_lr;
    s.warmup_epochs = warmup_epochs;
    s.total_epochs = epochs;
    s.floor_fraction = floor_fraction;
    s.steps_per_epoch = steps_per_epoch();
    return s;
}

void TrainConfig::validate() const {
    if (epochs == 0 || batch_size == 0 || queries_per_epoch == 0) {
        throw ConfigError("epochs, batch_size and queries_per_epoch must be positive");
    }
    shots.validate();
    nve.validate();
    ide.validate();
    schedule().validate();
    if (mode != ScoringMode::Full && mode != ScoringMode::IdeOnly) {
        throw ConfigError("only the full and ide-only pipelines have trainable parameters");
    }
    for (const double eps : {dice_eps, bce_eps}) {
        if (!(eps > 0 && eps < 1e-3)) throw ConfigError("loss epsilons must lie in (0, 1e-3)");
    }
    if (!(focal_alpha > 0 && focal_alpha < 1)) throw ConfigError("focal_alpha must lie in (0, 1)");
    if (!(focal_gamma >= 0)) throw ConfigError("focal_gamma must be non-negative");
    if (!(dual.lambda1 >= 0 && dual.lambda2 >= 0)) throw ConfigError("dual-loss weights must be non-negative");
}

template <typename T>
Var focal_loss(Tape<T>& tape, Var scores, std::span<const std::uint8_t> mask, double alpha, double gamma, double eps) {
    const std::size_t n = tape.value(scores).numel();
    if (mask.size() != n) throw DimensionError("focal_loss: mask length differs from score count");
    const Shape shape = tape.value(scores).shape;
    Tensor<T> sign = Tensor<T>::zeros(shape), offset = Tensor<T>::zeros(shape), weight = Tensor<T>::zeros(shape);
    for (std::size_t i = 0; i < n; ++i) {
        sign.data[i] = mask[i] ? T(1) : T(-1);
        offset.data[i] = mask[i] ? T(0) : T(1);
        weight.data[i] = static_cast<T>(mask[i] ? alpha : 1.0 - alpha);
    }
    const Var pt = tape.add(tape.mul(scores, tape.constant(std::move(sign))), tape.constant(std::move(offset)));
    const Var ptc = tape.clamp(pt, static_cast<T>(eps), static_cast<T>(1.0 - eps));
    const Var mod = tape.pow_scalar(tape.add_scalar(tape.scale(ptc, T(-1)), T(1)), static_cast<T>(gamma));
    const Var term = tape.mul(tape.mul(mod, tape.log(ptc)), tape.constant(std::move(weight)));
    return tape.scale(tape.mean(term), T(-1));
}

template <typename T>
Var dice_loss(Tape<T>& tape, Var scores, std::span<const std::uint8_t> mask, double eps) {
    const auto& a = tape.value(scores);
    if (mask.size() != a.numel()) throw DimensionError("dice_loss: mask length differs from score count");
    Tensor<T> m = Tensor<T>::zeros(a.shape);
    T msum = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        m.data[i] = mask[i] ? T(1) : T(0);
        msum += m.data[i];
    }
    const Var inter = tape.sum(tape.mul(scores, tape.constant(std::move(m))));
    const Var num = tape.add_scalar(tape.scale(inter, T(2)), static_cast<T>(eps));
    const Var den = tape.add_scalar(tape.sum(scores), msum + static_cast<T>(eps));
    return tape.add_scalar(tape.scale(tape.div(num, den), T(-1)), T(1));
}

template <typename T>
Var bce_loss(Tape<T>& tape, Var score, std::uint8_t label, double eps) {
    if (tape.value(score).numel() != 1) throw DimensionError("bce_loss: expects a single score");
    const Var p = tape.clamp(score, static_cast<T>(eps), static_cast<T>(1.0 - eps));
    if (label) return tape.scale(tape.log(p), T(-1));
    return tape.scale(tape.log(tape.add_scalar(tape.scale(p, T(-1)), T(1))), T(-1));
}

namespace {

Var column(Tape<double>& tape, std::span<const double> v) {
    return tape.constant(Tensor<double>::matrix(v.size(), 1, {v.begin(), v.end()}));
}

}  // namespace

double focal_loss_value(std::span<const double> scores, std::span<const std::uint8_t> mask, double alpha,
                        double gamma, double eps) {
    Tape<double> tape;
    return tape.value(focal_loss(tape, column(tape, scores), mask, alpha, gamma, eps)).data[0];
}

double dice_loss_value(std::span<const double> scores, std::span<const std::uint8_t> mask, double eps) {
    Tape<double> tape;
    return tape.value(dice_loss(tape, column(tape, scores), mask, eps)).data[0];
}

double bce_loss_value(double score, std::uint8_t label, double eps) {
    Tape<double> tape;
    return tape.value(bce_loss(tape, tape.constant(Tensor<double>::scalar(score)), label, eps)).data[0];
}

PreparedEpisode<float> prepare_episode(const FeatureSet& pool, const Episode& ep, const NveConfig& nve,
                                       ScoringMode mode) {
    const NormalPool normals(pool.stack(ep.normals));
    PreparedEpisode<float> out;
    out.grid = pool.grid();
    out.ref_features = pool.stack(ep.abnormals);
    out.ref_mask = pool.stack_masks(ep.abnormals);
    const bool raw = mode == ScoringMode::IdeOnly;
    DeviationField ref = denoise_query(out.ref_features, normals, nve);
    out.ref_values = raw ? std::move(ref.residuals) : std::move(ref.denoised);
    const std::size_t q[] = {ep.query};
    DeviationField qf = denoise_query(pool.stack(q), normals, nve);
    out.query_deviations = raw ? std::move(qf.residuals) : std::move(qf.denoised);
    out.normal_distance = std::move(qf.nearest_distance);
    out.query_mask = pool.stack_masks(q);
    out.label = pool.labels[ep.query];
    return out;
}

template <typename T>
LossTerms EpisodeGraph<T>::values(const Tape<T>& tape) const {
    LossTerms l;
    l.focal = tape.value(focal).data[0];
    l.dice = tape.value(dice).data[0];
    l.bce = tape.value(bce).data[0];
    l.dual = tape.value(dual).data[0];
    l.total = tape.value(total).data[0];
    return l;
}

template <typename T>
EpisodeGraph<T> episode_loss(Tape<T>& tape, const IdeVars<T>& vars, const PreparedEpisode<T>& ep,
                             const TrainConfig& cfg, bool train, Rng* rng) {
    EpisodeGraph<T> g;
    const auto ide = ide_forward(tape, vars, cfg.ide, ep.ref_features, ep.ref_values, ep.ref_mask, ep.grid, train, rng);
    g.deviations = ide.deviations;
    g.dual = dual_loss(tape, ide.deviations, ep.ref_values, ep.ref_mask, cfg.dual).total;
    g.patch_scores = score_patches_graph(tape, ide.deviations, ep.query_deviations, ep.normal_distance);
    g.image_score = tape.topk_mean(g.patch_scores, top_fraction_count(ep.query_deviations.shape[0]));
    g.focal = focal_loss(tape, g.patch_scores, ep.query_mask, cfg.focal_alpha, cfg.focal_gamma, cfg.bce_eps);
    g.dice = dice_loss(tape, g.patch_scores, ep.query_mask, cfg.dice_eps);
    g.bce = bce_loss(tape, g.image_score, ep.label, cfg.bce_eps);
    g.total = tape.add(tape.add(g.focal, g.dice), tape.add(g.bce, g.dual));
    return g;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(base) ^ stream) ^ index);
}

namespace {

enum Stream : std::uint64_t { kInit = 1, kEpisodes = 2, kDropout = 3 };

std::string nve_meta(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["k"] = cfg.nve.k;
    j["r"] = cfg.nve.r;
    j["alpha"] = cfg.nve.alpha;
    j["mode"] = to_string(cfg.mode);
    return j.dump();
}

std::string train_meta(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["queries_per_epoch"] = cfg.queries_per_epoch;
    j["L1"] = cfg.shots.l1;
    j["L2"] = cfg.shots.l2;
    j["lambda1"] = cfg.dual.lambda1;
    j["lambda2"] = cfg.dual.lambda2;
    return j.dump();
}

}  // namespace

IdeParams<float> initial_parameters(const TrainConfig& cfg) {
    return IdeParams<float>::init(cfg.ide, derive_seed(cfg.seed, kInit));
}

TrainResult train(const FeatureSet& pool, const TrainConfig& cfg, const std::function<void(const StepRecord&)>& on_step) {
    cfg.validate();
    pool.validate();
    if (cfg.ide.channels != pool.channels) {
        throw ConfigError("ide channels (" + std::to_string(cfg.ide.channels) + ") differ from feature channels (" +
                          std::to_string(pool.channels) + ")");
    }
    TrainResult result;
    IdeParams<float> params = initial_parameters(cfg);
    AdamW<float> opt(cfg.adamw);
    const LrSchedule sched = cfg.schedule();
    Rng dropout_rng(derive_seed(cfg.seed, kDropout));
    auto tensors = params.tensors();

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng episode_rng(derive_seed(cfg.seed, kEpisodes, cfg.fixed_query_set ? 0 : epoch));
        std::vector<Episode> episodes;
        episodes.reserve(cfg.queries_per_epoch);
        for (std::size_t i = 0; i < cfg.queries_per_epoch; ++i) {
            try {
                episodes.push_back(build_training_episode(pool, cfg.shots, episode_rng));
            } catch (const CapacityError& e) {
                throw CapacityError("epoch " + std::to_string(epoch) + ", episode " + std::to_string(i) + ": " + e.what());
            }
        }
        for (std::size_t begin = 0; begin < episodes.size(); begin += cfg.batch_size, ++step) {
            const std::size_t end = std::min(begin + cfg.batch_size, episodes.size());
            const float inv = 1.0f / static_cast<float>(end - begin);
            params.zero_grad();
            StepRecord rec;
            rec.step = step;
            rec.lr = lr_at(step, sched);
            for (std::size_t e = begin; e < end; ++e) {
                const PreparedEpisode<float> prepared = prepare_episode(pool, episodes[e], cfg.nve, cfg.mode);
                Tape<float> tape;
                const auto vars = bind_parameters(tape, params);
                EpisodeGraph<float> g;
                try {
                    g = episode_loss(tape, vars, prepared, cfg, true, &dropout_rng);
                } catch (const NumericError& err) {
                    throw NumericError("epoch " + std::to_string(epoch) + ", episode " + std::to_string(e) +
                                       " (query image " + std::to_string(episodes[e].query) + "): " + err.what());
                }
                const LossTerms l = g.values(tape);
                rec.loss.focal += l.focal * inv;
                rec.loss.dice += l.dice * inv;
                rec.loss.bce += l.bce * inv;
                rec.loss.dual += l.dual * inv;
                rec.loss.total += l.total * inv;
                tape.backward(tape.scale(g.total, inv));
            }
            opt.step(tensors, rec.lr);
            result.trace.push_back(rec);
            if (on_step) on_step(rec);
        }
    }
    params.zero_grad();
    result.checkpoint.ide = cfg.ide;
    result.checkpoint.params = std::move(params);
    result.checkpoint.meta["meta.nve"] = nve_meta(cfg);
    result.checkpoint.meta["meta.train"] = train_meta(cfg);
    result.checkpoint.optimizer_steps = opt.steps();
    result.checkpoint.optimizer_slots = opt.slots();
    return result;
}

std::string format_loss_trace(std::span<const StepRecord> trace) {
    std::string out;
    char buf[256];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", r.step, r.lr, r.loss.focal,
                      r.loss.dice, r.loss.bce, r.loss.dual, r.loss.total);
        out += buf;
    }
    return out;
}

std::vector<std::pair<std::size_t, ScoreMap>> infer(const FeatureSet& dataset, const EpisodeManifest& manifest,
                                                    std::span<const std::size_t> queries, const Checkpoint* checkpoint,
                                                    const ScoringConfig& cfg) {
    check_manifest(dataset, manifest);
    std::vector<std::pair<std::size_t, ScoreMap>> out;
    if (queries.empty()) return out;
    const ReferenceContext ctx(dataset, manifest, checkpoint, cfg);
    out.reserve(queries.size());
    for (const std::size_t q : queries) {
        if (q >= dataset.n_images) throw ContractError("query id " + std::to_string(q) + " out of range");
        out.emplace_back(q, ctx.score(dataset.image(q)));
    }
    return out;
}

std::vector<std::pair<std::size_t, ScoreMap>> infer(const FeatureSet& dataset, const EpisodeManifest& manifest,
                                                    const Checkpoint* checkpoint, const ScoringConfig& cfg) {
    const auto q = query_ids(dataset, manifest);
    return infer(dataset, manifest, q, checkpoint, cfg);
}

template Var focal_loss<float>(Tape<float>&, Var, std::span<const std::uint8_t>, double, double, double);
template Var focal_loss<double>(Tape<double>&, Var, std::span<const std::uint8_t>, double, double, double);
template Var dice_loss<float>(Tape<float>&, Var, std::span<const std::uint8_t>, double);
template Var dice_loss<double>(Tape<double>&, Var, std::span<const std::uint8_t>, double);
template Var bce_loss<float>(Tape<float>&, Var, std::uint8_t, double);
template Var bce_loss<double>(Tape<double>&, Var, std::uint8_t, double);
template struct EpisodeGraph<float>;
template struct EpisodeGraph<double>;
template EpisodeGraph<float> episode_loss<float>(Tape<float>&, const IdeVars<float>&, const PreparedEpisode<float>&,
                                                 const TrainConfig&, bool, Rng*);
template EpisodeGraph<double> episode_loss<double>(Tape<double>&, const IdeVars<double>&,
                                                   const PreparedEpisode<double>&, const TrainConfig&, bool, Rng*);

}  // namespace deviant
