#include "deviant/run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace deviant {

using nlohmann::ordered_json;

ScoringMode mode_from_switches(bool nve, bool ide) {
    if (nve && ide) return ScoringMode::Full;
    if (ide) return ScoringMode::IdeOnly;
    if (nve) return ScoringMode::NveOnly;
    return ScoringMode::MatchingOnly;
}

ScoringMode RunConfig::mode() const { return mode_from_switches(nve, ide); }

void RunConfig::validate() const {
    TrainConfig t = train;
    if (t.mode != ScoringMode::Full && t.mode != ScoringMode::IdeOnly) t.mode = ScoringMode::Full;
    t.validate();
    scoring.nve.validate();
}

namespace {

ordered_json to_json(const RunConfig& c) {
    const TrainConfig& t = c.train;
    ordered_json j;
    j["epochs"] = t.epochs;
    j["warmup_epochs"] = t.warmup_epochs;
    j["batch_size"] = t.batch_size;
    j["queries_per_epoch"] = t.queries_per_epoch;
    j["fixed_query_set"] = t.fixed_query_set;
    j["L1"] = t.shots.l1;
    j["L2"] = t.shots.l2;
    j["allow_l1_le_l2"] = t.shots.allow_l1_le_l2;
    j["seed"] = t.seed;
    j["lambda1"] = t.dual.lambda1;
    j["lambda2"] = t.dual.lambda2;
    j["focal_alpha"] = t.focal_alpha;
    j["focal_gamma"] = t.focal_gamma;
    j["dice_eps"] = t.dice_eps;
    j["bce_eps"] = t.bce_eps;
    j["base_lr"] = t.base_lr;
    j["warmup_start_lr"] = t.warmup_start_lr;
    j["floor_fraction"] = t.floor_fraction;
    j["weight_decay"] = t.adamw.weight_decay;
    j["beta1"] = t.adamw.beta1;
    j["beta2"] = t.adamw.beta2;
    j["adam_eps"] = t.adamw.eps;
    j["amsgrad"] = t.adamw.amsgrad;
    j["k"] = t.nve.k;
    j["r"] = t.nve.r;
    j["alpha"] = t.nve.alpha;
    j["tokens"] = t.ide.tokens;
    j["heads"] = t.ide.heads;
    j["ffn_mult"] = t.ide.ffn_mult;
    j["dropout"] = t.ide.dropout;
    j["attention_scale"] = t.ide.scale == AttentionScale::FullWidth ? "full" : "head";
    j["residuals"] = t.ide.residuals;
    j["posenc"] = t.ide.posenc;
    j["nve"] = c.nve;
    j["ide"] = c.ide;
    j["upsample"] = to_string(c.scoring.upsample);
    j["height"] = c.scoring.height;
    j["width"] = c.scoring.width;
    return j;
}

template <typename V>
void take(const ordered_json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

}  // namespace

RunConfig run_config_from_json(std::string_view text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const ordered_json known = to_json(RunConfig{});
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    RunConfig c;
    TrainConfig& t = c.train;
    take(j, "epochs", t.epochs);
    take(j, "warmup_epochs", t.warmup_epochs);
    take(j, "batch_size", t.batch_size);
    take(j, "queries_per_epoch", t.queries_per_epoch);
    take(j, "fixed_query_set", t.fixed_query_set);
    take(j, "L1", t.shots.l1);
    take(j, "L2", t.shots.l2);
    take(j, "allow_l1_le_l2", t.shots.allow_l1_le_l2);
    take(j, "seed", t.seed);
    take(j, "lambda1", t.dual.lambda1);
    take(j, "lambda2", t.dual.lambda2);
    take(j, "focal_alpha", t.focal_alpha);
    take(j, "focal_gamma", t.focal_gamma);
    take(j, "dice_eps", t.dice_eps);
    take(j, "bce_eps", t.bce_eps);
    take(j, "base_lr", t.base_lr);
    take(j, "warmup_start_lr", t.warmup_start_lr);
    take(j, "floor_fraction", t.floor_fraction);
    take(j, "weight_decay", t.adamw.weight_decay);
    take(j, "beta1", t.adamw.beta1);
    take(j, "beta2", t.adamw.beta2);
    take(j, "adam_eps", t.adamw.eps);
    take(j, "amsgrad", t.adamw.amsgrad);
    take(j, "k", t.nve.k);
    take(j, "r", t.nve.r);
    take(j, "alpha", t.nve.alpha);
    take(j, "tokens", t.ide.tokens);
    take(j, "heads", t.ide.heads);
    take(j, "ffn_mult", t.ide.ffn_mult);
    take(j, "dropout", t.ide.dropout);
    std::string scale = "head";
    take(j, "attention_scale", scale);
    if (scale == "full") t.ide.scale = AttentionScale::FullWidth;
    else if (scale == "head") t.ide.scale = AttentionScale::PerHead;
    else throw ConfigError("attention_scale must be 'head' or 'full', got '" + scale + "'");
    take(j, "residuals", t.ide.residuals);
    take(j, "posenc", t.ide.posenc);
    take(j, "nve", c.nve);
    take(j, "ide", c.ide);
    std::string up = to_string(c.scoring.upsample);
    take(j, "upsample", up);
    c.scoring.upsample = upsample_from_string(up);
    take(j, "height", c.scoring.height);
    take(j, "width", c.scoring.width);
    c.scoring.nve = t.nve;
    c.scoring.mode = c.mode();
    t.mode = c.mode();
    return c;
}

RunConfig read_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string run_config_defaults() {
    std::string out;
    const ordered_json j = to_json(RunConfig{});
    for (const auto& [key, value] : j.items()) out += key + " = " + value.dump() + "\n";
    return out;
}

std::optional<NveConfig> checkpoint_nve(const Checkpoint& ck) {
    const auto it = ck.meta.find("meta.nve");
    if (it == ck.meta.end()) return std::nullopt;
    try {
        const auto j = nlohmann::json::parse(it->second);
        NveConfig n;
        n.k = j.at("k").get<std::size_t>();
        n.r = j.at("r").get<std::size_t>();
        n.alpha = j.at("alpha").get<double>();
        return n;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint meta.nve is malformed: ") + e.what());
    }
}

}  // namespace deviant
