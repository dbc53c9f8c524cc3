// deviant: train / score / eval / synth / manifest / export-deviations.
// Exit codes: 0 ok, 2 configuration error, 3 data error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <algorithm>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "deviant/feature_store.hpp"
#include "deviant/ide.hpp"
#include "deviant/metrics.hpp"
#include "deviant/run_config.hpp"
#include "deviant/scoring.hpp"
#include "deviant/synth_oracle.hpp"
#include "deviant/trainer.hpp"

namespace fs = std::filesystem;
using namespace deviant;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TrainArgs {
    std::string features, config, out, trace;
    std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
    RunConfig rc = a.config.empty() ? RunConfig{} : read_run_config(a.config);
    if (a.seed) rc.train.seed = *a.seed;
    rc.validate();
    const FeatureSet pool = read_feature_file(a.features);
    rc.train.ide.channels = pool.channels;
    const TrainResult res = train(pool, rc.train, [](const StepRecord& r) {
        std::fprintf(stderr, "step %zu lr %.3g loss %.5f\n", r.step, r.lr, r.loss.total);
    });
    write_checkpoint(a.out, res.checkpoint);
    write_text(a.trace.empty() ? a.out + ".trace.tsv" : a.trace, format_loss_trace(res.trace));
    return kExitOk;
}

struct ScoreArgs {
    std::string features, manifest, ckpt, out, config, upsample;
    bool ablate_nve = false;
    bool ablate_ide = false;
    bool matching_only = false;
    std::optional<std::string> setting;
};

ScoringConfig scoring_config(const ScoreArgs& a, const Checkpoint* ck) {
    RunConfig rc = a.config.empty() ? RunConfig{} : read_run_config(a.config);
    ScoringConfig sc = rc.scoring;
    if (a.config.empty() && ck) {
        if (const auto n = checkpoint_nve(*ck)) sc.nve = *n;
    }
    bool nve = rc.nve && !a.ablate_nve && !a.matching_only;
    bool ide = rc.ide && !a.ablate_ide && !a.matching_only;
    sc.mode = mode_from_switches(nve, ide);
    if (!a.upsample.empty()) sc.upsample = upsample_from_string(a.upsample);
    sc.nve.validate();
    return sc;
}

std::optional<Checkpoint> load_checkpoint_for(const ScoreArgs& a, bool needed) {
    if (a.ckpt.empty()) {
        if (needed) throw ConfigError("this scoring mode needs --ckpt");
        return std::nullopt;
    }
    return read_checkpoint(a.ckpt);
}

bool needs_checkpoint(ScoringMode m) { return m == ScoringMode::Full || m == ScoringMode::IdeOnly; }

int cmd_score(const ScoreArgs& a) {
    const FeatureSet ds = read_feature_file(a.features);
    EpisodeManifest m = read_manifest(a.manifest);
    if (a.setting) m.setting = setting_from_string(*a.setting);
    ScoringConfig sc = scoring_config(a, nullptr);
    const auto ck = load_checkpoint_for(a, needs_checkpoint(sc.mode));
    sc = scoring_config(a, ck ? &*ck : nullptr);
    const auto scored = infer(ds, m, ck ? &*ck : nullptr, sc);
    fs::create_directories(a.out);
    std::vector<std::size_t> ids;
    std::vector<float> scores;
    for (const auto& [id, map] : scored) {
        write_score_map(fs::path(a.out) / (std::to_string(id) + ".idsm"), map);
        ids.push_back(id);
        scores.push_back(map.image_score);
    }
    write_text(fs::path(a.out) / "scores.tsv", format_score_table(ids, scores));
    return kExitOk;
}

struct EvalArgs {
    std::string scores, features, manifest, out;
    std::optional<std::string> setting;
};

int cmd_eval(const EvalArgs& a) {
    const FeatureSet ds = read_feature_file(a.features);
    EpisodeManifest m = read_manifest(a.manifest);
    if (a.setting) m.setting = setting_from_string(*a.setting);
    check_manifest(ds, m);
    const auto table = parse_score_table(read_text(fs::path(a.scores) / "scores.tsv"));
    std::vector<std::uint8_t> have(ds.n_images, 0);
    for (const auto& [id, s] : table) {
        if (id >= ds.n_images) throw FormatError("score table names image " + std::to_string(id) + " out of range");
        have[id] = 1;
    }
    std::vector<std::pair<std::size_t, ScoreMap>> scored;
    for (const std::size_t q : query_ids(ds, m)) {
        if (!have[q]) throw FormatError("no score for query image " + std::to_string(q));
        scored.emplace_back(q, read_score_map(fs::path(a.scores) / (std::to_string(q) + ".idsm")));
    }
    const EvalReport rep = evaluate(ds, m, scored);
    const std::string json = report_to_json(rep);
    if (!a.out.empty()) write_text(a.out, json);
    std::cout << json << report_summary(rep) << "\n";
    return kExitOk;
}

struct SynthArgs {
    std::string train_out, test_out, directions_out, config;
    std::optional<std::uint64_t> seed;
};

SynthWorldSpec synth_spec_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("synth config is not valid JSON: ") + e.what());
    }
    SynthWorldSpec s;
    auto take = [&](const char* key, auto& out) {
        if (!j.contains(key)) return;
        try {
            out = j.at(key).get<std::decay_t<decltype(out)>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("synth key '") + key + "' has the wrong type");
        }
    };
    static const char* keys[] = {"channels", "grid", "n_normal_images", "n_abnormal_images", "train_normal_images",
                                 "train_abnormal_images", "nuisance_dim", "nuisance_amplitude", "outlier_prob",
                                 "outlier_scale", "iso_noise", "n_dirs", "offset", "anomaly_fraction", "n_patterns",
                                 "seed"};
    for (const auto& [k, v] : j.items()) {
        if (std::find_if(std::begin(keys), std::end(keys), [&](const char* x) { return k == x; }) == std::end(keys)) {
            throw ConfigError("unknown synth key '" + k + "'");
        }
    }
    take("channels", s.channels);
    take("grid", s.grid);
    take("n_normal_images", s.n_normal_images);
    take("n_abnormal_images", s.n_abnormal_images);
    take("train_normal_images", s.train_normal_images);
    take("train_abnormal_images", s.train_abnormal_images);
    take("nuisance_dim", s.nuisance_dim);
    take("nuisance_amplitude", s.nuisance_amplitude);
    take("outlier_prob", s.outlier_prob);
    take("outlier_scale", s.outlier_scale);
    take("iso_noise", s.iso_noise);
    take("n_dirs", s.n_dirs);
    take("offset", s.offset);
    take("anomaly_fraction", s.anomaly_fraction);
    take("n_patterns", s.n_patterns);
    take("seed", s.seed);
    return s;
}

int cmd_synth(const SynthArgs& a) {
    SynthWorldSpec s = a.config.empty() ? SynthWorldSpec{} : synth_spec_from_json(read_text(a.config));
    if (a.seed) s.seed = *a.seed;
    const SynthWorld w = generate_world(s);
    write_feature_file(a.train_out, w.train);
    write_feature_file(a.test_out, w.test);
    if (!a.directions_out.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (std::size_t d = 0; d < w.directions.shape[0]; ++d) {
            const auto row = w.directions.row(d);
            j.push_back(std::vector<double>(row.begin(), row.end()));
        }
        write_text(a.directions_out, j.dump() + "\n");
    }
    return kExitOk;
}

struct ManifestArgs {
    std::string features, out, dataset, setting = "general";
    std::uint64_t seed = 0;
    std::size_t l1 = 2;
    std::size_t l2 = 1;
};

int cmd_manifest(const ManifestArgs& a) {
    const FeatureSet ds = read_feature_file(a.features);
    ShotCounts shots;
    shots.l1 = a.l1;
    shots.l2 = a.l2;
    shots.validate();
    const auto m = build_inference_manifest(ds, shots, a.seed, setting_from_string(a.setting), a.dataset);
    write_manifest(a.out, m);
    return kExitOk;
}

int cmd_export(const ScoreArgs& a) {
    const FeatureSet ds = read_feature_file(a.features);
    EpisodeManifest m = read_manifest(a.manifest);
    if (a.setting) m.setting = setting_from_string(*a.setting);
    ScoringConfig sc = scoring_config(a, nullptr);
    const auto ck = load_checkpoint_for(a, needs_checkpoint(sc.mode));
    sc = scoring_config(a, ck ? &*ck : nullptr);
    check_manifest(ds, m);
    const ReferenceContext ctx(ds, m, ck ? &*ck : nullptr, sc);
    DeviationExport ex;
    ex.channels = ds.channels;
    for (const std::size_t q : query_ids(ds, m)) ex.append(q, ctx.score_detail(ds.image(q)));
    write_deviation_export(a.out, ex);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot anomaly detection on pre-extracted patch features"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Episodic training on an auxiliary feature pool");
    train_cmd->add_option("--features", ta.features, "Training pool feature file (IDFS)")->required();
    train_cmd->add_option("--config", ta.config, "JSON run config; omitted keys keep their defaults");
    train_cmd->add_option("--out", ta.out, "Checkpoint path (IDCK)")->required();
    train_cmd->add_option("--seed", ta.seed, "Overrides the config seed [default: 0]");
    train_cmd->add_option("--trace", ta.trace, "Loss trace path [default: <out>.trace.tsv]");
    train_cmd->footer("Config keys and defaults:\n" + run_config_defaults());

    auto add_score_options = [](CLI::App* cmd, ScoreArgs& a) {
        cmd->add_option("--features", a.features, "Target feature file (IDFS)")->required();
        cmd->add_option("--manifest", a.manifest, "Inference manifest (JSON)")->required();
        cmd->add_option("--ckpt", a.ckpt, "Checkpoint; required unless the learned bank is ablated");
        cmd->add_option("--config", a.config, "JSON run config (NVE k/r/alpha, ablation switches, upsample)");
        cmd->add_flag("--ablate-nve", a.ablate_nve, "Score raw residual deviations (alpha = 0) [default: off]");
        cmd->add_flag("--ablate-ide", a.ablate_ide,
                      "Replace the learned bank by the mean masked reference deviation [default: off]");
        cmd->add_flag("--matching-only", a.matching_only,
                      "Nearest-neighbour matching to abnormal references, no NVE and no IDE [default: off]");
        cmd->add_option("--upsample", a.upsample, "bilinear|nearest [default: bilinear]")
            ->check(CLI::IsMember({"bilinear", "nearest"}));
        cmd->add_option("--setting", a.setting, "general|hard; overrides the manifest setting")
            ->check(CLI::IsMember({"general", "hard"}));
    };

    ScoreArgs sa;
    auto* score_cmd = app.add_subcommand("score", "Score every query of a manifest");
    add_score_options(score_cmd, sa);
    score_cmd->add_option("--out", sa.out, "Output directory (<id>.idsm and scores.tsv)")->required();

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Image- and pixel-level metrics for a score directory");
    eval_cmd->add_option("--scores", ea.scores, "Directory written by `score`")->required();
    eval_cmd->add_option("--features", ea.features, "Target feature file (IDFS)")->required();
    eval_cmd->add_option("--manifest", ea.manifest, "Inference manifest (JSON)")->required();
    eval_cmd->add_option("--setting", ea.setting, "general|hard; overrides the manifest setting")
        ->check(CLI::IsMember({"general", "hard"}));
    eval_cmd->add_option("--out", ea.out, "Also write the JSON report here");

    SynthArgs ya;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic feature world");
    synth_cmd->add_option("--train-out", ya.train_out, "Training pool feature file")->required();
    synth_cmd->add_option("--test-out", ya.test_out, "Test set feature file")->required();
    synth_cmd->add_option("--directions-out", ya.directions_out, "Planted directions as JSON rows");
    synth_cmd->add_option("--config", ya.config, "JSON world spec; omitted keys keep their defaults");
    synth_cmd->add_option("--seed", ya.seed, "Overrides the world seed [default: 0]");

    ManifestArgs ma;
    auto* man_cmd = app.add_subcommand("manifest", "Build an inference manifest for a dataset");
    man_cmd->add_option("--features", ma.features, "Target feature file (IDFS)")->required();
    man_cmd->add_option("--out", ma.out, "Manifest path (JSON)")->required();
    man_cmd->add_option("--seed", ma.seed, "Reference sampling seed");
    man_cmd->add_option("--l1", ma.l1, "Normal references");
    man_cmd->add_option("--l2", ma.l2, "Abnormal references");
    man_cmd->add_option("--setting", ma.setting, "general|hard")->check(CLI::IsMember({"general", "hard"}));
    man_cmd->add_option("--dataset", ma.dataset, "Dataset id recorded in the manifest");

    ScoreArgs xa;
    auto* export_cmd = app.add_subcommand("export-deviations", "Export residual/denoised/projected vectors per patch");
    add_score_options(export_cmd, xa);
    export_cmd->add_option("--out", xa.out, "Output file (IDDV)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train_cmd) return cmd_train(ta);
        if (*score_cmd) return cmd_score(sa);
        if (*eval_cmd) return cmd_eval(ea);
        if (*synth_cmd) return cmd_synth(ya);
        if (*man_cmd) return cmd_manifest(ma);
        if (*export_cmd) return cmd_export(xa);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitConfig;
}
