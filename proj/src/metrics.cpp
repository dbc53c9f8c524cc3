#include "deviant/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include <json.hpp>

#include "deviant/vector_ops.hpp"

namespace deviant {

namespace {

void check_lengths(std::span<const double> s, std::span<const std::uint8_t> l) {
    if (s.size() != l.size()) throw DimensionError("metric: scores and labels differ in length");
}

// Indices sorted by descending score (stable).
std::vector<std::size_t> descending(std::span<const double> s) {
    std::vector<std::size_t> o(s.size());
    std::iota(o.begin(), o.end(), std::size_t{0});
    std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    return o;
}

}  // namespace

std::optional<double> auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_lengths(scores, labels);
    std::vector<std::size_t> o(scores.size());
    std::iota(o.begin(), o.end(), std::size_t{0});
    std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0, neg = 0, rank_sum = 0;
    for (std::size_t i = 0; i < o.size();) {
        std::size_t j = i;
        while (j < o.size() && scores[o[j]] == scores[o[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t t = i; t < j; ++t) {
            if (labels[o[t]]) {
                rank_sum += midrank;
                ++pos;
            } else {
                ++neg;
            }
        }
        i = j;
    }
    if (pos == 0 || neg == 0) return std::nullopt;
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_lengths(scores, labels);
    const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
    if (total_pos == 0) return std::nullopt;
    const auto o = descending(scores);
    double tp = 0, fp = 0, prev_recall = 0, ap = 0;
    for (std::size_t i = 0; i < o.size();) {
        std::size_t j = i;
        while (j < o.size() && scores[o[j]] == scores[o[i]]) {
            (labels[o[j]] ? tp : fp) += 1;
            ++j;
        }
        const double recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
        i = j;
    }
    return ap;
}

std::optional<double> f1_max(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_lengths(scores, labels);
    const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
    if (total_pos == 0) return std::nullopt;
    const auto o = descending(scores);
    double tp = 0, fp = 0, best = 0;
    for (std::size_t i = 0; i < o.size();) {
        std::size_t j = i;
        while (j < o.size() && scores[o[j]] == scores[o[i]]) {
            (labels[o[j]] ? tp : fp) += 1;
            ++j;
        }
        const double fn = total_pos - tp;
        best = std::max(best, 2 * tp / (2 * tp + fp + fn));
        i = j;
    }
    return best;
}

std::vector<std::uint32_t> label_components(std::span<const std::uint8_t> mask, std::size_t h, std::size_t w,
                                            std::size_t* count) {
    if (mask.size() != h * w) throw DimensionError("label_components: mask is not H*W");
    std::vector<std::uint32_t> lab(h * w, 0);
    std::uint32_t next = 0;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (!mask[start] || lab[start]) continue;
        lab[start] = ++next;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t y = p / w, x = p % w;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dy && !dx) continue;
                    const auto ny = static_cast<std::ptrdiff_t>(y) + dy, nx = static_cast<std::ptrdiff_t>(x) + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) || nx >= static_cast<std::ptrdiff_t>(w))
                        continue;
                    const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                    if (mask[q] && !lab[q]) {
                        lab[q] = next;
                        stack.push_back(q);
                    }
                }
        }
    }
    if (count) *count = next;
    return lab;
}

std::optional<double> pro(std::span<const PixelImage> images, ProConfig cfg) {
    if (!(cfg.fpr_cap > 0 && cfg.fpr_cap <= 1)) throw ContractError("pro: fpr_cap must lie in (0, 1]");
    if (cfg.steps < 2) throw ContractError("pro: need at least 2 threshold steps");
    // Region id per anomalous pixel (global numbering) and region sizes.
    struct Px {
        float score;
        std::int64_t region;  // -1 for normal pixels
    };
    std::vector<Px> px;
    std::vector<double> region_size;
    double negatives = 0;
    for (const auto& img : images) {
        if (img.scores.size() != img.height * img.width || img.mask.size() != img.scores.size()) {
            throw DimensionError("pro: score map and mask must both be H*W");
        }
        std::size_t n = 0;
        const auto lab = label_components(img.mask, img.height, img.width, &n);
        const std::size_t base = region_size.size();
        region_size.resize(base + n, 0.0);
        for (std::size_t i = 0; i < lab.size(); ++i) {
            if (lab[i]) {
                region_size[base + lab[i] - 1] += 1;
                px.push_back({img.scores[i], static_cast<std::int64_t>(base + lab[i] - 1)});
            } else {
                px.push_back({img.scores[i], -1});
                negatives += 1;
            }
        }
    }
    if (region_size.empty() || negatives == 0) return std::nullopt;

    std::vector<float> distinct;
    distinct.reserve(px.size());
    for (const auto& p : px) distinct.push_back(p.score);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    std::vector<double> thresholds;
    if (distinct.size() <= cfg.steps) {
        thresholds.assign(distinct.begin(), distinct.end());
    } else {
        const double lo = distinct.front(), hi = distinct.back();
        for (std::size_t i = 0; i < cfg.steps; ++i)
            thresholds.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.steps - 1));
    }
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());

    // Sweep thresholds from high to low over pixels sorted by descending score.
    std::sort(px.begin(), px.end(), [](const Px& a, const Px& b) { return a.score > b.score; });
    std::vector<double> hit(region_size.size(), 0.0);
    double overlap_sum = 0, fp = 0;
    const double regions = static_cast<double>(region_size.size());
    std::vector<std::pair<double, double>> curve = {{0.0, 0.0}};
    std::size_t next = 0;
    for (const double t : thresholds) {
        while (next < px.size() && static_cast<double>(px[next].score) >= t) {
            if (px[next].region < 0) {
                fp += 1;
            } else {
                const auto r = static_cast<std::size_t>(px[next].region);
                hit[r] += 1;
                overlap_sum += 1.0 / region_size[r];
            }
            ++next;
        }
        curve.emplace_back(fp / negatives, overlap_sum / regions);
    }
    std::stable_sort(curve.begin(), curve.end());
    double area = 0;
    double last_x = 0, last_y = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        const auto [x, y] = curve[i];
        if (x > cfg.fpr_cap) break;
        area += (x - curve[i - 1].first) * 0.5 * (y + curve[i - 1].second);
        last_x = x;
        last_y = y;
    }
    area += (cfg.fpr_cap - last_x) * last_y;
    return std::clamp(area / cfg.fpr_cap, 0.0, 1.0);
}

std::optional<double> task_difficulty(const Tensor<float>& ref, std::span<const std::uint8_t> ref_mask,
                                      const Tensor<float>& test, std::span<const std::uint8_t> test_mask) {
    if (ref.rank() != 2 || test.rank() != 2 || ref.shape[1] != test.shape[1]) {
        throw DimensionError("task_difficulty: feature widths differ");
    }
    if (ref_mask.size() != ref.shape[0] || test_mask.size() != test.shape[0]) {
        throw DimensionError("task_difficulty: mask lengths differ from patch counts");
    }
    std::vector<std::vector<double>> refs;
    for (std::size_t i = 0; i < ref_mask.size(); ++i)
        if (ref_mask[i]) refs.emplace_back(ref.row(i).begin(), ref.row(i).end());
    if (refs.empty()) return std::nullopt;
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < test_mask.size(); ++i) {
        if (!test_mask[i]) continue;
        const std::vector<double> f(test.row(i).begin(), test.row(i).end());
        double best = -1;
        for (const auto& r : refs) best = std::max(best, cosine<double>(f, r));
        acc += best;
        ++count;
    }
    if (count == 0) return std::nullopt;
    return acc / static_cast<double>(count);
}

EvalReport evaluate(const FeatureSet& ds, const EpisodeManifest& manifest,
                    std::span<const std::pair<std::size_t, ScoreMap>> scored, ProConfig pro_cfg) {
    EvalReport rep;
    rep.setting = to_string(manifest.setting);
    std::vector<double> img_scores;
    std::vector<std::uint8_t> img_labels;
    std::vector<double> pix_scores;
    std::vector<std::uint8_t> pix_labels;
    std::vector<std::vector<std::uint8_t>> gt;
    std::vector<PixelImage> pimgs;
    gt.reserve(scored.size());
    std::vector<std::size_t> anomalous_ids;
    for (const auto& [id, map] : scored) {
        if (id >= ds.n_images) throw ContractError("scored image id " + std::to_string(id) + " out of range");
        img_scores.push_back(map.image_score);
        img_labels.push_back(ds.labels[id]);
        if (ds.labels[id]) anomalous_ids.push_back(id);
        gt.push_back(upsample_mask(ds.mask(id), ds.grid(), map.height, map.width));
    }
    for (std::size_t i = 0; i < scored.size(); ++i) {
        const ScoreMap& map = scored[i].second;
        for (std::size_t p = 0; p < map.pixel_map.size(); ++p) {
            pix_scores.push_back(map.pixel_map[p]);
            pix_labels.push_back(gt[i][p]);
            (gt[i][p] ? rep.n_anomalous_pixels : rep.n_normal_pixels) += 1;
        }
        pimgs.push_back({map.height, map.width, map.pixel_map, gt[i]});
    }
    rep.n_images = scored.size();
    rep.n_abnormal = anomalous_ids.size();
    rep.n_normal = rep.n_images - rep.n_abnormal;
    rep.image_auroc = auroc(img_scores, img_labels);
    rep.image_ap = average_precision(img_scores, img_labels);
    rep.image_f1max = f1_max(img_scores, img_labels);
    rep.pixel_auroc = auroc(pix_scores, pix_labels);
    rep.pixel_f1max = f1_max(pix_scores, pix_labels);
    rep.pixel_pro = pro(pimgs, pro_cfg);
    if (!anomalous_ids.empty()) {
        rep.task_difficulty = task_difficulty(ds.stack(manifest.abnormal_ids), ds.stack_masks(manifest.abnormal_ids),
                                              ds.stack(anomalous_ids), ds.stack_masks(anomalous_ids));
    }
    return rep;
}

std::string report_to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    auto put = [&](const char* k, const std::optional<double>& v) {
        if (v) j[k] = *v;
        else j[k] = nullptr;
    };
    j["setting"] = r.setting;
    put("image_auroc", r.image_auroc);
    put("image_ap", r.image_ap);
    put("image_f1max", r.image_f1max);
    put("pixel_auroc", r.pixel_auroc);
    put("pixel_pro", r.pixel_pro);
    put("pixel_f1max", r.pixel_f1max);
    put("task_difficulty", r.task_difficulty);
    j["n_images"] = r.n_images;
    j["n_abnormal"] = r.n_abnormal;
    j["n_normal"] = r.n_normal;
    j["n_anomalous_pixels"] = r.n_anomalous_pixels;
    j["n_normal_pixels"] = r.n_normal_pixels;
    return j.dump(2) + "\n";
}

std::string report_summary(const EvalReport& r) {
    auto pct = [](const std::optional<double>& v) {
        if (!v) return std::string("n/a");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
        return std::string(buf);
    };
    return "(" + pct(r.image_auroc) + " / " + pct(r.pixel_auroc) + ")";
}

}  // namespace deviant
