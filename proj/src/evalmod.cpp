// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/evalmod.hpp"

#include "vcflow/tensorfile.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vcflow::evalmod {

void ConditionMetrics::finalize() {
    n_utts = static_cast<int>(utt_ids.size());
    if (n_utts == 0) {
        mean_acc = std::numeric_limits<double>::quiet_NaN();
        mean_cos = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    double sa = 0.0, sc = 0.0;
    for (double v : content_acc) sa += v;
    for (double v : speaker_cos) sc += v;
    mean_acc = sa / n_utts;
    mean_cos = sc / n_utts;
}

namespace {

// Deterministic prompt pairing: a seeded permutation with self-pairs bumped.
std::vector<size_t> prompt_assignment(size_t n, uint64_t seed) {
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, 5, 0));
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(perm[i - 1], perm[j]);
    }
    for (size_t i = 0; i < n; ++i)
        if (perm[i] == i && n > 1) std::swap(perm[i], perm[(i + 1) % n]);
    return perm;
}

json metrics_to_json(const ConditionMetrics& m) {
    json j;
    j["utt_ids"] = m.utt_ids;
    j["content_acc"] = m.content_acc;
    j["speaker_cos"] = m.speaker_cos;
    j["mean_acc"] = m.n_utts ? json(m.mean_acc) : json();
    j["mean_cos"] = m.n_utts ? json(m.mean_cos) : json();
    j["n_utts"] = m.n_utts;
    return j;
}

ConditionMetrics metrics_from_json(const json& j) {
    ConditionMetrics m;
    m.utt_ids = j.at("utt_ids").get<std::vector<std::string>>();
    m.content_acc = j.at("content_acc").get<std::vector<double>>();
    m.speaker_cos = j.at("speaker_cos").get<std::vector<double>>();
    m.finalize();
    return m;
}

}  // namespace

std::string ArmReport::to_json_line() const {
    json j;
    j["arm"] = arm;
    j["n_utts"] = n_utts;
    j["clean"] = metrics_to_json(clean);
    j["noisy"] = metrics_to_json(noisy);
    j["noise_delta"] = std::isfinite(noise_delta) ? json(noise_delta) : json();
    return j.dump();
}

ArmReport ArmReport::from_json_line(const std::string& line) {
    json j = json::parse(line);
    ArmReport r;
    r.arm = j.at("arm").get<std::string>();
    r.n_utts = j.at("n_utts").get<int>();
    r.clean = metrics_from_json(j.at("clean"));
    r.noisy = metrics_from_json(j.at("noisy"));
    r.noise_delta = j.at("noise_delta").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                  : j.at("noise_delta").get<double>();
    return r;
}

ConditionMetrics evaluate(const model::VcModel& m, const pipeline::TrainConfig& cfg,
                          const pipeline::Dataset& eval_set, const std::vector<std::string>& train_ids,
                          Condition condition, const EvalOptions& opts) {
    // Contamination guard: eval and train utterance id sets must be disjoint.
    std::set<std::string> train_set(train_ids.begin(), train_ids.end());
    for (const std::string& id : eval_set.ids)
        if (train_set.count(id))
            throw ContaminationError("eval utterance " + id + " appears in the training manifest");

    ConditionMetrics out;
    const size_t n = eval_set.utts.size();
    if (n == 0) {
        out.finalize();
        return out;
    }
    const std::vector<size_t> prompts = prompt_assignment(n, opts.seed);
    const auto& constants = eval_set.constants;

    if (!opts.dump_dir.empty()) fs::create_directories(opts.dump_dir);

    for (size_t i = 0; i < n; ++i) {
        const synthdata::LoadedUtt& src0 = eval_set.utts[i];
        const synthdata::LoadedUtt& prm = eval_set.utts[prompts[i]];

        synthdata::LoadedUtt src = src0;
        if (condition == Condition::kNoisy) {
            // Re-render the SSL stream under heavy recording noise; BNF stays
            // bit-identical (the noise-asymmetry premise).
            Rng nrng(mix_seed(opts.seed, 7, i));
            src.bundle.ssl = synthdata::render_ssl(src.factors, constants, opts.noisy_ssl_level, nrng);
        }

        pipeline::ConvertResult conv =
            pipeline::convert(m, cfg, src, &prm, opts.n_steps, 1.0, mix_seed(opts.seed, 6, i));

        synthdata::DecodeResult dec = synthdata::decode_content(conv.mel_out, constants);
        double acc = synthdata::token_accuracy(dec.tokens, src.factors.content_tokens);
        double cosv = synthdata::cosine(dec.speaker_est, prm.factors.speaker_vec);

        out.utt_ids.push_back(eval_set.ids[i]);
        out.content_acc.push_back(acc);
        out.speaker_cos.push_back(cosv);

        if (!opts.dump_dir.empty() && static_cast<int>(i) < opts.dump_n) {
            // Reference: the oracle render of source content/pitch with the
            // prompt's speaker (the true conversion target).
            synthdata::SynthFactors ref_factors = src.factors;
            ref_factors.speaker_vec = prm.factors.speaker_vec;
            Mat ref = synthdata::render_mel_clean(ref_factors, constants);
            const std::string stem =
                (fs::path(opts.dump_dir) / (eval_set.ids[i] + (condition == Condition::kNoisy ? "_noisy" : "_clean"))).string();
            write_matrix(stem + "_gen.mel.rten", conv.mel_out);
            write_matrix(stem + "_ref.mel.rten", ref);
        }
    }
    out.finalize();
    return out;
}

ArmReport evaluate_arm(const std::string& arm, const model::VcModel& m,
                       const pipeline::TrainConfig& cfg, const pipeline::Dataset& eval_set,
                       const std::vector<std::string>& train_ids, const EvalOptions& opts) {
    ArmReport r;
    r.arm = arm;
    r.clean = evaluate(m, cfg, eval_set, train_ids, Condition::kClean, opts);
    r.noisy = evaluate(m, cfg, eval_set, train_ids, Condition::kNoisy, opts);
    r.n_utts = r.clean.n_utts;
    if (r.clean.n_utts > 0 && r.noisy.n_utts > 0) r.noise_delta = r.clean.mean_acc - r.noisy.mean_acc;
    return r;
}

void save_reports(const std::string& path, const std::vector<ArmReport>& reports) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write eval report: " + path);
    for (const auto& r : reports) os << r.to_json_line() << "\n";
}

std::vector<ArmReport> load_reports(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read eval report: " + path);
    std::vector<ArmReport> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(ArmReport::from_json_line(line));
    }
    return out;
}

namespace {

MetricComparison compare_metric(const std::string& name, const std::vector<double>& a,
                                const std::vector<double>& b, int n_boot, Rng& rng) {
    const size_t n = a.size();
    MetricComparison c;
    c.metric = name;
    std::vector<double> diff(n);
    double sa = 0.0, sb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        diff[i] = a[i] - b[i];
        sa += a[i];
        sb += b[i];
    }
    c.mean_a = sa / static_cast<double>(n);
    c.mean_b = sb / static_cast<double>(n);
    c.mean_diff = c.mean_a - c.mean_b;

    std::vector<double> boots(static_cast<size_t>(n_boot));
    for (int r = 0; r < n_boot; ++r) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += diff[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(n)))];
        boots[static_cast<size_t>(r)] = s / static_cast<double>(n);
    }
    std::sort(boots.begin(), boots.end());
    auto pct = [&](double p) {
        double idx = p * (n_boot - 1);
        size_t lo = static_cast<size_t>(std::floor(idx));
        size_t hi = std::min(static_cast<size_t>(n_boot - 1), lo + 1);
        double w = idx - static_cast<double>(lo);
        return (1.0 - w) * boots[lo] + w * boots[hi];
    };
    c.ci_lo = pct(0.025);
    c.ci_hi = pct(0.975);
    c.significant = (c.ci_lo > 0.0 || c.ci_hi < 0.0) && c.mean_diff != 0.0;
    return c;
}

}  // namespace

ArmComparison compare_arms(const ArmReport& a, const ArmReport& b, int n_boot, uint64_t seed) {
    if (a.clean.utt_ids != b.clean.utt_ids || a.noisy.utt_ids != b.noisy.utt_ids)
        throw PairingError("arm reports cover different utterance lists (" + a.arm + " vs " + b.arm + ")");
    if (a.clean.n_utts == 0) throw PairingError("cannot compare empty reports");

    Rng rng(mix_seed(seed, 8, 0));
    ArmComparison cmp;
    cmp.arm_a = a.arm;
    cmp.arm_b = b.arm;
    cmp.metrics.push_back(compare_metric("clean_content_acc", a.clean.content_acc, b.clean.content_acc, n_boot, rng));
    cmp.metrics.push_back(compare_metric("clean_speaker_cos", a.clean.speaker_cos, b.clean.speaker_cos, n_boot, rng));
    cmp.metrics.push_back(compare_metric("noisy_content_acc", a.noisy.content_acc, b.noisy.content_acc, n_boot, rng));
    cmp.metrics.push_back(compare_metric("noisy_speaker_cos", a.noisy.speaker_cos, b.noisy.speaker_cos, n_boot, rng));

    // Per-utterance noise delta (clean minus noisy accuracy) is paired too.
    std::vector<double> da(a.clean.content_acc.size()), db(b.clean.content_acc.size());
    for (size_t i = 0; i < da.size(); ++i) {
        da[i] = a.clean.content_acc[i] - a.noisy.content_acc[i];
        db[i] = b.clean.content_acc[i] - b.noisy.content_acc[i];
    }
    cmp.metrics.push_back(compare_metric("noise_delta", da, db, n_boot, rng));
    return cmp;
}

std::string metrics_table(const std::vector<ArmReport>& reports) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-24s %11s %11s %11s %11s %11s\n", "arm", "clean_acc",
                  "clean_cos", "noisy_acc", "noisy_cos", "noise_delta");
    os << line;
    os << std::string(84, '-') << "\n";
    for (const auto& r : reports) {
        auto cell = [](double v) {
            char buf[32];
            if (std::isfinite(v))
                std::snprintf(buf, sizeof(buf), "%11.4f", v);
            else
                std::snprintf(buf, sizeof(buf), "%11s", "n/a");
            return std::string(buf);
        };
        os << std::left;
        std::snprintf(line, sizeof(line), "%-24s %s %s %s %s %s\n", r.arm.c_str(),
                      cell(r.clean.mean_acc).c_str(), cell(r.clean.mean_cos).c_str(),
                      cell(r.noisy.mean_acc).c_str(), cell(r.noisy.mean_cos).c_str(),
                      cell(r.noise_delta).c_str());
        os << line;
    }
    return os.str();
}

AdapterOutcome run_external_adapter(const std::string& kind, const std::string& command_template,
                                    const std::vector<std::string>& input_paths,
                                    const std::string& work_dir) {
    if (command_template.find("{in}") == std::string::npos ||
        command_template.find("{out}") == std::string::npos)
        throw AdapterError(kind + ": command template must contain {in} and {out} placeholders");
    fs::create_directories(work_dir);

    AdapterOutcome out;
    out.scores.assign(input_paths.size(), std::numeric_limits<double>::quiet_NaN());
    size_t failures = 0;
    for (size_t i = 0; i < input_paths.size(); ++i) {
        const std::string out_path =
            (fs::path(work_dir) / (kind + "_" + std::to_string(i) + ".out")).string();
        std::string cmd = command_template;
        auto substitute = [&cmd](const std::string& key, const std::string& value) {
            size_t pos;
            while ((pos = cmd.find(key)) != std::string::npos) cmd.replace(pos, key.size(), value);
        };
        substitute("{in}", input_paths[i]);
        substitute("{out}", out_path);

        int rc = std::system(cmd.c_str());
        if (rc != 0) {
            out.failures.push_back(std::to_string(i) + ": exit status " + std::to_string(rc));
            ++failures;
            continue;
        }
        std::ifstream is(out_path);
        double v = 0.0;
        if (!is || !(is >> v)) {
            out.failures.push_back(std::to_string(i) + ": non-numeric or missing output");
            ++failures;
            continue;
        }
        out.scores[i] = v;
    }
    if (!input_paths.empty() &&
        static_cast<double>(failures) > 0.2 * static_cast<double>(input_paths.size()))
        throw AdapterError(kind + ": " + std::to_string(failures) + "/" +
                           std::to_string(input_paths.size()) + " utterances failed");
    return out;
}

}  // namespace vcflow::evalmod
