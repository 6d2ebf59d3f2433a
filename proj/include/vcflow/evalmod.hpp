// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/pipeline.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vcflow::evalmod {

// Per-condition oracle metrics: content token accuracy (intelligibility
// analog, inverted error rate) and speaker-factor cosine vs the prompt
// speaker (similarity analog).
struct ConditionMetrics {
    std::vector<std::string> utt_ids;
    std::vector<double> content_acc;  // per utterance
    std::vector<double> speaker_cos;
    double mean_acc = std::numeric_limits<double>::quiet_NaN();
    double mean_cos = std::numeric_limits<double>::quiet_NaN();
    int n_utts = 0;

    void finalize();
};

struct ArmReport {
    std::string arm;
    int n_utts = 0;
    ConditionMetrics clean;
    ConditionMetrics noisy;
    double noise_delta = std::numeric_limits<double>::quiet_NaN();  // clean - noisy content_acc

    std::string to_json_line() const;
    static ArmReport from_json_line(const std::string& line);
};

enum class Condition { kClean, kNoisy };

struct EvalOptions {
    int n_steps = 32;
    uint64_t seed = 0;
    double noisy_ssl_level = 0.8;
    std::string dump_dir;  // when set, the first dump_n gen/ref mel pairs are written
    int dump_n = 0;
};

// Evaluates a checkpointed model over the eval manifest under one condition.
// `train_ids` enforces train/eval disjointness (contamination error).
ConditionMetrics evaluate(const model::VcModel& m, const pipeline::TrainConfig& cfg,
                          const pipeline::Dataset& eval_set, const std::vector<std::string>& train_ids,
                          Condition condition, const EvalOptions& opts);

// Runs both conditions and merges into an arm-level report.
ArmReport evaluate_arm(const std::string& arm, const model::VcModel& m,
                       const pipeline::TrainConfig& cfg, const pipeline::Dataset& eval_set,
                       const std::vector<std::string>& train_ids, const EvalOptions& opts);

void save_reports(const std::string& path, const std::vector<ArmReport>& reports);
std::vector<ArmReport> load_reports(const std::string& path);

// Paired comparison with bootstrap confidence intervals (1000 resamples).
struct MetricComparison {
    std::string metric;
    double mean_a = 0.0, mean_b = 0.0;
    double mean_diff = 0.0;  // a - b
    double ci_lo = 0.0, ci_hi = 0.0;
    bool significant = false;  // CI excludes zero
};
struct ArmComparison {
    std::string arm_a, arm_b;
    std::vector<MetricComparison> metrics;
};
ArmComparison compare_arms(const ArmReport& a, const ArmReport& b, int n_boot = 1000,
                           uint64_t seed = 0);

// Table-1-shaped text table, one row per arm, stable column order.
std::string metrics_table(const std::vector<ArmReport>& reports);

// External metric adapter: runs `command_template` per utterance with {in} and
// {out} substituted; the command writes one scalar to {out}. Per-utterance
// failures are recorded; more than 20% failures raises AdapterError.
struct AdapterOutcome {
    std::vector<double> scores;            // NaN for failed utterances
    std::vector<std::string> failures;     // "<utt_index>: reason"
};
AdapterOutcome run_external_adapter(const std::string& kind, const std::string& command_template,
                                    const std::vector<std::string>& input_paths,
                                    const std::string& work_dir);

}  // namespace vcflow::evalmod
