// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/model.hpp"
#include "vcflow/synthdata.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vcflow::pipeline {

struct TrainConfig {
    std::string corpus_path;
    std::string train_manifest;  // defaults to <corpus>/train_manifest.tsv
    std::string eval_manifest;   // defaults to <corpus>/eval_manifest.tsv
    std::string run_dir = "run";
    std::string preset = "toy";
    int H = 64;
    int D_m = 24;
    int D_b = 0;  // filled from corpus meta when 0
    int D_s = 0;
    int64_t batch_frames = 4096;
    double lr_init = 2e-4;
    double lr_floor = 0.0;
    int64_t warmup_steps = 0;  // off unless configured
    int64_t total_steps = 2000;
    int64_t S0 = 600;
    int64_t S1 = 400;
    uint64_t seed = 1;
    int K = 7;
    int64_t checkpoint_every = 500;
    bool erase = true;
    std::string align_mode = "implicit";  // implicit | interp
    bool sc_time_advance = true;          // advance t for the second target call
    bool prompt_content = true;           // include prompt streams at inference
    bool deterministic = false;
    int n_threads = 1;
    double grad_clip = 0.0;  // off by default

    static TrainConfig from_file(const std::string& path);
    static TrainConfig from_text(const std::string& text);
    std::string canonical_text() const;  // sorted key=value block; hashed
    uint64_t hash() const { return fnv1a64(canonical_text()); }
    void validate_and_fill();  // resolves defaults against the corpus
    fusion::AlignMode align() const;
    model::ModelConfig model_config() const;
};

double lr_at(const TrainConfig& cfg, int64_t step);

struct StepMetrics {
    int64_t step = 0;
    double fm_loss = 0.0;
    double sc_loss = 0.0;
    double sc_fraction = 0.0;
    double lr = 0.0;
};

// In-memory training dataset (the toy corpora fit trivially).
struct Dataset {
    synthdata::CorpusConstants constants;
    std::vector<synthdata::LoadedUtt> utts;
    std::vector<std::string> ids;

    static Dataset load(const std::string& corpus_path, const std::string& manifest_path);
};

class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    StepMetrics train_step();
    // Runs until total_steps, logging metrics and checkpointing on schedule.
    void run();

    void save_checkpoint(const std::string& path) const;

    const TrainConfig& config() const { return cfg_; }
    model::VcModel& model() { return *model_; }
    const Dataset& data() const { return data_; }
    int64_t step() const { return step_; }

    // Restores params/optimizer/rng/progress from a checkpoint produced by an
    // identically configured trainer.
    void restore(const std::string& ckpt_path);

private:
    std::vector<size_t> next_batch();

    TrainConfig cfg_;
    Dataset data_;
    std::unique_ptr<model::VcModel> model_;
    AdamW opt_;
    Rng loop_rng_;
    int64_t step_ = 0;
    uint64_t epoch_ = 0;
    size_t epoch_pos_ = 0;
    std::vector<size_t> perm_;
    std::string last_checkpoint_;
};

// --- checkpoint container ---

struct LoadedCheckpoint {
    TrainConfig cfg;
    std::unique_ptr<model::VcModel> model;
    int64_t step = 0;
};

void save_checkpoint_file(const std::string& path, const TrainConfig& cfg,
                          const model::VcModel& model, const AdamW& opt, int64_t step,
                          uint64_t epoch, uint64_t epoch_pos, const Rng& loop_rng);
// Loads config + params only (enough for convert/eval). Full trainer state is
// restored via Trainer::restore.
LoadedCheckpoint load_checkpoint_file(const std::string& path);

// --- conversion ---

struct ConvertResult {
    Mat mel_out;  // generated region only
    int nfe = 0;
    double wall_seconds = 0.0;
};

ConvertResult convert(const model::VcModel& m, const TrainConfig& cfg,
                      const synthdata::LoadedUtt& source, const synthdata::LoadedUtt* prompt,
                      int n_steps, double rate_factor, uint64_t seed);

// --- reporting ---

// Reads run_dir/metrics.tsv and run_dir/eval/*.json; writes loss_curves.svg,
// report_table.txt, and side-by-side factor-map images for dumped mel pairs.
void report(const std::string& run_dir);

std::vector<StepMetrics> read_metrics(const std::string& path);

}  // namespace vcflow::pipeline
