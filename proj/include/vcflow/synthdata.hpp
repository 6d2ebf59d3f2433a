// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/common.hpp"

#include <string>
#include <vector>

namespace vcflow::synthdata {

// Corpus generation parameters. Feature widths follow the corpus convention:
// bnf/ssl live at the content frame rate, pitch/mel at the mel frame rate,
// with T_m = frame_ratio * T_c.
struct CorpusSpec {
    int n_utts = 0;
    int V = 32;           // content vocabulary size
    int S = 8;            // speaker vector dim
    int D_b = 32;         // bnf width (must equal V, bnf is a smoothed one-hot)
    int D_s = 48;         // ssl width
    int D_m = 24;         // mel width
    int frame_ratio = 2;  // mel frames per content frame
    int len_min = 16;     // content frames
    int len_max = 48;
    double noise_min = 0.0;  // recording-noise intensity range
    double noise_max = 0.0;
    uint64_t seed = 0;

    void validate() const;
};

// Ground-truth generative factors of one utterance.
struct SynthFactors {
    std::vector<int> content_tokens;  // [T_c], ids in [0, V)
    Vec speaker_vec;                  // [S], unit norm
    Vec pitch_curve;                  // [T_m], strictly positive Hz-analog
    double noise_level = 0.0;         // in [0, 1]
};

struct FeatureBundle {
    Mat bnf;    // [T_c x D_b]
    Mat ssl;    // [T_c x D_s]
    Vec pitch;  // [T_m]
    Mat mel;    // [T_m x D_m], values in [-4, 4]
    int frame_ratio = 0;
};

// Seed-derived mixing constants, stored with the corpus under constants/.
struct CorpusConstants {
    Mat content_table;  // [V x D_m]
    Mat speaker_proj;   // [S x D_m]
    Vec pitch_pattern;  // [D_m]
    Mat ssl_mix;        // [(V + S + 1) x D_s]: token rows, speaker rows, pitch row
    int V = 0, S = 0, D_b = 0, D_s = 0, D_m = 0, frame_ratio = 0;

    Mat ssl_token_rows() const { return ssl_mix.topRows(V); }
    Mat ssl_speaker_rows() const { return ssl_mix.middleRows(V, S); }
    Vec ssl_pitch_row() const { return ssl_mix.row(V + S).transpose(); }
};

struct ManifestEntry {
    std::string utt_id;
    std::string bnf_path;
    std::string ssl_path;
    std::string pitch_path;
    std::string mel_path;
    std::string factors_path;
    double noise_level = 0.0;
};

// --- corpus I/O ---

// Generates the full corpus under out_dir and returns the manifest path.
// Deterministic given spec (including spec.seed).
std::string generate_corpus(const CorpusSpec& spec, const std::string& out_dir);

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

CorpusConstants load_constants(const std::string& corpus_dir);
CorpusSpec load_corpus_spec(const std::string& corpus_dir);

struct LoadedUtt {
    FeatureBundle bundle;
    SynthFactors factors;
};
LoadedUtt load_bundle(const ManifestEntry& entry, const CorpusConstants& constants);

void save_factors(const std::string& path, const SynthFactors& f);

// --- factor -> feature renderers (also used by eval to re-render ssl) ---

double pitch_z(double hz);  // bounded standardized log-pitch, |z| < 1

Mat render_mel(const SynthFactors& f, const CorpusConstants& c, Rng& noise_rng);
Mat render_mel_clean(const SynthFactors& f, const CorpusConstants& c);  // eps = 0
Mat render_bnf(const std::vector<int>& tokens, const CorpusConstants& c);
Mat render_ssl(const SynthFactors& f, const CorpusConstants& c, double noise_level, Rng& noise_rng);

SynthFactors draw_factors(const CorpusSpec& spec, Rng& rng);

// --- oracle decoders (stand-ins for external ASR / speaker models) ---

struct DecodeResult {
    std::vector<int> tokens;  // per content frame
    Vec speaker_est;          // [S] least-squares speaker factor
    Vec pitch_z_est;          // [T_m]
};

// Nearest-neighbour content decode after subtracting least-squares speaker and
// pitch components against the known mixing matrices.
DecodeResult decode_content(const Mat& mel, const CorpusConstants& c);

double token_accuracy(const std::vector<int>& decoded, const std::vector<int>& truth);

inline double cosine(const Vec& a, const Vec& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

}  // namespace vcflow::synthdata
