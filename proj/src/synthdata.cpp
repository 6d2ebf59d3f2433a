// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/synthdata.hpp"

#include "vcflow/tensorfile.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vcflow::synthdata {

namespace {

constexpr double kMelEps = 0.01;        // per-entry Gaussian jitter on rendered mel
constexpr double kMelClamp = 4.0;       // fixed normalization range
constexpr double kTableSpread = 2.5;    // content table entries uniform in +-spread
constexpr double kSpeakerStd = 0.2;     // per-dim std of the speaker mel offset
constexpr double kPitchDirMax = 0.4;    // pitch direction entries uniform in +-max
constexpr double kSslTokenStd = 0.8;
constexpr double kSslSpeakerStd = 0.5;  // per-dim std of the ssl speaker component
constexpr double kSslPitchStd = 0.3;

std::string utt_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "utt_%05d", index);
    return buf;
}

CorpusConstants draw_constants(const CorpusSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0, 0));
    CorpusConstants c;
    c.V = spec.V;
    c.S = spec.S;
    c.D_b = spec.D_b;
    c.D_s = spec.D_s;
    c.D_m = spec.D_m;
    c.frame_ratio = spec.frame_ratio;

    c.content_table = Mat(spec.V, spec.D_m);
    for (Eigen::Index i = 0; i < c.content_table.size(); ++i)
        c.content_table.data()[i] = rng.uniform(-kTableSpread, kTableSpread);

    const double speaker_entry_std = kSpeakerStd / std::sqrt(static_cast<double>(spec.S));
    c.speaker_proj = Mat(spec.S, spec.D_m);
    for (Eigen::Index i = 0; i < c.speaker_proj.size(); ++i)
        c.speaker_proj.data()[i] = speaker_entry_std * rng.normal();

    c.pitch_pattern = Vec(spec.D_m);
    for (Eigen::Index i = 0; i < c.pitch_pattern.size(); ++i)
        c.pitch_pattern[i] = rng.uniform(-kPitchDirMax, kPitchDirMax);

    const double ssl_speaker_entry_std = kSslSpeakerStd / std::sqrt(static_cast<double>(spec.S));
    c.ssl_mix = Mat(spec.V + spec.S + 1, spec.D_s);
    for (int r = 0; r < spec.V; ++r)
        for (int k = 0; k < spec.D_s; ++k) c.ssl_mix(r, k) = kSslTokenStd * rng.normal();
    for (int r = 0; r < spec.S; ++r)
        for (int k = 0; k < spec.D_s; ++k) c.ssl_mix(spec.V + r, k) = ssl_speaker_entry_std * rng.normal();
    for (int k = 0; k < spec.D_s; ++k) c.ssl_mix(spec.V + spec.S, k) = kSslPitchStd * rng.normal();
    return c;
}

void check_width(const char* what, Eigen::Index got, int want) {
    if (got != want)
        throw IntegrityError(std::string(what) + " width " + std::to_string(got) + " expected " +
                             std::to_string(want));
}

}  // namespace

void CorpusSpec::validate() const {
    if (n_utts < 1) throw ConfigError("n_utts must be >= 1");
    if (V < 1 || S < 1 || D_b < 1 || D_s < 1 || D_m < 1 || frame_ratio < 1)
        throw ConfigError("all dims must be >= 1");
    if (D_b != V) throw ConfigError("bnf is a smoothed one-hot over the vocabulary; D_b must equal V");
    if (len_min < 8 || len_max > 512 || len_min > len_max)
        throw ConfigError("length_range must lie within [8, 512] content frames");
    if (noise_min < 0.0 || noise_max > 1.0 || noise_min > noise_max)
        throw ConfigError("noise_level_range must lie within [0, 1]");
}

double pitch_z(double hz) {
    if (!(hz > 0.0) || !std::isfinite(hz)) throw std::domain_error("pitch must be positive and finite");
    return std::tanh((std::log(hz) - std::log(150.0)) / 0.5);
}

Mat render_bnf(const std::vector<int>& tokens, const CorpusConstants& c) {
    const int T = static_cast<int>(tokens.size());
    Mat bnf = Mat::Zero(T, c.D_b);
    // Smoothed one-hot along time with edge replication; rows sum to 1 and the
    // per-frame argmax stays on the frame's own token.
    const double w[3] = {0.15, 0.7, 0.15};
    for (int i = 0; i < T; ++i) {
        int prev = std::max(0, i - 1);
        int next = std::min(T - 1, i + 1);
        bnf(i, tokens[static_cast<size_t>(prev)]) += w[0];
        bnf(i, tokens[static_cast<size_t>(i)]) += w[1];
        bnf(i, tokens[static_cast<size_t>(next)]) += w[2];
    }
    return bnf;
}

Mat render_ssl(const SynthFactors& f, const CorpusConstants& c, double noise_level, Rng& noise_rng) {
    const int T = static_cast<int>(f.content_tokens.size());
    const int ratio = c.frame_ratio;
    Mat ssl(T, c.D_s);
    const Mat token_rows = c.ssl_token_rows();
    Vec speaker_part = c.ssl_speaker_rows().transpose() * f.speaker_vec;  // [D_s]
    Vec pitch_row = c.ssl_pitch_row();
    for (int i = 0; i < T; ++i) {
        double zbar = 0.0;
        for (int r = 0; r < ratio; ++r) zbar += pitch_z(f.pitch_curve[i * ratio + r]);
        zbar /= ratio;
        ssl.row(i) = token_rows.row(f.content_tokens[static_cast<size_t>(i)]) +
                     speaker_part.transpose() + zbar * pitch_row.transpose();
    }
    if (noise_level != 0.0) {
        for (Eigen::Index i = 0; i < ssl.size(); ++i) ssl.data()[i] += noise_level * noise_rng.normal();
    }
    return ssl;
}

static Mat render_mel_impl(const SynthFactors& f, const CorpusConstants& c, Rng* noise_rng) {
    const int T_m = static_cast<int>(f.pitch_curve.size());
    const int ratio = c.frame_ratio;
    Mat mel(T_m, c.D_m);
    Vec speaker_off = c.speaker_proj.transpose() * f.speaker_vec;  // [D_m]
    for (int t = 0; t < T_m; ++t) {
        int tok = f.content_tokens[static_cast<size_t>(t / ratio)];
        double z = pitch_z(f.pitch_curve[t]);
        mel.row(t) = c.content_table.row(tok) + speaker_off.transpose() +
                     z * c.pitch_pattern.transpose();
        if (noise_rng) {
            for (int j = 0; j < c.D_m; ++j) mel(t, j) += kMelEps * noise_rng->normal();
        }
    }
    // Fixed normalization: hard clamp (essentially never active with the scales above).
    mel = mel.cwiseMax(-kMelClamp).cwiseMin(kMelClamp);
    return mel;
}

Mat render_mel(const SynthFactors& f, const CorpusConstants& c, Rng& noise_rng) {
    return render_mel_impl(f, c, &noise_rng);
}

Mat render_mel_clean(const SynthFactors& f, const CorpusConstants& c) {
    return render_mel_impl(f, c, nullptr);
}

SynthFactors draw_factors(const CorpusSpec& spec, Rng& rng) {
    SynthFactors f;
    const int T_c = spec.len_min + static_cast<int>(rng.uniform_int(spec.len_max - spec.len_min + 1));
    const int T_m = T_c * spec.frame_ratio;

    f.content_tokens.resize(static_cast<size_t>(T_c));
    for (int i = 0; i < T_c; ++i) f.content_tokens[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(spec.V));

    f.speaker_vec = Vec(spec.S);
    for (int s = 0; s < spec.S; ++s) f.speaker_vec[s] = rng.normal();
    f.speaker_vec.normalize();

    const double base = rng.uniform(90.0, 280.0);
    const double amp = rng.uniform(0.05, 0.15);
    const double period = rng.uniform(20.0, 60.0);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    f.pitch_curve = Vec(T_m);
    for (int t = 0; t < T_m; ++t)
        f.pitch_curve[t] = base * std::exp(amp * std::sin(2.0 * M_PI * t / period + phase));

    f.noise_level = rng.uniform(spec.noise_min, spec.noise_max);
    return f;
}

void save_factors(const std::string& path, const SynthFactors& f) {
    json j;
    j["content_tokens"] = f.content_tokens;
    std::vector<double> sv(f.speaker_vec.data(), f.speaker_vec.data() + f.speaker_vec.size());
    j["speaker_vec"] = sv;
    j["noise_level"] = f.noise_level;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write factors: " + path);
    os << j.dump() << "\n";
    if (!os) throw IoError("write failed: " + path);
}

static SynthFactors load_factors(const std::string& path, const Vec& pitch) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read factors: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad factors json in " + path + ": " + e.what());
    }
    SynthFactors f;
    f.content_tokens = j.at("content_tokens").get<std::vector<int>>();
    std::vector<double> sv = j.at("speaker_vec").get<std::vector<double>>();
    f.speaker_vec = Eigen::Map<const Vec>(sv.data(), static_cast<Eigen::Index>(sv.size()));
    f.noise_level = j.at("noise_level").get<double>();
    f.pitch_curve = pitch;
    return f;
}

std::string generate_corpus(const CorpusSpec& spec, const std::string& out_dir) {
    spec.validate();

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "constants", ec);
    fs::create_directories(fs::path(out_dir) / "utts", ec);
    if (!fs::is_directory(fs::path(out_dir) / "utts"))
        throw IoError("cannot create corpus directory: " + out_dir);

    CorpusConstants c = draw_constants(spec);
    const std::string cdir = (fs::path(out_dir) / "constants").string();
    write_matrix(cdir + "/content_table.rten", c.content_table);
    write_matrix(cdir + "/speaker_proj.rten", c.speaker_proj);
    write_vector(cdir + "/pitch_pattern.rten", c.pitch_pattern);
    write_matrix(cdir + "/ssl_mix.rten", c.ssl_mix);

    {
        json meta;
        meta["n_utts"] = spec.n_utts;
        meta["V"] = spec.V;
        meta["S"] = spec.S;
        meta["D_b"] = spec.D_b;
        meta["D_s"] = spec.D_s;
        meta["D_m"] = spec.D_m;
        meta["frame_ratio"] = spec.frame_ratio;
        meta["len_min"] = spec.len_min;
        meta["len_max"] = spec.len_max;
        meta["noise_min"] = spec.noise_min;
        meta["noise_max"] = spec.noise_max;
        meta["seed"] = spec.seed;
        std::ofstream os(fs::path(out_dir) / "meta.json", std::ios::trunc);
        if (!os) throw IoError("cannot write corpus meta.json");
        os << meta.dump(2) << "\n";
    }

    std::vector<ManifestEntry> entries;
    entries.reserve(static_cast<size_t>(spec.n_utts));
    for (int u = 0; u < spec.n_utts; ++u) {
        Rng rng(mix_seed(spec.seed, 1, static_cast<uint64_t>(u)));
        SynthFactors f = draw_factors(spec, rng);

        Mat bnf = render_bnf(f.content_tokens, c);
        Mat ssl = render_ssl(f, c, f.noise_level, rng);
        Mat mel = render_mel(f, c, rng);

        ManifestEntry e;
        e.utt_id = utt_name(u);
        const std::string stem = (fs::path(out_dir) / "utts" / e.utt_id).string();
        e.bnf_path = stem + ".bnf.rten";
        e.ssl_path = stem + ".ssl.rten";
        e.pitch_path = stem + ".pitch.rten";
        e.mel_path = stem + ".mel.rten";
        e.factors_path = stem + ".factors.json";
        e.noise_level = f.noise_level;

        write_matrix(e.bnf_path, bnf);
        write_matrix(e.ssl_path, ssl);
        write_vector(e.pitch_path, f.pitch_curve);
        write_matrix(e.mel_path, mel);
        save_factors(e.factors_path, f);
        entries.push_back(std::move(e));
    }

    const std::string manifest = (fs::path(out_dir) / "manifest.tsv").string();
    write_manifest(manifest, entries);
    return manifest;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + path);
    for (const auto& e : entries) {
        char nl[32];
        std::snprintf(nl, sizeof(nl), "%.6f", e.noise_level);
        os << e.utt_id << "\t" << e.bnf_path << "\t" << e.ssl_path << "\t" << e.pitch_path << "\t"
           << e.mel_path << "\t" << e.factors_path << "\t" << nl << "\n";
    }
    if (!os) throw IoError("manifest write failed: " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read manifest: " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t pos = 0;
        while (true) {
            size_t tab = line.find('\t', pos);
            if (tab == std::string::npos) {
                cols.push_back(line.substr(pos));
                break;
            }
            cols.push_back(line.substr(pos, tab - pos));
            pos = tab + 1;
        }
        if (cols.size() != 7)
            throw FormatError("manifest line " + std::to_string(lineno) + " has " +
                              std::to_string(cols.size()) + " fields, expected 7");
        ManifestEntry e;
        e.utt_id = cols[0];
        e.bnf_path = cols[1];
        e.ssl_path = cols[2];
        e.pitch_path = cols[3];
        e.mel_path = cols[4];
        e.factors_path = cols[5];
        e.noise_level = std::stod(cols[6]);
        out.push_back(std::move(e));
    }
    return out;
}

CorpusSpec load_corpus_spec(const std::string& corpus_dir) {
    std::ifstream is(fs::path(corpus_dir) / "meta.json");
    if (!is) throw IoError("cannot read corpus meta.json in " + corpus_dir);
    json j;
    is >> j;
    CorpusSpec s;
    s.n_utts = j.at("n_utts").get<int>();
    s.V = j.at("V").get<int>();
    s.S = j.at("S").get<int>();
    s.D_b = j.at("D_b").get<int>();
    s.D_s = j.at("D_s").get<int>();
    s.D_m = j.at("D_m").get<int>();
    s.frame_ratio = j.at("frame_ratio").get<int>();
    s.len_min = j.at("len_min").get<int>();
    s.len_max = j.at("len_max").get<int>();
    s.noise_min = j.at("noise_min").get<double>();
    s.noise_max = j.at("noise_max").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

CorpusConstants load_constants(const std::string& corpus_dir) {
    CorpusSpec spec = load_corpus_spec(corpus_dir);
    const std::string cdir = (fs::path(corpus_dir) / "constants").string();
    CorpusConstants c;
    c.content_table = read_matrix(cdir + "/content_table.rten");
    c.speaker_proj = read_matrix(cdir + "/speaker_proj.rten");
    c.pitch_pattern = read_vector(cdir + "/pitch_pattern.rten");
    c.ssl_mix = read_matrix(cdir + "/ssl_mix.rten");
    c.V = spec.V;
    c.S = spec.S;
    c.D_b = spec.D_b;
    c.D_s = spec.D_s;
    c.D_m = spec.D_m;
    c.frame_ratio = spec.frame_ratio;
    if (c.content_table.rows() != c.V || c.content_table.cols() != c.D_m ||
        c.speaker_proj.rows() != c.S || c.ssl_mix.rows() != c.V + c.S + 1)
        throw IntegrityError("corpus constants do not match meta.json dims");
    return c;
}

LoadedUtt load_bundle(const ManifestEntry& entry, const CorpusConstants& c) {
    LoadedUtt u;
    u.bundle.bnf = read_matrix(entry.bnf_path);
    u.bundle.ssl = read_matrix(entry.ssl_path);
    u.bundle.pitch = read_vector(entry.pitch_path);
    u.bundle.mel = read_matrix(entry.mel_path);
    u.bundle.frame_ratio = c.frame_ratio;

    check_width("bnf", u.bundle.bnf.cols(), c.D_b);
    check_width("ssl", u.bundle.ssl.cols(), c.D_s);
    check_width("mel", u.bundle.mel.cols(), c.D_m);
    const Eigen::Index T_c = u.bundle.bnf.rows();
    const Eigen::Index T_m = u.bundle.mel.rows();
    if (u.bundle.ssl.rows() != T_c)
        throw IntegrityError("bnf/ssl frame counts differ in " + entry.utt_id);
    if (T_m != T_c * c.frame_ratio || u.bundle.pitch.size() != T_m)
        throw IntegrityError("mel/pitch frame counts violate frame_ratio in " + entry.utt_id);
    if (!u.bundle.bnf.allFinite() || !u.bundle.ssl.allFinite() || !u.bundle.mel.allFinite() ||
        !u.bundle.pitch.allFinite())
        throw IntegrityError("non-finite feature values in " + entry.utt_id);
    if (u.bundle.mel.maxCoeff() > kMelClamp || u.bundle.mel.minCoeff() < -kMelClamp)
        throw IntegrityError("mel values outside [-4, 4] in " + entry.utt_id);

    u.factors = load_factors(entry.factors_path, u.bundle.pitch);
    if (static_cast<Eigen::Index>(u.factors.content_tokens.size()) != T_c)
        throw IntegrityError("factor token count does not match bnf frames in " + entry.utt_id);
    if (u.factors.speaker_vec.size() != c.S)
        throw IntegrityError("speaker_vec dim mismatch in " + entry.utt_id);
    if (std::abs(u.factors.speaker_vec.norm() - 1.0) > 1e-6)
        throw IntegrityError("speaker_vec not unit norm in " + entry.utt_id);
    if (u.bundle.pitch.minCoeff() <= 0.0)
        throw IntegrityError("pitch curve not strictly positive in " + entry.utt_id);
    for (int tok : u.factors.content_tokens)
        if (tok < 0 || tok >= c.V) throw IntegrityError("token id out of range in " + entry.utt_id);
    return u;
}

DecodeResult decode_content(const Mat& mel, const CorpusConstants& c) {
    if (mel.cols() != c.D_m)
        throw ShapeError("decode_content: mel width " + std::to_string(mel.cols()) + " expected " +
                         std::to_string(c.D_m));
    const int T_m = static_cast<int>(mel.rows());
    const int ratio = c.frame_ratio;
    const int T_c = T_m / ratio;  // trailing partial frame (warped lengths) is ignored

    const Vec p = c.pitch_pattern;
    const double pn = p.squaredNorm();
    const Mat Q = Mat::Identity(c.D_m, c.D_m) - (p * p.transpose()) / pn;
    const Mat PQ = c.speaker_proj * Q;                   // [S x D_m]
    const Eigen::MatrixXd normal = PQ * c.speaker_proj.transpose();  // [S x S]
    Eigen::LDLT<Eigen::MatrixXd> solver(normal);

    DecodeResult res;
    res.tokens.assign(static_cast<size_t>(T_c), 0);
    res.speaker_est = Vec::Zero(c.S);
    res.pitch_z_est = Vec::Zero(T_m);

    for (int iter = 0; iter < 2; ++iter) {
        // Nearest-neighbour decode on speaker/pitch-deflated residuals, pooled
        // over each content frame's span.
        Vec speaker_off = c.speaker_proj.transpose() * res.speaker_est;
        for (int i = 0; i < T_c; ++i) {
            Vec pooled = Vec::Zero(c.D_m);
            for (int r = 0; r < ratio; ++r) {
                int t = i * ratio + r;
                pooled += mel.row(t).transpose() - speaker_off - res.pitch_z_est[t] * p;
            }
            pooled /= ratio;
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int j = 0; j < c.V; ++j) {
                double d2 = (pooled.transpose() - c.content_table.row(j)).squaredNorm();
                if (d2 < best_d) {
                    best_d = d2;
                    best = j;
                }
            }
            res.tokens[static_cast<size_t>(i)] = best;
        }

        // Least-squares refit of speaker and per-frame pitch given the decode.
        Vec rbar = Vec::Zero(c.D_m);
        for (int t = 0; t < T_c * ratio; ++t)
            rbar += mel.row(t).transpose() - c.content_table.row(res.tokens[static_cast<size_t>(t / ratio)]).transpose();
        rbar /= std::max(1, T_c * ratio);
        res.speaker_est = solver.solve(PQ * rbar);
        Vec speaker_off2 = c.speaker_proj.transpose() * res.speaker_est;
        for (int t = 0; t < T_m; ++t) {
            int i = std::min(t / ratio, T_c - 1);
            Vec r = mel.row(t).transpose() - c.content_table.row(res.tokens[static_cast<size_t>(i)]).transpose() - speaker_off2;
            res.pitch_z_est[t] = p.dot(r) / pn;
        }
    }
    return res;
}

double token_accuracy(const std::vector<int>& decoded, const std::vector<int>& truth) {
    const size_t n = std::min(decoded.size(), truth.size());
    if (n == 0) return 0.0;
    size_t hit = 0;
    for (size_t i = 0; i < n; ++i)
        if (decoded[i] == truth[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace vcflow::synthdata
