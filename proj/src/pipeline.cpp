// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/pipeline.hpp"

#include "vcflow/evalmod.hpp"
#include "vcflow/tensorfile.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace vcflow::pipeline {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("bad boolean for " + key + ": " + v);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Vec resample_linear(const Vec& v, int L) {
    const int T = static_cast<int>(v.size());
    if (L == T) return v;
    if (T < 2) throw std::invalid_argument("resample: need at least 2 frames");
    Vec out(L);
    if (L == 1) {
        out[0] = v[0];
        return out;
    }
    const double scale = static_cast<double>(T - 1) / static_cast<double>(L - 1);
    for (int o = 0; o < L; ++o) {
        double src = o * scale;
        int i0 = std::min(static_cast<int>(std::floor(src)), T - 2);
        double w = src - i0;
        out[o] = (1.0 - w) * v[i0] + w * v[i0 + 1];
    }
    return out;
}

Mat vstack(const Mat& a, const Mat& b) {
    if (a.rows() == 0) return b;
    Mat out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
}

// Pre-drawn per-sample randomness; the training loop draws everything from a
// single serialized stream before any parallel work starts.
struct SampleDraw {
    bool sc = false;
    double t = 0.0;
    double d = 0.0;
    double cond_frac = 1.0;
    double cond_off = 0.0;
    Mat x0;
    bool erased = false;
    double threshold = 0.0;
    Mat erase_noise;
};

}  // namespace

TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
}

TrainConfig TrainConfig::from_text(const std::string& text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("bad config line: " + line);
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        try {
            if (key == "corpus_path") c.corpus_path = val;
            else if (key == "train_manifest") c.train_manifest = val;
            else if (key == "eval_manifest") c.eval_manifest = val;
            else if (key == "run_dir") c.run_dir = val;
            else if (key == "preset") c.preset = val;
            else if (key == "H") c.H = std::stoi(val);
            else if (key == "D_m") c.D_m = std::stoi(val);
            else if (key == "D_b") c.D_b = std::stoi(val);
            else if (key == "D_s") c.D_s = std::stoi(val);
            else if (key == "batch_frames") c.batch_frames = std::stoll(val);
            else if (key == "lr_init") c.lr_init = std::stod(val);
            else if (key == "lr_floor") c.lr_floor = std::stod(val);
            else if (key == "warmup_steps") c.warmup_steps = std::stoll(val);
            else if (key == "total_steps") c.total_steps = std::stoll(val);
            else if (key == "S0") c.S0 = std::stoll(val);
            else if (key == "S1") c.S1 = std::stoll(val);
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "K") c.K = std::stoi(val);
            else if (key == "checkpoint_every") c.checkpoint_every = std::stoll(val);
            else if (key == "erase") c.erase = parse_bool(val, key);
            else if (key == "align_mode") c.align_mode = val;
            else if (key == "sc_time_advance") c.sc_time_advance = parse_bool(val, key);
            else if (key == "prompt_content") c.prompt_content = parse_bool(val, key);
            else if (key == "deterministic") c.deterministic = parse_bool(val, key);
            else if (key == "n_threads") c.n_threads = std::stoi(val);
            else if (key == "grad_clip") c.grad_clip = std::stod(val);
            else throw ConfigError("unknown config key: " + key);
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value for " + key + ": " + val);
        } catch (const std::out_of_range&) {
            throw ConfigError("value out of range for " + key + ": " + val);
        }
    }
    return c;
}

std::string TrainConfig::canonical_text() const {
    std::ostringstream os;
    os << "D_b = " << D_b << "\n";
    os << "D_m = " << D_m << "\n";
    os << "D_s = " << D_s << "\n";
    os << "H = " << H << "\n";
    os << "K = " << K << "\n";
    os << "S0 = " << S0 << "\n";
    os << "S1 = " << S1 << "\n";
    os << "align_mode = " << align_mode << "\n";
    os << "batch_frames = " << batch_frames << "\n";
    os << "checkpoint_every = " << checkpoint_every << "\n";
    os << "corpus_path = " << corpus_path << "\n";
    os << "deterministic = " << (deterministic ? "true" : "false") << "\n";
    os << "erase = " << (erase ? "true" : "false") << "\n";
    os << "eval_manifest = " << eval_manifest << "\n";
    os << "grad_clip = " << fmt_double(grad_clip) << "\n";
    os << "lr_floor = " << fmt_double(lr_floor) << "\n";
    os << "lr_init = " << fmt_double(lr_init) << "\n";
    os << "n_threads = " << n_threads << "\n";
    os << "preset = " << preset << "\n";
    os << "prompt_content = " << (prompt_content ? "true" : "false") << "\n";
    os << "run_dir = " << run_dir << "\n";
    os << "sc_time_advance = " << (sc_time_advance ? "true" : "false") << "\n";
    os << "seed = " << seed << "\n";
    os << "total_steps = " << total_steps << "\n";
    os << "train_manifest = " << train_manifest << "\n";
    os << "warmup_steps = " << warmup_steps << "\n";
    return os.str();
}

fusion::AlignMode TrainConfig::align() const {
    if (align_mode == "implicit") return fusion::AlignMode::kImplicit;
    if (align_mode == "interp") return fusion::AlignMode::kInterp;
    throw ConfigError("align_mode must be implicit or interp, got " + align_mode);
}

model::ModelConfig TrainConfig::model_config() const {
    model::ModelConfig mc;
    mc.H = H;
    mc.D_b = D_b;
    mc.D_s = D_s;
    mc.D_m = D_m;
    mc.K = K;
    mc.preset = preset;
    mc.align = align();
    return mc;
}

void TrainConfig::validate_and_fill() {
    if (corpus_path.empty()) throw ConfigError("corpus_path is required");
    if (train_manifest.empty()) train_manifest = (fs::path(corpus_path) / "train_manifest.tsv").string();
    if (eval_manifest.empty()) eval_manifest = (fs::path(corpus_path) / "eval_manifest.tsv").string();
    if (D_b == 0 || D_s == 0) {
        synthdata::CorpusSpec meta = synthdata::load_corpus_spec(corpus_path);
        if (D_b == 0) D_b = meta.D_b;
        if (D_s == 0) D_s = meta.D_s;
        if (D_m != meta.D_m)
            throw ConfigError("config D_m " + std::to_string(D_m) + " does not match corpus D_m " +
                              std::to_string(meta.D_m));
    }
    if (H < 1 || D_m < 1 || D_b < 1 || D_s < 1) throw ConfigError("dims must be >= 1");
    if (lr_init <= 0.0 || lr_floor < 0.0) throw ConfigError("learning rates must be positive");
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (S0 < 0 || S1 < 0) throw ConfigError("ramp bounds must be >= 0");
    if (K < 1 || K > 20) throw ConfigError("K must lie in [1, 20]");
    if (batch_frames < 1) throw ConfigError("batch_frames must be >= 1");
    align();  // validates the string
    if (preset != "toy" && preset != "paper") throw ConfigError("preset must be toy or paper");
    if (deterministic) n_threads = 1;
    if (n_threads <= 0) n_threads = static_cast<int>(std::thread::hardware_concurrency());
    if (n_threads <= 0) n_threads = 1;
}

double lr_at(const TrainConfig& cfg, int64_t step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr_init * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    const int64_t s = std::min(step, cfg.total_steps);
    const double progress = static_cast<double>(s) / static_cast<double>(cfg.total_steps);
    return cfg.lr_floor + 0.5 * (cfg.lr_init - cfg.lr_floor) * (1.0 + std::cos(M_PI * progress));
}

Dataset Dataset::load(const std::string& corpus_path, const std::string& manifest_path) {
    Dataset d;
    d.constants = synthdata::load_constants(corpus_path);
    auto entries = synthdata::read_manifest(manifest_path);
    d.utts.reserve(entries.size());
    for (const auto& e : entries) {
        d.utts.push_back(synthdata::load_bundle(e, d.constants));
        d.ids.push_back(e.utt_id);
    }
    return d;
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate_and_fill();
    data_ = Dataset::load(cfg_.corpus_path, cfg_.train_manifest);
    if (data_.utts.empty()) throw ConfigError("training manifest is empty");
    model_ = std::make_unique<model::VcModel>(cfg_.model_config(), cfg_.seed);
    opt_.init(model_->params());
    loop_rng_ = Rng(mix_seed(cfg_.seed, 3, 0));
    perm_.clear();
}

std::vector<size_t> Trainer::next_batch() {
    const size_t n = data_.utts.size();
    if (perm_.empty()) {
        perm_.resize(n);
        for (size_t i = 0; i < n; ++i) perm_[i] = i;
        Rng prng(mix_seed(cfg_.seed, 2, epoch_));
        for (size_t i = n; i > 1; --i) {
            size_t j = static_cast<size_t>(prng.uniform_int(static_cast<int64_t>(i)));
            std::swap(perm_[i - 1], perm_[j]);
        }
        epoch_pos_ = 0;
    }
    std::vector<size_t> batch;
    int64_t frames = 0;
    while (frames < cfg_.batch_frames && epoch_pos_ < n) {
        size_t idx = perm_[epoch_pos_++];
        batch.push_back(idx);
        frames += data_.utts[idx].bundle.mel.rows();
    }
    if (epoch_pos_ >= n) {
        ++epoch_;
        perm_.clear();
    }
    return batch;
}

StepMetrics Trainer::train_step() {
    const std::vector<size_t> batch = next_batch();
    const size_t B = batch.size();
    const shortcut::RampSchedule ramp{cfg_.S0, cfg_.S1};
    const shortcut::StepGrid grid{cfg_.K};
    const double frac = ramp.fraction(step_);
    size_t n_sc = static_cast<size_t>(std::llround(frac * static_cast<double>(B)));
    n_sc = std::min(n_sc, B);

    // Draw all per-sample randomness from the single loop stream, in sample
    // order, so runs are reproducible and resumable independent of threading.
    std::vector<SampleDraw> draws(B);
    for (size_t i = 0; i < B; ++i) {
        const auto& u = data_.utts[batch[i]];
        const int T_m = static_cast<int>(u.bundle.mel.rows());
        const int T_c = static_cast<int>(u.bundle.bnf.rows());
        SampleDraw& dr = draws[i];
        if (cfg_.erase) {
            dr.threshold = loop_rng_.uniform();
            double ud = loop_rng_.uniform();
            dr.erased = ud < dr.threshold;
            if (dr.erased) {
                dr.erase_noise.resize(T_c, cfg_.D_s);
                for (Eigen::Index k = 0; k < dr.erase_noise.size(); ++k)
                    dr.erase_noise.data()[k] = loop_rng_.normal();
            }
        }
        dr.cond_frac = loop_rng_.uniform(0.7, 1.0);
        dr.cond_off = loop_rng_.uniform();
        dr.x0.resize(T_m, cfg_.D_m);
        for (Eigen::Index k = 0; k < dr.x0.size(); ++k) dr.x0.data()[k] = loop_rng_.normal();
        dr.sc = i >= B - n_sc;
        if (dr.sc) {
            auto pair = grid.sample_sc(loop_rng_);
            dr.t = pair.t;
            dr.d = pair.d;
        } else {
            dr.t = loop_rng_.uniform();
        }
    }

    // Masks are draw-determined, so part denominators are known up front.
    std::vector<fusion::CondSpec> conds(B);
    int64_t denom_fm = 0, denom_sc = 0;
    for (size_t i = 0; i < B; ++i) {
        const auto& u = data_.utts[batch[i]];
        conds[i] = fusion::build_cond_train_with(u.bundle.mel, draws[i].cond_frac, draws[i].cond_off);
        int64_t elems = shortcut::masked_rows(conds[i].mask) * cfg_.D_m;
        (draws[i].sc ? denom_sc : denom_fm) += elems;
    }

    const fusion::FusionDims dims = model_->dims();
    const fusion::AlignMode align = cfg_.align();
    std::vector<double> sumsq(B, 0.0);

    const int n_threads = std::max(1, std::min<int>(cfg_.n_threads, static_cast<int>(B)));
    std::vector<GradStore> grads(static_cast<size_t>(n_threads));
    for (auto& g : grads) g.init(model_->params());

    auto worker = [&](size_t begin, size_t end, GradStore& gs) {
        for (size_t i = begin; i < end; ++i) {
            const auto& u = data_.utts[batch[i]];
            const SampleDraw& dr = draws[i];
            const int T_c = static_cast<int>(u.bundle.bnf.rows());

            frontend::ContentEncoder::Ctx cb, cs;
            frontend::Pbtc::Ctx cp;
            fusion::EncodedConditions enc;
            enc.e_bnf = model_->enc_bnf.forward_ctx(u.bundle.bnf, cb);
            enc.e_ssl = model_->enc_ssl.forward_ctx(dr.erased ? dr.erase_noise : u.bundle.ssl, cs);
            enc.e_pitch = model_->pbtc.forward_ctx(u.bundle.pitch, cp);

            const fusion::CondSpec& cond = conds[i];
            const Mat& x1 = u.bundle.mel;
            Mat x_t = (1.0 - dr.t) * dr.x0 + dr.t * x1;

            Mat dv = Mat::Zero(x1.rows(), x1.cols());
            estimator::Estimator::Ctx ectx;
            if (!dr.sc) {
                fusion::FusionInput fi = fusion::fuse(enc, cond, x_t, dr.t, 0.0, dims, align);
                Mat v = model_->est.forward_ctx(fi.m, dr.t, 0.0, ectx);
                Mat target = x1 - dr.x0;
                sumsq[i] = shortcut::masked_sumsq(v, target, cond.mask);
                if (denom_fm > 0) {
                    for (Eigen::Index r = 0; r < v.rows(); ++r)
                        if (cond.mask[static_cast<size_t>(r)])
                            dv.row(r) = 2.0 * (v.row(r) - target.row(r)) / static_cast<double>(denom_fm);
                }
            } else {
                auto frozen = model_->velocity_fn(enc, cond);
                shortcut::ScTarget st =
                    shortcut::self_consistency_target(frozen, x_t, dr.t, dr.d, cfg_.K, cfg_.sc_time_advance);
                fusion::FusionInput fi = fusion::fuse(enc, cond, x_t, dr.t, 2.0 * dr.d, dims, align);
                Mat v = model_->est.forward_ctx(fi.m, dr.t, 2.0 * dr.d, ectx);
                sumsq[i] = shortcut::masked_sumsq(v, st.s_target, cond.mask);
                if (denom_sc > 0) {
                    for (Eigen::Index r = 0; r < v.rows(); ++r)
                        if (cond.mask[static_cast<size_t>(r)])
                            dv.row(r) = 2.0 * (v.row(r) - st.s_target.row(r)) / static_cast<double>(denom_sc);
                }
            }

            Mat dm = model_->est.backward(ectx, dv, gs, true);
            fusion::StreamGrads sg = fusion::split_input_grad(dm, dims, T_c, align);
            model_->enc_bnf.backward(cb, sg.d_e_bnf, gs);
            model_->enc_ssl.backward(cs, sg.d_e_ssl, gs);
            model_->pbtc.backward(cp, sg.d_e_pitch, gs);
        }
    };

    if (n_threads == 1) {
        worker(0, B, grads[0]);
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (B + static_cast<size_t>(n_threads) - 1) / static_cast<size_t>(n_threads);
        for (int t = 0; t < n_threads; ++t) {
            size_t begin = static_cast<size_t>(t) * chunk;
            size_t end = std::min(B, begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(worker, begin, end, std::ref(grads[static_cast<size_t>(t)]));
        }
        for (auto& th : pool) th.join();
        for (int t = 1; t < n_threads; ++t) grads[0].add(grads[static_cast<size_t>(t)]);
    }

    double fm_sum = 0.0, sc_sum = 0.0;
    for (size_t i = 0; i < B; ++i) (draws[i].sc ? sc_sum : fm_sum) += sumsq[i];

    StepMetrics m;
    m.step = step_;
    m.fm_loss = denom_fm > 0 ? fm_sum / static_cast<double>(denom_fm) : 0.0;
    m.sc_loss = denom_sc > 0 ? sc_sum / static_cast<double>(denom_sc) : 0.0;
    m.sc_fraction = frac;
    m.lr = lr_at(cfg_, step_);
    if (!std::isfinite(m.fm_loss) || !std::isfinite(m.sc_loss))
        throw NumericError("training loss is non-finite at step " + std::to_string(step_) +
                           (last_checkpoint_.empty() ? std::string(" (no checkpoint yet)")
                                                     : " (last good checkpoint: " + last_checkpoint_ + ")"));

    opt_.step(model_->params(), grads[0], m.lr, cfg_.grad_clip);
    ++step_;
    return m;
}

void Trainer::run() {
    fs::create_directories(cfg_.run_dir);
    const std::string metrics_path = (fs::path(cfg_.run_dir) / "metrics.tsv").string();
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics log: " + metrics_path);

    while (step_ < cfg_.total_steps) {
        StepMetrics m = train_step();
        char line[256];
        std::snprintf(line, sizeof(line), "%lld\t%.10g\t%.10g\t%.10g\t%.10g\n",
                      static_cast<long long>(m.step), m.fm_loss, m.sc_loss, m.sc_fraction, m.lr);
        metrics << line;
        metrics.flush();
        if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 && step_ < cfg_.total_steps) {
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.vckp", static_cast<long long>(step_));
            const std::string path = (fs::path(cfg_.run_dir) / name).string();
            save_checkpoint(path);
            last_checkpoint_ = path;
        }
    }
    const std::string final_path = (fs::path(cfg_.run_dir) / "ckpt_final.vckp").string();
    save_checkpoint(final_path);
    last_checkpoint_ = final_path;
}

void Trainer::save_checkpoint(const std::string& path) const {
    save_checkpoint_file(path, cfg_, *model_, opt_, step_, epoch_, epoch_pos_, loop_rng_);
}

namespace {

constexpr char kCkptMagic[4] = {'V', 'C', 'K', 'P'};

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string get_str(std::istream& is) {
    uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace

void save_checkpoint_file(const std::string& path, const TrainConfig& cfg,
                          const model::VcModel& model, const AdamW& opt, int64_t step,
                          uint64_t epoch, uint64_t epoch_pos, const Rng& loop_rng) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    os.write(kCkptMagic, 4);
    os.put(1);  // version
    const std::string cfg_text = cfg.canonical_text();
    put_u64(os, fnv1a64(cfg_text));
    put_str(os, cfg_text);
    put_u64(os, static_cast<uint64_t>(step));
    put_u64(os, epoch);
    put_u64(os, epoch_pos);
    put_str(os, loop_rng.serialize());
    write_param_block(os, model.params());
    opt.serialize(os);
    if (!os) throw IoError("checkpoint write failed: " + path);
}

namespace {

struct CkptHeader {
    TrainConfig cfg;
    std::string cfg_text;
    int64_t step = 0;
    uint64_t epoch = 0;
    uint64_t epoch_pos = 0;
    std::string rng_state;
};

CkptHeader read_ckpt_header(std::istream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0) throw LoadError("bad checkpoint magic in " + path);
    int version = is.get();
    if (version != 1) throw LoadError("unsupported checkpoint version in " + path);
    CkptHeader h;
    uint64_t stored_hash = get_u64(is);
    h.cfg_text = get_str(is);
    if (fnv1a64(h.cfg_text) != stored_hash)
        throw LoadError("config hash mismatch in " + path + " (corrupt or edited checkpoint)");
    h.cfg = TrainConfig::from_text(h.cfg_text);
    h.step = static_cast<int64_t>(get_u64(is));
    h.epoch = get_u64(is);
    h.epoch_pos = get_u64(is);
    h.rng_state = get_str(is);
    if (!is) throw LoadError("truncated checkpoint header in " + path);
    return h;
}

}  // namespace

LoadedCheckpoint load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read checkpoint: " + path);
    CkptHeader h = read_ckpt_header(is, path);
    LoadedCheckpoint out;
    out.cfg = h.cfg;
    out.step = h.step;
    out.model = std::make_unique<model::VcModel>(out.cfg.model_config(), out.cfg.seed);
    read_param_block(is, out.model->params());
    return out;
}

void Trainer::restore(const std::string& ckpt_path) {
    std::ifstream is(ckpt_path, std::ios::binary);
    if (!is) throw IoError("cannot read checkpoint: " + ckpt_path);
    CkptHeader h = read_ckpt_header(is, ckpt_path);
    if (fnv1a64(h.cfg_text) != cfg_.hash())
        throw LoadError("checkpoint config does not match this trainer's config");
    read_param_block(is, model_->params());
    opt_.deserialize(is, model_->params());
    step_ = h.step;
    epoch_ = h.epoch;
    epoch_pos_ = h.epoch_pos;
    loop_rng_.deserialize(h.rng_state);
    // Rebuild the epoch permutation the checkpoint was positioned in.
    const size_t n = data_.utts.size();
    perm_.resize(n);
    for (size_t i = 0; i < n; ++i) perm_[i] = i;
    Rng prng(mix_seed(cfg_.seed, 2, epoch_));
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(prng.uniform_int(static_cast<int64_t>(i)));
        std::swap(perm_[i - 1], perm_[j]);
    }
    last_checkpoint_ = ckpt_path;
}

ConvertResult convert(const model::VcModel& m, const TrainConfig& cfg,
                      const synthdata::LoadedUtt& source, const synthdata::LoadedUtt* prompt,
                      int n_steps, double rate_factor, uint64_t seed) {
    if (!is_power_of_two(n_steps) || n_steps > (1 << cfg.K))
        throw GridError("n_steps must be a power of two <= 2^" + std::to_string(cfg.K));
    if (rate_factor <= 0.0) throw std::invalid_argument("rate_factor must be positive");

    const auto t_start = std::chrono::steady_clock::now();

    const int T_m_src = static_cast<int>(source.bundle.mel.rows());
    const int L_gen = std::max(1, static_cast<int>(std::lround(rate_factor * T_m_src)));
    const int P = prompt ? static_cast<int>(prompt->bundle.mel.rows()) : 0;
    const int L = P + L_gen;
    if (L < 4) throw std::invalid_argument("total conversion length must be >= 4 frames");

    Vec src_pitch = L_gen == T_m_src ? source.bundle.pitch : resample_linear(source.bundle.pitch, L_gen);
    Vec pitch(L);
    if (P > 0) pitch.head(P) = prompt->bundle.pitch;
    pitch.tail(L_gen) = src_pitch;

    Mat bnf = source.bundle.bnf;
    Mat ssl = source.bundle.ssl;
    if (cfg.prompt_content && P > 0) {
        bnf = vstack(prompt->bundle.bnf, bnf);
        ssl = vstack(prompt->bundle.ssl, ssl);
    }

    fusion::EncodedConditions enc = m.encode(bnf, ssl, pitch);
    fusion::CondSpec cond =
        fusion::build_cond_infer(P > 0 ? prompt->bundle.mel : Mat(0, cfg.D_m), L, cfg.D_m);

    Rng rng(mix_seed(seed, 4, 0));
    Mat x = Mat::Zero(L, cfg.D_m);
    if (P > 0) x.topRows(P) = prompt->bundle.mel;
    for (int r = P; r < L; ++r)
        for (int c = 0; c < cfg.D_m; ++c) x(r, c) = rng.normal();

    Mat out = shortcut::sample(m.velocity_fn(std::move(enc), cond), std::move(x), cond.mask,
                               n_steps, cfg.K);

    ConvertResult res;
    res.mel_out = out.bottomRows(L_gen);
    res.nfe = n_steps;
    res.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

std::vector<StepMetrics> read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read metrics log: " + path);
    std::vector<StepMetrics> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        StepMetrics m;
        long long step = 0;
        if (std::sscanf(line.c_str(), "%lld\t%lg\t%lg\t%lg\t%lg", &step, &m.fm_loss, &m.sc_loss,
                        &m.sc_fraction, &m.lr) != 5)
            throw FormatError("bad metrics line: " + line);
        m.step = step;
        out.push_back(m);
    }
    return out;
}

namespace {

void write_svg_curves(const std::string& path, const std::vector<StepMetrics>& ms) {
    const int W = 720, Hh = 360, pad = 40;
    double max_loss = 1e-9;
    for (const auto& m : ms) max_loss = std::max({max_loss, m.fm_loss, m.sc_loss});
    const int64_t max_step = ms.empty() ? 1 : std::max<int64_t>(1, ms.back().step);

    auto xpos = [&](int64_t s) {
        return pad + (W - 2 * pad) * static_cast<double>(s) / static_cast<double>(max_step);
    };
    auto ypos = [&](double v) { return Hh - pad - (Hh - 2 * pad) * (v / max_loss); };

    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << Hh << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<line x1='" << pad << "' y1='" << Hh - pad << "' x2='" << W - pad << "' y2='" << Hh - pad
       << "' stroke='black'/>\n";
    os << "<line x1='" << pad << "' y1='" << pad << "' x2='" << pad << "' y2='" << Hh - pad
       << "' stroke='black'/>\n";
    for (int pass = 0; pass < 2; ++pass) {
        os << "<polyline fill='none' stroke='" << (pass == 0 ? "#1f77b4" : "#d62728")
           << "' stroke-width='1' points='";
        for (const auto& m : ms) os << xpos(m.step) << "," << ypos(pass == 0 ? m.fm_loss : m.sc_loss) << " ";
        os << "'/>\n";
    }
    os << "<text x='" << W - 200 << "' y='20' fill='#1f77b4'>flow-matching loss</text>\n";
    os << "<text x='" << W - 200 << "' y='36' fill='#d62728'>self-consistency loss</text>\n";
    os << "<text x='" << W / 2 - 20 << "' y='" << Hh - 8 << "'>step</text>\n";
    os << "</svg>\n";
}

void write_pgm_pair(const std::string& path, const Mat& gen, const Mat& ref) {
    // Side-by-side heat maps: generated | separator | reference.
    const int D = static_cast<int>(gen.cols());
    const int Tg = static_cast<int>(gen.rows());
    const int Tr = static_cast<int>(ref.rows());
    const int sep = 4;
    const int width = Tg + sep + Tr;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << "P5\n" << width << " " << D << "\n255\n";
    auto shade = [](double v) {
        double u = (v + 4.0) / 8.0;
        u = std::clamp(u, 0.0, 1.0);
        return static_cast<unsigned char>(std::lround(u * 255.0));
    };
    for (int row = D - 1; row >= 0; --row) {
        std::vector<unsigned char> line(static_cast<size_t>(width));
        for (int t = 0; t < Tg; ++t) line[static_cast<size_t>(t)] = shade(gen(t, row));
        for (int s = 0; s < sep; ++s) line[static_cast<size_t>(Tg + s)] = 255;
        for (int t = 0; t < Tr; ++t) line[static_cast<size_t>(Tg + sep + t)] = shade(ref(t, row));
        os.write(reinterpret_cast<const char*>(line.data()), width);
    }
}

}  // namespace

void report(const std::string& run_dir) {
    const std::string metrics_path = (fs::path(run_dir) / "metrics.tsv").string();
    std::vector<StepMetrics> ms = read_metrics(metrics_path);  // IoError when missing
    write_svg_curves((fs::path(run_dir) / "loss_curves.svg").string(), ms);

    // Eval table: one row per arm report found under eval/, sorted by filename
    // so the column and row order is stable across runs.
    std::vector<evalmod::ArmReport> reports;
    const fs::path evaldir = fs::path(run_dir) / "eval";
    if (fs::is_directory(evaldir)) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(evaldir))
            if (entry.path().extension() == ".json") files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            for (auto& r : evalmod::load_reports(f)) reports.push_back(std::move(r));
    }
    {
        std::ofstream os(fs::path(run_dir) / "report_table.txt", std::ios::trunc);
        if (!os) throw IoError("cannot write report table");
        os << evalmod::metrics_table(reports);
    }

    // Factor-map images for any dumped generated/reference mel pairs.
    const fs::path figdir = fs::path(run_dir) / "figures";
    if (fs::is_directory(figdir)) {
        for (const auto& entry : fs::directory_iterator(figdir)) {
            const std::string name = entry.path().filename().string();
            const std::string suffix = "_gen.mel.rten";
            if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix) {
                const std::string stem = name.substr(0, name.size() - suffix.size());
                const fs::path refp = figdir / (stem + "_ref.mel.rten");
                if (!fs::exists(refp)) continue;
                Mat gen = read_matrix(entry.path().string());
                Mat ref = read_matrix(refp.string());
                write_pgm_pair((figdir / (stem + ".pgm")).string(), gen, ref);
            }
        }
    }
}

}  // namespace vcflow::pipeline
