// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/evalmod.hpp"
#include "vcflow/pipeline.hpp"
#include "vcflow/synthdata.hpp"
#include "vcflow/tensorfile.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace vcflow;

namespace {

// Writes the train/eval manifest split (seeded shuffle, disjoint id sets).
void split_manifests(const std::string& corpus_dir, const std::string& manifest_path,
                     double eval_fraction, uint64_t seed) {
    auto entries = synthdata::read_manifest(manifest_path);
    std::vector<size_t> order(entries.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, 9, 0));
    for (size_t i = order.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(order[i - 1], order[j]);
    }
    size_t n_eval = static_cast<size_t>(std::llround(eval_fraction * static_cast<double>(entries.size())));
    n_eval = std::min(n_eval, entries.size());
    std::vector<synthdata::ManifestEntry> train_e, eval_e;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_eval ? eval_e : train_e).push_back(entries[order[i]]);
    auto by_id = [](const synthdata::ManifestEntry& a, const synthdata::ManifestEntry& b) {
        return a.utt_id < b.utt_id;
    };
    std::sort(train_e.begin(), train_e.end(), by_id);
    std::sort(eval_e.begin(), eval_e.end(), by_id);
    synthdata::write_manifest((fs::path(corpus_dir) / "train_manifest.tsv").string(), train_e);
    synthdata::write_manifest((fs::path(corpus_dir) / "eval_manifest.tsv").string(), eval_e);
}

const synthdata::LoadedUtt* find_utt(const pipeline::Dataset& ds, const std::string& id) {
    for (size_t i = 0; i < ds.ids.size(); ++i)
        if (ds.ids[i] == id) return &ds.utts[i];
    return nullptr;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voice conversion with shortcut flow matching on a synthetic oracle corpus"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path;
    uint64_t seed_override = 0;
    bool seed_given = false;
    bool deterministic = false;
    app.add_option("--config", config_path, "training config file")->expected(1);
    app.add_option("--seed", seed_override, "seed override")->each([&](const std::string&) { seed_given = true; });
    app.add_flag("--deterministic", deterministic, "single-threaded fully reproducible mode");

    // synth-data
    auto* sd = app.add_subcommand("synth-data", "generate the synthetic corpus");
    std::string sd_out = "corpus";
    synthdata::CorpusSpec spec;
    spec.n_utts = 1000;
    double eval_fraction = 0.1;
    sd->add_option("--out", sd_out, "corpus directory");
    sd->add_option("--n-utts", spec.n_utts);
    sd->add_option("--vocab", spec.V);
    sd->add_option("--speaker-dim", spec.S);
    sd->add_option("--ssl-dim", spec.D_s);
    sd->add_option("--mel-dim", spec.D_m);
    sd->add_option("--frame-ratio", spec.frame_ratio);
    sd->add_option("--len-min", spec.len_min);
    sd->add_option("--len-max", spec.len_max);
    sd->add_option("--noise-min", spec.noise_min);
    sd->add_option("--noise-max", spec.noise_max);
    sd->add_option("--eval-fraction", eval_fraction);

    // train
    auto* tr = app.add_subcommand("train", "train from --config");

    // convert
    auto* cv = app.add_subcommand("convert", "convert one utterance");
    std::string cv_ckpt, cv_source, cv_prompt, cv_manifest, cv_out = "converted.mel.rten";
    int cv_steps = 32;
    double cv_rate = 1.0;
    cv->add_option("--checkpoint", cv_ckpt)->required();
    cv->add_option("--source", cv_source, "source utterance id")->required();
    cv->add_option("--prompt", cv_prompt, "prompt utterance id (empty = unconditional speaker)");
    cv->add_option("--manifest", cv_manifest, "manifest holding source/prompt (default: eval manifest)");
    cv->add_option("--n-steps", cv_steps);
    cv->add_option("--rate-factor", cv_rate);
    cv->add_option("--out", cv_out);

    // eval
    auto* ev = app.add_subcommand("eval", "oracle evaluation of a checkpoint");
    std::string ev_ckpt, ev_arm = "full", ev_run_dir;
    int ev_steps = 32, ev_dump = 0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--arm", ev_arm, "arm label for the report row");
    ev->add_option("--n-steps", ev_steps);
    ev->add_option("--run-dir", ev_run_dir, "run dir for report output (default: checkpoint's)");
    ev->add_option("--dump-mels", ev_dump, "dump the first N gen/ref mel pairs");

    // report
    auto* rp = app.add_subcommand("report", "figures and tables from a run dir");
    std::string rp_dir;
    rp->add_option("--run-dir", rp_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (sd->parsed()) {
            if (seed_given) spec.seed = seed_override;
            spec.D_b = spec.V;  // bnf is a smoothed one-hot over the vocabulary
            std::string manifest = synthdata::generate_corpus(spec, sd_out);
            split_manifests(sd_out, manifest, eval_fraction, spec.seed);
            std::cout << "corpus written to " << sd_out << " (" << spec.n_utts << " utterances)\n";
            return 0;
        }

        if (tr->parsed()) {
            if (config_path.empty()) throw ConfigError("train requires --config");
            pipeline::TrainConfig cfg = pipeline::TrainConfig::from_file(config_path);
            if (seed_given) cfg.seed = seed_override;
            if (deterministic) cfg.deterministic = true;
            pipeline::Trainer trainer(cfg);
            trainer.run();
            std::cout << "training complete: " << trainer.step() << " steps, run dir "
                      << trainer.config().run_dir << "\n";
            return 0;
        }

        if (cv->parsed()) {
            pipeline::LoadedCheckpoint ck = pipeline::load_checkpoint_file(cv_ckpt);
            const std::string manifest = cv_manifest.empty() ? ck.cfg.eval_manifest : cv_manifest;
            pipeline::Dataset ds = pipeline::Dataset::load(ck.cfg.corpus_path, manifest);
            const synthdata::LoadedUtt* src = find_utt(ds, cv_source);
            if (!src) throw ConfigError("source utterance not found: " + cv_source);
            const synthdata::LoadedUtt* prm = nullptr;
            if (!cv_prompt.empty()) {
                prm = find_utt(ds, cv_prompt);
                if (!prm) throw ConfigError("prompt utterance not found: " + cv_prompt);
            }
            uint64_t seed = seed_given ? seed_override : ck.cfg.seed;
            pipeline::ConvertResult res =
                pipeline::convert(*ck.model, ck.cfg, *src, prm, cv_steps, cv_rate, seed);
            write_matrix(cv_out, res.mel_out);
            std::printf("wrote %s (%d frames, NFE %d, %.3f s)\n", cv_out.c_str(),
                        static_cast<int>(res.mel_out.rows()), res.nfe, res.wall_seconds);
            return 0;
        }

        if (ev->parsed()) {
            pipeline::LoadedCheckpoint ck = pipeline::load_checkpoint_file(ev_ckpt);
            pipeline::Dataset eval_set = pipeline::Dataset::load(ck.cfg.corpus_path, ck.cfg.eval_manifest);
            std::vector<std::string> train_ids;
            for (const auto& e : synthdata::read_manifest(ck.cfg.train_manifest))
                train_ids.push_back(e.utt_id);
            const std::string run_dir = ev_run_dir.empty() ? ck.cfg.run_dir : ev_run_dir;
            evalmod::EvalOptions opts;
            opts.n_steps = ev_steps;
            opts.seed = seed_given ? seed_override : ck.cfg.seed;
            if (ev_dump > 0) {
                opts.dump_dir = (fs::path(run_dir) / "figures").string();
                opts.dump_n = ev_dump;
            }
            evalmod::ArmReport rep =
                evalmod::evaluate_arm(ev_arm, *ck.model, ck.cfg, eval_set, train_ids, opts);
            fs::create_directories(fs::path(run_dir) / "eval");
            evalmod::save_reports((fs::path(run_dir) / "eval" / (ev_arm + ".json")).string(), {rep});
            std::cout << evalmod::metrics_table({rep});
            return 0;
        }

        if (rp->parsed()) {
            pipeline::report(rp_dir);
            std::cout << "report written under " << rp_dir << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
