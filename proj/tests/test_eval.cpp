// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vcflow/evalmod.hpp"
#include "vcflow/tensorfile.hpp"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace vcflow;
using namespace vcflow::evalmod;

namespace {

fs::path tmpdir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("vcflow_eval_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

struct Fixture {
    std::string corpus;
    pipeline::TrainConfig cfg;
    std::unique_ptr<pipeline::Trainer> trainer;
    pipeline::Dataset eval_set;
    std::vector<std::string> train_ids;

    Fixture() {
        corpus = tmpdir("corpus").string();
        synthdata::CorpusSpec s;
        s.n_utts = 14;
        s.len_min = 8;
        s.len_max = 10;
        s.noise_min = 0.0;
        s.noise_max = 0.1;
        s.seed = 123;
        std::string manifest = synthdata::generate_corpus(s, corpus);
        auto entries = synthdata::read_manifest(manifest);
        std::vector<synthdata::ManifestEntry> train(entries.begin(), entries.begin() + 8);
        std::vector<synthdata::ManifestEntry> eval(entries.begin() + 8, entries.end());
        synthdata::write_manifest((fs::path(corpus) / "train_manifest.tsv").string(), train);
        synthdata::write_manifest((fs::path(corpus) / "eval_manifest.tsv").string(), eval);

        cfg.corpus_path = corpus;
        cfg.run_dir = tmpdir("run").string();
        cfg.H = 16;
        cfg.batch_frames = 48;
        cfg.total_steps = 4;
        cfg.S0 = 100;
        cfg.seed = 3;
        trainer = std::make_unique<pipeline::Trainer>(cfg);
        trainer->train_step();
        cfg = trainer->config();

        eval_set = pipeline::Dataset::load(corpus, cfg.eval_manifest);
        for (const auto& e : synthdata::read_manifest(cfg.train_manifest))
            train_ids.push_back(e.utt_id);
    }
};

}  // namespace

TEST_CASE("oracle ceiling: ground-truth mels decode nearly perfectly") {
    Fixture fx;
    double acc = 0.0, cosv = 0.0;
    for (const auto& u : fx.eval_set.utts) {
        auto dec = synthdata::decode_content(u.bundle.mel, fx.eval_set.constants);
        acc += synthdata::token_accuracy(dec.tokens, u.factors.content_tokens);
        cosv += synthdata::cosine(dec.speaker_est, u.factors.speaker_vec);
    }
    acc /= static_cast<double>(fx.eval_set.utts.size());
    cosv /= static_cast<double>(fx.eval_set.utts.size());
    CHECK(acc >= 0.99);
    CHECK(cosv >= 0.95);
}

TEST_CASE("evaluate is deterministic and serializes losslessly") {
    Fixture fx;
    EvalOptions opts;
    opts.n_steps = 4;
    opts.seed = 17;
    ConditionMetrics a = evaluate(*&fx.trainer->model(), fx.cfg, fx.eval_set, fx.train_ids,
                                  Condition::kClean, opts);
    ConditionMetrics b = evaluate(*&fx.trainer->model(), fx.cfg, fx.eval_set, fx.train_ids,
                                  Condition::kClean, opts);
    REQUIRE(a.n_utts == 6);
    for (int i = 0; i < a.n_utts; ++i) {
        CHECK(a.content_acc[static_cast<size_t>(i)] == b.content_acc[static_cast<size_t>(i)]);
        CHECK(a.speaker_cos[static_cast<size_t>(i)] == b.speaker_cos[static_cast<size_t>(i)]);
    }

    ArmReport rep;
    rep.arm = "unit";
    rep.n_utts = a.n_utts;
    rep.clean = a;
    rep.noisy = b;
    rep.noise_delta = 0.0;
    const std::string path = (tmpdir("ser") / "rep.json").string();
    save_reports(path, {rep});
    auto back = load_reports(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].arm == "unit");
    CHECK(back[0].clean.content_acc == a.content_acc);
    CHECK(back[0].clean.mean_cos == doctest::Approx(a.mean_cos));
}

TEST_CASE("contamination between train and eval manifests is fatal") {
    Fixture fx;
    std::vector<std::string> train_ids = fx.train_ids;
    train_ids.push_back(fx.eval_set.ids[0]);
    EvalOptions opts;
    opts.n_steps = 2;
    CHECK_THROWS_AS(
        evaluate(fx.trainer->model(), fx.cfg, fx.eval_set, train_ids, Condition::kClean, opts),
        ContaminationError);
}

TEST_CASE("empty eval set yields an n_utts=0 report with undefined means") {
    Fixture fx;
    pipeline::Dataset empty;
    empty.constants = fx.eval_set.constants;
    EvalOptions opts;
    ConditionMetrics m =
        evaluate(fx.trainer->model(), fx.cfg, empty, fx.train_ids, Condition::kClean, opts);
    CHECK(m.n_utts == 0);
    CHECK(std::isnan(m.mean_acc));
    CHECK(std::isnan(m.mean_cos));
    ArmReport rep;
    rep.arm = "empty";
    rep.clean = m;
    rep.noisy = m;
    std::string table = metrics_table({rep});
    CHECK(table.find("n/a") != std::string::npos);
}

TEST_CASE("noisy condition corrupts ssl but leaves bnf untouched") {
    Fixture fx;
    // The eval path re-renders ssl at 0.8; bnf must render bit-identical to
    // the stored stream for the same factors.
    for (const auto& u : fx.eval_set.utts) {
        Mat bnf = synthdata::render_bnf(u.factors.content_tokens, fx.eval_set.constants);
        CHECK((bnf - u.bundle.bnf).cwiseAbs().maxCoeff() < 1e-6);  // float32 storage
        Rng r(1);
        Mat noisy = synthdata::render_ssl(u.factors, fx.eval_set.constants, 0.8, r);
        CHECK((noisy - u.bundle.ssl).cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("a report compared with itself shows zero differences and no flags") {
    Fixture fx;
    EvalOptions opts;
    opts.n_steps = 2;
    opts.seed = 5;
    ArmReport rep = evaluate_arm("self", fx.trainer->model(), fx.cfg, fx.eval_set, fx.train_ids, opts);
    ArmComparison cmp = compare_arms(rep, rep, 200, 9);
    for (const auto& mc : cmp.metrics) {
        CHECK(mc.mean_diff == 0.0);
        CHECK_FALSE(mc.significant);
    }
}

TEST_CASE("disjoint utterance lists cannot be paired") {
    Fixture fx;
    EvalOptions opts;
    opts.n_steps = 2;
    ArmReport rep = evaluate_arm("a", fx.trainer->model(), fx.cfg, fx.eval_set, fx.train_ids, opts);
    ArmReport other = rep;
    other.arm = "b";
    other.clean.utt_ids[0] = "utt_99999";
    CHECK_THROWS_AS(compare_arms(rep, other, 100, 1), PairingError);
}

TEST_CASE("metrics table has stable columns and one row per arm") {
    ArmReport a, b;
    a.arm = "full";
    a.n_utts = 2;
    a.clean.utt_ids = {"u0", "u1"};
    a.clean.content_acc = {0.9, 1.0};
    a.clean.speaker_cos = {0.8, 0.9};
    a.clean.finalize();
    a.noisy = a.clean;
    a.noise_delta = 0.05;
    b = a;
    b.arm = "ablate";
    std::string table = metrics_table({a, b});
    std::istringstream is(table);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    REQUIRE(lines.size() == 4);  // header, separator, two rows
    CHECK(lines[0].find("arm") == 0);
    CHECK(lines[0].find("clean_acc") != std::string::npos);
    CHECK(lines[2].find("full") == 0);
    CHECK(lines[3].find("ablate") == 0);
}

TEST_CASE("external adapter: stub scoring, partial failure, over-threshold failure") {
    auto dir = tmpdir("adapter");
    // Inputs are plain files; the stubs only look at the path.
    std::vector<std::string> inputs;
    for (int i = 0; i < 10; ++i) {
        std::string p = (dir / ("in_" + std::to_string(i) + ".txt")).string();
        std::ofstream(p) << i << "\n";
        inputs.push_back(p);
    }

    SUBCASE("echo stub scores every utterance 1.0") {
        AdapterOutcome out =
            run_external_adapter("speaker", "cat {in} > /dev/null && echo 1.0 > {out}", inputs,
                                 (dir / "work").string());
        CHECK(out.failures.empty());
        for (double s : out.scores) CHECK(s == 1.0);
    }

    SUBCASE("one failing utterance is recorded, not fatal") {
        // The stub fails only for input index 3.
        AdapterOutcome out = run_external_adapter(
            "asr", "sh -c 'case {in} in *in_3*) exit 2;; *) echo 0.5 > {out};; esac'", inputs,
            (dir / "work2").string());
        REQUIRE(out.failures.size() == 1);
        CHECK(out.failures[0].find("3:") == 0);
        int ok = 0;
        for (double s : out.scores)
            if (!std::isnan(s)) ++ok;
        CHECK(ok == 9);
    }

    SUBCASE("non-numeric output is a recorded parse failure") {
        AdapterOutcome out = run_external_adapter(
            "asr", "sh -c 'case {in} in *in_7*) echo banana > {out};; *) echo 0.25 > {out};; esac'",
            inputs, (dir / "work3").string());
        REQUIRE(out.failures.size() == 1);
        CHECK(out.failures[0].find("7:") == 0);
    }

    SUBCASE("more than 20% failures raises an adapter error") {
        CHECK_THROWS_AS(run_external_adapter("asr", "cat {in} > /dev/null && exit 1 # {out}", inputs,
                                             (dir / "work4").string()),
                        AdapterError);
    }

    SUBCASE("template must contain both placeholders") {
        CHECK_THROWS_AS(run_external_adapter("asr", "echo 1.0", inputs, (dir / "w5").string()),
                        AdapterError);
    }
}

TEST_CASE("speaker cosine measures the prompt speaker after conversion") {
    // With an untrained (zero-velocity) model the output is the initial noise,
    // so accuracy sits near chance; the machinery still runs end to end.
    Fixture fx;
    EvalOptions opts;
    opts.n_steps = 2;
    opts.seed = 21;
    ConditionMetrics m =
        evaluate(fx.trainer->model(), fx.cfg, fx.eval_set, fx.train_ids, Condition::kClean, opts);
    CHECK(m.n_utts == 6);
    for (double acc : m.content_acc) CHECK(acc <= 0.5);  // far below the oracle ceiling
}
