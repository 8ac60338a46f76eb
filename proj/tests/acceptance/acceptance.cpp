// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mergeforge/eval.hpp"
#include "mergeforge/evolve.hpp"
#include "mergeforge/merge.hpp"
#include "mergeforge/pipeline.hpp"
#include "mergeforge/vocab.hpp"
#include "support/e2e_pipeline.hpp"
#include "support/naive_merge.hpp"
#include "support/run_command.hpp"
#include "support/test_util.hpp"

using namespace mergeforge;
using testutil::TempDir;
using testutil::values;

namespace {

const std::string kCli = MERGEFORGE_CLI;
const std::filesystem::path kData = MERGEFORGE_TEST_DATA;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// Collects the first few failure notes for a criterion.
struct Check {
    std::vector<std::string> notes;
    std::size_t failures = 0;

    void expect(bool ok, const std::string& what) {
        if (ok) return;
        if (++failures <= 5) notes.push_back(what);
    }
    bool ok() const { return failures == 0; }
};

int failed_criteria = 0;

void report(const std::string& id, Check& c, const std::string& detail) {
    std::cout << (c.ok() ? "PASS " : "FAIL ") << id << ": " << detail;
    if (c.failures) std::cout << " [" << c.failures << " failure(s)]";
    std::cout << "\n";
    for (const auto& n : c.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
    if (!c.ok()) ++failed_criteria;
}

void run(const std::string& id, const std::function<std::string(Check&)>& body) {
    Check c;
    std::string detail;
    try {
        detail = body(c);
    } catch (const std::exception& e) {
        c.expect(false, std::string("exception: ") + e.what());
    }
    report(id, c, detail);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Checkpoint one(const std::vector<float>& v, const std::string& name = "w") {
    Checkpoint c;
    c.tensors.emplace(name, Tensor::from_f32({v.size()}, std::span<const float>(v)));
    return c;
}

std::int64_t ulp_distance(float a, float b) {
    auto key = [](float f) {
        const auto u = std::bit_cast<std::int32_t>(f);
        return u < 0 ? std::int64_t(std::numeric_limits<std::int32_t>::min()) - u : std::int64_t(u);
    };
    return std::llabs(key(a) - key(b));
}

// ---------------------------------------------------------------------------

std::string merge_oracle(Check& c) {
    const auto start = Clock::now();
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed * 7919 + 1);
        auto layout = testutil::random_layout(rng);
        auto base = testutil::random_checkpoint(layout, rng);
        std::vector<Checkpoint> models = {testutil::random_checkpoint(layout, rng),
                                          testutil::random_checkpoint(layout, rng)};
        std::uniform_real_distribution<double> ud(0.05, 0.95);
        const std::vector<double> w = {ud(rng) * 3, ud(rng) * 3};
        const double t = ud(rng), lambda = ud(rng) * 2, density = ud(rng), p = ud(rng) * 0.9;
        const auto lin = linear_merge(models, w);
        const auto sl = slerp_merge(models[0], models[1], t);
        const std::vector<TaskVector> tvs = {task_vector(base, models[0]), task_vector(base, models[1])};
        const auto ta = task_arithmetic_merge(base, tvs, lambda);
        const auto ti = ties_merge(base, models, density, lambda);
        const auto dt = dare_ties_merge(base, models, p, lambda, seed);
        for (const auto& name : layout.names) {
            const auto b = values(base.tensors.at(name));
            const auto m0 = values(models[0].tensors.at(name)), m1 = values(models[1].tensors.at(name));
            auto cmp = [&](const char* method, const Checkpoint& got, const std::vector<float>& expect) {
                const auto g = values(got.tensors.at(name));
                c.expect(g.size() == expect.size(), std::string(method) + " size mismatch at " + name);
                for (std::size_t j = 0; j < std::min(g.size(), expect.size()); ++j) {
                    const double d = std::fabs(double(g[j]) - double(expect[j]));
                    worst = std::max(worst, d);
                    c.expect(d <= 1e-6, std::string(method) + " seed " + std::to_string(seed) + " " + name + "[" +
                                            std::to_string(j) + "] off by " + fmt("%.3g", d));
                }
            };
            cmp("linear", lin, naive::linear({m0, m1}, w));
            cmp("slerp", sl, naive::slerp(m0, m1, t));
            cmp("task_arithmetic", ta, naive::task_arithmetic(b, {naive::sub(m0, b), naive::sub(m1, b)}, lambda));
            cmp("ties", ti, naive::ties(b, {m0, m1}, density, lambda));
            cmp("dare_ties", dt, naive::dare_ties(b, {m0, m1}, p, lambda, seed, name));
        }
    }
    const double secs = seconds_since(start);
    c.expect(secs < 10, "runtime " + fmt("%.2f", secs) + " s exceeds 10 s");
    return "5 methods x 100 seeds vs scalar loops, max |diff| " + fmt("%.3g", worst) + " (<= 1e-6), " +
           fmt("%.2f", secs) + " s (< 10 s)";
}

std::string algebraic_laws(Check& c) {
    std::int64_t worst_ulp = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed + 500);
        auto layout = testutil::random_layout(rng);
        auto base = testutil::random_checkpoint(layout, rng);
        auto a = testutil::random_checkpoint(layout, rng);
        auto b = testutil::random_checkpoint(layout, rng);
        const std::string tag = " seed " + std::to_string(seed);

        const auto s0 = slerp_merge(a, b, 0), s1 = slerp_merge(a, b, 1);
        for (const auto& name : layout.names) {
            const auto va = values(a.tensors.at(name)), vb = values(b.tensors.at(name));
            const auto g0 = values(s0.tensors.at(name)), g1 = values(s1.tensors.at(name));
            for (std::size_t j = 0; j < va.size(); ++j) {
                worst_ulp = std::max({worst_ulp, ulp_distance(g0[j], va[j]), ulp_distance(g1[j], vb[j])});
                c.expect(ulp_distance(g0[j], va[j]) <= 1, "slerp(0) != a" + tag);
                c.expect(ulp_distance(g1[j], vb[j]) <= 1, "slerp(1) != b" + tag);
            }
        }

        const std::vector<Checkpoint> models = {a, b};
        const std::vector<TaskVector> tvs = {task_vector(base, a), task_vector(base, b)};
        c.expect(task_arithmetic_merge(base, tvs, 0.0).tensors == base.tensors, "task arithmetic lambda=0" + tag);
        c.expect(ties_merge(base, models, 0.6, 0.0).tensors == base.tensors, "ties lambda=0" + tag);
        c.expect(dare_ties_merge(base, models, 0.5, 0.0, seed).tensors == base.tensors, "dare_ties lambda=0" + tag);
        c.expect(dare(tvs[0], 0.0, seed).deltas.tensors == tvs[0].deltas.tensors, "dare p=0" + tag);
        c.expect(dare_ties_merge(base, models, 0.0, 0.7, seed).tensors == ties_merge(base, models, 1.0, 0.7).tensors,
                 "dare_ties p=0 vs ties density=1" + tag);

        const std::vector<Checkpoint> single = {a};
        const std::vector<TaskVector> single_tv = {tvs[0]};
        c.expect(ties_merge(base, single, 1.0, 1.0).tensors == task_arithmetic_merge(base, single_tv, 1.0).tensors,
                 "ties(density=1, one model, lambda=1) != task arithmetic" + tag);

        std::uniform_real_distribution<double> ud(0.1, 4.0);
        const std::vector<double> w = {ud(rng), ud(rng)};
        const double k = ud(rng) * 25;
        const std::vector<double> wk = {w[0] * k, w[1] * k};
        c.expect(linear_merge(models, w).tensors == linear_merge(models, wk).tensors, "linear weight scale" + tag);
    }
    return "slerp endpoints max " + std::to_string(worst_ulp) +
           " ulp; lambda=0, p=0, ties->task arithmetic and linear scale laws exact over 100 seeds";
}

std::string ties_worked_example(Check& c) {
    // Brute-force oracle by hand: keep the 2 largest |tau| per model, elect
    // sign by summed mass, average the agreeing non-zero entries.
    //   tau_A trimmed = [1, -2, 0, 0], tau_B trimmed = [0, -1, 3, 0]
    //   signs = [+, -, +, 0] -> merged = [1, -1.5, 3, 0]
    const auto base = one({0, 0, 0, 0});
    const std::vector<Checkpoint> models = {one({1, -2, 0.1f, 0}), one({-0.5f, -1, 3, 0.2f})};
    const auto got = values(ties_merge(base, models, 0.5, 1.0).tensors.at("w"));
    const std::vector<float> expect = {1, -1.5f, 3, 0};
    c.expect(got == expect, "got [" + std::to_string(got[0]) + ", " + std::to_string(got[1]) + ", " +
                                std::to_string(got[2]) + ", " + std::to_string(got[3]) + "]");
    return "ties([1,-2,0.1,0],[-0.5,-1,3,0.2]; density 0.5, lambda 1) == [1,-1.5,3,0] exactly";
}

std::string dare_unbiased(Check& c) {
    const auto start = Clock::now();
    const std::vector<float> tau = {1.0f, -2.0f, 0.5f, 0.1f, -0.25f, 0.75f, -0.1f, 3.0f};
    TaskVector tv;
    tv.deltas = one(tau);
    const double p = 0.9;
    const int seeds = 10000;
    std::vector<double> sum(tau.size());
    for (int s = 0; s < seeds; ++s) {
        const auto out = values(dare(tv, p, static_cast<std::uint64_t>(s)).deltas.tensors.at("w"));
        for (std::size_t j = 0; j < tau.size(); ++j) sum[j] += out[j];
    }
    double worst = 0;
    for (std::size_t j = 0; j < tau.size(); ++j) {
        const double rel = std::fabs(sum[j] / seeds - tau[j]) / std::fabs(tau[j]);
        worst = std::max(worst, rel);
        c.expect(rel <= 0.05, "element " + std::to_string(j) + " (tau " + fmt("%g", tau[j]) + ") mean " +
                                  fmt("%.6g", sum[j] / seeds) + ", relative error " + fmt("%.4f", rel));
    }
    const double secs = seconds_since(start);
    c.expect(secs < 30, "runtime " + fmt("%.2f", secs) + " s exceeds 30 s");
    return "dare(tau, 0.9) over 10000 seeds, worst relative error " + fmt("%.4f", worst) + " (<= 0.05), " +
           fmt("%.2f", secs) + " s (< 30 s)";
}

std::string determinism(Check& c) {
    TempDir dir("mf_acc_det");
    std::mt19937_64 rng(77);
    // Twelve tensors so that 8 workers all have something to do.
    testutil::RandomLayout layout;
    for (int i = 0; i < 4; ++i) {
        auto part = testutil::random_layout(rng);
        for (std::size_t k = 0; k < part.names.size(); ++k) {
            layout.names.push_back("block" + std::to_string(i) + "." + part.names[k]);
            layout.shapes.push_back(part.shapes[k]);
        }
    }
    for (const char* name : {"base", "a", "b", "c"}) {
        write_checkpoint(testutil::random_checkpoint(layout, rng), dir / (std::string(name) + ".safetensors"));
    }
    std::size_t runs = 0;
    for (Method m : {Method::linear, Method::slerp, Method::task_arithmetic, Method::ties, Method::dare_ties}) {
        MergeRecipe r;
        r.method = m;
        if (uses_base(m)) r.base_model = (dir / "base.safetensors").string();
        r.models = {{(dir / "a.safetensors").string(), 1}, {(dir / "b.safetensors").string(), 2}};
        if (m != Method::slerp) r.models.push_back({(dir / "c.safetensors").string(), 0.5});
        r.params.seed = 1234;
        r.params.density = 0.4;
        r.params.drop_prob = 0.6;
        r.params.lambda = 0.8;
        r.params.t = 0.3;
        std::string first;
        for (std::size_t threads : {1, 2, 8}) {
            r.out_path = (dir / ("out" + std::to_string(threads) + ".safetensors")).string();
            run_recipe(r, threads);
            ++runs;
            const auto bytes = testutil::read_file(r.out_path);
            if (first.empty()) first = bytes;
            c.expect(bytes == first, std::string(method_name(m)) + " differs at " + std::to_string(threads) + " threads");
        }
    }
    return "5 methods, 12-tensor checkpoints, files byte-identical at 1/2/8 threads (" + std::to_string(runs) +
           " runs)";
}

std::string streaming_memory(Check& c) {
    TempDir dir("mf_acc_stream");
    constexpr std::size_t kTensors = 10, kElems = 10'000'000;
    std::map<std::string, CheckpointWriter::Entry> entries;
    for (std::size_t i = 0; i < kTensors; ++i) {
        entries.emplace("layer" + std::to_string(i) + ".weight", CheckpointWriter::Entry{DType::F32, {kElems}});
    }
    for (int model = 0; model < 2; ++model) {
        CheckpointWriter w(dir / ("m" + std::to_string(model) + ".safetensors"), entries);
        std::size_t k = 0;
        for (const auto& [name, e] : entries) {
            Tensor t(DType::F32, e.shape);
            auto v = t.f32();
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = float((j * 2654435761u + k * 97 + model * 13) % 1000) * 1e-3f;
            w.write(name, t);
            ++k;
        }
        w.finish();
    }
    MergeRecipe r;
    r.method = Method::linear;
    r.models = {{(dir / "m0.safetensors").string(), 1}, {(dir / "m1.safetensors").string(), 3}};
    r.out_path = (dir / "out.safetensors").string();

    const std::size_t largest = kElems * 4;
    const std::size_t before = MemoryStats::resident();
    MemoryStats::reset_peak();
    const auto start = Clock::now();
    run_recipe(r, 1);
    const double secs = seconds_since(start);
    const std::size_t peak = MemoryStats::peak() - before;

    c.expect(peak <= 3 * largest, "peak " + std::to_string(peak) + " bytes exceeds 3 x " + std::to_string(largest));
    c.expect(secs < 60, "runtime " + fmt("%.2f", secs) + " s exceeds 60 s");

    // Spot-check one merged tensor against the inputs.
    auto out = CheckpointFile::open(r.out_path);
    auto a = CheckpointFile::open(r.models[0].path), b = CheckpointFile::open(r.models[1].path);
    const auto ta = a.load("layer7.weight"), tb = b.load("layer7.weight"), to = out.load("layer7.weight");
    for (std::size_t j = 0; j < kElems; j += 99991) {
        const float expect = static_cast<float>(0.25 * ta.f32()[j] + 0.75 * tb.f32()[j]);
        c.expect(to.f32()[j] == expect, "merged value mismatch at layer7[" + std::to_string(j) + "]");
    }
    return "2 x 100M-element F32 linear merge, peak resident " + fmt("%.1f", peak / 1e6) + " MB vs bound " +
           fmt("%.1f", 3 * largest / 1e6) + " MB (" + fmt("%.2f", double(peak) / largest) + "x largest), " +
           fmt("%.2f", secs) + " s (< 60 s)";
}

std::string evolve_convergence(Check& c) {
    auto f = [](double x) { return -(x - 0.3) * (x - 0.3); };
    // Grid oracle for the argmax on [0, 1].
    double target = 0, best = f(0);
    for (int i = 1; i <= 100000; ++i) {
        const double x = i / 100000.0;
        if (f(x) > best) best = f(x), target = x;
    }
    SearchSpace space{{{"lambda", 0.0, 1.0}}};
    int hits = 0, monotone = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto r = evolve(space, [&](const std::vector<double>& x, std::size_t) { return f(x[0]); }, 400, seed);
        if (std::fabs(r.best.x[0] - target) <= 0.01) ++hits;
        bool mono = true;
        for (std::size_t g = 1; g < r.log.generations.size(); ++g) {
            mono = mono && r.log.generations[g].best_fitness >= r.log.generations[g - 1].best_fitness;
        }
        mono = mono && !r.log.generations.empty() && r.log.generations.back().best_fitness == *r.best.fitness;
        if (mono) ++monotone;
        c.expect(mono, "best fitness decreased in seed " + std::to_string(seed));
    }
    c.expect(hits >= 95, std::to_string(hits) + "/100 seeds within 0.01");
    return std::to_string(hits) + "/100 seeds within 0.01 of grid argmax " + fmt("%.5f", target) +
           " (>= 95); monotone best in " + std::to_string(monotone) + "/100 runs";
}

std::string curation(Check& c) {
    std::mt19937 rng(31337);
    const std::vector<std::string> vocab = {"fever", "cough", "renal", "calculus", "erythema", "pruritic",
                                            "hepatic", "edema", "tachycardia", "anemia", "lesion", "acute",
                                            "chronic", "pain", "dyspnea", "ischemic", "stroke", "benign",
                                            "mass", "sepsis", "rash", "ulcer", "syncope", "cyst"};
    std::vector<double> wts;
    for (std::size_t i = 0; i < vocab.size(); ++i) wts.push_back(1.0 / double((i + 1) * (i + 1)));
    std::discrete_distribution<int> zipf(wts.begin(), wts.end());
    std::string corpus;
    for (int i = 0; i < 1000; ++i) {
        std::string word = vocab[zipf(rng)];
        if (rng() % 5 == 0) word[0] = static_cast<char>(std::toupper(word[0]));
        corpus += word + (i % 13 == 12 ? ".\n" : " ");
    }
    std::vector<TermEntry> terms;
    const std::vector<std::string> extra = {"hepatosplenomegaly", "cardiomyopathy", "nephrolithiasis"};
    for (int i = 0; i < 50; ++i) {
        std::string t = i % 7 == 0 ? extra[rng() % extra.size()] : vocab[rng() % vocab.size()];
        if (rng() % 3 == 0) t += " " + vocab[rng() % vocab.size()];
        if (rng() % 4 == 0) t[0] = static_cast<char>(std::toupper(t[0]));
        terms.push_back({t, "", static_cast<Pos>(rng() % 3), 0});
    }

    // Naive oracle: the corpus holds only ASCII words, spaces, '.' and '\n'.
    std::map<std::string, std::uint64_t> counts;
    std::string word;
    for (char ch : corpus + " ") {
        if (std::isalpha(static_cast<unsigned char>(ch))) {
            word += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        } else if (!word.empty()) {
            ++counts[word];
            word.clear();
        }
    }
    std::uint64_t total = 0;
    for (const auto& [w, n] : counts) total += n;
    c.expect(total == 1000, "oracle counted " + std::to_string(total) + " tokens");

    const auto freq = count_frequencies(corpus);
    std::size_t kept = 0;
    for (std::uint64_t max_freq : {0, 1, 5, 40}) {
        std::vector<TermEntry> expect;
        for (const auto& t : terms) {
            std::uint64_t f = 0;
            std::istringstream parts(t.term_en);
            for (std::string piece; parts >> piece;) {
                for (auto& ch : piece) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
                auto it = counts.find(piece);
                f = std::max<std::uint64_t>(f, it == counts.end() ? 0 : it->second);
            }
            if (f <= max_freq && t.pos != Pos::other) expect.push_back({t.term_en, t.term_ja, t.pos, f});
        }
        const auto got = curate(terms, freq, max_freq);
        c.expect(got == expect, "max_freq " + std::to_string(max_freq) + ": got " + std::to_string(got.size()) +
                                    " terms, oracle " + std::to_string(expect.size()));
        c.expect(curate(got, freq, max_freq) == got, "not idempotent at max_freq " + std::to_string(max_freq));
        if (max_freq == 1) kept = got.size();
    }
    return "1000-token corpus, 50 terms, max_freq {0,1,5,40} match naive oracle (" + std::to_string(kept) +
           " kept at 1); idempotent";
}

std::string stats(Check& c) {
    std::mt19937_64 rng(4242);
    double worst = 0;
    for (int i = 0; i < 100000; ++i) {
        std::vector<int> v(1 + rng() % 60);
        for (auto& x : v) x = static_cast<int>(rng() % 11);
        const auto s = compute_stats(v);
        std::vector<int> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        const double median = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
        double mean = 0;
        for (int x : sorted) mean += x;
        mean /= n;
        double var = 0;
        for (int x : sorted) var += (x - mean) * (x - mean);
        const double sd = std::sqrt(var / n);
        const double d = std::max({std::fabs(s.median - median), std::fabs(s.mean - mean), std::fabs(s.std - sd)});
        worst = std::max(worst, d);
        c.expect(d <= 1e-9 && s.n == n, "list " + std::to_string(i) + " differs by " + fmt("%.3g", d));
    }
    const auto e = compute_stats({6, 5, 4, 7, 3});
    c.expect(e.median == 5 && e.mean == 5 && e.std == std::sqrt(2.0),
             "[6,5,4,7,3] -> (" + fmt("%.17g", e.median) + ", " + fmt("%.17g", e.mean) + ", " + fmt("%.17g", e.std) + ")");
    return "1e5 random lists vs sort-based reference, max |diff| " + fmt("%.3g", worst) +
           " (<= 1e-9); [6,5,4,7,3] -> (5, 5, sqrt 2)";
}

std::string end_to_end(Check& c) {
    const auto start = Clock::now();
    TempDir dir("mf_acc_e2e");
    auto run = testutil::run_offline_pipeline(kCli, kData / "e2e", dir / "work", 2);
    for (const auto& f : run.failures) c.expect(false, f);
    if (run.failures.empty()) {
        for (const auto& d : testutil::compare_with_golden(run.work, kData / "e2e")) c.expect(false, d);
    }
    auto r = testutil::run_command({kCli, "report", "--scores", (kData / "baseline_report" / "baseline_scores.jsonl").string(),
                                    "--out", (dir / "baseline.md").string()},
                                   dir.path());
    c.expect(r.exit_code == 0, "report exited " + std::to_string(r.exit_code) + ": " + r.err);
    const auto md = testutil::read_file(dir / "baseline.md");
    const std::string row = "| Baseline | 10 | 9.48 | 1.66 | 10 | 9.30 | 2.07 |";
    c.expect(md.find(row + "\n") != std::string::npos, "Baseline row missing from:\n" + md);
    const double secs = seconds_since(start);
    c.expect(secs < 20, "runtime " + fmt("%.2f", secs) + " s exceeds 20 s");
    return "curate -> define -> judge -> report on loopback mock matches golden table and histograms; \"" + row +
           "\" rendered; " + fmt("%.2f", secs) + " s (< 20 s)";
}

// ---------------------------------------------------------------------------
// Independent reader of the published layout: u64 little-endian header
// length N, N bytes of JSON object, then the byte buffer. Each tensor entry
// has dtype, shape and data_offsets [begin, end) relative to the buffer;
// "__metadata__" maps strings to strings.

struct RawTensor {
    std::string dtype;
    std::vector<std::uint64_t> shape;
    std::vector<float> values;
};

struct RawFile {
    std::map<std::string, RawTensor> tensors;
    std::map<std::string, std::string> metadata;
};

std::optional<RawFile> independent_read(const std::string& bytes, std::string* why) {
    auto fail = [&](const std::string& m) {
        *why = m;
        return std::optional<RawFile>{};
    };
    if (bytes.size() < 8) return fail("shorter than 8 bytes");
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(bytes[i]);
    if (n > bytes.size() - 8) return fail("header length past end of file");
    const auto doc = nlohmann::json::parse(bytes.substr(8, n), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) return fail("header is not a JSON object");
    const std::string_view buffer(bytes.data() + 8 + n, bytes.size() - 8 - n);
    RawFile f;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& [name, e] : doc.items()) {
        if (name == "__metadata__") {
            if (!e.is_object()) return fail("metadata is not an object");
            for (const auto& [k, v] : e.items()) {
                if (!v.is_string()) return fail("metadata value is not a string");
                f.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!e.is_object() || !e.contains("dtype") || !e.contains("shape") || !e.contains("data_offsets")) {
            return fail(name + ": missing field");
        }
        RawTensor t;
        t.dtype = e["dtype"].get<std::string>();
        std::uint64_t width = t.dtype == "F32" ? 4 : t.dtype == "BF16" ? 2 : 0;
        if (width == 0) return fail(name + ": dtype " + t.dtype);
        std::uint64_t count = 1;
        for (const auto& d : e["shape"]) {
            t.shape.push_back(d.get<std::uint64_t>());
            count *= t.shape.back();
        }
        const auto& off = e["data_offsets"];
        if (!off.is_array() || off.size() != 2) return fail(name + ": data_offsets");
        const auto b = off[0].get<std::uint64_t>(), end = off[1].get<std::uint64_t>();
        if (b > end || end > buffer.size()) return fail(name + ": offsets out of range");
        if (end - b != count * width) return fail(name + ": byte size does not match shape");
        for (std::uint64_t i = 0; i < count; ++i) {
            const char* p = buffer.data() + b + i * width;
            std::uint32_t bits = 0;
            if (width == 4) {
                for (int k = 3; k >= 0; --k) bits = (bits << 8) | static_cast<unsigned char>(p[k]);
            } else {
                bits = (std::uint32_t(static_cast<unsigned char>(p[1])) << 24) |
                       (std::uint32_t(static_cast<unsigned char>(p[0])) << 16);
            }
            t.values.push_back(std::bit_cast<float>(bits));
        }
        if (b != end) spans.emplace_back(b, end);
        f.tensors.emplace(name, std::move(t));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second) return fail("overlapping tensors");
    }
    return f;
}

std::string frame(const std::string& header, const std::string& payload) {
    std::string out(8, '\0');
    for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((std::uint64_t(header.size()) >> (8 * i)) & 0xff);
    return out + header + payload;
}

std::string le_f32(std::initializer_list<float> vs) {
    std::string s;
    for (float v : vs) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int k = 0; k < 4; ++k) s += static_cast<char>((bits >> (8 * k)) & 0xff);
    }
    return s;
}

std::string interop(Check& c) {
    TempDir dir("mf_acc_interop");
    struct Vector {
        std::string name;
        std::string bytes;
        bool valid;
        std::map<std::string, std::vector<float>> expect;
    };
    const std::vector<Vector> vectors = {
        {"empty", frame("{}      ", ""), true, {}},
        {"f32", frame(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", le_f32({1.0f, -2.5f})), true,
         {{"w", {1.0f, -2.5f}}}},
        {"bf16-scalar", frame(R"({"s":{"dtype":"BF16","shape":[],"data_offsets":[0,2]}})", std::string("\x80\x3f", 2)),
         true, {{"s", {1.0f}}}},
        {"payload-order-differs-from-key-order",
         frame(R"({"__metadata__":{"k":"v"},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},)"
               R"("b":{"dtype":"F32","shape":[1,1],"data_offsets":[0,4]}})",
               le_f32({7.0f, 3.0f})),
         true, {{"a", {3.0f}}, {"b", {7.0f}}}},
        {"zero-size", frame(R"({"z":{"dtype":"F32","shape":[0,3],"data_offsets":[0,0]}})", ""), true, {{"z", {}}}},
        {"short-file", std::string("abc"), false, {}},
        {"header-past-eof", frame("{}", "").replace(0, 1, 1, char(100)), false, {}},
        {"not-an-object", frame("[1,2]", ""), false, {}},
        {"bad-json", frame(R"({"w":{"dtype":"F32")", ""), false, {}},
        {"unknown-dtype", frame(R"({"w":{"dtype":"Q4","shape":[2],"data_offsets":[0,2]}})", std::string(2, '\0')),
         false, {}},
        {"offsets-past-buffer", frame(R"({"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})", le_f32({1, 2})),
         false, {}},
        {"size-mismatch", frame(R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", le_f32({1, 2})), false, {}},
        {"overlap",
         frame(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
               le_f32({1, 2, 3})),
         false, {}},
    };
    for (const auto& v : vectors) {
        const auto path = dir / (v.name + ".safetensors");
        testutil::write_file(path, v.bytes);
        std::string why;
        const auto ind = independent_read(v.bytes, &why);
        c.expect(ind.has_value() == v.valid, "independent reader disagrees on vector " + v.name + " " + why);
        bool lib_ok = false;
        Checkpoint lib;
        try {
            lib = read_checkpoint(path).load_all();
            lib_ok = true;
        } catch (const FormatError&) {
        }
        c.expect(lib_ok == v.valid, "tensor-store " + std::string(lib_ok ? "accepted" : "rejected") + " vector " + v.name);
        if (v.valid && lib_ok && ind) {
            c.expect(lib.tensors.size() == v.expect.size(), "tensor count for " + v.name);
            for (const auto& [name, vals] : v.expect) {
                c.expect(lib.tensors.count(name) && values(lib.tensors.at(name)) == vals, "tensor-store values " + v.name);
                c.expect(ind->tensors.count(name) && ind->tensors.at(name).values == vals, "reference values " + v.name);
            }
        }
    }

    // Files written by tensor-store, read back independently.
    std::mt19937_64 rng(99);
    std::size_t files = 0;
    for (int i = 0; i < 20; ++i) {
        auto ckpt = testutil::random_checkpoint(testutil::random_layout(rng), rng);
        if (i % 2) {
            for (auto& [name, t] : ckpt.tensors) t = from_f32(t, DType::BF16);
        }
        ckpt.metadata["run"] = std::to_string(i);
        const auto path = dir / "w.safetensors";
        write_checkpoint(ckpt, path);
        const auto bytes = testutil::read_file(path);
        std::string why;
        const auto ind = independent_read(bytes, &why);
        ++files;
        c.expect(ind.has_value(), "written file " + std::to_string(i) + " rejected: " + why);
        if (!ind) continue;
        c.expect(ind->metadata == ckpt.metadata, "metadata differs in file " + std::to_string(i));
        c.expect(ind->tensors.size() == ckpt.tensors.size(), "tensor count differs in file " + std::to_string(i));
        for (const auto& [name, t] : ckpt.tensors) {
            auto it = ind->tensors.find(name);
            const bool same = it != ind->tensors.end() && it->second.dtype == dtype_name(t.dtype) &&
                              it->second.shape == std::vector<std::uint64_t>(t.shape.begin(), t.shape.end()) &&
                              it->second.values == values(t);
            c.expect(same, "tensor " + name + " differs in file " + std::to_string(i));
        }
    }

    // Optional cross-check against the reference Python implementation.
    std::string python = "python unavailable, skipped";
    const auto probe = testutil::run_command({"python3", "-c", "import safetensors.numpy, numpy"}, dir.path());
    if (probe.exit_code == 0) {
        Checkpoint ckpt;
        ckpt.tensors.emplace("alpha", Tensor::from_f32({2, 2}, {1.5f, -0.0f, 3e-8f, 65504.0f}));
        ckpt.tensors.emplace("beta.w", Tensor::from_f32({3}, {0.1f, 0.2f, 0.3f}));
        ckpt.metadata["format"] = "pt";
        write_checkpoint(ckpt, dir / "py_in.safetensors");
        const std::string script =
            "import json, sys\n"
            "from safetensors import safe_open\n"
            "from safetensors.numpy import save_file\n"
            "import numpy as np\n"
            "out = {}\n"
            "with safe_open(sys.argv[1], framework='np') as f:\n"
            "    out['metadata'] = f.metadata()\n"
            "    for k in f.keys():\n"
            "        a = f.get_tensor(k)\n"
            "        out[k] = {'dtype': str(a.dtype), 'shape': list(a.shape), 'bits': [int(x) for x in a.view(np.uint32).ravel()]}\n"
            "print(json.dumps(out, sort_keys=True))\n"
            "save_file({'gamma': np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32), 'delta': np.array([-7.25], dtype=np.float32)},\n"
            "          sys.argv[2], metadata={'source': 'numpy'})\n";
        testutil::write_file(dir / "check.py", script);
        const auto r = testutil::run_command({"python3", (dir / "check.py").string(), (dir / "py_in.safetensors").string(),
                                              (dir / "py_out.safetensors").string()},
                                             dir.path());
        c.expect(r.exit_code == 0, "python safetensors failed: " + r.err);
        if (r.exit_code == 0) {
            const auto got = nlohmann::json::parse(r.out);
            c.expect(got["metadata"]["format"] == "pt", "python saw metadata " + got["metadata"].dump());
            for (const auto& [name, t] : ckpt.tensors) {
                std::vector<std::uint32_t> bits;
                for (float v : t.f32()) bits.push_back(std::bit_cast<std::uint32_t>(v));
                c.expect(got.contains(name) && got[name]["dtype"] == "float32" &&
                             got[name]["shape"].get<std::vector<std::uint64_t>>() ==
                                 std::vector<std::uint64_t>(t.shape.begin(), t.shape.end()) &&
                             got[name]["bits"].get<std::vector<std::uint32_t>>() == bits,
                         "python read " + name + " as " + (got.contains(name) ? got[name].dump() : "nothing"));
            }
            const auto back = read_checkpoint(dir / "py_out.safetensors");
            const auto all = back.load_all();
            c.expect(values(all.tensors.at("gamma")) == std::vector<float>{1, 2, 3, 4, 5, 6} &&
                         all.tensors.at("gamma").shape == Shape{2, 3},
                     "python-written gamma misread");
            c.expect(values(all.tensors.at("delta")) == std::vector<float>{-7.25f}, "python-written delta misread");
            c.expect(back.metadata().at("source") == "numpy", "python-written metadata misread");
            python = "python safetensors reads our file bit-exactly and we read its file";
        }
    }
    return std::to_string(vectors.size()) + " conformance vectors agree; " + std::to_string(files) +
           " written files parse under the independent reader; " + python;
}

}  // namespace

int main() {
    std::cout << "mergeforge acceptance suite\n";
    run("merge-oracle", merge_oracle);
    run("algebraic-laws", algebraic_laws);
    run("ties-worked-example", ties_worked_example);
    run("dare-unbiasedness", dare_unbiased);
    run("determinism", determinism);
    run("streaming-memory", streaming_memory);
    run("evolve-convergence", evolve_convergence);
    run("curation", curation);
    run("stats", stats);
    run("end-to-end", end_to_end);
    run("checkpoint-interop", interop);
    std::cout << (failed_criteria ? "FAILED " : "ALL PASSED ") << "(" << 11 - failed_criteria << "/11)\n";
    return failed_criteria ? 1 : 0;
}
