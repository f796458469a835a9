// Acceptance checks. Prints one PASS/FAIL line per criterion; exits 1 if any
// criterion fails. Pass criterion numbers as arguments to run a subset.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>

#include "act/metrics.hpp"
#include "act/synthetic.hpp"
#include "act/train.hpp"

using namespace act;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Oracle exactness

constexpr int kOracleMaxLen = 6;
constexpr int kOracleSymbols = 3;

std::vector<Sentence> all_sequences(int max_len, int symbols) {
  std::vector<Sentence> out{{}};
  std::size_t begin = 0;
  for (int len = 1; len <= max_len; ++len) {
    std::size_t end = out.size();
    for (std::size_t i = begin; i < end; ++i)
      for (int s = 0; s < symbols; ++s) {
        Sentence x = out[i];
        x.push_back(reserved::kCount + s);
        out.push_back(std::move(x));
      }
    begin = end;
  }
  return out;
}

bool is_subsequence(const Sentence& small, const Sentence& big) {
  std::size_t j = 0;
  for (TokenId t : big)
    if (j < small.size() && small[j] == t) ++j;
  return j == small.size();
}

Outcome oracle_exactness() {
  auto seqs = all_sequences(kOracleMaxLen, kOracleSymbols);
  // Every subsequence of every sequence, by subset of kept positions.
  std::vector<std::vector<Sentence>> subs(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& a = seqs[i];
    for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
      Sentence k;
      for (std::size_t p = 0; p < a.size(); ++p)
        if (mask >> p & 1u) k.push_back(a[p]);
      subs[i].push_back(std::move(k));
    }
  }
  std::size_t pairs = 0, cost_mismatch = 0, wrong_output = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i)
    for (const auto& b : seqs) {
      const auto& a = seqs[i];
      std::size_t best_kept = 0;
      for (const auto& k : subs[i])
        if (k.size() > best_kept && is_subsequence(k, b)) best_kept = k.size();
      std::size_t brute = a.size() + b.size() - 2 * best_kept;
      auto script = optimal_edit_script(a, b, no_protection(a.size()), kOracleMaxLen);
      if (script.edit_count() != brute) ++cost_mismatch;
      if (apply_edit_script(a, script) != b) ++wrong_output;
      ++pairs;
    }
  return {cost_mismatch == 0 && wrong_output == 0,
          fmt("%zu pairs, %zu non-minimal, %zu wrong reconstructions", pairs, cost_mismatch, wrong_output)};
}

// ---------------------------------------------------------------------------
// 2. Constraint protection

constexpr std::size_t kProtectionExamples = 10000;

Outcome constraint_protection() {
  LexiconTaskConfig lc;
  auto task = make_lexicon_task(lc);
  PipelineConfig pc;
  pc.deletion_prob = 1.0;
  pc.sample_deletion_rate = true;
  DataGenerator gen(task.train, pc, 2024);
  ProtectionAudit audit;
  std::size_t n = 0, with_terms = 0;
  for (std::uint64_t epoch = 0; n < kProtectionExamples; ++epoch)
    for (std::size_t i = 0; i < gen.size() && n < kProtectionExamples; ++i, ++n) {
      auto ex = gen.example(i, epoch);
      if (!ex.term_positions.empty()) ++with_terms;
      audit_protection(ex, audit);
    }
  return {audit.total() == 0 && audit.protected_tokens > 0,
          fmt("%zu examples (%zu with pseudo terms), %zu protected tokens, %zu deleted, %zu missing", n,
              with_terms, audit.protected_tokens, audit.deleted_protected, audit.missing_from_fragment)};
}

// ---------------------------------------------------------------------------
// 3. Hard-mode Term%

constexpr std::size_t kHardSentences = 1000;

Outcome hard_mode_term_usage() {
  LexiconTaskConfig lc;
  lc.test_pairs = static_cast<int>(kHardSentences);
  auto task = make_lexicon_task(lc);
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(task.vocab.size());
  cfg.seed = 3;
  auto params = init_params(cfg);
  Rng rng(stream_seed(17, "hard"));
  DecodeConfig dc;
  dc.mode = DecodeMode::kHard;
  std::vector<Sentence> hyps;
  std::vector<ConstraintSet> cons;
  for (const auto& p : task.test.pairs) {
    std::size_t n = 1 + rng.below(std::min<std::size_t>(3, p.target.size()));
    cons.push_back(sample_n_constraints(p.target, n, rng));
    std::vector<int> labels(p.source.size(), 0);
    hyps.push_back(decode(p.source, cons.back(), labels, params, cfg, dc).tokens);
  }
  auto usage = term_usage(hyps, cons);
  double rate = term_usage_rate(hyps, cons);
  return {rate == 100.0, fmt("%zu sentences, %ld/%ld constraints used, Term%% %.2f (untrained model)", hyps.size(),
                             usage.used, usage.total, rate)};
}

// ---------------------------------------------------------------------------
// 4. Gradient correctness

constexpr int kGradientConfigs = 6;
constexpr double kGradientTolerance = 1e-4;

Outcome gradient_correctness() {
  Rng rng(stream_seed(4, "gradients"));
  double worst = 0.0;
  std::size_t checked = 0;
  std::string worst_at;
  for (int k = 0; k < kGradientConfigs; ++k) {
    ModelConfig c;
    c.d_model = 4;
    c.d_ff = 4 + 2 * static_cast<int>(rng.below(3));
    c.n_layers = 1 + static_cast<int>(rng.below(2));
    c.vocab_size = 10 + static_cast<int>(rng.below(6));
    c.k_max = 4;
    c.max_len = 16;
    c.n_constraint_labels = 4;
    c.seed = 100 + static_cast<std::uint64_t>(k);
    ParallelCorpus corpus;
    for (int i = 0; i < 4; ++i) {
      SentencePair p;
      for (std::uint64_t t = 0, n = 2 + rng.below(4); t < n; ++t)
        p.source.push_back(reserved::kCount + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(c.vocab_size - reserved::kCount))));
      for (std::uint64_t t = 0, n = 2 + rng.below(4); t < n; ++t)
        p.target.push_back(reserved::kCount + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(c.vocab_size - reserved::kCount))));
      corpus.pairs.push_back(p);
    }
    PipelineConfig pc;
    pc.k_max = c.k_max;
    pc.noise_rate = 0.3;
    DataGenerator gen(corpus, pc, c.seed);
    auto ex = gen.example(rng.below(corpus.size()), 0);
    for (auto& l : ex.alignment_labels) l = static_cast<int>(rng.below(4));
    auto p = init_params(c);
    auto g = zeros_like(p);
    gradients(ex, p, c, g, true);
    std::vector<const Matrix*> gs;
    for_each_tensor(g, [&](const std::string&, const Matrix& m) { gs.push_back(&m); });
    std::size_t t = 0;
    for_each_tensor(p, [&](const std::string& name, Matrix& m) {
      const Matrix& gm = *gs[t++];
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        // Row 0 of the alignment table is fixed at zero and not trained.
        if (name == "alignment_embedding" && i < m.cols()) continue;
        const double h = 1e-4, o = m.data()[i];
        auto f = [&](double v) {
          m.data()[i] = v;
          return loss(ex, p, c, true);
        };
        double num = (-f(o + 2 * h) + 8 * f(o + h) - 8 * f(o - h) + f(o - 2 * h)) / (12 * h);
        m.data()[i] = o;
        double a = gm.data()[i];
        double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
        if (rel > worst) {
          worst = rel;
          worst_at = fmt("config %d %s[%ld]", k, name.c_str(), static_cast<long>(i));
        }
        ++checked;
      }
    });
  }
  return {worst < kGradientTolerance, fmt("%d configs, %zu parameters, max relative error %.3g at %s", kGradientConfigs,
                                          checked, worst, worst_at.c_str())};
}

// ---------------------------------------------------------------------------
// 5. Synthetic end-to-end

constexpr long kEndToEndSteps = 8000;
constexpr double kMinUnconstrainedAccuracy = 0.95;
constexpr double kMinActGain = 3.0;

struct EndToEndSetup {
  LexiconTaskConfig task;
  ModelConfig model;
  TrainConfig train;
};

EndToEndSetup end_to_end_setup() {
  EndToEndSetup s;
  s.model.seed = 7;
  s.train.steps = kEndToEndSteps;
  s.train.pipeline.deletion_prob = 1.0;
  s.train.pipeline.sample_deletion_rate = true;
  s.train.pipeline.initial_canvas_prob = 0.3;
  return s;
}

// Unconstrained accuracy is scored on the ordinary test split; soft-mode
// Term% on the split whose rarest target word is seen 1..5 times in training.
Outcome synthetic_end_to_end() {
  auto s = end_to_end_setup();
  auto task = make_lexicon_task(s.task);
  s.model.vocab_size = static_cast<int>(task.vocab.size());
  auto cons = rare_word_constraints(task.rare_test, task.train, task.vocab.size());
  std::vector<Sentence> refs, rare_refs;
  for (const auto& p : task.test.pairs) refs.push_back(p.target);
  for (const auto& p : task.rare_test.pairs) rare_refs.push_back(p.target);
  AlignmentModel aligner = train_aligner(task.train, s.train.pipeline.em_iterations);

  struct Scores {
    double unconstrained_accuracy = 0, soft_term = 0, soft_bleu = 0;
  };
  std::map<Variant, Scores> scores;
  for (Variant v : {Variant::kBaseline, Variant::kCT, Variant::kACT}) {
    auto trained = train(task.train, s.model, v, s.train);
    DecodeConfig dc;
    std::vector<Sentence> unconstrained, soft;
    for (const auto& p : task.test.pairs) {
      dc.mode = DecodeMode::kUnconstrained;
      unconstrained.push_back(
          decode(p.source, {}, std::vector<int>(p.source.size(), 0), trained.params, s.model, dc).tokens);
    }
    for (std::size_t i = 0; i < task.rare_test.size(); ++i) {
      const auto& p = task.rare_test.pairs[i];
      dc.mode = DecodeMode::kSoft;
      std::vector<std::optional<Sentence>> no_source_terms(cons[i].constraints.size());
      AlignmentLabels labels = uses_alignment(v) ? inference_labels(p.source, cons[i], no_source_terms, &aligner)
                                                 : AlignmentLabels(p.source.size(), 0);
      soft.push_back(decode(p.source, cons[i], labels, trained.params, s.model, dc).tokens);
    }
    scores[v] = {token_accuracy(unconstrained, refs), term_usage_rate(soft, cons), corpus_bleu(soft, rare_refs)};
  }
  const auto& b = scores[Variant::kBaseline];
  const auto& ct = scores[Variant::kCT];
  const auto& a = scores[Variant::kACT];
  bool pass = ct.unconstrained_accuracy >= kMinUnconstrainedAccuracy && a.soft_term >= ct.soft_term &&
              ct.soft_term >= b.soft_term && a.soft_term - b.soft_term >= kMinActGain;
  return {pass, fmt("unconstrained acc baseline %.4f, CT %.4f, ACT %.4f; soft Term%% on %zu rare constraints "
                    "baseline %.2f, CT %.2f, ACT %.2f (ACT gain %+.2f); soft BLEU %.2f / %.2f / %.2f",
                    b.unconstrained_accuracy, ct.unconstrained_accuracy, a.unconstrained_accuracy, cons.size(),
                    b.soft_term, ct.soft_term, a.soft_term, a.soft_term - b.soft_term, b.soft_bleu, ct.soft_bleu,
                    a.soft_bleu)};
}

// ---------------------------------------------------------------------------
// 6. Self-constraint integrity

constexpr int kSelfMinCount = 3;

Outcome self_constraint_integrity() {
  LexiconTaskConfig lc;
  auto task = make_lexicon_task(lc);
  // Tokenize through a vocabulary of words seen at least kSelfMinCount times
  // in training, so the rarest words come out as UNK.
  std::vector<std::string> train_lines, test_refs;
  for (const auto& p : task.train.pairs) {
    train_lines.push_back(detokenize(p.source, task.vocab));
    train_lines.push_back(detokenize(p.target, task.vocab));
  }
  for (const auto& p : task.test.pairs) test_refs.push_back(detokenize(p.target, task.vocab));
  Vocabulary vocab = build_vocabulary(train_lines, kSelfMinCount);
  ParallelCorpus train_corpus;
  for (const auto& p : task.train.pairs)
    train_corpus.pairs.push_back({tokenize(detokenize(p.source, task.vocab), vocab),
                                  tokenize(detokenize(p.target, task.vocab), vocab)});
  auto freq = word_frequencies(train_corpus, vocab);

  Rng rng(stream_seed(6, "self"));
  std::size_t survivors = 0, derived = 0, bad_counts = 0, order_violations = 0, unk = 0, rejected = 0,
              refs_with_unk = 0;
  for (const auto& line : test_refs) {
    Sentence ref = tokenize(line, vocab);
    if (std::find(ref.begin(), ref.end(), reserved::kUnk) != ref.end()) ++refs_with_unk;
    auto keys = frequency_keys(ref, vocab, freq);
    auto sc = build_self_constraints(ref, keys, SelfConstraintOrder::kFrequency, true, rng);
    if (!sc) {
      ++rejected;
      continue;
    }
    ++survivors;
    if (sc->size() != static_cast<std::size_t>(kBuckets)) ++bad_counts;
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& c : *sc) {
      ++derived;
      if (c.token == reserved::kUnk) ++unk;
      double m = 0;
      for (std::size_t pos : c.members) m += keys[pos];
      m /= static_cast<double>(c.members.size());
      if (m > prev) ++order_violations;
      prev = m;
    }
  }
  bool pass = survivors > 0 && bad_counts == 0 && derived == survivors * kBuckets && order_violations == 0 && unk == 0;
  return {pass, fmt("%zu references (%zu with UNK), %zu survivors, %zu rejected, %zu derived samples, "
                    "%zu bucket-order violations, %zu UNK constraints",
                    test_refs.size(), refs_with_unk, survivors, rejected, derived, order_violations, unk)};
}

// ---------------------------------------------------------------------------
// 7. Metric ground truth

Outcome metric_ground_truth() {
  const TokenId a = 5, b = 6, c = 7, d = 8, e = 9;
  std::vector<Sentence> refs{{a, b, c, d, e}, {c, a, b, d}, {e, e, a, b, c, d}};
  double self = corpus_bleu(refs, refs);
  std::vector<Sentence> h{{a, b, c, d}}, r{{a, b, c, d, e}};
  double bp = corpus_bleu(h, r);
  std::vector<Sentence> th{{a, b, c}};
  std::vector<ConstraintSet> tc{ConstraintSet{{{b}, {d}}}};
  double term = term_usage_rate(th, tc);
  bool pass = self == 100.0 && std::abs(bp - 77.88) <= 0.01 && term == 50.0;
  return {pass, fmt("BLEU(refs, refs) %.4f, brevity example %.4f, Term%% example %.4f", self, bp, term)};
}

// ---------------------------------------------------------------------------
// 8. Determinism

constexpr long kDeterminismSteps = 300;

int run_cli(const std::string& args, const fs::path& log) {
  std::string cmd = std::string(ACT_CLI_PATH) + " " + args + " >> " + log.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kDeterminismArtifacts = {
    "corpus/train.src",         "corpus/train.tgt",          "corpus/test.src",
    "corpus/test.tgt",          "corpus/test.constraints",   "corpus/rare_test.src",
    "corpus/rare_test.tgt",     "corpus/rare_test.constraints", "data/dataset.jsonl",
    "model/model.ckpt",         "model/loss.csv",            "soft/hypotheses.txt",
    "soft/iterations.tsv",      "hard/hypotheses.txt",       "eval/report.json",
    "eval/report.txt",          "self/derived.tsv",          "self/report.csv",
    "tertiles/report.csv",      "nconst/report.csv",
};

Outcome determinism() {
  fs::path root = fs::temp_directory_path() / ("act_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  for (const char* run : {"a", "b"}) {
    fs::path r = root / run;
    fs::create_directories(r);
    auto log = r / "log.txt";
    auto p = [&](const char* s) { return (r / s).string(); };
    std::string data = " --set train_src=" + p("corpus/train.src") + " --set train_tgt=" + p("corpus/train.tgt") +
                       " --set vocab=" + p("corpus/vocab.txt");
    std::string model = " --set checkpoint=" + p("model/model.ckpt") + " --set vocab=" + p("model/vocab.txt");
    std::string test = " --set test_src=" + p("corpus/test.src") + " --set test_tgt=" + p("corpus/test.tgt");
    std::string cons = " --set constraints=" + p("corpus/test.constraints");
    const std::vector<std::string> steps = {
        "synth --seed 7 --out " + p("corpus"),
        "datagen --seed 7 --variant act --out " + p("data") + data,
        "train --seed 7 --variant act --out " + p("model") + data + " --set steps=" + std::to_string(kDeterminismSteps),
        "translate --seed 7 --variant act --mode soft --out " + p("soft") + model + test + cons + data,
        "translate --seed 7 --variant act --mode hard --out " + p("hard") + model + test + cons + data,
        "evaluate --seed 7 --out " + p("eval") + " --set hypotheses=" + p("soft/hypotheses.txt") +
            " --set references=" + p("corpus/test.tgt") + cons,
        "analyze self-constraints --seed 7 --variant act --mode soft --out " + p("self") + model + test + data,
        "analyze tertiles --seed 7 --variant act --mode soft --out " + p("tertiles") + model + test + cons + data,
        "analyze n-constraints --seed 7 --variant act --mode soft --out " + p("nconst") + model + test + data,
    };
    for (const auto& s : steps)
      if (int code = run_cli(s, log); code != 0)
        return {false, fmt("run %s: `act %s` exited %d (see %s)", run, s.substr(0, s.find(' ')).c_str(), code,
                           log.string().c_str())};
  }
  std::size_t differing = 0, bytes = 0;
  std::string first;
  for (const auto& f : kDeterminismArtifacts) {
    auto x = slurp(root / "a" / f), y = slurp(root / "b" / f);
    bytes += x.size();
    if (x != y || x.empty()) {
      if (differing++ == 0) first = f;
    }
  }
  bool pass = differing == 0;
  if (pass) fs::remove_all(root);
  return {pass, fmt("%zu artifacts (%zu bytes) compared across two seed-7 runs, %zu differ%s%s",
                    kDeterminismArtifacts.size(), bytes, differing, differing ? ", first " : "", first.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "oracle exactness", oracle_exactness},
      {2, "constraint protection", constraint_protection},
      {3, "hard-mode Term%", hard_mode_term_usage},
      {4, "gradient correctness", gradient_correctness},
      {5, "synthetic end-to-end", synthetic_end_to_end},
      {6, "self-constraint integrity", self_constraint_integrity},
      {7, "metric ground truth", metric_ground_truth},
      {8, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), sec);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed ? 1 : 0;
}
