// act: data generation, training, constrained translation and analysis.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>

#include "act/decode.hpp"
#include "act/metrics.hpp"
#include "act/synthetic.hpp"
#include "act/train.hpp"

#ifndef ACT_VERSION
#define ACT_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace act;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------- config

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      // paths
      "train_src", "train_tgt", "test_src", "test_tgt", "constraints", "alignments", "vocab",
      "checkpoint", "init_checkpoint", "hypotheses", "references",
      // model
      "d_model", "n_layers", "d_ff", "k_max", "max_len", "n_constraint_labels", "learning_rate",
      // pipeline
      "deletion_prob", "sample_deletion_rate", "noise_rate", "align_threshold", "em_iterations",
      "max_pseudo_terms", "initial_canvas_prob", "vocab_min_count",
      // training
      "steps", "batch_size", "warmup_steps", "clip_norm", "rollout_prob", "freeze_examples",
      // decoding
      "mode", "max_iterations", "length_cap",
      // analysis
      "self_order", "exclude_unk", "n_max",
      // synthetic corpus
      "synth_words", "synth_modifiers", "synth_min_len", "synth_max_len", "synth_zipf",
      "synth_train_pairs", "synth_test_pairs", "synth_rare_test_pairs", "synth_rare_max_count",
      // run
      "variant", "seed", "out"};
  return keys;
}

class RunConfig {
 public:
  void load(const std::string& path) {
    auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      std::string line = lines[i];
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      auto words = split_whitespace(line);
      if (words.empty()) continue;
      auto eq = line.find('=');
      std::string where = path + ":" + std::to_string(i + 1);
      if (eq == std::string::npos) throw UsageError(where + ": expected key=value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
    }
  }

  void set(const std::string& key, const std::string& value, const std::string& origin) {
    if (!known_keys().count(key)) throw UsageError(origin + ": unknown config key '" + key + "'");
    values_[key] = value;
    origin_[key] = origin;
  }

  void set_assignment(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)), "--set");
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("missing required config key '" + key + "'");
    return it->second;
  }
  std::string str(const std::string& key, const std::string& fallback) const {
    return has(key) ? str(key) : fallback;
  }

  /// An input path that must exist.
  std::string path(const std::string& key) const {
    std::string p = str(key);
    if (!fs::exists(p)) throw DataError(origin(key) + ": " + key + " '" + p + "' does not exist");
    return p;
  }

  long integer(const std::string& key, long fallback) const {
    if (!has(key)) return fallback;
    try {
      std::size_t used = 0;
      long v = std::stol(str(key), &used);
      if (used == str(key).size()) return v;
    } catch (const std::logic_error&) {
    }
    throw UsageError(origin(key) + ": " + key + " expects an integer, got '" + str(key) + "'");
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    try {
      std::size_t used = 0;
      double v = std::stod(str(key), &used);
      if (used == str(key).size()) return v;
    } catch (const std::logic_error&) {
    }
    throw UsageError(origin(key) + ": " + key + " expects a number, got '" + str(key) + "'");
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = lowercase(str(key));
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw UsageError(origin(key) + ": " + key + " expects true/false, got '" + str(key) + "'");
  }

  std::uint64_t seed() const {
    if (!has("seed")) throw UsageError("a seed is required (--seed N or seed=N)");
    long s = integer("seed", 0);
    if (s < 0) throw UsageError("seed must be non-negative");
    return static_cast<std::uint64_t>(s);
  }

  std::string origin(const std::string& key) const {
    auto it = origin_.find(key);
    return it == origin_.end() ? "config" : it->second;
  }

  json snapshot() const {
    json j = json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

 private:
  static std::string trim(std::string s) {
    auto words = split_whitespace(s);
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
    return out;
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origin_;
};

ModelConfig model_config(const RunConfig& c, int vocab_size) {
  ModelConfig m;
  m.d_model = static_cast<int>(c.integer("d_model", m.d_model));
  m.n_layers = static_cast<int>(c.integer("n_layers", m.n_layers));
  m.d_ff = static_cast<int>(c.integer("d_ff", m.d_ff));
  m.k_max = static_cast<int>(c.integer("k_max", m.k_max));
  m.max_len = static_cast<int>(c.integer("max_len", m.max_len));
  m.n_constraint_labels = static_cast<int>(c.integer("n_constraint_labels", m.n_constraint_labels));
  m.learning_rate = c.real("learning_rate", m.learning_rate);
  m.vocab_size = vocab_size;
  m.seed = c.seed();
  m.validate();
  return m;
}

PipelineConfig pipeline_config(const RunConfig& c) {
  PipelineConfig p;
  p.deletion_prob = c.real("deletion_prob", p.deletion_prob);
  p.sample_deletion_rate = c.boolean("sample_deletion_rate", p.sample_deletion_rate);
  p.noise_rate = c.real("noise_rate", p.noise_rate);
  p.align_threshold = c.real("align_threshold", p.align_threshold);
  p.em_iterations = static_cast<int>(c.integer("em_iterations", p.em_iterations));
  p.k_max = static_cast<int>(c.integer("k_max", p.k_max));
  p.max_pseudo_terms = static_cast<std::size_t>(c.integer("max_pseudo_terms", static_cast<long>(p.max_pseudo_terms)));
  p.initial_canvas_prob = c.real("initial_canvas_prob", p.initial_canvas_prob);
  if (p.deletion_prob < 0 || p.deletion_prob > 1) throw UsageError("deletion_prob must be in [0, 1]");
  if (p.initial_canvas_prob < 0 || p.initial_canvas_prob > 1)
    throw UsageError("initial_canvas_prob must be in [0, 1]");
  if (p.noise_rate < 0) throw UsageError("noise_rate must be >= 0");
  return p;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.steps = c.integer("steps", t.steps);
  t.batch_size = static_cast<int>(c.integer("batch_size", t.batch_size));
  t.warmup_steps = static_cast<int>(c.integer("warmup_steps", t.warmup_steps));
  t.clip_norm = c.real("clip_norm", t.clip_norm);
  t.rollout_prob = c.real("rollout_prob", t.rollout_prob);
  t.freeze_examples = c.boolean("freeze_examples", t.freeze_examples);
  t.pipeline = pipeline_config(c);
  if (t.steps < 0) throw UsageError("steps must be >= 0");
  return t;
}

DecodeConfig decode_config(const RunConfig& c) {
  DecodeConfig d;
  d.mode = parse_decode_mode(c.str("mode", "none"));
  d.max_iterations = static_cast<int>(c.integer("max_iterations", d.max_iterations));
  d.length_cap = static_cast<int>(c.integer("length_cap", d.length_cap));
  d.validate();
  return d;
}

// ---------------------------------------------------------------- manifest

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

class Manifest {
 public:
  using Clock = std::chrono::steady_clock;

  Manifest(std::string command, const RunConfig& cfg, std::string out_dir)
      : out_dir_(std::move(out_dir)), start_(Clock::now()) {
    j_["command"] = std::move(command);
    j_["code_version"] = ACT_VERSION;
    j_["config"] = cfg.snapshot();
    j_["inputs"] = json::object();
    j_["outputs"] = json::object();
    j_["wall_clock_ms"] = json::object();
    j_["results"] = json::object();
  }

  void input(const std::string& key, const std::string& path) {
    j_["inputs"][key] = {{"path", path}, {"sha256", sha256_hex(read_file(path))}};
  }

  /// Writes an output file atomically and records its checksum.
  void output(const std::string& name, const std::string& bytes) {
    write_file_atomic((fs::path(out_dir_) / name).string(), bytes);
    j_["outputs"][name] = sha256_hex(bytes);
  }

  void output_lines(const std::string& name, std::span<const std::string> lines) {
    std::string bytes;
    for (const auto& l : lines) bytes += l + "\n";
    output(name, bytes);
  }

  void stage(const std::string& name, Clock::time_point since) {
    j_["wall_clock_ms"][name] =
        std::chrono::duration<double, std::milli>(Clock::now() - since).count();
  }

  json& results() { return j_["results"]; }

  void write() {
    stage("total", start_);
    write_file_atomic((fs::path(out_dir_) / "manifest.json").string(), j_.dump(2) + "\n");
  }

 private:
  std::string out_dir_;
  Clock::time_point start_;
  json j_;
};

std::string out_dir(const RunConfig& c) {
  std::string d = c.str("out");
  fs::create_directories(d);
  return d;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------- loading

std::vector<std::string> lines_of(const RunConfig& c, const std::string& key, Manifest& m) {
  std::string p = c.path(key);
  m.input(key, p);
  return read_lines(p);
}

Vocabulary vocabulary_for(const RunConfig& c, Manifest& m) {
  if (c.has("vocab")) {
    std::string p = c.path("vocab");
    m.input("vocab", p);
    return load_vocabulary(p);
  }
  if (!c.has("train_src") || !c.has("train_tgt"))
    throw UsageError("need vocab=PATH or train_src/train_tgt to build a vocabulary");
  auto lines = read_lines(c.path("train_src"));
  auto tgt = read_lines(c.path("train_tgt"));
  lines.insert(lines.end(), tgt.begin(), tgt.end());
  return build_vocabulary(lines, static_cast<int>(c.integer("vocab_min_count", 1)));
}

ParallelCorpus corpus_of(const RunConfig& c, const std::string& prefix, const Vocabulary& v, Manifest& m) {
  std::string s = c.path(prefix + "_src"), t = c.path(prefix + "_tgt");
  m.input(prefix + "_src", s);
  m.input(prefix + "_tgt", t);
  return load_parallel_corpus(s, t, v);
}

std::vector<std::string> vocab_lines(const Vocabulary& v) {
  std::vector<std::string> out(v.symbols().begin(), v.symbols().end());
  return out;
}

std::optional<std::vector<PharaohAlignment>> alignments_of(const RunConfig& c, std::size_t n, Manifest& m) {
  if (!c.has("alignments")) return std::nullopt;
  std::string p = c.path("alignments");
  m.input("alignments", p);
  auto lines = read_lines(p);
  if (lines.size() != n)
    throw DataError(p + " has " + std::to_string(lines.size()) + " lines, corpus has " + std::to_string(n));
  std::vector<PharaohAlignment> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(parse_pharaoh(lines[i]));
    } catch (const DataError& e) {
      throw DataError(p + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

struct LoadedModel {
  ModelConfig cfg;
  ModelParams params;
  Vocabulary vocab;
};

LoadedModel load_model(const RunConfig& c, Manifest& m) {
  LoadedModel lm;
  std::string ck = c.path("checkpoint");
  m.input("checkpoint", ck);
  auto loaded = load_checkpoint(ck);
  lm.cfg = loaded.config;
  lm.params = std::move(loaded.params);
  lm.vocab = vocabulary_for(c, m);
  if (static_cast<int>(lm.vocab.size()) != lm.cfg.vocab_size)
    throw DataError("vocabulary has " + std::to_string(lm.vocab.size()) + " symbols, checkpoint expects " +
                    std::to_string(lm.cfg.vocab_size));
  return lm;
}

/// Per-sentence constraints plus optional source terms, in file order.
struct Constraints {
  std::vector<ConstraintSet> sets;
  std::vector<std::vector<std::optional<Sentence>>> source_terms;
};

Constraints constraints_of(const RunConfig& c, const Vocabulary& v, std::size_t n, Manifest& m) {
  Constraints out;
  out.sets.assign(n, ConstraintSet{});
  out.source_terms.assign(n, {});
  if (!c.has("constraints")) return out;
  std::string p = c.path("constraints");
  m.input("constraints", p);
  std::vector<ConstraintRecord> records;
  out.sets = load_constraint_file(p, v, n, &records);
  for (const auto& r : records) out.source_terms[r.sentence_index].push_back(r.source_term);
  return out;
}

/// Builds ACT labels at inference; the aligner is trained lazily and only
/// when some constraint lacks a source term.
class Labeler {
 public:
  Labeler(const RunConfig& c, Variant variant, const Vocabulary& v, Manifest& m)
      : cfg_(c), variant_(variant), vocab_(v), manifest_(m) {}

  std::vector<int> labels(const Sentence& src, const ConstraintSet& cs,
                          std::span<const std::optional<Sentence>> terms) {
    if (!uses_alignment(variant_) || cs.empty()) return std::vector<int>(src.size(), 0);
    bool need_model = false;
    for (std::size_t i = 0; i < cs.size(); ++i) need_model |= i >= terms.size() || !terms[i];
    if (need_model && !aligner_) {
      if (!cfg_.has("train_src") || !cfg_.has("train_tgt"))
        throw UsageError("variant act needs source terms in the constraint file or train_src/train_tgt for the aligner");
      corpus_ = corpus_of(cfg_, "train", vocab_, manifest_);
      aligner_ = train_aligner(corpus_, static_cast<int>(cfg_.integer("em_iterations", 5)));
    }
    return inference_labels(src, cs, terms, aligner_ ? &*aligner_ : nullptr,
                            cfg_.real("align_threshold", kDefaultAlignThreshold));
  }

 private:
  const RunConfig& cfg_;
  Variant variant_;
  const Vocabulary& vocab_;
  Manifest& manifest_;
  ParallelCorpus corpus_;
  std::optional<AlignmentModel> aligner_;
};

Sentence tokenize_checked(const std::string& line, const Vocabulary& v, int max_len, const std::string& where) {
  Sentence s = tokenize(line, v);
  if (s.empty()) throw DataError(where + ": empty sentence");
  if (static_cast<int>(s.size()) > max_len) s.resize(static_cast<std::size_t>(max_len));
  return s;
}

// ---------------------------------------------------------------- commands

int cmd_synth(const RunConfig& c) {
  LexiconTaskConfig lc;
  lc.words = static_cast<int>(c.integer("synth_words", lc.words));
  lc.modifiers = static_cast<int>(c.integer("synth_modifiers", lc.modifiers));
  lc.min_len = static_cast<int>(c.integer("synth_min_len", lc.min_len));
  lc.max_len = static_cast<int>(c.integer("synth_max_len", lc.max_len));
  lc.zipf_exponent = c.real("synth_zipf", lc.zipf_exponent);
  lc.train_pairs = static_cast<int>(c.integer("synth_train_pairs", lc.train_pairs));
  lc.test_pairs = static_cast<int>(c.integer("synth_test_pairs", lc.test_pairs));
  lc.rare_test_pairs = static_cast<int>(c.integer("synth_rare_test_pairs", lc.rare_test_pairs));
  lc.rare_max_count = static_cast<int>(c.integer("synth_rare_max_count", lc.rare_max_count));
  lc.seed = c.seed();
  if (lc.words < 1 || lc.min_len < 1 || lc.max_len < lc.min_len || lc.train_pairs < 1 || lc.test_pairs < 1 ||
      lc.rare_test_pairs < 0 || lc.rare_max_count < 1)
    throw UsageError("synthetic corpus: sizes must be positive and synth_min_len <= synth_max_len");
  auto task = make_lexicon_task(lc);
  Manifest m("synth", c, out_dir(c));
  auto write_side = [&](const std::string& name, const ParallelCorpus& corpus, bool source) {
    std::vector<std::string> lines;
    for (const auto& p : corpus.pairs) lines.push_back(detokenize(source ? p.source : p.target, task.vocab));
    m.output_lines(name, lines);
  };
  write_side("train.src", task.train, true);
  write_side("train.tgt", task.train, false);
  write_side("test.src", task.test, true);
  write_side("test.tgt", task.test, false);
  // Rare-word constraints with the source word as third column.
  std::vector<int> inverse(task.mapping.size());
  for (std::size_t s = 0; s < task.mapping.size(); ++s) inverse[static_cast<std::size_t>(task.mapping[s])] = static_cast<int>(s);
  auto write_constraints = [&](const std::string& name, const ParallelCorpus& corpus) {
    auto rare = rare_word_constraints(corpus, task.train, task.vocab.size());
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < rare.size(); ++i)
      for (const auto& term : rare[i].constraints) {
        std::string word = task.vocab.symbol(term[0]);
        int t = std::stoi(word.substr(1));
        lines.push_back(std::to_string(i) + "\t" + word + "\t" + indexed_word('s', inverse[static_cast<std::size_t>(t)]));
      }
    m.output_lines(name, lines);
  };
  write_constraints("test.constraints", task.test);
  if (lc.rare_test_pairs > 0) {
    write_side("rare_test.src", task.rare_test, true);
    write_side("rare_test.tgt", task.rare_test, false);
    write_constraints("rare_test.constraints", task.rare_test);
  }
  m.output_lines("vocab.txt", vocab_lines(task.vocab));
  m.results()["train_pairs"] = task.train.size();
  m.results()["test_pairs"] = task.test.size();
  m.results()["rare_test_pairs"] = task.rare_test.size();
  m.write();
  return 0;
}

int cmd_datagen(const RunConfig& c) {
  const auto t0 = Manifest::Clock::now();
  Manifest m("datagen", c, out_dir(c));
  Vocabulary vocab = vocabulary_for(c, m);
  ParallelCorpus corpus = corpus_of(c, "train", vocab, m);
  if (corpus.empty()) throw DataError("training corpus is empty");
  auto links = alignments_of(c, corpus.size(), m);
  Variant variant = parse_variant(c.str("variant", "act"));
  PipelineConfig pc = pipeline_for(variant, pipeline_config(c));
  DataGenerator gen(corpus, pc, stream_seed(c.seed(), "datagen"), links ? &*links : nullptr);
  m.stage("setup", t0);

  const auto t1 = Manifest::Clock::now();
  ProtectionAudit audit;
  std::string bytes;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto ex = gen.example(i, 0);
    audit_protection(ex, audit);
    json j = to_json(ex);
    json line;
    line["index"] = i;
    for (auto& [k, v] : j.items()) line[k] = v;
    bytes += line.dump() + "\n";
  }
  m.stage("generate", t1);
  m.output("dataset.jsonl", bytes);
  m.output_lines("vocab.txt", vocab_lines(vocab));
  m.results()["examples"] = corpus.size();
  m.results()["protected_tokens"] = audit.protected_tokens;
  m.results()["protection_violations"] = audit.total();
  m.write();
  if (audit.total() != 0) throw DataError("protection violated in " + std::to_string(audit.total()) + " places");
  return 0;
}

int cmd_train(const RunConfig& c) {
  const auto t0 = Manifest::Clock::now();
  std::string dir = out_dir(c);
  Manifest m("train", c, dir);
  Vocabulary vocab = vocabulary_for(c, m);
  ParallelCorpus corpus = corpus_of(c, "train", vocab, m);
  auto links = alignments_of(c, corpus.size(), m);
  Variant variant = parse_variant(c.str("variant", "act"));
  TrainConfig tc = train_config(c);

  ModelConfig cfg;
  std::optional<ModelParams> initial;
  if (c.has("init_checkpoint")) {
    std::string p = c.path("init_checkpoint");
    m.input("init_checkpoint", p);
    auto ck = load_checkpoint(p);
    cfg = ck.config;
    initial = std::move(ck.params);
    if (cfg.vocab_size != static_cast<int>(vocab.size()))
      throw DataError("init_checkpoint expects " + std::to_string(cfg.vocab_size) + " symbols, vocabulary has " +
                      std::to_string(vocab.size()));
  } else {
    cfg = model_config(c, static_cast<int>(vocab.size()));
  }
  for (const auto& p : corpus.pairs) {
    // Framed targets and sources must fit the model's position table.
    if (static_cast<int>(p.source.size()) > cfg.max_len || static_cast<int>(p.target.size()) + 2 > cfg.max_len)
      throw DataError("sentence longer than max_len=" + std::to_string(cfg.max_len));
    if (p.source.empty()) throw DataError("training corpus has an empty source sentence");
  }
  m.stage("setup", t0);

  const auto t1 = Manifest::Clock::now();
  TrainResult r;
  try {
    r = train(corpus, cfg, variant, tc, initial ? &*initial : nullptr, {}, links ? &*links : nullptr);
  } catch (const NumericDivergence& e) {
    m.results()["diverged_at_step"] = e.step();
    m.write();
    throw;
  }
  m.stage("train", t1);

  std::vector<std::string> trace{"step,loss"};
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
    trace.push_back(std::to_string(i + 1) + "," + format_double(r.loss_trace[i]));
  m.output("model.ckpt", serialize_checkpoint(cfg, r.params));
  m.output_lines("loss.csv", trace);
  m.output_lines("vocab.txt", vocab_lines(vocab));

  const auto t2 = Manifest::Clock::now();
  PipelineConfig pc = pipeline_for(variant, tc.pipeline);
  pc.k_max = cfg.k_max;
  DataGenerator gen(corpus, pc, stream_seed(cfg.seed, "datagen"), links ? &*links : nullptr);
  std::vector<TrainingExample> probe;
  for (std::size_t i = 0; i < std::min<std::size_t>(corpus.size(), 500); ++i) probe.push_back(gen.example(i, 0));
  double acc = token_head_accuracy(probe, r.params, cfg, uses_alignment(variant));
  m.stage("probe", t2);
  m.results()["steps"] = r.steps;
  m.results()["final_loss"] = r.loss_trace.empty() ? 0.0 : r.loss_trace.back();
  m.results()["token_accuracy"] = acc;
  m.write();
  return 0;
}

struct Translation {
  std::vector<Sentence> hyps;
  std::vector<DecodeResult> results;
  std::vector<double> ms;
};

Translation translate_all(const std::vector<Sentence>& sources, const Constraints& cons, const LoadedModel& lm,
                          const DecodeConfig& d, Labeler& labeler) {
  Translation t;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    auto start = Manifest::Clock::now();
    auto labels = labeler.labels(sources[i], cons.sets[i], cons.source_terms[i]);
    auto r = decode(sources[i], cons.sets[i], labels, lm.params, lm.cfg, d);
    t.ms.push_back(std::chrono::duration<double, std::milli>(Manifest::Clock::now() - start).count());
    t.hyps.push_back(r.tokens);
    t.results.push_back(std::move(r));
  }
  return t;
}

int cmd_translate(const RunConfig& c) {
  const auto t0 = Manifest::Clock::now();
  Manifest m("translate", c, out_dir(c));
  LoadedModel lm = load_model(c, m);
  DecodeConfig d = decode_config(c);
  Variant variant = parse_variant(c.str("variant", "act"));
  auto lines = lines_of(c, "test_src", m);
  std::vector<Sentence> sources;
  for (std::size_t i = 0; i < lines.size(); ++i)
    sources.push_back(tokenize_checked(lines[i], lm.vocab, lm.cfg.max_len, c.str("test_src") + ":" + std::to_string(i + 1)));
  Constraints cons = constraints_of(c, lm.vocab, sources.size(), m);
  Labeler labeler(c, variant, lm.vocab, m);
  m.stage("setup", t0);

  const auto t1 = Manifest::Clock::now();
  Translation t = translate_all(sources, cons, lm, d, labeler);
  m.stage("decode", t1);

  std::vector<std::string> hyp_lines, iter_lines{"index\titerations\tconverged\ttruncated"};
  long truncated = 0, clamped = 0;
  for (std::size_t i = 0; i < t.hyps.size(); ++i) {
    hyp_lines.push_back(detokenize(t.hyps[i], lm.vocab));
    const auto& r = t.results[i];
    iter_lines.push_back(std::to_string(i) + "\t" + std::to_string(r.iterations) + "\t" +
                         (r.converged ? "1" : "0") + "\t" + (r.truncated ? "1" : "0"));
    truncated += r.truncated;
    clamped += r.clamped_labels;
  }
  m.output_lines("hypotheses.txt", hyp_lines);
  m.output_lines("iterations.tsv", iter_lines);
  m.results()["sentences"] = t.hyps.size();
  m.results()["mode"] = std::string(to_string(d.mode));
  m.results()["truncated"] = truncated;
  m.results()["clamped_labels"] = clamped;
  m.results()["sentence_ms"] = t.ms;
  m.write();
  return 0;
}

void write_report(Manifest& m, const EvalReport& r, bool with_csv) {
  m.output("report.json", to_json(r).dump(2) + "\n");
  m.output("report.txt", to_text(r));
  if (with_csv) m.output("report.csv", to_csv(r));
}

int cmd_evaluate(const RunConfig& c) {
  Manifest m("evaluate", c, out_dir(c));
  auto hyp_lines = lines_of(c, "hypotheses", m);
  auto ref_lines = lines_of(c, "references", m);
  if (hyp_lines.size() != ref_lines.size())
    throw DataError("hypotheses has " + std::to_string(hyp_lines.size()) + " lines, references has " +
                    std::to_string(ref_lines.size()));
  // A vocabulary over exactly the evaluated words keeps scoring string-level.
  std::vector<std::string> words = hyp_lines;
  words.insert(words.end(), ref_lines.begin(), ref_lines.end());
  std::vector<std::string> cons_lines;
  if (c.has("constraints")) {
    for (const auto& l : read_lines(c.path("constraints"))) {
      auto tab = l.find('\t');
      if (tab == std::string::npos) continue;
      auto rest = l.substr(tab + 1);
      words.push_back(rest.substr(0, rest.find('\t')));
    }
  }
  Vocabulary v = build_vocabulary(words);
  std::vector<Sentence> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(tokenize(l, v));
  for (const auto& l : ref_lines) refs.push_back(tokenize(l, v));
  if (hyps.empty()) throw DataError("no hypotheses to evaluate");
  Constraints cons = constraints_of(c, v, hyps.size(), m);
  bool any = false;
  for (const auto& cs : cons.sets) any |= !cs.empty();
  EvalReport r;
  r.title = "evaluate";
  r.rows.push_back(evaluate_group("overall", hyps, refs, any ? std::span<const ConstraintSet>(cons.sets)
                                                             : std::span<const ConstraintSet>()));
  write_report(m, r, false);
  m.results()["bleu"] = r.rows[0].bleu;
  if (r.rows[0].term_usage) m.results()["term_usage"] = *r.rows[0].term_usage;
  m.write();
  return 0;
}

/// Shared inputs of the analysis commands.
struct AnalysisInputs {
  LoadedModel lm;
  DecodeConfig decode;
  Variant variant;
  std::vector<Sentence> sources, refs;
  FrequencyTable freq;
};

AnalysisInputs analysis_inputs(const RunConfig& c, Manifest& m) {
  AnalysisInputs a{load_model(c, m), decode_config(c), parse_variant(c.str("variant", "act")), {}, {}, {}};
  if (a.decode.mode == DecodeMode::kUnconstrained) a.decode.mode = DecodeMode::kSoft;
  auto src = lines_of(c, "test_src", m), tgt = lines_of(c, "test_tgt", m);
  if (src.size() != tgt.size())
    throw DataError("test_src has " + std::to_string(src.size()) + " lines, test_tgt has " + std::to_string(tgt.size()));
  for (std::size_t i = 0; i < src.size(); ++i) {
    a.sources.push_back(tokenize_checked(src[i], a.lm.vocab, a.lm.cfg.max_len, c.str("test_src") + ":" + std::to_string(i + 1)));
    a.refs.push_back(tokenize(tgt[i], a.lm.vocab));
  }
  a.freq = word_frequencies(lines_of(c, "train_tgt", m));
  return a;
}

/// One source sentence paired with a derived constraint set.
struct DerivedSample {
  std::size_t index = 0;
  ConstraintSet constraints;
  std::vector<std::optional<Sentence>> source_terms;
};

using SampleGroups = std::vector<std::vector<DerivedSample>>;

/// Decodes derived samples and scores them per group.
EvalReport score_groups(const std::string& title, const AnalysisInputs& a, const RunConfig& c, Manifest& m,
                        const std::vector<std::string>& group_names, const SampleGroups& groups) {
  Labeler labeler(c, a.variant, a.lm.vocab, m);
  EvalReport r;
  r.title = title + " (mode " + std::string(to_string(a.decode.mode)) + ")";
  std::vector<Sentence> all_h, all_r;
  std::vector<ConstraintSet> all_c;
  std::vector<ReportRow> rows;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::vector<Sentence> hyps, refs;
    std::vector<ConstraintSet> cons;
    for (const auto& s : groups[g]) {
      auto labels = labeler.labels(a.sources[s.index], s.constraints, s.source_terms);
      hyps.push_back(decode(a.sources[s.index], s.constraints, labels, a.lm.params, a.lm.cfg, a.decode).tokens);
      refs.push_back(a.refs[s.index]);
      cons.push_back(s.constraints);
    }
    rows.push_back(evaluate_group(group_names[g], hyps, refs, cons));
    all_h.insert(all_h.end(), hyps.begin(), hyps.end());
    all_r.insert(all_r.end(), refs.begin(), refs.end());
    all_c.insert(all_c.end(), cons.begin(), cons.end());
  }
  r.rows.push_back(evaluate_group("overall", all_h, all_r, all_c));
  r.rows.insert(r.rows.end(), rows.begin(), rows.end());
  return r;
}

int cmd_self_constraints(const RunConfig& c) {
  Manifest m("analyze self-constraints", c, out_dir(c));
  auto a = analysis_inputs(c, m);
  auto order = parse_self_constraint_order(c.str("self_order", "frequency"));
  bool exclude_unk = c.boolean("exclude_unk", true);
  std::optional<ScoreTable> tfidf;
  if (order == SelfConstraintOrder::kTfidf) tfidf = tfidf_scores(corpus_of(c, "train", a.lm.vocab, m));
  const std::uint64_t seed = stream_seed(c.seed(), "analyze");

  SampleGroups groups(kBuckets);
  std::vector<std::string> derived{"sample\tbucket\tposition\tword"};
  long rejected = 0;
  for (std::size_t i = 0; i < a.refs.size(); ++i) {
    auto keys = tfidf ? tfidf->score(a.refs[i]) : frequency_keys(a.refs[i], a.lm.vocab, a.freq);
    Rng rng(mix_seed(seed, i));
    auto out = build_self_constraints(a.refs[i], keys, order, exclude_unk, rng);
    if (!out) {
      ++rejected;
      continue;
    }
    for (const auto& sc : *out) {
      groups[static_cast<std::size_t>(sc.bucket)].push_back({i, ConstraintSet{{{sc.token}}}, {}});
      derived.push_back(std::to_string(i) + "\t" + std::to_string(sc.bucket + 1) + "\t" +
                        std::to_string(sc.position) + "\t" + a.lm.vocab.symbol(sc.token));
    }
  }
  std::vector<std::string> names;
  for (int b = 1; b <= kBuckets; ++b) names.push_back("bucket" + std::to_string(b));
  auto r = score_groups("self-constraints by " + c.str("self_order", "frequency"), a, c, m, names, groups);
  write_report(m, r, true);
  m.output_lines("derived.tsv", derived);
  m.results()["surviving_samples"] = a.refs.size() - static_cast<std::size_t>(rejected);
  m.results()["rejected_samples"] = rejected;
  m.write();
  return 0;
}

int cmd_tertiles(const RunConfig& c) {
  Manifest m("analyze tertiles", c, out_dir(c));
  auto a = analysis_inputs(c, m);
  if (!c.has("constraints")) throw UsageError("tertiles needs constraints=PATH");
  Constraints cons = constraints_of(c, a.lm.vocab, a.sources.size(), m);
  std::vector<std::size_t> bearing;
  std::vector<ConstraintSet> sets;

  for (std::size_t i = 0; i < cons.sets.size(); ++i)
    if (!cons.sets[i].empty()) bearing.push_back(i), sets.push_back(cons.sets[i]);
  if (bearing.empty()) throw DataError("no sentence carries constraints");
  auto t = tertile_split(sets, a.lm.vocab, a.freq);
  SampleGroups groups(3);
  std::vector<std::string> listing{"sample\tgroup\tmean_frequency"};
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t k : t.groups[g]) {
      groups[g].push_back({bearing[k], sets[k], cons.source_terms[bearing[k]]});
      listing.push_back(std::to_string(bearing[k]) + "\t" + kTertileNames[g] + "\t" + format_fixed(t.keys[k], 4));
    }
  auto r = score_groups("constraint frequency tertiles", a, c, m, {"high", "medium", "low"}, groups);
  write_report(m, r, true);
  m.output_lines("tertiles.tsv", listing);
  m.write();
  return 0;
}

int cmd_n_constraints(const RunConfig& c) {
  Manifest m("analyze n-constraints", c, out_dir(c));
  auto a = analysis_inputs(c, m);
  long n_max = c.integer("n_max", 5);
  if (n_max < 1) throw UsageError("n_max must be >= 1");
  const std::uint64_t seed = stream_seed(c.seed(), "analyze");
  SampleGroups groups(static_cast<std::size_t>(n_max));
  std::vector<std::string> names;
  for (long n = 1; n <= n_max; ++n) {
    names.push_back("n=" + std::to_string(n));
    for (std::size_t i = 0; i < a.refs.size(); ++i) {
      if (a.refs[i].size() < static_cast<std::size_t>(n)) continue;
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(n), i));
      groups[static_cast<std::size_t>(n - 1)].push_back(
          {i, sample_n_constraints(a.refs[i], static_cast<std::size_t>(n), rng), {}});
    }
  }
  auto r = score_groups("number of constraints", a, c, m, names, groups);
  write_report(m, r, true);
  m.write();
  return 0;
}

int cmd_align(const RunConfig& c) {
  Manifest m("align", c, out_dir(c));
  Vocabulary vocab = vocabulary_for(c, m);
  ParallelCorpus corpus = corpus_of(c, "train", vocab, m);
  auto t0 = Manifest::Clock::now();
  auto model = train_aligner(corpus, static_cast<int>(c.integer("em_iterations", 5)));
  m.stage("em", t0);
  double threshold = c.real("align_threshold", kDefaultAlignThreshold);
  std::vector<std::string> lines;
  for (const auto& p : corpus.pairs) lines.push_back(format_pharaoh(viterbi_alignment(p.source, p.target, model, threshold)));
  m.output_lines("alignments.txt", lines);
  m.results()["log_likelihood"] = model.log_likelihood(corpus);
  m.write();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained Levenshtein-Transformer toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ACT_VERSION);

  std::string config_path, out, variant, mode;
  long seed = -1;
  std::vector<std::string> assignments;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--variant", variant, "baseline, ct or act");
    sub->add_option("--mode", mode, "decoding mode: none, soft or hard");
    sub->add_option("--set", assignments, "override a config key (key=value)");
  };

  std::map<CLI::App*, std::function<int(const RunConfig&)>> handlers;
  auto add = [&](CLI::App* parent, const std::string& name, const std::string& help,
                 std::function<int(const RunConfig&)> fn) {
    CLI::App* sub = parent->add_subcommand(name, help);
    common(sub);
    handlers[sub] = std::move(fn);
    return sub;
  };
  add(&app, "synth", "write a synthetic lexicon-translation corpus", cmd_synth);
  add(&app, "datagen", "generate training examples as JSON lines", cmd_datagen);
  add(&app, "train", "train a model and write a checkpoint", cmd_train);
  add(&app, "translate", "decode a source file", cmd_translate);
  add(&app, "evaluate", "score hypotheses against references", cmd_evaluate);
  add(&app, "align", "train the word aligner and write Pharaoh links", cmd_align);
  CLI::App* analyze = app.add_subcommand("analyze", "constraint analyses");
  analyze->require_subcommand(1);
  add(analyze, "self-constraints", "six-bucket self-constraint analysis", cmd_self_constraints);
  add(analyze, "tertiles", "constraint frequency tertiles", cmd_tertiles);
  add(analyze, "n-constraints", "quality against the number of constraints", cmd_n_constraints);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* chosen = nullptr;
  for (auto& [sub, fn] : handlers)
    if (sub->parsed()) chosen = sub;
  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load(config_path);
    for (const auto& kv : assignments) cfg.set_assignment(kv);
    if (seed >= 0) cfg.set("seed", std::to_string(seed), "--seed");
    if (!out.empty()) cfg.set("out", out, "--out");
    if (!variant.empty()) cfg.set("variant", variant, "--variant");
    if (!mode.empty()) cfg.set("mode", mode, "--mode");
    cfg.seed();
    return handlers.at(chosen)(cfg);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericDivergence& e) {
    std::cerr << "numeric divergence at step " << e.step() << ": " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
