#include <gtest/gtest.h>

#include "act/metrics.hpp"

using namespace act;

namespace {

constexpr TokenId a = 5, b = 6, c = 7, d = 8, e = 9;

/// Quadratic recount of clipped n-gram matches, no maps.
long naive_matches(const Sentence& hyp, const Sentence& ref, std::size_t n) {
  long total = 0;
  std::vector<bool> counted(hyp.size(), false);
  for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
    if (counted[i]) continue;
    long in_hyp = 0, in_ref = 0;
    for (std::size_t j = i; j + n <= hyp.size(); ++j)
      if (std::equal(hyp.begin() + i, hyp.begin() + i + n, hyp.begin() + j)) ++in_hyp, counted[j] = true;
    for (std::size_t j = 0; j + n <= ref.size(); ++j)
      if (std::equal(hyp.begin() + i, hyp.begin() + i + n, ref.begin() + j)) ++in_ref;
    total += std::min(in_hyp, in_ref);
  }
  return total;
}

Sentence random_sentence(Rng& rng, std::size_t max_len, TokenId symbols) {
  Sentence s(rng.below(max_len + 1));
  for (auto& t : s) t = 5 + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(symbols)));
  return s;
}

}  // namespace

TEST(Bleu, Examples) {
  std::vector<Sentence> refs{{a, b, c, d, e}, {c, a, b, d}};
  EXPECT_EQ(corpus_bleu(refs, refs), 100.0);
  std::vector<Sentence> h{{a, b, c, d}}, r{{a, b, c, d, e}};
  EXPECT_NEAR(corpus_bleu(h, r), 100.0 * std::exp(1.0 - 5.0 / 4.0), 1e-12);
  EXPECT_NEAR(corpus_bleu(h, r), 77.88, 0.01);
  std::vector<Sentence> no4{{a, b, c, e, d}};
  EXPECT_EQ(corpus_bleu(no4, r), 0.0);
}

TEST(Bleu, Errors) {
  std::vector<Sentence> none, one{{a}}, two{{a}, {b}};
  EXPECT_THROW(corpus_bleu(none, none), DataError);
  EXPECT_THROW(corpus_bleu(one, two), DataError);
}

TEST(Bleu, StatisticsMatchNaiveRecount) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    auto hyp = random_sentence(rng, 12, 3), ref = random_sentence(rng, 12, 3);
    auto s = bleu_stats(hyp, ref);
    for (std::size_t n = 1; n <= 4; ++n) {
      EXPECT_EQ(s.matches[n - 1], naive_matches(hyp, ref, n));
      EXPECT_EQ(s.totals[n - 1], static_cast<long>(hyp.size() >= n ? hyp.size() - n + 1 : 0));
    }
  }
}

TEST(Bleu, TruncationNeverIncreasesMatches) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<Sentence> hyps, refs;
    for (int i = 0; i < 5; ++i) hyps.push_back(random_sentence(rng, 10, 3)), refs.push_back(random_sentence(rng, 10, 3));
    BleuStats full, cut;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      full += bleu_stats(hyps[i], refs[i]);
      Sentence shorter = hyps[i];
      if (!shorter.empty()) shorter.pop_back();
      cut += bleu_stats(shorter, refs[i]);
    }
    for (int n = 0; n < 4; ++n) EXPECT_LE(cut.matches[n], full.matches[n]);
  }
}

TEST(TermUsage, Examples) {
  std::vector<Sentence> h{{a, b, c}};
  std::vector<ConstraintSet> cs{{{{b}, {d}}}};
  EXPECT_EQ(term_usage_rate(h, cs), 50.0);
  std::vector<Sentence> h2{{a, c, b}};
  std::vector<ConstraintSet> cs2{{{{b, c}}}};
  EXPECT_EQ(term_usage_rate(h2, cs2), 0.0);
  std::vector<ConstraintSet> empty{ConstraintSet{}};
  EXPECT_THROW(term_usage_rate(h, empty), DataError);
  std::vector<Sentence> two{{a}, {b}};
  std::vector<ConstraintSet> mixed{ConstraintSet{}, {{{b}}}};
  EXPECT_EQ(term_usage(two, mixed).total, 1);
  EXPECT_EQ(term_usage_rate(two, mixed), 100.0);
}

TEST(TermUsage, RemovingAUsedOccurrenceStrictlyDecreases) {
  Rng rng(7);
  for (int t = 0; t < 300; ++t) {
    Sentence hyp = random_sentence(rng, 10, 6);
    if (hyp.empty()) continue;
    std::size_t pos = rng.below(hyp.size());
    TokenId victim = hyp[pos];
    ConstraintSet cs{{{victim}, {5 + static_cast<TokenId>(rng.below(6))}}};
    std::vector<Sentence> before{hyp};
    Sentence removed;
    for (TokenId x : hyp)
      if (x != victim) removed.push_back(x);
    std::vector<Sentence> after{removed};
    std::vector<ConstraintSet> sets{cs};
    EXPECT_LT(term_usage_rate(after, sets), term_usage_rate(before, sets));
  }
}

TEST(Frequencies, CaseFoldedCounts) {
  std::vector<std::string> lines{"A a b"};
  auto f = word_frequencies(lines);
  EXPECT_EQ(f.count("a"), 2);
  EXPECT_EQ(f.count("A"), 2);
  EXPECT_EQ(f.count("b"), 1);
  EXPECT_EQ(f.count("zzz"), 0);
  EXPECT_EQ(f.size(), 2u);
}

TEST(Frequencies, MatchNaiveRecount) {
  Rng rng(9);
  const char* words[] = {"x", "X", "y", "Yy", "yY", "z"};
  std::vector<std::string> lines;
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    for (std::uint64_t k = 0, n = rng.below(8); k < n; ++k) s += std::string(words[rng.below(6)]) + " ";
    lines.push_back(s);
  }
  auto f = word_frequencies(lines);
  for (std::string w : {"x", "y", "yy", "z"}) {
    long n = 0;
    for (const auto& line : lines) {
      std::istringstream is(line);
      for (std::string tok; is >> tok;) {
        for (char& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        n += tok == w;
      }
    }
    EXPECT_EQ(f.count(w), n) << w;
  }
}

TEST(SelfConstraints, Examples) {
  Rng rng(1);
  Sentence five{5, 6, 7, 8, 9};
  std::vector<double> k5{5, 4, 3, 2, 1};
  EXPECT_FALSE(build_self_constraints(five, k5, SelfConstraintOrder::kFrequency, false, rng));
  Sentence six{5, 6, 7, 8, 9, 10};
  std::vector<double> k6{60, 50, 40, 30, 20, 10};
  auto out = build_self_constraints(six, k6, SelfConstraintOrder::kFrequency, false, rng);
  ASSERT_TRUE(out);
  for (int i = 0; i < 6; ++i) EXPECT_EQ((*out)[static_cast<std::size_t>(i)].token, six[static_cast<std::size_t>(i)]);
  auto tfidf = build_self_constraints(six, k6, SelfConstraintOrder::kTfidf, false, rng);
  for (int i = 0; i < 6; ++i) EXPECT_EQ((*tfidf)[static_cast<std::size_t>(i)].token, six[static_cast<std::size_t>(5 - i)]);
}

TEST(SelfConstraints, BucketSizesAndPartition) {
  for (std::size_t n = 6; n < 40; ++n) {
    auto bounds = bucket_bounds(n);
    std::size_t at = 0;
    for (int k = 0; k < kBuckets; ++k) {
      auto [lo, hi] = bounds[static_cast<std::size_t>(k)];
      EXPECT_EQ(lo, at);
      std::size_t len = hi - lo;
      EXPECT_TRUE(len == n / 6 || len == (n + 5) / 6);
      if (k) {
        EXPECT_LE(len, bounds[static_cast<std::size_t>(k - 1)].second - bounds[static_cast<std::size_t>(k - 1)].first);
      }
      at = hi;
    }
    EXPECT_EQ(at, n);
  }
}

TEST(SelfConstraints, SortSplitOracleProperties) {
  Rng rng(13);
  for (int t = 0; t < 300; ++t) {
    std::size_t n = 6 + rng.below(20);
    Sentence ref(n);
    std::vector<double> keys(n);
    for (std::size_t i = 0; i < n; ++i) ref[i] = 5 + static_cast<TokenId>(rng.below(30)), keys[i] = static_cast<double>(rng.below(50));
    auto out = build_self_constraints(ref, keys, SelfConstraintOrder::kFrequency, false, rng);
    ASSERT_TRUE(out);
    std::vector<std::size_t> all;
    double prev_mean = std::numeric_limits<double>::infinity(), prev_min = prev_mean;
    for (const auto& sc : *out) {
      all.insert(all.end(), sc.members.begin(), sc.members.end());
      EXPECT_NE(std::find(sc.members.begin(), sc.members.end(), sc.position), sc.members.end());
      EXPECT_EQ(sc.token, ref[sc.position]);
      double mean = 0, mx = -1;
      for (auto p : sc.members) mean += keys[p], mx = std::max(mx, keys[p]);
      mean /= static_cast<double>(sc.members.size());
      EXPECT_LE(mean, prev_mean);
      EXPECT_LE(mx, prev_min);
      prev_mean = mean;
      prev_min = std::numeric_limits<double>::infinity();
      for (auto p : sc.members) prev_min = std::min(prev_min, keys[p]);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(all[i], i);
    EXPECT_GE(keys[(*out)[0].position], keys[(*out)[5].position]);
  }
}

TEST(SelfConstraints, UnkExclusion) {
  Rng rng(2);
  Sentence ref{5, reserved::kUnk, 7, 8, 9, 10, 11};
  std::vector<double> keys{70, 60, 50, 40, 30, 20, 10};
  for (int t = 0; t < 50; ++t) {
    auto out = build_self_constraints(ref, keys, SelfConstraintOrder::kFrequency, true, rng);
    ASSERT_TRUE(out);
    EXPECT_EQ((*out)[0].token, 5);  // bucket {5, UNK} skips UNK
  }
  Sentence unk6{5, reserved::kUnk, 7, 8, 9, 10};
  std::vector<double> k6{6, 5, 4, 3, 2, 1};
  EXPECT_FALSE(build_self_constraints(unk6, k6, SelfConstraintOrder::kFrequency, true, rng));
  EXPECT_TRUE(build_self_constraints(unk6, k6, SelfConstraintOrder::kFrequency, false, rng));
  EXPECT_THROW(parse_self_constraint_order("alpha"), UsageError);
}

TEST(Tertiles, Examples) {
  auto t = tertile_split(std::vector<double>{1, 100, 10});
  EXPECT_EQ(t.groups[0], (std::vector<std::size_t>{1}));
  EXPECT_EQ(t.groups[1], (std::vector<std::size_t>{2}));
  EXPECT_EQ(t.groups[2], (std::vector<std::size_t>{0}));

  Vocabulary v(std::vector<std::string>{"hi", "lo"});
  FrequencyTable f;
  f.add("hi", 100);
  ConstraintSet multi{{{v.id("hi"), v.id("lo")}}};
  EXPECT_EQ(mean_constraint_frequency(multi, v, f), 50.0);
  EXPECT_THROW(mean_constraint_frequency(ConstraintSet{}, v, f), DataError);
}

TEST(Tertiles, SizesAndOrdering) {
  Rng rng(17);
  for (std::size_t n : {9u, 10u, 11u, 30u}) {
    std::vector<double> keys(n);
    for (auto& k : keys) k = static_cast<double>(rng.below(10));
    auto t = tertile_split(keys);
    std::size_t sizes[3] = {t.groups[0].size(), t.groups[1].size(), t.groups[2].size()};
    EXPECT_EQ(sizes[0] + sizes[1] + sizes[2], n);
    EXPECT_GE(sizes[0], sizes[1]);
    EXPECT_GE(sizes[1], sizes[2]);
    EXPECT_LE(sizes[0] - sizes[2], 1u);
    for (int g = 1; g < 3; ++g) {
      double prev_min = 1e9, cur_max = -1;
      for (auto i : t.groups[static_cast<std::size_t>(g - 1)]) prev_min = std::min(prev_min, keys[i]);
      for (auto i : t.groups[static_cast<std::size_t>(g)]) cur_max = std::max(cur_max, keys[i]);
      EXPECT_GE(prev_min, cur_max);
    }
  }
  // ties keep original order
  auto tied = tertile_split(std::vector<double>{1, 1, 1});
  EXPECT_EQ(tied.groups[0], (std::vector<std::size_t>{0}));
  EXPECT_EQ(tied.groups[2], (std::vector<std::size_t>{2}));
}

TEST(NConstraints, Examples) {
  Rng rng(4);
  Sentence ref{a, b, c};
  auto all = sample_n_constraints(ref, 3, rng);
  ASSERT_EQ(all.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(all.constraints[i], Sentence{ref[i]});
  EXPECT_EQ(sample_n_constraints(Sentence{d}, 1, rng).constraints[0], Sentence{d});
  EXPECT_THROW(sample_n_constraints(ref, 4, rng), DataError);
}

TEST(NConstraints, UniformOverPositions) {
  Rng rng(6);
  Sentence ref{a, b, c, d};
  std::array<int, 4> hits{};
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    auto cs = sample_n_constraints(ref, 1, rng);
    ++hits[static_cast<std::size_t>(cs.constraints[0][0] - a)];
  }
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(draws), 0.25, 0.02);
}

TEST(Report, Formats) {
  std::vector<Sentence> refs{{a, b, c, d}};
  std::vector<ConstraintSet> cs{{{{b}}}};
  EvalReport r;
  r.title = "demo";
  r.rows.push_back(evaluate_group("overall", refs, refs, cs));
  r.rows.push_back(evaluate_group("empty", {}, {}, {}));
  EXPECT_EQ(r.rows[0].bleu, 100.0);
  EXPECT_EQ(*r.rows[0].term_usage, 100.0);
  EXPECT_FALSE(r.rows[1].term_usage);
  auto j = to_json(r);
  EXPECT_EQ(j["rows"][0]["bleu"], 100.0);
  EXPECT_TRUE(j["rows"][1]["term_usage"].is_null());
  EXPECT_EQ(to_csv(r), "bucket_id,n_samples,bleu,term_usage\noverall,1,100.0000,100.0000\nempty,0,0.0000,\n");
  auto text = to_text(r);
  EXPECT_NE(text.find("no smoothing"), std::string::npos);
  EXPECT_NE(text.find("100.00"), std::string::npos);
}
