#include <gtest/gtest.h>

#include "oracles.hpp"
#include "teleems/metrics.hpp"

using namespace teleems;
using namespace teleems::metrics;

namespace {

std::string random_sentence(Rng& rng, std::size_t max_words) {
  static const std::vector<std::string> vocab{"patient", "has", "ards", "arts", "chest", "pain",
                                              "shortness", "of", "breath", "nausea", "Fever,", "cough."};
  std::string s;
  const std::size_t n = rng.below(max_words + 1);
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + vocab[rng.below(vocab.size())];
  return s;
}

}  // namespace

TEST(Wer, Examples) {
  EXPECT_DOUBLE_EQ(wer("patient has ards", "patient has arts"), 1.0 / 3.0);
  EXPECT_EQ(wer("patient has ards", "patient has ards"), 0.0);
  EXPECT_EQ(wer("", "anything here"), 2.0);
  EXPECT_EQ(wer("Patient, has ARDS.", "patient has ards"), 0.0);
}

TEST(Cer, Examples) {
  EXPECT_DOUBLE_EQ(cer("patient has ards", "patient has arts"), 0.0625);
  EXPECT_EQ(cer("abc", "abc"), 0.0);
  EXPECT_EQ(cer("abcd", ""), 1.0);
}

TEST(WerCer, MatchOracle) {
  Rng rng(101);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_sentence(rng, 8), b = random_sentence(rng, 8);
    EXPECT_EQ(wer(a, b), oracle::wer(a, b));
    EXPECT_EQ(cer(a, b), oracle::cer(a, b));
    EXPECT_EQ(wer(a, b) == 0.0, text::tokenize(a) == text::tokenize(b));
  }
}

TEST(ExactMatch, Examples) {
  EXPECT_EQ(exact_match("shortness of breath ards", "shortness of breath ards"), 1);
  EXPECT_EQ(exact_match("shortness of breath ards", "shortness  of breath ards "), 1);
  EXPECT_EQ(exact_match("ards", "arts"), 0);
}

TEST(Bleu, Examples) {
  EXPECT_DOUBLE_EQ(bleu("shortness of breath ards", "shortness of breath ards"), 1.0);
  EXPECT_DOUBLE_EQ(bleu("ards", "ards"), 1.0);
  EXPECT_EQ(bleu("ards", ""), 0.0);
  // one unigram of two wrong, no bigram match: sqrt(1/2 * 1/2), no brevity penalty
  EXPECT_NEAR(bleu("chest pain", "chest ache"), 0.5, 1e-12);
}

TEST(Bleu, MatchesOracleAndBounds) {
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_sentence(rng, 10), b = random_sentence(rng, 10);
    const double v = bleu(a, b);
    EXPECT_NEAR(v, oracle::bleu(a, b), 1e-9) << a << " | " << b;
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0 + 1e-15);
    if (!text::tokenize(a).empty()) {
      EXPECT_NEAR(bleu(a, a), 1.0, 1e-15);
    }
  }
}

TEST(TopK, Examples) {
  std::vector<std::vector<int>> r{{0, 2, 1}};
  EXPECT_EQ(topk_accuracy(r, {2}, 1), 0.0);
  EXPECT_EQ(topk_accuracy(r, {2}, 3), 1.0);
  std::vector<std::vector<int>> all{{1, 0, 2}, {0, 1, 2}};
  for (std::size_t k : {1u, 2u, 3u}) EXPECT_EQ(topk_accuracy(all, {1, 0}, k), 1.0);
  EXPECT_THROW(topk_accuracy(r, {0}, 4), Error);
}

TEST(TopK, Monotone) {
  Rng rng(3);
  std::vector<std::vector<int>> rankings;
  std::vector<int> truths;
  for (int i = 0; i < 300; ++i) {
    std::vector<int> r{0, 1, 2, 3, 4, 5, 6};
    rng.shuffle(r);
    rankings.push_back(r);
    truths.push_back(static_cast<int>(rng.below(7)));
  }
  double prev = 0;
  for (std::size_t k = 1; k <= 7; ++k) {
    const double v = topk_accuracy(rankings, truths, k);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(F1, Examples) {
  auto s = f1_scores({{0}, {1}}, {{0, 1}, {}}, {0, 1});
  EXPECT_DOUBLE_EQ(s.micro, 0.5);
  EXPECT_DOUBLE_EQ(s.macro, 0.5);
  auto perfect = f1_scores({{0, 2}, {1}}, {{0, 2}, {1}}, {0, 1, 2});
  EXPECT_EQ(perfect.micro, 1.0);
  EXPECT_EQ(perfect.macro, 1.0);
  EXPECT_EQ(f1_scores({{0}, {1}}, {{}, {}}, {0, 1}).micro, 0.0);
  try {
    f1_scores({}, {}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyUniverse);
  }
}

TEST(F1, AbsentLabelCountsZeroInMacro) {
  auto s = f1_scores({{0}}, {{0}}, {0, 1});
  EXPECT_EQ(s.micro, 1.0);
  EXPECT_EQ(s.macro, 0.5);
}

TEST(F1, MatchesOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const int labels = 1 + static_cast<int>(rng.below(6));
    std::set<int> universe;
    for (int l = 0; l < labels; ++l) universe.insert(l);
    std::vector<std::set<int>> t(1 + rng.below(10)), p(t.size());
    for (std::size_t i = 0; i < t.size(); ++i)
      for (int l = 0; l < labels; ++l) {
        if (rng.bernoulli(0.4)) t[i].insert(l);
        if (rng.bernoulli(0.4)) p[i].insert(l);
      }
    auto s = f1_scores(t, p, universe);
    auto [micro, macro] = oracle::f1(t, p, universe);
    EXPECT_NEAR(s.micro, micro, 1e-12);
    EXPECT_NEAR(s.macro, macro, 1e-12);
    if (labels == 1) {
      EXPECT_DOUBLE_EQ(s.micro, s.macro);
    }
  }
}

TEST(Mse, Examples) {
  EXPECT_EQ(mse(std::vector<double>{1, 2}, std::vector<double>{1, 4}), 2.0);
  EXPECT_EQ(mse(std::vector<double>{3, 3}, std::vector<double>{3, 3}), 0.0);
  try {
    mse(std::vector<double>{1}, std::vector<double>{1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthError);
  }
}

TEST(Correlation, Examples) {
  std::vector<double> x{1, 2, 3};
  EXPECT_NEAR(pearson(x, std::vector<double>{2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, std::vector<double>{1, 4, 9}), 1.0, 1e-15);
  EXPECT_LT(pearson(x, std::vector<double>{1, 4, 9}), 1.0);
  try {
    pearson(x, std::vector<double>{5, 5, 5});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateVariance);
  }
  EXPECT_THROW(spearman(x, std::vector<double>{5, 5, 5}), Error);
}

TEST(Correlation, AverageRanks) {
  EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Correlation, OracleAndInvariance) {
  Rng rng(23);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(10));
      y[i] = rng.normal(0, 3);
    }
    if (*std::max_element(x.begin(), x.end()) == *std::min_element(x.begin(), x.end())) x[0] += 1;
    const double p = pearson(x, y), s = spearman(x, y);
    EXPECT_NEAR(p, oracle::pearson(x, y), 1e-9);
    EXPECT_NEAR(s, oracle::spearman(x, y), 1e-9);
    EXPECT_LE(std::abs(p), 1.0);
    std::vector<double> ax, cube;
    for (double v : x) {
      ax.push_back(3.0 * v + 7.0);
      cube.push_back(v * v * v);
    }
    EXPECT_NEAR(pearson(ax, y), p, 1e-9);
    EXPECT_NEAR(spearman(cube, y), s, 1e-12);
    EXPECT_NEAR(mse(x, y), oracle::mse(x, y), 1e-12);
  }
}

TEST(Report, ShapeAndHash) {
  MetricReport r;
  r.set({"lexicon", "clean", "multi", "protocol"}, "top1", 0.5);
  r.set({"lexicon", "clean", "multi", "protocol"}, "top3", 0.7);
  r.set({"lexicon", "clean", "multi", "protocol"}, "top5", 0.9);
  r.skip({"none", "noisy", "single", "quantity"}, "not run");
  EXPECT_EQ(r.evaluated(), 3u);
  EXPECT_EQ(r.skipped(), 1u);
  EXPECT_TRUE(r.has({"lexicon", "clean", "multi", "protocol"}));
  EXPECT_FALSE(r.has({"lexicon", "noisy"}));
  EXPECT_TRUE(r.topk_monotone());
  EXPECT_EQ(r.get({"lexicon", "clean", "multi", "protocol"}, "top3"), 0.7);
  MetricReport copy = r;
  EXPECT_EQ(copy.hash(), r.hash());
  r.set({"lexicon", "clean", "multi", "protocol"}, "top5", 0.6);
  EXPECT_FALSE(r.topk_monotone());
  EXPECT_THROW(r.set({"x"}, "y", std::nan("")), Error);
}
