#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "teleems/normalizer.hpp"

using namespace teleems;
using namespace teleems::normalizer;

namespace {

const Lexicon& lex() {
  static const Lexicon l = Lexicon::bundled();
  return l;
}

// Exhaustive reference: every span against every entry, no pruning.
std::vector<std::string> brute_extract(const std::string& transcript, const Lexicon& lexicon, double threshold) {
  const auto tokens = oracle::words(transcript);
  struct C {
    std::size_t b, n, e;
    double s;
  };
  std::vector<C> cands;
  const auto& entries = lexicon.entries();
  for (std::size_t b = 0; b < tokens.size(); ++b)
    for (std::size_t n = 1; n <= lexicon.max_ngram() + 1 && b + n <= tokens.size(); ++n) {
      std::string span;
      for (std::size_t k = b; k < b + n; ++k) span += (k > b ? " " : "") + tokens[k];
      std::size_t best = entries.size();
      double best_s = -1;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        const double s = 1.0 - static_cast<double>(oracle::edit_distance(oracle::chars(span), oracle::chars(entries[e]))) /
                                   static_cast<double>(std::max(span.size(), entries[e].size()));
        if (s > best_s) best_s = s, best = e;
      }
      if (best_s >= threshold - 1e-12) cands.push_back({b, n, best, best_s});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const C& x, const C& y) {
    return x.s != y.s ? x.s > y.s : x.n != y.n ? x.n > y.n : x.b != y.b ? x.b < y.b : x.e < y.e;
  });
  std::vector<int> owner(tokens.size(), -1);
  std::vector<C> taken;
  for (const auto& c : cands) {
    bool free = true;
    for (std::size_t k = c.b; k < c.b + c.n; ++k) free = free && owner[k] < 0;
    if (!free) continue;
    for (std::size_t k = c.b; k < c.b + c.n; ++k) owner[k] = 1;
    taken.push_back(c);
  }
  std::sort(taken.begin(), taken.end(), [](const C& x, const C& y) { return x.b < y.b; });
  std::vector<std::string> out;
  for (const auto& c : taken)
    if (std::find(out.begin(), out.end(), entries[c.e]) == out.end()) out.push_back(entries[c.e]);
  return out;
}

std::vector<std::string> pick(Rng& rng, std::size_t n) {
  std::vector<std::string> all = lex().entries();
  rng.shuffle(all);
  all.resize(n);
  return all;
}

}  // namespace

TEST(Lexicon, BundledMatchesDataFile) {
  EXPECT_EQ(lex().size(), 100u);
  EXPECT_EQ(lex().max_ngram(), 3u);
  EXPECT_EQ(Lexicon::load(std::string(TELEEMS_DATA_DIR) + "/lexicon.txt").entries(), lex().entries());
  EXPECT_TRUE(lex().contains("shortness of breath"));
  EXPECT_TRUE(lex().contains("ards"));
  EXPECT_FALSE(lex().contains("arts"));
}

TEST(Lexicon, NoEntryNestedInAnother) {
  for (const auto& a : lex().entries())
    for (const auto& b : lex().entries())
      if (a != b) {
        EXPECT_EQ((" " + b + " ").find(" " + a + " "), std::string::npos) << a << " in " << b;
      }
}

TEST(Lexicon, RejectsMalformedTerms) {
  for (std::vector<std::string> bad : {std::vector<std::string>{"Fever"}, {"chest  pain"}, {" cough"}, {"a", "a"}, {}})
    EXPECT_THROW(Lexicon{bad}, Error);
  EXPECT_EQ(Lexicon::parse("# c\n\ncough\n  fever  # note\n").entries(), (std::vector<std::string>{"cough", "fever"}));
}

TEST(Extract, StartupTranscriptExample) {
  const std::string t = "The patient has shown up of breath and arts.";
  auto loose = extract_and_normalize(t, lex(), 0.7);
  EXPECT_EQ(loose.symptoms, (std::vector<std::string>{"shortness of breath", "ards"}));
  EXPECT_EQ(loose.sentence(), "shortness of breath ards");
  EXPECT_EQ(loose.spans[0], (TokenSpan{3, 7}));
  EXPECT_DOUBLE_EQ(loose.scores[1], 0.75);
  // At the default threshold both spans fall short.
  EXPECT_TRUE(extract_and_normalize(t, lex()).symptoms.empty());
}

TEST(Extract, EmptyAndExact) {
  EXPECT_TRUE(extract_and_normalize("", lex()).symptoms.empty());
  auto r = extract_and_normalize("Nausea, and VOMITING!", lex());
  EXPECT_EQ(r.symptoms, (std::vector<std::string>{"nausea", "vomiting"}));
  EXPECT_EQ(r.scores, (std::vector<double>{1.0, 1.0}));
  EXPECT_THROW(extract_and_normalize("x", lex(), 0.0), Error);
}

TEST(Extract, RepeatedSymptomReportedOnce) {
  EXPECT_EQ(extract_and_normalize("cough then more cough", lex()).symptoms, std::vector<std::string>{"cough"});
}

TEST(Extract, Idempotent) {
  Rng rng(5);
  for (int trial = 0; trial < 400; ++trial) {
    const auto terms = pick(rng, 1 + rng.below(5));
    const auto once = extract_and_normalize(text::join(terms), lex());
    EXPECT_EQ(once.symptoms, terms);
    EXPECT_EQ(extract_and_normalize(once.sentence(), lex()).symptoms, once.symptoms);
  }
}

TEST(Extract, AgreesWithExhaustiveReference) {
  Rng rng(8);
  const NoiseProfile noise{0.04, 0.02, 0.02, 2.0, 2};
  for (int trial = 0; trial < 60; ++trial) {
    auto t = synthesize_conversation(pick(rng, 1 + rng.below(3)), rng.below(6), rng.next_u64());
    auto c = corrupt_transcript(t, noise, rng.next_u64());
    for (double th : {0.7, 0.8})
      EXPECT_EQ(extract_and_normalize(c.text, lex(), th).symptoms, brute_extract(c.text, lex(), th)) << c.text;
  }
}

TEST(Synthesize, CleanRecoveryEverySingletonAndSampledPairs) {
  const auto& entries = lex().entries();
  const std::size_t n_templates = conversation_templates().size();
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (std::size_t t = 0; t < n_templates; ++t) {
      auto tr = synthesize_conversation({entries[i]}, t, i * 31 + t);
      ASSERT_EQ(extract_and_normalize(tr.text, lex()).symptoms, tr.symptoms) << tr.text;
    }
  Rng rng(12);
  for (int trial = 0; trial < 600; ++trial) {
    auto tr = synthesize_conversation(pick(rng, 2 + rng.below(2)), rng.below(n_templates), rng.next_u64());
    ASSERT_EQ(extract_and_normalize(tr.text, lex()).symptoms, tr.symptoms) << tr.text;
  }
}

TEST(Synthesize, EachSymptomVerbatimOnce) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    auto tr = synthesize_conversation(pick(rng, 1 + rng.below(4)), rng.below(6), trial);
    EXPECT_EQ(tr.stage, domain::DatasetStage::Text3);
    for (const auto& s : tr.symptoms) {
      const auto at = tr.text.find(s);
      ASSERT_NE(at, std::string::npos);
      EXPECT_EQ(tr.text.find(s, at + 1), std::string::npos);
    }
  }
}

TEST(Synthesize, DeterministicAndDuplicatesCollapse) {
  EXPECT_EQ(synthesize_conversation({"fever"}, 2, 9).text, synthesize_conversation({"fever"}, 2, 9).text);
  EXPECT_NE(synthesize_conversation({"fever"}, 2, 9).text, synthesize_conversation({"fever"}, 3, 9).text);
  // 42 symptom lists with two repeats give 40 distinct conversations when
  // template and seed are keyed by content.
  Rng rng(14);
  std::vector<std::vector<std::string>> lists;
  for (int i = 0; i < 40; ++i) lists.push_back(pick(rng, 2));
  lists.push_back(lists[3]);
  lists.push_back(lists[17]);
  std::set<std::string> unique;
  for (const auto& l : lists) {
    const auto key = fnv1a(text::join(l, "|"));
    unique.insert(synthesize_conversation(l, key % conversation_templates().size(), key).text);
  }
  EXPECT_EQ(lists.size(), 42u);
  EXPECT_EQ(unique.size(), 40u);
}

TEST(Synthesize, Errors) {
  try {
    synthesize_conversation({"fever"}, conversation_templates().size(), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownTemplate);
  }
  EXPECT_THROW(synthesize_conversation({}, 0, 1), Error);
}

TEST(Corrupt, ZeroNoiseIsIdentity) {
  auto t = synthesize_conversation({"chest pain", "nausea"}, 1, 5);
  auto c = corrupt_transcript(t, NoiseProfile{}, 99);
  EXPECT_EQ(c.text, t.text);
  EXPECT_EQ(c.stage, domain::DatasetStage::Text5);
  EXPECT_EQ(c.symptoms, t.symptoms);
}

TEST(Corrupt, PinnedOutput) {
  auto t = synthesize_conversation({"chest pain", "nausea"}, 1, 5);
  auto c = corrupt_transcript(t, NoiseProfile{0.05, 0.02, 0.02, 3.0, 2}, 11);
  EXPECT_EQ(c.text,
            "dispgtcher: 911, is this or police, frhe or medicaf?\n"
            "callerb: msdical, at 750 jine drive.\n"
            "caller: my uncle is 88 years old and has chest ian.\n"
            "dispatcher: anything elxe?\n"
            "callr: yes, nasmea tloo.\n"
            "dispatcher: an ambulance has beed sent to you.\n"
            "cakller: we will leaved the door open.");
}

TEST(Corrupt, EditCapAndShapePreserved) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cap = rng.below(4);
    const NoiseProfile noise{rng.uniform(0, 0.5), rng.uniform(0, 0.3), rng.uniform(0, 0.3), rng.uniform(1, 4), cap};
    auto t = synthesize_conversation(pick(rng, 2), rng.below(6), trial);
    auto c = corrupt_transcript(t, noise, rng.next_u64());
    // Raw whitespace-delimited tokens line up one to one.
    std::vector<std::string> ra, rb;
    std::istringstream sa(t.text), sb(c.text);
    for (std::string w; sa >> w;) ra.push_back(w);
    for (std::string w; sb >> w;) rb.push_back(w);
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
      EXPECT_LE(oracle::edit_distance(oracle::chars(ra[i]), oracle::chars(rb[i])), cap);
      std::string pa, pb;
      for (char ch : ra[i])
        if (!std::isalpha(static_cast<unsigned char>(ch))) pa += ch;
      for (char ch : rb[i])
        if (!std::isalpha(static_cast<unsigned char>(ch))) pb += ch;
      EXPECT_EQ(pa, pb);
      EXPECT_EQ(ra[i].find_first_of("abcdefghijklmnopqrstuvwxyz") != std::string::npos,
                rb[i].find_first_of("abcdefghijklmnopqrstuvwxyz") != std::string::npos);
    }
  }
}

TEST(Corrupt, BiasConcentratesEditsOnSymptoms) {
  const NoiseProfile noise{0.01, 0.0, 0.0, 20.0, 1};
  std::size_t in = 0, out = 0, in_chars = 0, out_chars = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto t = synthesize_conversation({"shortness of breath"}, seed % 6, seed);
    auto c = corrupt_transcript(t, noise, seed);
    const auto at = t.text.find("shortness of breath");
    for (std::size_t i = 0; i < t.text.size(); ++i) {
      if (!std::isalpha(static_cast<unsigned char>(t.text[i]))) continue;
      const bool sym = i >= at && i < at + 19;
      (sym ? in_chars : out_chars)++;
      if (t.text[i] != c.text[i]) (sym ? in : out)++;
    }
  }
  EXPECT_GT(static_cast<double>(in) / in_chars, 10.0 * static_cast<double>(out) / out_chars);
}

TEST(Augmented, SplitAndDeterminism) {
  const NoiseProfile noise{0.04, 0.02, 0.02, 1.0, 2};
  auto a = build_augmented_pairs(lex().entries(), 480, 3, noise);
  EXPECT_EQ(a.train.size(), 384u);
  EXPECT_EQ(a.val.size(), 96u);
  auto b = build_augmented_pairs(lex().entries(), 480, 3, noise);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  std::size_t corrupted = 0;
  for (const auto& p : a.train) {
    EXPECT_TRUE(lex().contains(p.y));
    corrupted += p.x.find(p.y) == std::string::npos ? 1 : 0;
  }
  EXPECT_GT(corrupted, 0u);
  EXPECT_EQ(build_augmented_pairs({"fever"}, 5, 1, noise).val.size(), 1u);
  EXPECT_THROW(build_augmented_pairs({}, 5, 1, noise), Error);
}

TEST(LineProtocol, EscapeRoundTrip) {
  for (std::string s : {"", "a\nb", "back\\slash\\n", "cr\r\nlf", "trail\\"})
    EXPECT_EQ(unescape_line(escape_line(s)), s);
  EXPECT_EQ(escape_line("a\nb").find('\n'), std::string::npos);
}

TEST(Normalizers, LexiconAndExternalAgreeOnCleanText) {
  LexiconNormalizer local(lex());
  ExternalNormalizer echo("cat", lex());
  std::vector<std::string> batch;
  std::vector<std::vector<std::string>> truth;
  Rng rng(30);
  for (int i = 0; i < 10; ++i) {
    auto t = synthesize_conversation(pick(rng, 2), rng.below(6), i);
    batch.push_back(t.text);
    truth.push_back(t.symptoms);
  }
  EXPECT_EQ(local.normalize_batch(batch), truth);
  // `cat` echoes the transcript, so exact spotting recovers the verbatim terms.
  EXPECT_EQ(echo.normalize_batch(batch), truth);
  EXPECT_EQ(local.name(), "lexicon");
}

TEST(Normalizers, ExternalFailures) {
  EXPECT_THROW(ExternalNormalizer("false", lex()).normalize_batch({"a"}), Error);
  try {
    ExternalNormalizer("head -n 1", lex()).normalize_batch({"a", "b"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Io);
  }
}
