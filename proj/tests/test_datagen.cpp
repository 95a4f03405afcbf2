#include <gtest/gtest.h>

#include <map>
#include <set>

#include "oracles.hpp"
#include "teleems/datagen.hpp"

using namespace teleems;
using namespace teleems::datagen;

namespace {

std::string serialize(const std::vector<domain::IncidentRecord>& rs, std::uint64_t seed) {
  std::vector<domain::json> rows;
  for (const auto& r : rs) rows.push_back(domain::to_json(r));
  return domain::render_dataset({domain::DatasetStage::Text0, domain::kSchemaVersion, seed, {}}, rows);
}

GenConfig cfg_with(std::size_t n, double coupling, std::uint64_t seed = 3) {
  GenConfig c;
  c.n_records = n;
  c.coupling = coupling;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Incidents, EmptyAndDeterministic) {
  EXPECT_TRUE(gen_incidents(cfg_with(0, 1.0)).empty());
  auto a = gen_incidents(cfg_with(300, 0.7));
  auto b = gen_incidents(cfg_with(300, 0.7));
  EXPECT_EQ(serialize(a, 3), serialize(b, 3));
  EXPECT_NE(serialize(a, 3), serialize(gen_incidents(cfg_with(300, 0.7, 4)), 3));
  // Records depend on their own index only.
  auto longer = gen_incidents(cfg_with(400, 0.7));
  EXPECT_TRUE(std::equal(a.begin(), a.end(), longer.begin()));
}

TEST(Incidents, SymptomsComeFromLexicon) {
  const auto lex = normalizer::Lexicon::bundled();
  for (const auto& r : gen_incidents(cfg_with(200, 1.0))) {
    ASSERT_EQ(r.primary_symptoms.size(), 2u);
    for (const auto& s : r.primary_symptoms) EXPECT_TRUE(lex.contains(s));
    for (const auto& s : r.secondary_symptoms) EXPECT_TRUE(lex.contains(s));
    EXPECT_TRUE(domain::is_complete(r));
    EXPECT_EQ(r.vitals.size(), 6u);
  }
}

TEST(Incidents, FullCouplingMakesProtocolAFunctionOfSymptoms) {
  std::map<std::vector<std::string>, std::set<int>> by_pair;
  std::map<std::string, std::set<int>> by_complaint;
  for (const auto& r : gen_incidents(cfg_with(2000, 1.0))) {
    by_pair[r.primary_symptoms].insert(*r.protocol);
    by_complaint[r.primary_symptoms[0]].insert(*r.protocol);
  }
  for (const auto& [k, v] : by_pair) EXPECT_EQ(v.size(), 1u);
  for (const auto& [k, v] : by_complaint) EXPECT_EQ(v.size(), 1u);
}

TEST(Incidents, HeartRateLevelsSplitTheProtocol) {
  GenConfig c = cfg_with(2000, 1.0);
  c.hr_levels = 2;
  std::map<std::pair<std::string, bool>, std::set<int>> by_key;
  std::map<std::string, std::set<int>> by_complaint;
  for (const auto& r : gen_incidents(c)) {
    const auto& hr = r.vitals.at(domain::VitalKind::HR).values;
    const double mean = std::accumulate(hr.begin(), hr.end(), 0.0) / static_cast<double>(hr.size());
    by_key[{r.primary_symptoms[0], mean > 95.0}].insert(*r.protocol);
    by_complaint[r.primary_symptoms[0]].insert(*r.protocol);
  }
  for (const auto& [k, v] : by_key) EXPECT_EQ(v.size(), 1u) << k.first;
  std::size_t split = 0;
  for (const auto& [k, v] : by_complaint) split += v.size() == 2 ? 1 : 0;
  EXPECT_GT(split, by_complaint.size() / 2);
}

TEST(Incidents, CouplingControlsAgreementWithRule) {
  const auto vocab = vocabulary();
  auto agreement = [&](double coupling) {
    GenConfig c = cfg_with(3000, coupling);
    std::size_t hits = 0;
    for (const auto& r : gen_incidents(c)) {
      const auto ci = static_cast<std::size_t>(
          std::find(vocab.complaints.begin(), vocab.complaints.end(), r.primary_symptoms[0]) - vocab.complaints.begin());
      hits += coupled_labels(c, ci, 0).protocol == *r.protocol ? 1 : 0;
    }
    return static_cast<double>(hits) / 3000.0;
  };
  EXPECT_EQ(agreement(1.0), 1.0);
  EXPECT_NEAR(agreement(0.0), 1.0 / 8.0, 0.03);
  EXPECT_NEAR(agreement(0.5), 0.5 + 0.5 / 8.0, 0.04);
}

TEST(Incidents, EveryClassOccurs) {
  for (double coupling : {0.0, 0.5, 1.0})
    for (std::size_t levels : {1u, 2u, 3u}) {
      GenConfig c = cfg_with(0, coupling, 11);
      c.k1 = 12;
      c.k2 = 7;
      c.k4 = 9;
      c.hr_levels = levels;
      c.n_records = 10 * 12;
      std::set<int> p, m, q;
      for (const auto& r : gen_incidents(c)) {
        p.insert(*r.protocol);
        m.insert(*r.med_type);
        q.insert(r.procedures->begin(), r.procedures->end());
      }
      EXPECT_EQ(p.size(), 12u);
      EXPECT_EQ(m.size(), 7u);
      EXPECT_EQ(q.size(), 9u);
    }
}

TEST(Incidents, IncompleteRecordsAreFiltered) {
  GenConfig c = cfg_with(2000, 1.0);
  c.incomplete_rate = 0.1;
  auto rs = gen_incidents(c);
  const auto kept = domain::filter_complete(rs).size();
  EXPECT_NEAR(static_cast<double>(rs.size() - kept) / 2000.0, 0.1, 0.025);
}

TEST(Incidents, ConfigValidation) {
  GenConfig c;
  c.coupling = 1.5;
  EXPECT_THROW(gen_incidents(c), Error);
  c = {};
  c.k1 = 1;
  EXPECT_THROW(gen_incidents(c), Error);
  c = {};
  c.k2 = 60;
  EXPECT_THROW(gen_incidents(c), Error);
  c = {};
  c.hr_levels = 0;
  EXPECT_THROW(gen_incidents(c), Error);
}

TEST(Ppg, DominantBinClean) {
  for (auto [bpm, hz] : {std::pair{72.0, 1.2}, std::pair{120.0, 2.0}}) {
    // 30 s puts both rates on exact DFT bins.
    auto g = gen_ppg(HrProfile::constant(bpm, 30), 30.0, 30.0, std::numeric_limits<double>::infinity(), 1);
    ASSERT_EQ(g.wave.samples.size(), 900u);
    EXPECT_NEAR(oracle::dominant_frequency(g.wave.samples, 30.0), hz, 1e-9);
    ASSERT_EQ(g.true_bpm.size(), 5u);
    EXPECT_DOUBLE_EQ(g.true_bpm[0], bpm);
  }
}

TEST(Ppg, NoiseAtSnrKeepsPeak) {
  const auto clean = gen_ppg(HrProfile::constant(72, 30), 30.0, 30.0, std::numeric_limits<double>::infinity(), 5);
  const auto noisy = gen_ppg(HrProfile::constant(72, 30), 30.0, 30.0, 20.0, 5);
  double ps = 0, pn = 0;
  for (std::size_t i = 0; i < clean.wave.samples.size(); ++i) {
    ps += clean.wave.samples[i] * clean.wave.samples[i];
    const double e = noisy.wave.samples[i] - clean.wave.samples[i];
    pn += e * e;
  }
  EXPECT_NEAR(10.0 * std::log10(ps / pn), 20.0, 0.5);
  EXPECT_NEAR(oracle::dominant_frequency(noisy.wave.samples, 30.0), 1.2, 1e-9);
  EXPECT_EQ(gen_ppg(HrProfile::constant(72, 30), 30.0, 30.0, 20.0, 5).wave.samples, noisy.wave.samples);
}

TEST(Ppg, WindowTruthAndErrors) {
  HrProfile p{{60, 60, 60, 90, 90, 90, 90, 90, 90, 120, 120, 120}, 1.0};
  auto g = gen_ppg(p, 25.0, 12.0, 40.0, 2);
  ASSERT_EQ(g.true_bpm.size(), 2u);
  EXPECT_NEAR(g.true_bpm[0], 75.0, 1e-12);
  EXPECT_NEAR(g.true_bpm[1], 105.0, 1e-12);
  for (double bad : {45.0, 150.0, 30.0}) {
    try {
      gen_ppg(HrProfile::constant(bad, 6), 30, 6, 20, 1);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::BandError);
    }
  }
  EXPECT_THROW(gen_ppg(HrProfile::constant(70, 6), 30, 5, 20, 1), Error);
}

TEST(LibraryPool, ShapeAndKeys) {
  GenConfig c = cfg_with(500, 1.0);
  auto lp = gen_library_pool(c);
  ASSERT_EQ(lp.library.size(), 42u);
  EXPECT_EQ(lp.library[0].key, "subject-00");
  EXPECT_EQ(lp.library[0].wave.samples.size(), 1800u);
  EXPECT_EQ(lp.library[0].true_hr.values.size(), 10u);
  EXPECT_EQ(lp.pool.size(), 500u);
  std::set<std::string> keys;
  for (const auto& r : gen_incidents(c)) keys.insert(r.key);
  for (const auto& p : lp.pool) EXPECT_TRUE(keys.count(p.key));
  auto again = gen_library_pool(c);
  EXPECT_EQ(again.pool, lp.pool);
  EXPECT_EQ(again.library[41].wave.samples, lp.library[41].wave.samples);
  c.n_records = 10;
  EXPECT_THROW(gen_library_pool(c), Error);
}

TEST(LibraryPool, SpectralEstimatesTrackTruth) {
  auto lib = gen_library(cfg_with(100, 1.0));
  std::size_t close = 0, total = 0;
  for (const auto& e : lib) {
    auto est = rppg::hr_series(e.wave);
    ASSERT_EQ(est.values.size(), e.true_hr.values.size());
    for (std::size_t w = 0; w < est.values.size(); ++w, ++total)
      close += std::abs(est.values[w] - e.true_hr.values[w]) <= 2.0 ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(close) / static_cast<double>(total), 0.95);
}
