#ifndef TELEEMS_PIPELINE_HPP
#define TELEEMS_PIPELINE_HPP

#include <array>
#include <cmath>
#include <future>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "teleems/datagen.hpp"
#include "teleems/domain.hpp"
#include "teleems/error.hpp"
#include "teleems/hooking.hpp"
#include "teleems/metrics.hpp"
#include "teleems/normalizer.hpp"
#include "teleems/prenet.hpp"
#include "teleems/random.hpp"
#include "teleems/rppg.hpp"
#include "teleems/text.hpp"

namespace teleems::pipeline {

using domain::json;

// ---------------------------------------------------------------------------
// Samples

inline prenet::Labels labels_of(const domain::IncidentRecord& r) {
  if (!domain::is_complete(r)) fail(ErrorCode::InvalidArgument, "record '" + r.key + "' is incomplete");
  return {*r.protocol, *r.med_type, *r.med_quantity, *r.procedures};
}

/// HR as a one-channel sequence in [0, 1].
inline std::vector<std::vector<double>> hr_steps(const domain::VitalsSeries& hr, domain::Bounds bounds,
                                                 domain::NormRange range) {
  std::vector<std::vector<double>> out;
  for (double v : domain::preprocess_vitals(hr, bounds, range).values) out.push_back({v});
  return out;
}

inline domain::NormRange fit_hr_range(const std::vector<domain::IncidentRecord>& train, domain::Bounds bounds) {
  std::vector<domain::VitalsSeries> hr;
  hr.reserve(train.size());
  for (const auto& r : train) hr.push_back(domain::derive_prearrival_vitals(r));
  return domain::fit_norm_range(hr, bounds);
}

/// Text1 tokens, Vitals1 HR, and the four labels of a complete record.
inline prenet::Sample record_sample(const domain::IncidentRecord& r, domain::Bounds bounds, domain::NormRange range) {
  return {text::tokenize(domain::derive_prearrival_text(r)), hr_steps(domain::derive_prearrival_vitals(r), bounds, range),
          labels_of(r)};
}

inline std::vector<prenet::Sample> record_samples(const std::vector<domain::IncidentRecord>& rs, domain::Bounds bounds,
                                                  domain::NormRange range) {
  std::vector<prenet::Sample> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(record_sample(r, bounds, range));
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

inline constexpr std::array<std::size_t, 3> kTopK = {1, 3, 5};
inline constexpr double kProcedureThreshold = 0.5;

inline std::set<int> procedure_set(const Eigen::VectorXd& probs, double threshold = kProcedureThreshold) {
  std::set<int> out;
  for (Eigen::Index j = 0; j < probs.size(); ++j)
    if (probs(j) >= threshold) out.insert(static_cast<int>(j));
  return out;
}

/// Fills report cell `path` with the metrics of one task. Metrics that
/// cannot be computed are listed in the cell's "skipped" entry.
inline void score_task(metrics::MetricReport& rep, const metrics::MetricReport::Path& path,
                       const prenet::PreNetModel& m, const std::vector<prenet::Sample>& samples, prenet::Task task,
                       prenet::Modality modality = prenet::Modality::Fused) {
  if (samples.empty()) {
    rep.skip(path, "no evaluation samples");
    return;
  }
  std::vector<prenet::TaskOutputs> outs;
  outs.reserve(samples.size());
  for (const auto& s : samples) outs.push_back(prenet::predict(s, m, modality));
  std::vector<std::string> skipped;

  switch (task) {
    case prenet::Task::Protocol:
    case prenet::Task::MedType: {
      const bool proto = task == prenet::Task::Protocol;
      const auto classes = static_cast<std::size_t>(proto ? outs[0].protocol_probs.size() : outs[0].medtype_probs.size());
      const std::size_t kmax = std::min(kTopK.back(), classes);
      std::vector<std::vector<int>> rankings;
      std::vector<int> truths;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        rankings.push_back(prenet::predict_topk(proto ? outs[i].protocol_probs : outs[i].medtype_probs, kmax));
        truths.push_back(proto ? samples[i].labels.protocol : samples[i].labels.med_type);
      }
      for (std::size_t k : kTopK) {
        const std::string name = "top" + std::to_string(k);
        if (k <= classes) rep.set(path, name, metrics::topk_accuracy(rankings, truths, k));
        else skipped.push_back(name + ": only " + std::to_string(classes) + " classes");
      }
      break;
    }
    case prenet::Task::Quantity: {
      std::vector<double> pred, truth;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        pred.push_back(outs[i].quantity);
        truth.push_back(samples[i].labels.quantity);
      }
      rep.set(path, "mse", metrics::mse(pred, truth));
      for (const char* name : {"pearson", "spearman"}) {
        try {
          rep.set(path, name, name[0] == 'p' ? metrics::pearson(pred, truth) : metrics::spearman(pred, truth));
        } catch (const Error& e) {
          skipped.push_back(std::string(name) + ": " + e.what());
        }
      }
      break;
    }
    case prenet::Task::Procedure: {
      std::vector<std::set<int>> truth, pred;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        truth.push_back(samples[i].labels.procedures);
        pred.push_back(procedure_set(outs[i].procedure_probs));
      }
      std::set<int> universe;
      for (int j = 0; j < static_cast<int>(m.cfg.k4); ++j) universe.insert(j);
      const auto f1 = metrics::f1_scores(truth, pred, universe);
      rep.set(path, "f1_micro", f1.micro);
      rep.set(path, "f1_macro", f1.macro);
      break;
    }
  }
  if (!skipped.empty()) rep.skip(path, text::join(skipped, "; "));
}

/// Mean exact match, WER, CER and BLEU of hypotheses against references.
inline json text_scores(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) fail(ErrorCode::LengthError, "references and hypotheses differ in length");
  double em = 0, w = 0, c = 0, b = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    em += metrics::exact_match(refs[i], hyps[i]);
    w += metrics::wer(refs[i], hyps[i]);
    c += metrics::cer(refs[i], hyps[i]);
    b += metrics::bleu(refs[i], hyps[i]);
  }
  const double n = std::max<double>(1.0, static_cast<double>(refs.size()));
  return {{"n", refs.size()}, {"exact_match", em / n}, {"wer", w / n}, {"cer", c / n}, {"bleu", b / n}};
}

// ---------------------------------------------------------------------------
// Normalizer selection

inline std::unique_ptr<normalizer::Normalizer> make_normalizer(const std::string& spec, normalizer::Lexicon lex,
                                                               double threshold) {
  if (spec == "lexicon")
    return std::make_unique<normalizer::LexiconNormalizer>(std::move(lex), normalizer::ExtractConfig{threshold});
  if (spec.starts_with("external:") && spec.size() > 9)
    return std::make_unique<normalizer::ExternalNormalizer>(spec.substr(9), std::move(lex));
  fail(ErrorCode::InvalidArgument, "normalizer must be 'lexicon' or 'external:<cmd>'");
}

// ---------------------------------------------------------------------------
// End to end

inline datagen::GenConfig default_e2e_gen() {
  datagen::GenConfig g;
  g.n_records = 1000;
  g.hr_levels = 2;
  return g;
}

struct E2EConfig {
  std::uint64_t seed = 7;
  datagen::GenConfig gen = default_e2e_gen();
  std::array<unsigned, 3> ratios{3, 1, 1};
  domain::Bounds bounds;
  std::size_t d_t = 64;
  std::size_t d_v = 32;
  std::size_t vocab_buckets = 4096;
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  double threshold = 0.8;
  normalizer::NoiseProfile noisy{0.04, 0.02, 0.02, 2.0, 2};
  std::string normalizer = "lexicon";
  std::string lexicon_path;  // empty: bundled lexicon
  bool keep_artifacts = false;
};

struct E2EResult {
  metrics::MetricReport report;
  std::vector<std::pair<std::string, std::string>> artifacts;  // file name, bytes
};

/// The five models of the grid: multi first, then single:<task> in task order.
inline std::vector<prenet::TaskMode> grid_modes() {
  std::vector<prenet::TaskMode> modes{prenet::TaskMode::multi_task()};
  for (auto t : prenet::kTasks) modes.push_back(prenet::TaskMode::single(t));
  return modes;
}

inline std::string noise_json_key(bool noisy) { return noisy ? "noisy" : "clean"; }

inline E2EResult run_e2e(const E2EConfig& cfg) {
  E2EResult res;
  auto& rep = res.report;
  auto keep = [&](std::string name, std::string bytes) {
    if (cfg.keep_artifacts) res.artifacts.emplace_back(std::move(name), std::move(bytes));
  };
  auto dataset = [](domain::DatasetStage stage, std::uint64_t seed, const std::vector<json>& rows, json meta = json::object()) {
    return domain::render_dataset({stage, domain::kSchemaVersion, seed, std::move(meta)}, rows);
  };

  datagen::GenConfig gen = cfg.gen;
  gen.seed = cfg.seed;
  const auto lex = cfg.lexicon_path.empty() ? normalizer::Lexicon::bundled() : normalizer::Lexicon::load(cfg.lexicon_path);
  const auto norm = make_normalizer(cfg.normalizer, lex, cfg.threshold);

  // datagen -> prep
  const auto records = datagen::gen_incidents(gen);
  const auto complete = domain::filter_complete(records);
  const auto split = domain::split_dataset(complete, {cfg.ratios, seed_for(cfg.seed, 1)});
  const auto range = fit_hr_range(split.train, cfg.bounds);
  const auto train_samples = record_samples(split.train, cfg.bounds, range);
  keep("records.jsonl", dataset(domain::DatasetStage::Text0, gen.seed, domain::rows_of(records)));
  keep("train.jsonl", dataset(domain::DatasetStage::Text0, gen.seed, domain::rows_of(split.train)));
  keep("test.jsonl", dataset(domain::DatasetStage::Text0, gen.seed, domain::rows_of(split.test)));

  // Models train while the evaluation inputs are built.
  const auto modes = grid_modes();
  prenet::PreNetConfig mc;
  mc.vocab_buckets = cfg.vocab_buckets;
  mc.d_t = cfg.d_t;
  mc.d_v = cfg.d_v;
  mc.k1 = gen.k1;
  mc.k2 = gen.k2;
  mc.k4 = gen.k4;
  std::vector<std::future<prenet::PreNetModel>> pending;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    pending.push_back(std::async(std::launch::async, [&, i] {
      prenet::PreNetConfig c = mc;
      c.seed = seed_for(cfg.seed, 10 + i);
      auto m = prenet::make_model(c);
      prenet::TrainConfig tc;
      tc.steps = cfg.steps;
      tc.batch_size = cfg.batch_size;
      tc.lr = cfg.lr;
      tc.mode = modes[i];
      tc.seed = seed_for(cfg.seed, 20 + i);
      prenet::train(m, train_samples, tc);
      return m;
    }));
  }

  // hook: library truth HR against the test split's Vitals1.
  const auto library = datagen::gen_library(gen);
  std::vector<domain::VitalsSeries> lib_truth, lib_est, pool_hr;
  std::vector<domain::KeyedSeries> lib_keyed, est_keyed, pool_keyed;
  double abs_err = 0.0;
  std::size_t windows = 0;
  for (const auto& e : library) {
    lib_truth.push_back(e.true_hr);
    lib_est.push_back(rppg::hr_series(e.wave));
    lib_keyed.push_back({e.key, e.true_hr});
    est_keyed.push_back({e.key, lib_est.back()});
    for (std::size_t w = 0; w < std::min(e.true_hr.values.size(), lib_est.back().values.size()); ++w)
      if (!domain::is_gap(lib_est.back().values[w])) {
        abs_err += std::abs(lib_est.back().values[w] - e.true_hr.values[w]);
        ++windows;
      }
  }
  std::map<std::string, std::string> text1_by_key;
  for (const auto& r : split.test) {
    pool_hr.push_back(domain::derive_prearrival_vitals(r));
    pool_keyed.push_back({r.key, pool_hr.back()});
    text1_by_key[r.key] = domain::derive_prearrival_text(r);
  }
  auto pairing = hooking::hook(lib_truth, pool_hr);
  pairing.library_seed = gen.seed;
  pairing.pool_seed = gen.seed;
  const auto sets = hooking::build_hooked_sets(pairing, lib_keyed, pool_keyed, text1_by_key);
  keep("vitals1.jsonl", dataset(domain::DatasetStage::Vitals1, gen.seed, domain::rows_of(pool_keyed)));
  keep("vitals3.jsonl", dataset(domain::DatasetStage::Vitals3, gen.seed, domain::rows_of(lib_keyed)));
  keep("rppg.jsonl", dataset(domain::DatasetStage::Vitals3, gen.seed, domain::rows_of(est_keyed), {{"source", "rppg"}}));
  keep("pairing.txt", hooking::render_pairing(pairing));
  keep("text2.jsonl", dataset(domain::DatasetStage::Text2, gen.seed, domain::rows_of(sets.text2),
                              {{"unique", sets.unique_text2}}));

  // conversations -> corrupt
  const std::size_t n_templates = normalizer::conversation_templates().size();
  std::vector<const domain::IncidentRecord*> matched;
  std::vector<std::string> refs;
  std::array<std::vector<std::string>, 2> transcripts;
  std::array<std::vector<json>, 2> transcript_rows;
  for (std::size_t i = 0; i < pairing.pairs.size(); ++i) {
    const auto& rec = split.test[pairing.pairs[i].pool_index];
    matched.push_back(&rec);
    refs.push_back(domain::derive_prearrival_text(rec));
    const auto conv = normalizer::synthesize_conversation(rec.primary_symptoms, i % n_templates, seed_for(cfg.seed, 1000 + i));
    const auto noisy = normalizer::corrupt_transcript(conv, cfg.noisy, seed_for(cfg.seed, 2000 + i));
    transcripts[0].push_back(conv.text);
    transcripts[1].push_back(noisy.text);
    transcript_rows[0].push_back(domain::to_json(domain::TextSample{rec.key, conv.text}));
    transcript_rows[1].push_back(domain::to_json(domain::TextSample{rec.key, noisy.text}));
  }
  keep("text3.jsonl", dataset(domain::DatasetStage::Text3, cfg.seed, transcript_rows[0]));
  keep("text5.jsonl", dataset(domain::DatasetStage::Text5, cfg.seed, transcript_rows[1]));

  std::vector<prenet::PreNetModel> models;
  for (auto& f : pending) models.push_back(f.get());
  for (std::size_t i = 0; i < models.size(); ++i)
    keep("model_" + (modes[i].multi ? "multi" : "single-" + prenet::to_string(modes[i].task)) + ".ckpt",
         prenet::checkpoint_bytes(models[i]));

  // normalize -> eval
  json extraction = json::object();
  const std::array<std::string, 2> variants{norm->name(), "none"};
  for (const auto& variant : variants)
    for (int noisy = 0; noisy < 2; ++noisy) {
      const auto& texts = transcripts[static_cast<std::size_t>(noisy)];
      std::vector<std::string> hyps;
      if (variant == "none") {
        hyps = texts;
      } else {
        std::vector<json> rows;
        const auto lists = norm->normalize_batch(texts);
        for (std::size_t i = 0; i < lists.size(); ++i) {
          hyps.push_back(text::join(lists[i]));
          rows.push_back(domain::to_json(domain::TextSample{matched[i]->key, hyps.back()}));
        }
        keep("text7_" + noise_json_key(noisy) + ".jsonl", dataset(domain::DatasetStage::Text7, cfg.seed, rows,
                                                                  {{"normalizer", variant}}));
      }
      extraction[variant][noise_json_key(noisy)] = text_scores(refs, hyps);

      std::vector<prenet::Sample> samples;
      for (std::size_t i = 0; i < pairing.pairs.size(); ++i)
        samples.push_back({text::tokenize(hyps[i]), hr_steps(lib_est[pairing.pairs[i].library_index], cfg.bounds, range),
                           labels_of(*matched[i])});
      for (const char* mode : {"single", "multi"})
        for (std::size_t t = 0; t < prenet::kTasks.size(); ++t) {
          const auto& m = mode[0] == 'm' ? models[0] : models[1 + t];
          score_task(rep, {variant, noise_json_key(noisy), mode, prenet::to_string(prenet::kTasks[t])}, m, samples,
                     prenet::kTasks[t]);
        }
    }

  rep.set_config("seed", cfg.seed);
  rep.set_config("records", {{"generated", records.size()},
                             {"complete", complete.size()},
                             {"train", split.train.size()},
                             {"val", split.val.size()},
                             {"test", split.test.size()}});
  rep.set_config("labels", {{"k1", gen.k1}, {"k2", gen.k2}, {"k4", gen.k4}, {"hr_levels", gen.hr_levels},
                            {"coupling", gen.coupling}});
  rep.set_config("model", {{"d_t", cfg.d_t}, {"d_v", cfg.d_v}, {"vocab_buckets", cfg.vocab_buckets},
                           {"steps", cfg.steps}, {"batch_size", cfg.batch_size}, {"lr", cfg.lr}, {"optimizer", "adam"}});
  rep.set_config("normalizer", {{"name", norm->name()}, {"threshold", cfg.threshold}});
  rep.set_config("noise", {{"sub_rate", cfg.noisy.sub_rate}, {"del_rate", cfg.noisy.del_rate},
                           {"ins_rate", cfg.noisy.ins_rate}, {"symptom_bias", cfg.noisy.symptom_bias},
                           {"max_edits_per_token", cfg.noisy.max_edits_per_token}});
  rep.set_config("metrics", {{"topk", kTopK}, {"bleu_smoothing", "add-one"}, {"bleu_max_n", 4},
                             {"procedure_threshold", kProcedureThreshold}, {"macro_f1_absent_label", 0.0}});
  rep.set_config("eval_set", {{"pairs", pairing.pairs.size()}, {"unique_text2", sets.unique_text2},
                              {"vitals", "rppg"}});
  rep.set_section("extraction", extraction);
  rep.set_section("rppg", {{"windows", windows}, {"mae_bpm", windows ? abs_err / static_cast<double>(windows) : 0.0}});
  keep("report.json", rep.render());
  return res;
}

}  // namespace teleems::pipeline

#endif  // TELEEMS_PIPELINE_HPP
