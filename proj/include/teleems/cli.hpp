#ifndef TELEEMS_CLI_HPP
#define TELEEMS_CLI_HPP

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "teleems/datagen.hpp"
#include "teleems/domain.hpp"
#include "teleems/error.hpp"
#include "teleems/hooking.hpp"
#include "teleems/metrics.hpp"
#include "teleems/normalizer.hpp"
#include "teleems/pipeline.hpp"
#include "teleems/prenet.hpp"
#include "teleems/random.hpp"
#include "teleems/relay.hpp"
#include "teleems/rppg.hpp"

namespace teleems::cli {

namespace fs = std::filesystem;
using domain::json;

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Write to a sibling temporary, then rename over the target.
inline void atomic_write(const std::string& path, std::string_view bytes) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp-" + std::to_string(::getpid());
  domain::write_file(tmp, bytes);
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorCode::Io, "cannot move '" + tmp + "' into place: " + ec.message());
  }
}

inline std::string manifest_path(const std::string& artifact) { return artifact + ".manifest.json"; }

/// Bad arguments that the parser itself cannot see.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Options that name files are recorded as inputs/outputs, not as config.
inline const std::set<std::string>& path_options() {
  static const std::set<std::string> s{"config", "in", "out", "library", "pool", "text1", "sets", "model", "wave-dir",
                                       "script-out", "lexicon", "work", "text", "vitals", "base", "adapters-out"};
  return s;
}

/// Tracks one invocation and writes artifacts with their manifests.
class Run {
 public:
  Run(const CLI::App& sub, std::uint64_t seed)
      : command_(sub.get_name()), seed_(seed), start_(std::chrono::steady_clock::now()) {
    for (const CLI::Option* opt : sub.get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string name = opt->get_lnames()[0];
      if (name == "help" || path_options().contains(name)) continue;
      std::string value;
      if (opt->count() > 0) {
        const auto& r = opt->results();
        value = text::join(r, ",");
        if (opt->get_expected_min() == 0 && value.empty()) value = "true";
      } else {
        value = opt->get_default_str();
      }
      config_[name] = value;
    }
  }

  void input(const std::string& path) {
    inputs_.push_back({{"path", path}, {"hash", hex64(fnv1a(domain::read_file(path)))}});
  }
  void input_bytes(const std::string& path, std::string_view bytes) {
    inputs_.push_back({{"path", path}, {"hash", hex64(fnv1a(bytes))}});
  }

  /// Covers the resolved configuration and the input contents.
  std::string config_hash() const {
    std::string key = config_.dump();
    for (const auto& in : inputs_) key += "|" + in["hash"].get<std::string>();
    return hex64(fnv1a(key));
  }

  void output(const std::string& path, std::string_view bytes, json extra = json::object()) {
    atomic_write(path, bytes);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m = {{"command", command_},
              {"tool_version", kToolVersion},
              {"seed", seed_},
              {"config", config_},
              {"config_hash", config_hash()},
              {"inputs", inputs_},
              {"output", {{"path", path}, {"hash", hex64(fnv1a(bytes))}, {"bytes", bytes.size()}}},
              {"wall_time_s", wall},
              {"extra", std::move(extra)}};
    atomic_write(manifest_path(path), m.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::uint64_t seed_;
  std::chrono::steady_clock::time_point start_;
  json config_ = json::object();
  std::vector<json> inputs_;
};

inline std::array<unsigned, 3> parse_ratios(const std::string& s) {
  std::array<unsigned, 3> out{};
  std::istringstream in(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(in, part, ':')) {
    if (i == 3 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("--ratios must look like 3:1:1");
    out[i++] = static_cast<unsigned>(std::stoul(part));
  }
  if (i != 3) throw UsageError("--ratios must look like 3:1:1");
  return out;
}

inline prenet::Modality parse_modality(const std::string& s) {
  if (s == "fused") return prenet::Modality::Fused;
  if (s == "text") return prenet::Modality::TextOnly;
  if (s == "vitals") return prenet::Modality::VitalsOnly;
  throw UsageError("--modality must be fused, text or vitals");
}

inline prenet::TaskMode mode_arg(const std::string& s) {
  try {
    return prenet::parse_task_mode(s);
  } catch (const Error& e) {
    throw UsageError(std::string("--mode: ") + e.what());
  }
}

inline std::string dataset_text(domain::DatasetStage stage, std::uint64_t seed, const std::vector<json>& rows,
                                json meta = json::object()) {
  return domain::render_dataset({stage, domain::kSchemaVersion, seed, std::move(meta)}, rows);
}

template <typename T, typename F>
std::vector<T> rows_as(const domain::Dataset& ds, F from_json) {
  std::vector<T> out;
  out.reserve(ds.rows.size());
  for (const auto& row : ds.rows) out.push_back(from_json(row));
  return out;
}

// ---------------------------------------------------------------------------
// Options

struct Options {
  std::uint64_t seed = 0;
  std::string config, in, out;

  // datagen
  std::string what = "incidents";
  datagen::GenConfig gen = pipeline::default_e2e_gen();
  std::string wave_dir;
  double bpm = 72.0, duration = 60.0, rate = 30.0;
  std::string format = "f32";
  bool noisy = false;
  normalizer::NoiseProfile noise{0.04, 0.02, 0.02, 2.0, 2};

  // prep / train / eval
  std::string ratios = "3:1:1";
  double low = 20.0, high = 250.0;

  // hook
  std::string library, pool, text1, sets, direction = "library-to-pool";

  // relay-sim
  bool generate = false;
  relay::ScenarioSpec scenario;
  std::size_t window = 8;
  std::string script_out;

  // rppg
  double window_s = 6.0;
  double rate_override = 0.0;

  // normalize
  std::string normalizer = "lexicon", lexicon;
  double threshold = 0.8;
  bool lines = false;

  // train / eval
  std::string mode = "multi", modality = "fused";
  std::size_t steps = 600, batch = 32;
  double lr = 1e-2;
  bool sgd = false;
  prenet::PreNetConfig model{.k1 = 8, .k2 = 6, .k4 = 5};
  std::string base, lora, adapters_out;
  std::size_t rank = 16;
  std::string model_path, text, vitals, variant = "text1", noise_label = "clean";

  // e2e
  std::string work;
};

inline void add_gen_options(CLI::App* s, Options& o) {
  s->add_option("--n-records", o.gen.n_records, "Incident records to generate");
  s->add_option("--k1", o.gen.k1, "Protocol classes");
  s->add_option("--k2", o.gen.k2, "Medication-type classes");
  s->add_option("--k4", o.gen.k4, "Procedure labels");
  s->add_option("--coupling", o.gen.coupling, "Share of records whose labels follow the symptom rule");
  s->add_option("--hr-levels", o.gen.hr_levels, "Heart-rate bands that split each protocol group");
  s->add_option("--incomplete-rate", o.gen.incomplete_rate, "Share of records missing a label or HR");
  s->add_option("--snr-db", o.gen.snr_db, "Library waveform SNR in dB (inf for clean)");
  s->add_option("--library-size", o.gen.library_size, "Library subjects");
}

inline void add_noise_options(CLI::App* s, Options& o) {
  s->add_option("--sub-rate", o.noise.sub_rate, "Per-letter substitution rate");
  s->add_option("--del-rate", o.noise.del_rate, "Per-letter deletion rate");
  s->add_option("--ins-rate", o.noise.ins_rate, "Per-letter insertion rate");
  s->add_option("--symptom-bias", o.noise.symptom_bias, "Rate multiplier inside symptom spans");
  s->add_option("--max-edits", o.noise.max_edits_per_token, "Edit cap per token");
}

inline void add_model_options(CLI::App* s, Options& o) {
  s->add_option("--d-t", o.model.d_t, "Text feature size");
  s->add_option("--d-v", o.model.d_v, "Vitals feature size");
  s->add_option("--buckets", o.model.vocab_buckets, "Token hash buckets");
  s->add_option("--k1", o.model.k1, "Protocol classes");
  s->add_option("--k2", o.model.k2, "Medication-type classes");
  s->add_option("--k4", o.model.k4, "Procedure labels");
}

inline void build_app(CLI::App& app, Options& o) {
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", kToolVersion);
  app.option_defaults()->always_capture_default();
  auto common = [&](CLI::App* s) {
    s->add_option("--seed", o.seed, "Seed for all randomness");
    s->add_option("--config", o.config, "key=value file; flags override it");
  };

  auto* s = app.add_subcommand("datagen", "Generate incidents, a PPG library, one waveform, or conversations");
  common(s);
  s->add_option("--what", o.what, "incidents | library | wave | conversations")
      ->check(CLI::IsMember({"incidents", "library", "wave", "conversations"}));
  s->add_option("--out", o.out, "Output file")->required();
  add_gen_options(s, o);
  s->add_option("--wave-dir", o.wave_dir, "Library waveform directory (default: <out dir>/waves)");
  s->add_option("--bpm", o.bpm, "Constant heart rate for --what wave");
  s->add_option("--duration", o.duration, "Waveform length in seconds");
  s->add_option("--rate", o.rate, "Waveform sample rate in Hz");
  s->add_option("--format", o.format, "Waveform encoding")->check(CLI::IsMember({"f32", "text"}));
  s->add_option("--in", o.in, "Records for --what conversations (generated when absent)");
  s->add_flag("--noisy", o.noisy, "Corrupt conversations (Text5)");
  add_noise_options(s, o);

  s = app.add_subcommand("prep", "Filter, split and derive pre-arrival sets");
  common(s);
  s->add_option("--in", o.in, "Incident records")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--ratios", o.ratios, "train:val:test");
  s->add_option("--low", o.low, "Lower HR outlier bound");
  s->add_option("--high", o.high, "Upper HR outlier bound");

  s = app.add_subcommand("hook", "Pair library HR sequences with pool sequences by moments");
  common(s);
  s->add_option("--library", o.library, "Library HR (Vitals3)")->required();
  s->add_option("--pool", o.pool, "Pool HR (Vitals1)")->required();
  s->add_option("--out", o.out, "Pairing file")->required();
  s->add_option("--direction", o.direction, "library-to-pool | pool-to-library")
      ->check(CLI::IsMember({"library-to-pool", "pool-to-library"}));
  s->add_option("--text1", o.text1, "Text1 set for building Vitals2/Vitals3/Text2");
  s->add_option("--sets", o.sets, "Directory for the hooked sets");

  s = app.add_subcommand("relay-sim", "Run a relay scenario script");
  common(s);
  s->add_option("--in", o.in, "Scenario script");
  s->add_flag("--generate", o.generate, "Generate a seeded scenario instead of reading one");
  s->add_option("--packets", o.scenario.packets, "Generated media packets");
  s->add_option("--publishers", o.scenario.publishers, "Generated publishers");
  s->add_option("--subscribers", o.scenario.subscribers, "Generated subscribers");
  s->add_option("--reorder", o.scenario.reorder_fraction, "Share of displaced packets");
  s->add_option("--window", o.window, "Reorder window in packets");
  s->add_option("--script-out", o.script_out, "Save the generated script");
  s->add_option("--out", o.out, "Delivery trace")->required();

  s = app.add_subcommand("rppg", "Estimate heart rate per window from a PPG waveform");
  common(s);
  s->add_option("--in", o.in, "Waveform (binary f32 or 'time value' text)")->required();
  s->add_option("--rate", o.rate_override, "Override the sample rate in Hz");
  s->add_option("--window", o.window_s, "Window length in seconds");
  s->add_option("--out", o.out, "HR series dataset (stdout when absent)");

  s = app.add_subcommand("normalize", "Extract canonical symptoms from transcripts");
  common(s);
  s->add_option("--in", o.in, "Transcripts (key, text)");
  s->add_option("--out", o.out, "Symptom sentences (Text7)");
  s->add_option("--normalizer", o.normalizer, "lexicon | external:<cmd>");
  s->add_option("--lexicon", o.lexicon, "Lexicon file (bundled when absent)");
  s->add_option("--threshold", o.threshold, "Match threshold")->check(CLI::Range(0.0, 1.0));
  s->add_flag("--lines", o.lines, "Escaped transcript lines on stdin, one sentence per line on stdout");

  s = app.add_subcommand("train", "Train a PreNet model");
  common(s);
  s->add_option("--in", o.in, "Training records")->required();
  s->add_option("--out", o.out, "Checkpoint")->required();
  s->add_option("--mode", o.mode, "multi | single:<task>");
  s->add_option("--modality", o.modality, "fused | text | vitals");
  s->add_option("--steps", o.steps, "Optimizer steps");
  s->add_option("--batch", o.batch, "Batch size");
  s->add_option("--lr", o.lr, "Learning rate");
  s->add_flag("--sgd", o.sgd, "Plain gradient descent instead of Adam");
  s->add_option("--low", o.low, "Lower HR outlier bound");
  s->add_option("--high", o.high, "Upper HR outlier bound");
  add_model_options(s, o);
  s->add_option("--base", o.base, "Start from this checkpoint");
  s->add_option("--lora", o.lora, "Comma-separated layers to adapt (needs --base)");
  s->add_option("--rank", o.rank, "Adapter rank");
  s->add_option("--adapters-out", o.adapters_out, "Also write the adapters alone");

  s = app.add_subcommand("eval", "Score a model into a metric report");
  common(s);
  s->add_option("--model", o.model_path, "Checkpoint")->required();
  s->add_option("--in", o.in, "Evaluation records")->required();
  s->add_option("--out", o.out, "Report")->required();
  s->add_option("--mode", o.mode, "Mode the model was trained for");
  s->add_option("--modality", o.modality, "fused | text | vitals");
  s->add_option("--text", o.text, "Replace record text by these samples (key, text)");
  s->add_option("--vitals", o.vitals, "Replace record HR by these series (key, series)");
  s->add_option("--variant", o.variant, "Report label for the text source");
  s->add_option("--noise", o.noise_label, "Report label for the noise profile");

  s = app.add_subcommand("e2e", "Full chain from generation to the metric report");
  common(s);
  s->add_option("--out", o.out, "Report")->required();
  s->add_option("--work", o.work, "Keep intermediate artifacts here");
  add_gen_options(s, o);
  add_noise_options(s, o);
  s->add_option("--ratios", o.ratios, "train:val:test");
  s->add_option("--steps", o.steps, "Optimizer steps per model");
  s->add_option("--batch", o.batch, "Batch size");
  s->add_option("--lr", o.lr, "Learning rate");
  s->add_option("--d-t", o.model.d_t, "Text feature size");
  s->add_option("--d-v", o.model.d_v, "Vitals feature size");
  s->add_option("--buckets", o.model.vocab_buckets, "Token hash buckets");
  s->add_option("--normalizer", o.normalizer, "lexicon | external:<cmd>");
  s->add_option("--lexicon", o.lexicon, "Lexicon file (bundled when absent)");
  s->add_option("--threshold", o.threshold, "Match threshold")->check(CLI::Range(0.0, 1.0));
}

// ---------------------------------------------------------------------------
// Subcommands

inline normalizer::Lexicon load_lexicon(const std::string& path, Run* run) {
  if (path.empty()) return normalizer::Lexicon::bundled();
  if (run) run->input(path);
  return normalizer::Lexicon::load(path);
}

inline std::vector<domain::IncidentRecord> read_records(const std::string& path, Run& run) {
  run.input(path);
  return rows_as<domain::IncidentRecord>(domain::read_dataset(path), domain::record_from_json);
}

inline int cmd_datagen(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  datagen::GenConfig gen = o.gen;
  gen.seed = o.seed;
  if (o.what == "incidents") {
    const auto rs = datagen::gen_incidents(gen);
    run.output(o.out, dataset_text(domain::DatasetStage::Text0, o.seed, domain::rows_of(rs)),
               {{"records", rs.size()}, {"complete", domain::filter_complete(rs).size()}});
    out << "wrote " << rs.size() << " records to " << o.out << "\n";
  } else if (o.what == "library") {
    gen.library_rate = o.rate;
    gen.library_seconds = o.duration;
    const auto lib = datagen::gen_library(gen);
    const fs::path dir = o.wave_dir.empty() ? fs::path(o.out).parent_path() / "waves" : fs::path(o.wave_dir);
    std::vector<json> rows;
    for (const auto& e : lib) {
      rows.push_back(domain::to_json(domain::KeyedSeries{e.key, e.true_hr}));
      run.output((dir / (e.key + ".f32")).string(), rppg::encode_wave_f32(e.wave),
                 {{"key", e.key}, {"true_hr", domain::values_to_json(e.true_hr.values)}});
    }
    run.output(o.out, dataset_text(domain::DatasetStage::Vitals3, o.seed, rows, {{"waves", dir.string()}}),
               {{"entries", lib.size()}});
    out << "wrote " << lib.size() << " library entries to " << o.out << "\n";
  } else if (o.what == "wave") {
    const auto g = datagen::gen_ppg(datagen::HrProfile::constant(o.bpm, o.duration), o.rate, o.duration, o.gen.snr_db,
                                    o.seed);
    run.output(o.out, o.format == "f32" ? rppg::encode_wave_f32(g.wave) : rppg::encode_wave_text(g.wave),
               {{"bpm", o.bpm}, {"true_bpm", g.true_bpm}});
    out << "wrote " << g.wave.samples.size() << " samples to " << o.out << "\n";
  } else {
    std::vector<domain::IncidentRecord> rs;
    if (o.in.empty()) rs = datagen::gen_incidents(gen);
    else rs = read_records(o.in, run);
    const auto complete = domain::filter_complete(rs);
    const std::size_t n_templates = normalizer::conversation_templates().size();
    std::vector<json> rows;
    for (std::size_t i = 0; i < complete.size(); ++i) {
      auto t = normalizer::synthesize_conversation(complete[i].primary_symptoms, i % n_templates,
                                                   seed_for(o.seed, 1000 + i));
      if (o.noisy) t = normalizer::corrupt_transcript(t, o.noise, seed_for(o.seed, 2000 + i));
      rows.push_back(domain::to_json(domain::TextSample{complete[i].key, t.text}));
    }
    run.output(o.out, dataset_text(o.noisy ? domain::DatasetStage::Text5 : domain::DatasetStage::Text3, o.seed, rows),
               {{"conversations", rows.size()}});
    out << "wrote " << rows.size() << " conversations to " << o.out << "\n";
  }
  return 0;
}

inline int cmd_prep(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  const auto ratios = parse_ratios(o.ratios);
  const auto rs = read_records(o.in, run);
  const auto complete = domain::filter_complete(rs);
  const auto split = domain::split_dataset(complete, {ratios, o.seed});
  const json counts = {{"input", rs.size()},
                       {"complete", complete.size()},
                       {"train", split.train.size()},
                       {"val", split.val.size()},
                       {"test", split.test.size()}};
  const fs::path dir(o.out);
  auto emit = [&](const char* name, const std::vector<domain::IncidentRecord>& part) {
    run.output((dir / name).string(), dataset_text(domain::DatasetStage::Text0, o.seed, domain::rows_of(part)),
               {{"split_sizes", counts}});
  };
  emit("train.jsonl", split.train);
  emit("val.jsonl", split.val);
  emit("test.jsonl", split.test);

  std::vector<json> text1, vitals1;
  for (const auto& r : complete) text1.push_back(domain::to_json(domain::TextSample{r.key, domain::derive_prearrival_text(r)}));
  for (const auto& r : split.test)
    vitals1.push_back(domain::to_json(domain::KeyedSeries{r.key, domain::derive_prearrival_vitals(r)}));
  run.output((dir / "text1.jsonl").string(), dataset_text(domain::DatasetStage::Text1, o.seed, text1),
             {{"split_sizes", counts}});
  run.output((dir / "vitals1.jsonl").string(), dataset_text(domain::DatasetStage::Vitals1, o.seed, vitals1),
             {{"split_sizes", counts}, {"split", "test"}});
  out << "split " << split.train.size() << "/" << split.val.size() << "/" << split.test.size() << " from "
      << complete.size() << " complete records\n";
  return 0;
}

inline int cmd_hook(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  if (!o.sets.empty() && o.text1.empty()) throw UsageError("--sets needs --text1");
  run.input(o.library);
  run.input(o.pool);
  const auto lib_ds = domain::read_dataset(o.library);
  const auto pool_ds = domain::read_dataset(o.pool);
  const auto lib = rows_as<domain::KeyedSeries>(lib_ds, domain::keyed_series_from_json);
  const auto pool = rows_as<domain::KeyedSeries>(pool_ds, domain::keyed_series_from_json);
  std::vector<domain::VitalsSeries> a, b;
  for (const auto& k : lib) a.push_back(k.series);
  for (const auto& k : pool) b.push_back(k.series);
  auto pairing = hooking::hook(a, b, o.direction == "library-to-pool" ? hooking::HookDirection::LibraryToPool
                                                                       : hooking::HookDirection::PoolToLibrary);
  pairing.library_tag = lib_ds.header.stage;
  pairing.pool_tag = pool_ds.header.stage;
  pairing.library_seed = lib_ds.header.seed;
  pairing.pool_seed = pool_ds.header.seed;
  run.output(o.out, hooking::render_pairing(pairing), {{"pairs", pairing.pairs.size()}});

  if (!o.sets.empty()) {
    run.input(o.text1);
    std::map<std::string, std::string> text1;
    for (const auto& t : rows_as<domain::TextSample>(domain::read_dataset(o.text1), domain::text_sample_from_json))
      text1[t.key] = t.text;
    const auto sets = hooking::build_hooked_sets(pairing, lib, pool, text1);
    const fs::path dir(o.sets);
    const json extra = {{"pairs", pairing.pairs.size()}, {"unique_text2", sets.unique_text2}};
    run.output((dir / "vitals2.jsonl").string(),
               dataset_text(domain::DatasetStage::Vitals2, o.seed, domain::rows_of(sets.vitals2)), extra);
    run.output((dir / "vitals3.jsonl").string(),
               dataset_text(domain::DatasetStage::Vitals3, o.seed, domain::rows_of(sets.vitals3)), extra);
    run.output((dir / "text2.jsonl").string(),
               dataset_text(domain::DatasetStage::Text2, o.seed, domain::rows_of(sets.text2), {{"unique", sets.unique_text2}}),
               extra);
    out << sets.unique_text2 << " unique Text2 samples among " << sets.text2.size() << "\n";
  }
  out << "hooked " << pairing.pairs.size() << " pairs\n";
  return 0;
}

inline int cmd_relay(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  if (o.generate == !o.in.empty()) throw UsageError("give exactly one of --in and --generate");
  std::string script;
  if (o.generate) {
    o.scenario.seed = o.seed;
    script = relay::generate_scenario(o.scenario).script;
    if (!o.script_out.empty()) run.output(o.script_out, script);
  } else {
    script = domain::read_file(o.in);
    run.input_bytes(o.in, script);
  }
  const auto trace = relay::run_scenario(script, o.window);
  json counters = json::object();
  for (const auto& [kind, c] : trace.counters)
    counters[std::string(relay::to_string(kind))] = {
        {"published", c.published}, {"forwarded", c.forwarded}, {"delivered", c.delivered}, {"dropped", c.dropped}};
  run.output(o.out, trace.render(), {{"trace_hash", hex64(trace.hash())}, {"counters", counters},
                                     {"deliveries", trace.records.size()}});
  out << "trace-hash " << hex64(trace.hash()) << " deliveries " << trace.records.size() << "\n";
  return 0;
}

inline int cmd_rppg(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  run.input(o.in);
  rppg::SpectralConfig sc;
  sc.window_seconds = o.window_s;
  rppg::FileSource src(o.in, o.rate_override);
  const auto est = rppg::hr_estimates(src, sc);
  for (const auto& e : est) {
    if (e) out << e->window_index << ' ' << e->bpm << "\n";
    else out << "gap\n";
  }
  if (!o.out.empty()) {
    run.output(o.out, dataset_text(domain::DatasetStage::Vitals3, o.seed, rppg::hr_rows(est), {{"source", "rppg"}}),
               {{"windows", est.size()}});
  }
  return 0;
}

inline int cmd_normalize(const CLI::App& sub, Options& o, std::istream& in, std::ostream& out) {
  if (o.lines) {
    const normalizer::LexiconNormalizer norm(load_lexicon(o.lexicon, nullptr), normalizer::ExtractConfig{o.threshold});
    std::string line;
    while (std::getline(in, line)) out << normalizer::escape_line(text::join(norm.normalize(normalizer::unescape_line(line)))) << "\n";
    out.flush();
    return 0;
  }
  if (o.in.empty() || o.out.empty()) throw UsageError("normalize needs --in and --out (or --lines)");
  Run run(sub, o.seed);
  const auto lex = load_lexicon(o.lexicon, &run);
  const auto norm = pipeline::make_normalizer(o.normalizer, lex, o.threshold);
  run.input(o.in);
  const auto samples = rows_as<domain::TextSample>(domain::read_dataset(o.in), domain::text_sample_from_json);
  std::vector<std::string> texts;
  for (const auto& s : samples) texts.push_back(s.text);
  const auto lists = norm->normalize_batch(texts);
  std::vector<json> rows;
  for (std::size_t i = 0; i < samples.size(); ++i)
    rows.push_back(domain::to_json(domain::TextSample{samples[i].key, text::join(lists[i])}));
  run.output(o.out, dataset_text(domain::DatasetStage::Text7, o.seed, rows, {{"normalizer", norm->name()}}),
             {{"transcripts", rows.size()}});
  out << "normalized " << rows.size() << " transcripts with " << norm->name() << "\n";
  return 0;
}

inline std::string norm_path(const std::string& model) { return model + ".norm.json"; }

inline int cmd_train(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  const auto mode = mode_arg(o.mode);
  const auto modality = parse_modality(o.modality);
  if (!o.lora.empty() && o.base.empty()) throw UsageError("--lora needs --base");
  const auto rs = domain::filter_complete(read_records(o.in, run));
  const domain::Bounds bounds{o.low, o.high};
  const auto range = pipeline::fit_hr_range(rs, bounds);
  const auto samples = pipeline::record_samples(rs, bounds, range);

  prenet::PreNetModel m;
  if (o.base.empty()) {
    prenet::PreNetConfig c = o.model;
    c.seed = seed_for(o.seed, 10);
    m = prenet::make_model(c);
  } else {
    run.input(o.base);
    m = prenet::load_checkpoint(o.base);
  }
  if (!o.lora.empty()) {
    std::vector<std::string> layers;
    std::istringstream ls(o.lora);
    for (std::string l; std::getline(ls, l, ',');) layers.push_back(l);
    prenet::lora_attach(m, layers, o.rank, seed_for(o.seed, 11));
  }
  prenet::TrainConfig tc;
  tc.steps = o.steps;
  tc.batch_size = o.batch;
  tc.lr = o.lr;
  tc.adam = !o.sgd;
  tc.mode = mode;
  tc.modality = modality;
  tc.seed = seed_for(o.seed, 20);
  const auto losses = prenet::train(m, samples, tc);
  const json extra = {{"samples", samples.size()},
                      {"mode", mode.str()},
                      {"first_loss", losses.empty() ? 0.0 : losses.front()},
                      {"final_loss", losses.empty() ? 0.0 : losses.back()},
                      {"trainable", prenet::lora_trainable_count(m)}};
  // Adapters are folded in so the checkpoint stands alone; --adapters-out keeps them separate.
  run.output(o.out, prenet::checkpoint_bytes(o.lora.empty() ? m : prenet::lora_merge(m)), extra);
  run.output(norm_path(o.out), json{{"low", o.low}, {"high", o.high}, {"min", range.min}, {"max", range.max},
                                    {"mode", mode.str()}}.dump(2) + "\n");
  if (!o.adapters_out.empty()) run.output(o.adapters_out, prenet::adapter_bytes(m), extra);
  out << "trained " << o.steps << " steps, final loss " << (losses.empty() ? 0.0 : losses.back()) << "\n";
  return 0;
}

inline int cmd_eval(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  const auto mode = mode_arg(o.mode);
  const auto modality = parse_modality(o.modality);
  run.input(o.model_path);
  run.input(norm_path(o.model_path));
  const auto m = prenet::load_checkpoint(o.model_path);
  const auto nj = json::parse(domain::read_file(norm_path(o.model_path)));
  const domain::Bounds bounds{nj.at("low").get<double>(), nj.at("high").get<double>()};
  const domain::NormRange range{nj.at("min").get<double>(), nj.at("max").get<double>()};
  const auto rs = domain::filter_complete(read_records(o.in, run));

  std::map<std::string, std::string> text_by_key;
  if (!o.text.empty()) {
    run.input(o.text);
    for (const auto& t : rows_as<domain::TextSample>(domain::read_dataset(o.text), domain::text_sample_from_json))
      text_by_key[t.key] = t.text;
  }
  std::map<std::string, domain::VitalsSeries> vitals_by_key;
  if (!o.vitals.empty()) {
    run.input(o.vitals);
    for (const auto& k : rows_as<domain::KeyedSeries>(domain::read_dataset(o.vitals), domain::keyed_series_from_json))
      vitals_by_key[k.key] = k.series;
  }
  std::vector<prenet::Sample> samples;
  for (const auto& r : rs) {
    auto s = pipeline::record_sample(r, bounds, range);
    if (!o.text.empty()) {
      auto it = text_by_key.find(r.key);
      if (it == text_by_key.end()) fail(ErrorCode::BrokenKeyLink, "no text for record '" + r.key + "'");
      s.tokens = text::tokenize(it->second);
    }
    if (!o.vitals.empty()) {
      auto it = vitals_by_key.find(r.key);
      if (it == vitals_by_key.end()) fail(ErrorCode::BrokenKeyLink, "no vitals for record '" + r.key + "'");
      s.vitals = pipeline::hr_steps(it->second, bounds, range);
    }
    samples.push_back(std::move(s));
  }

  metrics::MetricReport rep;
  const std::string mode_label = mode.multi ? "multi" : "single";
  for (auto t : prenet::kTasks) {
    const metrics::MetricReport::Path path{o.variant, o.noise_label, mode_label, prenet::to_string(t)};
    if (mode.active(t)) pipeline::score_task(rep, path, m, samples, t, modality);
    else rep.skip(path, "model trained for " + mode.str());
  }
  rep.set_config("mode", mode.str());
  rep.set_config("modality", prenet::to_string(modality));
  rep.set_config("samples", samples.size());
  rep.set_config("metrics", {{"topk", pipeline::kTopK}, {"bleu_smoothing", "add-one"},
                             {"procedure_threshold", pipeline::kProcedureThreshold}, {"macro_f1_absent_label", 0.0}});
  run.output(o.out, rep.render(), {{"report_hash", hex64(rep.hash())}});
  out << "report-hash " << hex64(rep.hash()) << "\n";
  return 0;
}

inline int cmd_e2e(const CLI::App& sub, Options& o, std::ostream& out) {
  Run run(sub, o.seed);
  pipeline::E2EConfig c;
  c.seed = o.seed;
  c.gen = o.gen;
  c.ratios = parse_ratios(o.ratios);
  c.d_t = o.model.d_t;
  c.d_v = o.model.d_v;
  c.vocab_buckets = o.model.vocab_buckets;
  c.steps = o.steps;
  c.batch_size = o.batch;
  c.lr = o.lr;
  c.threshold = o.threshold;
  c.noisy = o.noise;
  c.normalizer = o.normalizer;
  c.lexicon_path = o.lexicon;
  if (!o.lexicon.empty()) run.input(o.lexicon);
  c.keep_artifacts = !o.work.empty();
  const auto res = pipeline::run_e2e(c);
  for (const auto& [name, bytes] : res.artifacts) run.output((fs::path(o.work) / name).string(), bytes);
  run.output(o.out, res.report.render(), {{"report_hash", hex64(res.report.hash())},
                                          {"evaluated", res.report.evaluated()},
                                          {"skipped", res.report.skipped()}});
  out << "report-hash " << hex64(res.report.hash()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry

inline std::string option_flag(const std::string& key) {
  std::string k = key;
  std::replace(k.begin(), k.end(), '_', '-');
  return "--" + k;
}

/// Values from the subcommand's --config file, as arguments for every option
/// not given on the command line.
inline std::vector<std::string> config_args(CLI::App& sub, const std::string& path) {
  std::vector<std::string> args;
  for (const auto& item : CLI::ConfigINI().from_file(path)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub.get_name()))
      throw UsageError("config key '" + item.fullname() + "' does not belong to " + sub.get_name());
    const std::string flag = option_flag(item.name);
    CLI::Option* opt = sub.get_option_no_throw(flag);
    if (!opt || item.name == "config") throw UsageError("unknown config key '" + item.name + "'");
    if (opt->count() > 0) continue;
    if (opt->get_expected_min() == 0) {
      if (item.inputs.empty() || CLI::detail::to_flag_value(item.inputs.front()) > 0) args.push_back(flag);
      continue;
    }
    args.push_back(flag);
    args.insert(args.end(), item.inputs.begin(), item.inputs.end());
  }
  return args;
}

inline int dispatch(CLI::App& app, Options& o, std::istream& in, std::ostream& out) {
  CLI::App* sub = app.get_subcommands().at(0);
  const std::string& name = sub->get_name();
  if (name == "datagen") return cmd_datagen(*sub, o, out);
  if (name == "prep") return cmd_prep(*sub, o, out);
  if (name == "hook") return cmd_hook(*sub, o, out);
  if (name == "relay-sim") return cmd_relay(*sub, o, out);
  if (name == "rppg") return cmd_rppg(*sub, o, out);
  if (name == "normalize") return cmd_normalize(*sub, o, in, out);
  if (name == "train") return cmd_train(*sub, o, out);
  if (name == "eval") return cmd_eval(*sub, o, out);
  return cmd_e2e(*sub, o, out);
}

/// Exit status: 0 success, 1 runtime failure, 2 usage error.
inline int run(std::vector<std::string> args, std::istream& in = std::cin, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  auto parse = [](CLI::App& app, std::vector<std::string> a) {
    std::reverse(a.begin(), a.end());
    app.parse(a);
  };
  Options o;
  auto app = std::make_unique<CLI::App>("Pre-arrival EMS toolkit", "teleems");
  build_app(*app, o);
  try {
    parse(*app, args);
    CLI::App* sub = app->get_subcommands().at(0);
    if (!o.config.empty()) {
      const auto extra = config_args(*sub, o.config);
      if (!extra.empty()) {
        std::vector<std::string> merged;
        auto at = std::find(args.begin(), args.end(), sub->get_name());
        merged.assign(args.begin(), at + 1);
        merged.insert(merged.end(), extra.begin(), extra.end());
        merged.insert(merged.end(), at + 1, args.end());
        o = Options{};
        app = std::make_unique<CLI::App>("Pre-arrival EMS toolkit", "teleems");
        build_app(*app, o);
        parse(*app, merged);
      }
    }
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app->exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app->exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app->exit(e, out, err);
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    return dispatch(*app, o, in, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int run(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }

}  // namespace teleems::cli

#endif  // TELEEMS_CLI_HPP
