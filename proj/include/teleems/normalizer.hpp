#ifndef TELEEMS_NORMALIZER_HPP
#define TELEEMS_NORMALIZER_HPP

// Symptom extraction and normalization against a lexicon, conversation
// synthesis, transcription-noise simulation and augmentation pairs.

#include <unistd.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "teleems/domain.hpp"
#include "teleems/error.hpp"
#include "teleems/random.hpp"
#include "teleems/text.hpp"

namespace teleems::normalizer {

// ---------------------------------------------------------------------------
// Lexicon

/// Starter vocabulary, version 1. Mirrored in data/lexicon.txt.
inline constexpr std::array<std::string_view, 100> kBundledTerms = {
    "abdominal pain",     "agitation",         "allergic reaction",     "altered mental status", "amnesia",
    "anaphylaxis",        "anxiety",           "apnea",                 "ards",                  "arm pain",
    "asthma attack",      "back pain",         "blood in stool",        "blurred vision",        "bradycardia",
    "burns",              "cardiac arrest",    "chest pain",            "chest tightness",       "chills",
    "choking",            "confusion",         "congestion",            "constipation",          "convulsions",
    "cough",              "cyanosis",          "dehydration",           "diaphoresis",           "diarrhea",
    "difficulty swallowing", "dizziness",      "drowsiness",            "dysuria",               "ear pain",
    "edema",              "electrocution",     "epistaxis",             "eye pain",              "facial droop",
    "fainting",           "fall injury",       "fatigue",               "fever",                 "flank pain",
    "fracture",           "head injury",       "headache",              "hearing loss",          "hematemesis",
    "hemoptysis",         "hip pain",          "hives",                 "hyperglycemia",         "hypertension",
    "hypothermia",        "hypoxia",           "intoxication",          "itching",               "jaw pain",
    "joint pain",         "laceration",        "lethargy",              "lightheadedness",       "loss of consciousness",
    "low blood sugar",    "muscle cramps",     "muscle weakness",       "nausea",                "neck pain",
    "numbness",           "overdose",          "pale skin",             "palpitations",          "paralysis",
    "pelvic pain",        "rash",              "respiratory distress",  "seizure",               "shortness of breath",
    "slurred speech",     "sore throat",       "stridor",               "stroke symptoms",       "swelling",
    "syncope",            "tachycardia",       "tingling",              "tremor",                "unresponsive",
    "urinary retention",  "vaginal bleeding",  "vertigo",               "vomiting",              "body aches",
    "wheezing",           "dog bite",          "sweating",              "toothache",             "leg pain",
};

/// Canonical symptom vocabulary: lowercase, single-space separated, unique.
/// Entries are kept sorted so lexicographic tie-breaks are a scan order.
class Lexicon {
 public:
  explicit Lexicon(std::vector<std::string> terms) {
    for (auto& t : terms) {
      if (t.empty() || t != text::normalize_spaces(t))
        fail(ErrorCode::InvalidArgument, "lexicon term '" + t + "' is not lowercase single-spaced");
    }
    std::sort(terms.begin(), terms.end());
    if (std::adjacent_find(terms.begin(), terms.end()) != terms.end())
      fail(ErrorCode::InvalidArgument, "duplicate lexicon term");
    if (terms.empty()) fail(ErrorCode::InvalidArgument, "empty lexicon");
    entries_ = std::move(terms);
    for (const auto& t : entries_)
      max_ngram_ = std::max(max_ngram_, static_cast<std::size_t>(std::count(t.begin(), t.end(), ' ') + 1));
  }

  static Lexicon bundled() { return Lexicon(std::vector<std::string>(kBundledTerms.begin(), kBundledTerms.end())); }

  /// One term per line; blank lines and `#` comments are ignored.
  static Lexicon parse(std::string_view content) {
    std::vector<std::string> terms;
    std::size_t pos = 0;
    while (pos < content.size()) {
      std::size_t end = content.find('\n', pos);
      if (end == std::string_view::npos) end = content.size();
      std::string line(content.substr(pos, end - pos));
      pos = end + 1;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = text::normalize_spaces(line);
      if (!line.empty()) terms.push_back(line);
    }
    return Lexicon(std::move(terms));
  }

  static Lexicon load(const std::string& path) { return parse(domain::read_file(path)); }

  const std::vector<std::string>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t max_ngram() const { return max_ngram_; }
  bool contains(std::string_view term) const {
    return std::binary_search(entries_.begin(), entries_.end(), term, std::less<>{});
  }

 private:
  std::vector<std::string> entries_;
  std::size_t max_ngram_ = 1;
};

// ---------------------------------------------------------------------------
// Extraction

struct Transcript {
  std::string text;
  domain::DatasetStage stage = domain::DatasetStage::Text3;
  std::vector<std::string> symptoms;  // injected ground truth, when known
};

struct TokenSpan {
  std::size_t begin = 0;  // token index, inclusive
  std::size_t end = 0;    // exclusive
  bool operator==(const TokenSpan&) const = default;
};

struct ExtractionResult {
  std::vector<std::string> symptoms;
  std::vector<TokenSpan> spans;
  std::vector<double> scores;

  /// Symptoms joined by single spaces, the console/output format.
  std::string sentence() const { return text::join(symptoms); }
};

struct ExtractConfig {
  double threshold = 0.8;
  /// Spans may be this many tokens longer than the longest lexicon entry,
  /// so split words ("shown up" for "shortness") can still match.
  std::size_t ngram_slack = 1;
};

/// Fuzzy lexicon spotting. Every n-gram of the tokenized transcript is scored
/// against every entry by 1 - lev / max(len); spans reaching the threshold
/// are accepted greedily by (score desc, length desc, start asc, entry asc)
/// while they do not overlap an accepted span. Output follows transcript
/// order, each symptom once.
inline ExtractionResult extract_and_normalize(std::string_view transcript, const Lexicon& lex,
                                              const ExtractConfig& cfg = {}) {
  if (!(cfg.threshold > 0.0 && cfg.threshold <= 1.0)) fail(ErrorCode::InvalidArgument, "threshold must be in (0, 1]");
  const auto tokens = text::tokenize(transcript);
  struct Candidate {
    std::size_t begin, len;
    std::size_t entry;
    double score;
  };
  std::vector<Candidate> cands;
  const std::size_t max_len = lex.max_ngram() + cfg.ngram_slack;
  const auto& entries = lex.entries();
  std::string span;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    span.clear();
    for (std::size_t n = 1; n <= max_len && i + n <= tokens.size(); ++n) {
      if (n > 1) span.push_back(' ');
      span += tokens[i + n - 1];
      double best = -1.0;
      std::size_t best_entry = 0;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        const std::size_t a = span.size(), b = entries[e].size();
        const double longest = static_cast<double>(std::max(a, b));
        // Edit distance is at least the length difference.
        const double diff = static_cast<double>(a > b ? a - b : b - a);
        if (1.0 - diff / longest < cfg.threshold - 1e-12) continue;
        const double s = text::edit_similarity(span, entries[e]);
        if (s > best) {
          best = s;
          best_entry = e;
        }
      }
      if (best >= cfg.threshold - 1e-12) cands.push_back({i, n, best_entry, best});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.len != y.len) return x.len > y.len;
    if (x.begin != y.begin) return x.begin < y.begin;
    return x.entry < y.entry;
  });
  std::vector<bool> taken(tokens.size(), false);
  std::vector<Candidate> accepted;
  for (const auto& c : cands) {
    bool free = true;
    for (std::size_t k = c.begin; k < c.begin + c.len && free; ++k) free = !taken[k];
    if (!free) continue;
    for (std::size_t k = c.begin; k < c.begin + c.len; ++k) taken[k] = true;
    accepted.push_back(c);
  }
  std::sort(accepted.begin(), accepted.end(), [](const Candidate& x, const Candidate& y) { return x.begin < y.begin; });
  ExtractionResult out;
  std::set<std::size_t> seen;
  for (const auto& c : accepted) {
    if (!seen.insert(c.entry).second) continue;
    out.symptoms.push_back(entries[c.entry]);
    out.spans.push_back({c.begin, c.begin + c.len});
    out.scores.push_back(c.score);
  }
  return out;
}

inline ExtractionResult extract_and_normalize(std::string_view transcript, const Lexicon& lex, double threshold) {
  return extract_and_normalize(transcript, lex, ExtractConfig{threshold});
}

// ---------------------------------------------------------------------------
// Pluggable normalizers

/// Transcript in, ordered canonical symptom list out.
class Normalizer {
 public:
  virtual ~Normalizer() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::vector<std::string>> normalize_batch(const std::vector<std::string>& transcripts) const = 0;

  std::vector<std::string> normalize(const std::string& transcript) const { return normalize_batch({transcript})[0]; }
};

class LexiconNormalizer : public Normalizer {
 public:
  LexiconNormalizer(Lexicon lex, ExtractConfig cfg = {}) : lex_(std::move(lex)), cfg_(cfg) {}

  std::string name() const override { return "lexicon"; }
  std::vector<std::vector<std::string>> normalize_batch(const std::vector<std::string>& transcripts) const override {
    std::vector<std::vector<std::string>> out;
    out.reserve(transcripts.size());
    for (const auto& t : transcripts) out.push_back(extract_and_normalize(t, lex_, cfg_).symptoms);
    return out;
  }
  const Lexicon& lexicon() const { return lex_; }

 private:
  Lexicon lex_;
  ExtractConfig cfg_;
};

/// Line protocol escaping: backslash, newline and carriage return.
inline std::string escape_line(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else if (c == '\r') out += "\\r";
    else out.push_back(c);
  }
  return out;
}

inline std::string unescape_line(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out.push_back(s[i]);
      continue;
    }
    const char n = s[++i];
    out.push_back(n == 'n' ? '\n' : n == 'r' ? '\r' : n);
  }
  return out;
}

/// Runs a shell command once per batch. Its stdin gets one escaped
/// transcript per line; it must print one space-joined symptom sentence per
/// line, in order. Sentences are split back into terms by exact lexicon
/// matching.
class ExternalNormalizer : public Normalizer {
 public:
  ExternalNormalizer(std::string command, Lexicon lex) : command_(std::move(command)), lex_(std::move(lex)) {}

  std::string name() const override { return "external:" + command_; }

  std::vector<std::vector<std::string>> normalize_batch(const std::vector<std::string>& transcripts) const override {
    std::string input;
    for (const auto& t : transcripts) input += escape_line(t) + "\n";
    auto path = (std::filesystem::temp_directory_path() / "teleems-normalize-XXXXXX").string();
    const int fd = ::mkstemp(path.data());
    if (fd < 0) fail(ErrorCode::Io, "cannot create a temporary file");
    ::close(fd);
    struct Cleanup {
      std::string p;
      ~Cleanup() { std::filesystem::remove(p); }
    } cleanup{path};
    domain::write_file(path, input);

    const std::string cmd = command_ + " < '" + path + "'";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) fail(ErrorCode::Io, "cannot start '" + command_ + "'");
    std::string output;
    std::array<char, 4096> buf;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) output.append(buf.data(), n);
    const int status = ::pclose(pipe);
    if (status != 0) fail(ErrorCode::Io, "'" + command_ + "' exited with status " + std::to_string(status));

    std::vector<std::vector<std::string>> out;
    std::size_t pos = 0;
    while (pos < output.size() && out.size() < transcripts.size() + 1) {
      std::size_t end = output.find('\n', pos);
      if (end == std::string::npos) end = output.size();
      out.push_back(extract_and_normalize(unescape_line(output.substr(pos, end - pos)), lex_, 1.0).symptoms);
      pos = end + 1;
    }
    if (out.size() != transcripts.size())
      fail(ErrorCode::Io, "'" + command_ + "' returned " + std::to_string(out.size()) + " lines for " +
                              std::to_string(transcripts.size()) + " transcripts");
    return out;
  }

 private:
  std::string command_;
  Lexicon lex_;
};

// ---------------------------------------------------------------------------
// Conversation synthesis

struct ConversationTemplate {
  std::vector<std::string_view> opening;
  std::vector<std::string_view> mentions;  // one per symptom, cycled; `{s}` is the symptom
  std::vector<std::string_view> closing;
};

// Slots: {who} {street} {num} {age} {s}. The wording is kept well away from
// every lexicon term so that only the injected symptoms are found.
inline const std::vector<ConversationTemplate>& conversation_templates() {
  static const std::vector<ConversationTemplate> kTemplates = {
      {{"dispatcher: 911, what is the address of your emergency?", "caller: {num} {street}, please hurry.",
        "dispatcher: okay, tell me exactly what happened."},
       {"caller: it is {who}, {s} started about ten minutes ago.", "caller: and now there is {s} as well."},
       {"dispatcher: help is on the way, stay on the line with me.", "caller: okay, thank you."}},
      {{"dispatcher: 911, is this for police, fire or medical?", "caller: medical, at {num} {street}."},
       {"caller: {who} is {age} years old and has {s}.", "dispatcher: anything else?", "caller: yes, {s} too."},
       {"dispatcher: an ambulance has been sent to you.", "caller: we will leave the door open."}},
      {{"dispatcher: 911, where are you right now?", "caller: {street}, number {num}."},
       {"dispatcher: what is going on?", "caller: {who} told me about {s}.", "caller: i also noticed {s}."},
       {"dispatcher: do not give them food or drink.", "caller: understood."}},
      {{"caller: hello, i need an ambulance at {num} {street}.", "dispatcher: okay, how old is the person?",
        "caller: {age}."},
       {"dispatcher: what are the main complaints?", "caller: mostly {s}.", "caller: plus some {s}."},
       {"dispatcher: keep them still and watch them closely.", "caller: all right."}},
      {{"dispatcher: 911, what is your emergency?", "caller: it is {who}, we are at {num} {street}."},
       {"caller: they have {s} since this morning.", "dispatcher: okay, what else?", "caller: {s}, that is all."},
       {"dispatcher: units are coming, unlock the front door.", "caller: will do."}},
      {{"dispatcher: 911, tell me the address.", "caller: {num} {street}, the blue house."},
       {"caller: {who} says {s} got worse today.", "caller: there was {s} an hour ago too."},
       {"dispatcher: stay with them until the crew arrives.", "caller: okay."}},
  };
  return kTemplates;
}

inline constexpr std::array<std::string_view, 8> kWho = {"my husband", "my wife",      "my mother", "my father",
                                                         "my son",     "my daughter", "my uncle",  "our friend"};
inline constexpr std::array<std::string_view, 6> kStreets = {"maple street", "oak avenue",  "river road",
                                                             "elm court",    "pine drive", "lake view"};

/// Deterministic template fill: each symptom appears verbatim exactly once.
inline Transcript synthesize_conversation(const std::vector<std::string>& symptoms, std::size_t template_id,
                                          std::uint64_t seed) {
  const auto& templates = conversation_templates();
  if (template_id >= templates.size())
    fail(ErrorCode::UnknownTemplate, "no conversation template " + std::to_string(template_id));
  if (symptoms.empty()) fail(ErrorCode::InvalidArgument, "a conversation needs at least one symptom");
  const auto& tpl = templates[template_id];
  Rng rng(seed);
  const std::string who(kWho[rng.below(kWho.size())]);
  const std::string street(kStreets[rng.below(kStreets.size())]);
  const std::string num = std::to_string(10 + rng.below(990));
  const std::string age = std::to_string(20 + rng.below(71));

  auto fill = [&](std::string_view line, const std::string* symptom) {
    std::string out;
    for (std::size_t i = 0; i < line.size();) {
      if (line[i] == '{') {
        const std::size_t close = line.find('}', i);
        const std::string_view slot = line.substr(i + 1, close - i - 1);
        if (slot == "who") out += who;
        else if (slot == "street") out += street;
        else if (slot == "num") out += num;
        else if (slot == "age") out += age;
        else if (slot == "s" && symptom) out += *symptom;
        i = close + 1;
      } else {
        out.push_back(line[i++]);
      }
    }
    return out;
  };

  std::vector<std::string> lines;
  for (auto l : tpl.opening) lines.push_back(fill(l, nullptr));
  // Mention lines are cycled; lines without a {s} slot pass through.
  std::size_t next = 0, cursor = 0;
  while (next < symptoms.size()) {
    const auto line = tpl.mentions[cursor++ % tpl.mentions.size()];
    const bool has_slot = line.find("{s}") != std::string_view::npos;
    lines.push_back(fill(line, has_slot ? &symptoms[next] : nullptr));
    if (has_slot) ++next;
  }
  for (auto l : tpl.closing) lines.push_back(fill(l, nullptr));

  Transcript t;
  t.text = text::join(lines, "\n");
  t.stage = domain::DatasetStage::Text3;
  t.symptoms = symptoms;
  return t;
}

// ---------------------------------------------------------------------------
// Transcription noise

struct NoiseProfile {
  double sub_rate = 0.0;  // per letter
  double del_rate = 0.0;
  double ins_rate = 0.0;
  double symptom_bias = 1.0;           // rate multiplier inside injected symptom spans
  std::size_t max_edits_per_token = 2;
};

namespace detail {
inline char random_letter(Rng& rng, char avoid) {
  char c;
  do {
    c = static_cast<char>('a' + rng.below(26));
  } while (c == avoid);
  return c;
}
}  // namespace detail

/// Character-level substitutions, deletions and insertions, letters only.
/// Every letter consumes exactly one draw, so the output depends only on
/// (text, profile, seed). A token never loses its last letter.
inline std::string corrupt_text(std::string_view s, const NoiseProfile& noise, std::uint64_t seed,
                                const std::vector<bool>& in_symptom = {}) {
  for (double r : {noise.sub_rate, noise.del_rate, noise.ins_rate})
    if (!(r >= 0.0 && r <= 1.0)) fail(ErrorCode::InvalidArgument, "noise rates must lie in [0, 1]");
  Rng rng(seed);
  std::string out;
  std::size_t edits = 0, kept = 0;  // per token
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (text::is_space(c)) {
      edits = kept = 0;
      out.push_back(c);
      continue;
    }
    if (!std::isalpha(static_cast<unsigned char>(c))) {
      out.push_back(c);
      continue;
    }
    std::size_t remaining = 0;  // letters left in this token, including c
    for (std::size_t j = i; j < s.size() && !text::is_space(s[j]); ++j)
      remaining += std::isalpha(static_cast<unsigned char>(s[j])) ? 1 : 0;
    const double scale = (!in_symptom.empty() && in_symptom[i]) ? noise.symptom_bias : 1.0;
    const double del = std::min(1.0, noise.del_rate * scale);
    const double sub = std::min(1.0 - del, noise.sub_rate * scale);
    const double ins = std::min(1.0 - del - sub, noise.ins_rate * scale);
    const double u = rng.uniform();
    const bool can_edit = edits < noise.max_edits_per_token;
    if (can_edit && u < del) {
      if (kept + remaining > 1) {
        ++edits;
        continue;
      }
    } else if (can_edit && u < del + sub) {
      out.push_back(detail::random_letter(rng, static_cast<char>(std::tolower(static_cast<unsigned char>(c)))));
      ++edits;
      ++kept;
      continue;
    } else if (can_edit && u < del + sub + ins) {
      out.push_back(c);
      out.push_back(detail::random_letter(rng, 0));
      ++edits;
      kept += 2;
      continue;
    }
    out.push_back(c);
    ++kept;
  }
  return out;
}

/// Noisy transcription (Text5) of a conversation. Characters inside the
/// first verbatim occurrence of each injected symptom get the bias factor.
inline Transcript corrupt_transcript(const Transcript& t, const NoiseProfile& noise, std::uint64_t seed) {
  std::vector<bool> mask(t.text.size(), false);
  for (const auto& s : t.symptoms) {
    if (s.empty()) continue;
    const auto at = t.text.find(s);
    if (at == std::string::npos) continue;
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(at), mask.begin() + static_cast<std::ptrdiff_t>(at + s.size()),
              true);
  }
  Transcript out = t;
  out.text = corrupt_text(t.text, noise, seed, mask);
  out.stage = domain::DatasetStage::Text5;
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation pairs

struct XYPair {
  std::string x;  // conversation with an injected noisy symptom
  std::string y;  // canonical symptom
  bool operator==(const XYPair&) const = default;
};

struct AugmentedPairs {
  std::vector<XYPair> train;
  std::vector<XYPair> val;
};

/// `count` pairs, each a fresh template fill around one corrupted symptom
/// drawn from the bank. Only the symptom is corrupted; the surrounding text
/// stays clean. Split 4:1 after a seeded shuffle.
inline AugmentedPairs build_augmented_pairs(const std::vector<std::string>& bank, std::size_t count,
                                            std::uint64_t seed, const NoiseProfile& noise) {
  if (bank.empty()) fail(ErrorCode::InvalidArgument, "symptom bank is empty");
  Rng rng(seed);
  const std::size_t n_templates = conversation_templates().size();
  std::vector<XYPair> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& y = bank[rng.below(bank.size())];
    NoiseProfile symptom_noise = noise;
    symptom_noise.symptom_bias = 1.0;
    std::vector<bool> all(y.size(), true);
    const std::string noisy = corrupt_text(y, symptom_noise, seed_for(seed, 2 * i), all);
    pairs.push_back({synthesize_conversation({noisy}, i % n_templates, seed_for(seed, 2 * i + 1)).text, y});
  }
  rng.shuffle(pairs);
  const std::size_t n_val = count / 5;
  AugmentedPairs out;
  out.val.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_val), pairs.end());
  return out;
}

}  // namespace teleems::normalizer

#endif  // TELEEMS_NORMALIZER_HPP
