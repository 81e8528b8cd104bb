#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ncv/tensor.hpp"

namespace ncv {

enum class EncodingKind : std::uint8_t { flat = 0, slot = 1 };

struct AttributeDef {
  std::string name;
  std::vector<std::string> values;
};

// Describes what the encoding dimensions mean. Slot datasets carry the
// per-object attribute layout; flat datasets carry one name per feature.
struct Schema {
  std::vector<AttributeDef> attributes;
  std::size_t slot_count = 0;              // S; 0 for flat datasets
  std::vector<std::string> feature_names;  // flat datasets

  std::size_t slot_width() const;               // B = sum of cardinalities
  std::size_t attribute_offset(std::size_t ai) const;
};

using ObjectAttrs = std::vector<std::size_t>;  // one value index per attribute

// An object predicate: required value per attribute (-1 means unconstrained)
// plus how many matching objects the sample must contain.
struct Predicate {
  std::vector<int> required;
  std::size_t min_count = 1;
};

struct ClassRule {
  std::string name;
  std::vector<Predicate> predicates;  // conjunction
};

struct ShortcutSpec {
  bool enabled = false;
  std::size_t class_id = 0;
  std::size_t attribute = 0;
  std::size_t value = 0;
};

struct RuleSpec {
  std::string preset_name;
  Schema schema;
  std::vector<ClassRule> rules;
  std::size_t min_distractors = 2;
  std::size_t max_distractors = 7;
  ShortcutSpec shortcut;

  // xor2-style preset: two binary concepts on a flat encoding, label = their
  // XOR; the object-rule machinery above is bypassed.
  bool xor_mode = false;
  std::size_t xor_width = 8;
  std::size_t xor_bit_a = 1;
  std::size_t xor_bit_b = 4;

  std::size_t klasses() const { return xor_mode ? 2 : rules.size(); }
};

struct ConceptSample {
  std::vector<double> encoding;  // C (flat) or S*B row-major (slot)
  std::uint32_t label = 0;
  bool confounded = false;
};

struct Split {
  std::vector<ConceptSample> samples;
  // raw attribute lists kept by the generator for oracle checks; empty for
  // splits read back from disk
  std::vector<std::vector<ObjectAttrs>> objects;

  std::size_t size() const { return samples.size(); }
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

struct DatasetBundle {
  EncodingKind kind = EncodingKind::flat;
  std::size_t klasses = 0;
  std::size_t flat_width = 0;                  // C when flat
  std::size_t slot_count = 0, slot_width = 0;  // S, B when slot
  double clean_ratio = 1.0;
  std::uint64_t seed = 0;
  std::string preset_name;
  Schema schema;
  ShortcutSpec shortcut;
  Split train, val, test;

  std::size_t encoding_width() const {
    return kind == EncodingKind::flat ? flat_width : slot_count * slot_width;
  }
  const Split& split(const std::string& name) const;
};

DatasetBundle generate_synthetic(const RuleSpec& spec, SplitCounts counts, double clean_ratio,
                                 EncodingKind kind, std::uint64_t seed);

RuleSpec rule_preset(const std::string& name);  // hans3-analog | hans7-analog | xor2
std::vector<std::string> rule_preset_names();

bool predicate_matches(const Predicate& p, const ObjectAttrs& obj);
bool rule_satisfied(const ClassRule& rule, const std::vector<ObjectAttrs>& objects);
// Label an object list by the unique satisfied rule; nullopt when zero or
// multiple rules match. Independent path used by tests as the label oracle.
std::optional<std::size_t> derive_label(const std::vector<ClassRule>& rules,
                                        const std::vector<ObjectAttrs>& objects);

// Human-readable description of one slot row ("shape=cube, size=small, ...");
// "(empty)" for all-zero pad slots.
std::string describe_slot(const Schema& schema, std::span<const double> slot_row);

// ---------------------------------------------------------------------------
// shortcut statistics
// ---------------------------------------------------------------------------

struct MiSplitStats {
  double mi = 0.0;
  double bootstrap_std = 0.0;
  std::size_t samples = 0;
};

struct MiReport {
  bool has_shortcut = false;
  MiSplitStats train, val, test;
  std::string to_json() const;
};

// Plug-in mutual information between the per-sample count of
// shortcut-valued objects (capped at 3) and the label, with a bootstrap
// standard deviation over `resamples` draws.
MiReport attach_shortcut_statistics(const DatasetBundle& bundle,
                                    std::uint64_t bootstrap_seed = 1234,
                                    std::size_t resamples = 100);

// ---------------------------------------------------------------------------
// encoding files
// ---------------------------------------------------------------------------

// One split per file: magic "NCVD", version u16, kind u8, K u32,
// C u32 (flat) or S,B u32 each (slot), N u64, then N records of
// (label u32, confounded u8, payload f64 little-endian).
struct EncodingFile {
  EncodingKind kind = EncodingKind::flat;
  std::size_t klasses = 0;
  std::size_t flat_width = 0;
  std::size_t slot_count = 0, slot_width = 0;
  std::vector<ConceptSample> samples;
};

void write_encoding_file(const std::string& path, const EncodingFile& file);
EncodingFile read_encoding_file(const std::string& path);

// Bundle-level IO: writes <stem>.train.ncvd / .val.ncvd / .test.ncvd plus a
// <stem>.json sidecar carrying the header fields and the schema.
void save_encodings(const DatasetBundle& bundle, const std::string& stem);
DatasetBundle load_encodings(const std::string& stem);

}  // namespace ncv
