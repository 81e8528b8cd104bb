#include "ncv/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include <json.hpp>

#include "binio.hpp"
#include "ncv/rng.hpp"

namespace ncv {

using nlohmann::json;

namespace {

constexpr std::size_t kMaxSampleAttempts = 1000;
constexpr std::size_t kShortcutCountCap = 3;

}  // namespace

std::size_t Schema::slot_width() const {
  std::size_t b = 0;
  for (const auto& a : attributes) b += a.values.size();
  return b;
}

std::size_t Schema::attribute_offset(std::size_t ai) const {
  std::size_t off = 0;
  for (std::size_t i = 0; i < ai; ++i) off += attributes[i].values.size();
  return off;
}

const Split& DatasetBundle::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ContractError("unknown split '" + name + "' (expected train|val|test)");
}

bool predicate_matches(const Predicate& p, const ObjectAttrs& obj) {
  for (std::size_t a = 0; a < p.required.size(); ++a) {
    if (p.required[a] >= 0 && obj[a] != static_cast<std::size_t>(p.required[a])) return false;
  }
  return true;
}

bool rule_satisfied(const ClassRule& rule, const std::vector<ObjectAttrs>& objects) {
  for (const Predicate& p : rule.predicates) {
    std::size_t count = 0;
    for (const ObjectAttrs& o : objects)
      if (predicate_matches(p, o)) ++count;
    if (count < p.min_count) return false;
  }
  return true;
}

std::optional<std::size_t> derive_label(const std::vector<ClassRule>& rules,
                                        const std::vector<ObjectAttrs>& objects) {
  std::optional<std::size_t> found;
  for (std::size_t k = 0; k < rules.size(); ++k) {
    if (rule_satisfied(rules[k], objects)) {
      if (found) return std::nullopt;  // ambiguous
      found = k;
    }
  }
  return found;
}

std::string describe_slot(const Schema& schema, std::span<const double> slot_row) {
  bool empty = true;
  for (double v : slot_row)
    if (v != 0.0) empty = false;
  if (empty) return "(empty)";
  std::ostringstream os;
  std::size_t off = 0;
  for (std::size_t a = 0; a < schema.attributes.size(); ++a) {
    const auto& attr = schema.attributes[a];
    std::size_t best = 0;
    for (std::size_t v = 1; v < attr.values.size(); ++v) {
      if (slot_row[off + v] > slot_row[off + best]) best = v;
    }
    if (a) os << ", ";
    os << attr.name << '=' << attr.values[best];
    off += attr.values.size();
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

namespace {

Schema clevr_like_schema(std::size_t slot_count) {
  Schema s;
  s.attributes = {
      {"shape", {"cube", "sphere", "cylinder"}},
      {"size", {"small", "large"}},
      {"color", {"gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"}},
      {"material", {"rubber", "metal"}},
  };
  s.slot_count = slot_count;
  return s;
}

// Attribute order: shape, size, color, material. -1 leaves a slot free.
Predicate pred(int shape, int size, int material, std::size_t min_count = 1) {
  Predicate p;
  p.required = {shape, size, -1, material};  // color never appears in a rule
  p.min_count = min_count;
  return p;
}

constexpr int kCube = 0, kSphere = 1, kCylinder = 2;
constexpr int kSmall = 0, kLarge = 1;
constexpr int kRubber = 0, kMetal = 1;

RuleSpec hans3_spec() {
  RuleSpec spec;
  spec.preset_name = "hans3-analog";
  spec.schema = clevr_like_schema(16);
  spec.rules = {
      {"large cube and large cylinder",
       {pred(kCube, kLarge, -1), pred(kCylinder, kLarge, -1)}},
      {"small metal cube and small metal sphere",
       {pred(kCube, kSmall, kMetal), pred(kSphere, kSmall, kMetal)}},
      {"small rubber cylinder and large sphere",
       {pred(kCylinder, kSmall, kRubber), pred(kSphere, kLarge, -1)}},
  };
  spec.min_distractors = 2;
  spec.max_distractors = 7;
  spec.shortcut = {true, 0, 2, 0};  // confounded class-0 samples get gray rule objects
  return spec;
}

RuleSpec hans7_spec() {
  RuleSpec spec = hans3_spec();
  spec.preset_name = "hans7-analog";
  spec.rules.push_back({"three small spheres", {pred(kSphere, kSmall, -1, 3)}});
  spec.rules.push_back({"two metal cylinders and a rubber cube",
                        {pred(kCylinder, -1, kMetal, 2), pred(kCube, -1, kRubber)}});
  spec.rules.push_back({"large metal sphere and large rubber cube",
                        {pred(kSphere, kLarge, kMetal), pred(kCube, kLarge, kRubber)}});
  spec.rules.push_back({"two small cubes and a cylinder",
                        {pred(kCube, kSmall, -1, 2), pred(kCylinder, -1, -1)}});
  return spec;
}

RuleSpec xor2_spec() {
  RuleSpec spec;
  spec.preset_name = "xor2";
  spec.xor_mode = true;
  spec.xor_width = 8;
  spec.xor_bit_a = 1;
  spec.xor_bit_b = 4;
  for (std::size_t i = 0; i < spec.xor_width; ++i) {
    if (i == spec.xor_bit_a)
      spec.schema.feature_names.push_back("bit_a");
    else if (i == spec.xor_bit_b)
      spec.schema.feature_names.push_back("bit_b");
    else
      spec.schema.feature_names.push_back("noise" + std::to_string(i));
  }
  return spec;
}

}  // namespace

RuleSpec rule_preset(const std::string& name) {
  if (name == "hans3-analog") return hans3_spec();
  if (name == "hans7-analog") return hans7_spec();
  if (name == "xor2") return xor2_spec();
  throw ConfigError("unknown dataset preset '" + name + "'");
}

std::vector<std::string> rule_preset_names() {
  return {"hans3-analog", "hans7-analog", "xor2"};
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace {

void validate_rule_spec(const RuleSpec& spec) {
  if (spec.xor_mode) {
    if (spec.xor_width < 2 || spec.xor_bit_a >= spec.xor_width ||
        spec.xor_bit_b >= spec.xor_width || spec.xor_bit_a == spec.xor_bit_b) {
      throw ConfigError("xor preset bits must be two distinct indices below the width");
    }
    return;
  }
  if (spec.rules.empty()) throw ConfigError("rule spec has no class rules");
  const std::size_t n_attr = spec.schema.attributes.size();
  for (std::size_t k = 0; k < spec.rules.size(); ++k) {
    std::size_t rule_objects = 0;
    for (const Predicate& p : spec.rules[k].predicates) {
      if (p.required.size() != n_attr) {
        throw ConfigError("rule '" + spec.rules[k].name + "' predicate arity mismatch");
      }
      for (std::size_t a = 0; a < n_attr; ++a) {
        if (p.required[a] >= static_cast<int>(spec.schema.attributes[a].values.size())) {
          throw ConfigError("rule '" + spec.rules[k].name + "' references a value out of range");
        }
        if (spec.shortcut.enabled && a == spec.shortcut.attribute && p.required[a] >= 0) {
          throw ConfigError("shortcut attribute '" + spec.schema.attributes[a].name +
                            "' must not be referenced by class rules");
        }
      }
      rule_objects += p.min_count;
    }
    if (rule_objects + spec.min_distractors > spec.schema.slot_count) {
      throw ConfigError("class rule " + std::to_string(k) + " ('" + spec.rules[k].name +
                        "') cannot fit in " + std::to_string(spec.schema.slot_count) +
                        " slots");
    }
  }
  if (spec.shortcut.enabled) {
    if (spec.shortcut.class_id >= spec.rules.size() ||
        spec.shortcut.attribute >= n_attr ||
        spec.shortcut.value >= spec.schema.attributes[spec.shortcut.attribute].values.size()) {
      throw ConfigError("shortcut spec out of range");
    }
  }
}

ObjectAttrs random_object(const Schema& schema, Rng& rng) {
  ObjectAttrs o(schema.attributes.size());
  for (std::size_t a = 0; a < o.size(); ++a) {
    o[a] = rng.below(schema.attributes[a].values.size());
  }
  return o;
}

// Applies the confound: the shortcut class advertises the shortcut value on
// its rule objects, every other class avoids the value entirely. The test
// split never calls this, so the correlation vanishes there.
void apply_shortcut(const RuleSpec& spec, std::size_t label, std::size_t n_rule_objects,
                    std::vector<ObjectAttrs>& objects, Rng& rng) {
  const ShortcutSpec& sc = spec.shortcut;
  const std::size_t cardinality = spec.schema.attributes[sc.attribute].values.size();
  if (label == sc.class_id) {
    for (std::size_t i = 0; i < n_rule_objects; ++i) objects[i][sc.attribute] = sc.value;
  } else {
    for (ObjectAttrs& o : objects) {
      if (o[sc.attribute] == sc.value) {
        std::size_t repl = rng.below(cardinality - 1);
        if (repl >= sc.value) ++repl;
        o[sc.attribute] = repl;
      }
    }
  }
}

std::vector<double> encode_slots(const Schema& schema, const std::vector<ObjectAttrs>& objects) {
  const std::size_t b = schema.slot_width();
  std::vector<double> enc(schema.slot_count * b, 0.0);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    std::size_t off = i * b;
    for (std::size_t a = 0; a < schema.attributes.size(); ++a) {
      enc[off + objects[i][a]] = 1.0;
      off += schema.attributes[a].values.size();
    }
  }
  return enc;
}

std::vector<double> encode_flat_counts(const Schema& schema,
                                       const std::vector<ObjectAttrs>& objects) {
  const std::size_t c = schema.slot_width();
  std::vector<double> enc(c, 0.0);
  for (const ObjectAttrs& o : objects) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < schema.attributes.size(); ++a) {
      enc[off + o[a]] += 1.0;
      off += schema.attributes[a].values.size();
    }
  }
  const double scale = 1.0 / static_cast<double>(schema.slot_count);  // max object count
  for (double& v : enc) v *= scale;
  return enc;
}

struct DrawnSample {
  ConceptSample sample;
  std::vector<ObjectAttrs> objects;
};

DrawnSample draw_rule_sample(const RuleSpec& spec, EncodingKind kind, bool allow_confound,
                             double clean_ratio, Rng& rng) {
  const std::size_t k = spec.rules.size();
  const std::size_t label = rng.below(k);
  const ClassRule& rule = spec.rules[label];
  const bool confound = spec.shortcut.enabled && allow_confound &&
                        rng.bernoulli(1.0 - clean_ratio);

  for (std::size_t attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    std::vector<ObjectAttrs> objects;
    for (const Predicate& p : rule.predicates) {
      for (std::size_t c = 0; c < p.min_count; ++c) {
        ObjectAttrs o = random_object(spec.schema, rng);
        for (std::size_t a = 0; a < p.required.size(); ++a) {
          if (p.required[a] >= 0) o[a] = static_cast<std::size_t>(p.required[a]);
        }
        objects.push_back(std::move(o));
      }
    }
    const std::size_t n_rule_objects = objects.size();
    const std::size_t max_d =
        std::min(spec.max_distractors, spec.schema.slot_count - n_rule_objects);
    const std::size_t n_distract =
        spec.min_distractors + rng.below(max_d - spec.min_distractors + 1);
    for (std::size_t d = 0; d < n_distract; ++d) {
      objects.push_back(random_object(spec.schema, rng));
    }
    if (confound) apply_shortcut(spec, label, n_rule_objects, objects, rng);

    // exclusivity: the sample must satisfy precisely its own rule
    auto derived = derive_label(spec.rules, objects);
    if (!derived || *derived != label) continue;

    // shuffle object order so slot position carries no signal
    for (std::size_t i = objects.size(); i > 1; --i) {
      std::swap(objects[i - 1], objects[rng.below(i)]);
    }

    DrawnSample out;
    out.sample.label = static_cast<std::uint32_t>(label);
    out.sample.confounded = confound;
    out.sample.encoding = kind == EncodingKind::slot
                              ? encode_slots(spec.schema, objects)
                              : encode_flat_counts(spec.schema, objects);
    out.objects = std::move(objects);
    return out;
  }
  throw RuntimeError("could not draw a sample satisfying only rule " + std::to_string(label) +
                     " ('" + spec.rules[label].name + "') after " +
                     std::to_string(kMaxSampleAttempts) + " attempts");
}

DrawnSample draw_xor_sample(const RuleSpec& spec, Rng& rng) {
  DrawnSample out;
  const std::size_t label = rng.below(2);
  const std::size_t a = rng.below(2);
  const std::size_t b = a ^ label;
  std::vector<double> enc(spec.xor_width);
  for (double& v : enc) v = rng.uniform();
  enc[spec.xor_bit_a] = static_cast<double>(a);
  enc[spec.xor_bit_b] = static_cast<double>(b);
  out.sample.label = static_cast<std::uint32_t>(label);
  out.sample.confounded = false;
  out.sample.encoding = std::move(enc);
  return out;
}

Split draw_split(const RuleSpec& spec, EncodingKind kind, std::size_t n, bool allow_confound,
                 double clean_ratio, std::uint64_t seed) {
  Split split;
  split.samples.reserve(n);
  split.objects.reserve(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    DrawnSample d = spec.xor_mode ? draw_xor_sample(spec, rng)
                                  : draw_rule_sample(spec, kind, allow_confound, clean_ratio, rng);
    split.samples.push_back(std::move(d.sample));
    split.objects.push_back(std::move(d.objects));
  }
  return split;
}

}  // namespace

DatasetBundle generate_synthetic(const RuleSpec& spec, SplitCounts counts, double clean_ratio,
                                 EncodingKind kind, std::uint64_t seed) {
  validate_rule_spec(spec);
  if (clean_ratio < 0.0 || clean_ratio > 1.0) {
    throw ConfigError("clean_ratio must be in [0,1], got " + std::to_string(clean_ratio));
  }
  if (spec.xor_mode && kind != EncodingKind::flat) {
    throw ConfigError("the xor2 preset is defined on flat encodings");
  }
  DatasetBundle b;
  b.kind = kind;
  b.klasses = spec.klasses();
  b.clean_ratio = clean_ratio;
  b.seed = seed;
  b.preset_name = spec.preset_name;
  b.schema = spec.schema;
  b.shortcut = spec.xor_mode ? ShortcutSpec{} : spec.shortcut;
  if (spec.xor_mode) {
    b.flat_width = spec.xor_width;
  } else if (kind == EncodingKind::flat) {
    b.flat_width = spec.schema.slot_width();
    b.schema.slot_count = spec.schema.slot_count;  // keeps the count scale documented
    if (b.schema.feature_names.empty()) {
      for (const auto& attr : spec.schema.attributes)
        for (const auto& v : attr.values)
          b.schema.feature_names.push_back("count[" + attr.name + "=" + v + "]");
    }
  } else {
    b.slot_count = spec.schema.slot_count;
    b.slot_width = spec.schema.slot_width();
  }
  b.train = draw_split(spec, kind, counts.train, true, clean_ratio, derive_seed(seed, 1));
  b.val = draw_split(spec, kind, counts.val, true, clean_ratio, derive_seed(seed, 2));
  b.test = draw_split(spec, kind, counts.test, false, clean_ratio, derive_seed(seed, 3));
  return b;
}

// ---------------------------------------------------------------------------
// shortcut statistics
// ---------------------------------------------------------------------------

namespace {

// Count of objects carrying the shortcut value, recovered from the encoding
// itself so it works for loaded bundles too; capped to keep the table small.
std::size_t shortcut_count(const DatasetBundle& b, const ConceptSample& s) {
  const std::size_t off = b.schema.attribute_offset(b.shortcut.attribute) + b.shortcut.value;
  double count = 0.0;
  if (b.kind == EncodingKind::slot) {
    for (std::size_t si = 0; si < b.slot_count; ++si) count += s.encoding[si * b.slot_width + off];
  } else {
    count = s.encoding[off] * static_cast<double>(b.schema.slot_count);
  }
  const auto c = static_cast<std::size_t>(std::lround(count));
  return std::min(c, kShortcutCountCap);
}

double plugin_mi(const std::vector<std::size_t>& xs, const std::vector<std::size_t>& ys,
                 std::size_t nx, std::size_t ny) {
  const std::size_t n = xs.size();
  if (n == 0) return 0.0;
  std::vector<double> joint(nx * ny, 0.0), px(nx, 0.0), py(ny, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    joint[xs[i] * ny + ys[i]] += 1.0;
    px[xs[i]] += 1.0;
    py[ys[i]] += 1.0;
  }
  const double inv = 1.0 / static_cast<double>(n);
  double mi = 0.0;
  for (std::size_t x = 0; x < nx; ++x) {
    for (std::size_t y = 0; y < ny; ++y) {
      const double pxy = joint[x * ny + y] * inv;
      if (pxy <= 0.0) continue;
      mi += pxy * std::log(pxy / (px[x] * inv * py[y] * inv));
    }
  }
  return std::max(mi, 0.0);
}

MiSplitStats split_mi(const DatasetBundle& b, const Split& split, std::uint64_t seed,
                      std::size_t resamples) {
  MiSplitStats st;
  st.samples = split.size();
  if (split.size() == 0) return st;
  const std::size_t nx = kShortcutCountCap + 1;
  const std::size_t ny = b.klasses;
  std::vector<std::size_t> xs(split.size()), ys(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    xs[i] = shortcut_count(b, split.samples[i]);
    ys[i] = split.samples[i].label;
  }
  st.mi = plugin_mi(xs, ys, nx, ny);
  Rng rng(seed);
  double sum = 0.0, sq = 0.0;
  std::vector<std::size_t> rx(split.size()), ry(split.size());
  for (std::size_t r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      const std::size_t j = rng.below(split.size());
      rx[i] = xs[j];
      ry[i] = ys[j];
    }
    const double mi = plugin_mi(rx, ry, nx, ny);
    sum += mi;
    sq += mi * mi;
  }
  const double n = static_cast<double>(resamples);
  const double var = std::max(0.0, sq / n - (sum / n) * (sum / n));
  st.bootstrap_std = std::sqrt(var);
  return st;
}

}  // namespace

MiReport attach_shortcut_statistics(const DatasetBundle& bundle, std::uint64_t bootstrap_seed,
                                    std::size_t resamples) {
  MiReport rep;
  rep.has_shortcut = bundle.shortcut.enabled;
  if (!rep.has_shortcut) return rep;
  rep.train = split_mi(bundle, bundle.train, derive_seed(bootstrap_seed, 11), resamples);
  rep.val = split_mi(bundle, bundle.val, derive_seed(bootstrap_seed, 12), resamples);
  rep.test = split_mi(bundle, bundle.test, derive_seed(bootstrap_seed, 13), resamples);
  return rep;
}

std::string MiReport::to_json() const {
  json j;
  j["has_shortcut"] = has_shortcut;
  auto put = [&j](const char* name, const MiSplitStats& s) {
    j[name] = {{"mi", s.mi}, {"bootstrap_std", s.bootstrap_std}, {"samples", s.samples}};
  };
  put("train", train);
  put("val", val);
  put("test", test);
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// encoding files
// ---------------------------------------------------------------------------

namespace {
constexpr char kEncodingMagic[4] = {'N', 'C', 'V', 'D'};
}

void write_encoding_file(const std::string& path, const EncodingFile& file) {
  auto os = binio::open_out(path);
  binio::write_bytes(os, kEncodingMagic, 4);
  binio::write_pod<std::uint16_t>(os, 1);
  binio::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(file.kind));
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(file.klasses));
  if (file.kind == EncodingKind::flat) {
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(file.flat_width));
  } else {
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(file.slot_count));
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(file.slot_width));
  }
  binio::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(file.samples.size()));
  const std::size_t width = file.kind == EncodingKind::flat
                                ? file.flat_width
                                : file.slot_count * file.slot_width;
  for (std::size_t i = 0; i < file.samples.size(); ++i) {
    const ConceptSample& s = file.samples[i];
    if (s.encoding.size() != width) {
      throw ContractError("record " + std::to_string(i) + " has width " +
                          std::to_string(s.encoding.size()) + ", expected " +
                          std::to_string(width));
    }
    binio::write_pod<std::uint32_t>(os, s.label);
    binio::write_pod<std::uint8_t>(os, s.confounded ? 1 : 0);
    binio::write_doubles(os, s.encoding.data(), width);
  }
  if (!os) throw RuntimeError("failed writing encoding file '" + path + "'");
}

EncodingFile read_encoding_file(const std::string& path) {
  auto is = binio::open_in(path);
  char magic[4];
  binio::read_bytes(is, magic, 4);
  if (std::memcmp(magic, kEncodingMagic, 4) != 0) {
    throw RuntimeError("'" + path + "' is not an encoding file (bad magic)");
  }
  const auto version = binio::read_pod<std::uint16_t>(is);
  if (version != 1) {
    throw RuntimeError("unsupported encoding file version " + std::to_string(version));
  }
  EncodingFile f;
  const auto kind = binio::read_pod<std::uint8_t>(is);
  if (kind > 1) throw RuntimeError("bad encoding kind byte " + std::to_string(kind));
  f.kind = static_cast<EncodingKind>(kind);
  f.klasses = binio::read_pod<std::uint32_t>(is);
  if (f.klasses == 0) throw RuntimeError("encoding file declares zero classes");
  if (f.kind == EncodingKind::flat) {
    f.flat_width = binio::read_pod<std::uint32_t>(is);
    if (f.flat_width == 0) throw RuntimeError("encoding file declares zero width");
  } else {
    f.slot_count = binio::read_pod<std::uint32_t>(is);
    f.slot_width = binio::read_pod<std::uint32_t>(is);
    if (f.slot_count == 0 || f.slot_width == 0) {
      throw RuntimeError("encoding file declares zero slot dimensions");
    }
  }
  const auto n = binio::read_pod<std::uint64_t>(is);
  const std::size_t width =
      f.kind == EncodingKind::flat ? f.flat_width : f.slot_count * f.slot_width;
  f.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ConceptSample s;
    try {
      s.label = binio::read_pod<std::uint32_t>(is);
      s.confounded = binio::read_pod<std::uint8_t>(is) != 0;
      s.encoding.resize(width);
      binio::read_doubles(is, s.encoding.data(), width);
    } catch (const RuntimeError&) {
      throw RuntimeError("encoding file '" + path + "' truncated at record " +
                         std::to_string(i));
    }
    if (s.label >= f.klasses) {
      throw RuntimeError("encoding file '" + path + "' record " + std::to_string(i) +
                         " has label " + std::to_string(s.label) + " >= K=" +
                         std::to_string(f.klasses));
    }
    f.samples.push_back(std::move(s));
  }
  return f;
}

namespace {

json schema_to_json(const Schema& s) {
  json j;
  j["slot_count"] = s.slot_count;
  j["attributes"] = json::array();
  for (const auto& a : s.attributes) {
    j["attributes"].push_back({{"name", a.name}, {"values", a.values}});
  }
  j["feature_names"] = s.feature_names;
  return j;
}

Schema schema_from_json(const json& j) {
  Schema s;
  s.slot_count = j.value("slot_count", std::size_t{0});
  for (const auto& a : j.value("attributes", json::array())) {
    AttributeDef d;
    d.name = a.at("name").get<std::string>();
    d.values = a.at("values").get<std::vector<std::string>>();
    s.attributes.push_back(std::move(d));
  }
  s.feature_names = j.value("feature_names", std::vector<std::string>{});
  return s;
}

EncodingFile split_file(const DatasetBundle& b, const Split& s) {
  EncodingFile f;
  f.kind = b.kind;
  f.klasses = b.klasses;
  f.flat_width = b.flat_width;
  f.slot_count = b.slot_count;
  f.slot_width = b.slot_width;
  f.samples = s.samples;
  return f;
}

}  // namespace

void save_encodings(const DatasetBundle& bundle, const std::string& stem) {
  write_encoding_file(stem + ".train.ncvd", split_file(bundle, bundle.train));
  write_encoding_file(stem + ".val.ncvd", split_file(bundle, bundle.val));
  write_encoding_file(stem + ".test.ncvd", split_file(bundle, bundle.test));
  json j;
  j["magic"] = "NCVD";
  j["version"] = 1;
  j["kind"] = bundle.kind == EncodingKind::flat ? "flat" : "slot";
  j["klasses"] = bundle.klasses;
  if (bundle.kind == EncodingKind::flat) {
    j["flat_width"] = bundle.flat_width;
  } else {
    j["slot_count"] = bundle.slot_count;
    j["slot_width"] = bundle.slot_width;
  }
  j["counts"] = {{"train", bundle.train.size()},
                 {"val", bundle.val.size()},
                 {"test", bundle.test.size()}};
  j["clean_ratio"] = bundle.clean_ratio;
  j["seed"] = bundle.seed;
  j["preset"] = bundle.preset_name;
  j["schema"] = schema_to_json(bundle.schema);
  if (bundle.shortcut.enabled) {
    j["shortcut"] = {{"class_id", bundle.shortcut.class_id},
                     {"attribute", bundle.shortcut.attribute},
                     {"value", bundle.shortcut.value}};
  }
  auto os = binio::open_out(stem + ".json");
  const std::string text = j.dump(2);
  os << text << '\n';
  if (!os) throw RuntimeError("failed writing sidecar '" + stem + ".json'");
}

DatasetBundle load_encodings(const std::string& stem) {
  EncodingFile train = read_encoding_file(stem + ".train.ncvd");
  EncodingFile val = read_encoding_file(stem + ".val.ncvd");
  EncodingFile test = read_encoding_file(stem + ".test.ncvd");
  for (const EncodingFile* f : {&val, &test}) {
    if (f->kind != train.kind || f->klasses != train.klasses ||
        f->flat_width != train.flat_width || f->slot_count != train.slot_count ||
        f->slot_width != train.slot_width) {
      throw RuntimeError("split headers under '" + stem + "' disagree");
    }
  }
  DatasetBundle b;
  b.kind = train.kind;
  b.klasses = train.klasses;
  b.flat_width = train.flat_width;
  b.slot_count = train.slot_count;
  b.slot_width = train.slot_width;
  b.train.samples = std::move(train.samples);
  b.val.samples = std::move(val.samples);
  b.test.samples = std::move(test.samples);

  std::ifstream side(stem + ".json");
  if (side) {
    json j = json::parse(side);
    b.clean_ratio = j.value("clean_ratio", 1.0);
    b.seed = j.value("seed", std::uint64_t{0});
    b.preset_name = j.value("preset", std::string{});
    if (j.contains("schema")) b.schema = schema_from_json(j["schema"]);
    if (j.contains("shortcut")) {
      b.shortcut.enabled = true;
      b.shortcut.class_id = j["shortcut"].value("class_id", std::size_t{0});
      b.shortcut.attribute = j["shortcut"].value("attribute", std::size_t{0});
      b.shortcut.value = j["shortcut"].value("value", std::size_t{0});
    }
  } else {
    // sidecar is optional: fall back to positional names
    if (b.kind == EncodingKind::flat) {
      for (std::size_t i = 0; i < b.flat_width; ++i) {
        b.schema.feature_names.push_back("feature" + std::to_string(i));
      }
    } else {
      b.schema.slot_count = b.slot_count;
    }
  }
  return b;
}

}  // namespace ncv
