#include "ncv/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ncv/rng.hpp"

namespace ncv {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// enum <-> string
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct NamedValue {
  const char* name;
  T value;
};

constexpr NamedValue<EncodingKind> kEncodings[] = {
    {"flat", EncodingKind::flat}, {"slot", EncodingKind::slot}};
constexpr NamedValue<SelectorArch> kSelectors[] = {
    {"mlp", SelectorArch::mlp},
    {"sum_pool_mlp", SelectorArch::sum_pool_mlp},
    {"attention_blocks", SelectorArch::attention_blocks}};
constexpr NamedValue<Granularity> kGranularities[] = {
    {"feature", Granularity::feature}, {"slot_block", Granularity::slot_block}};
constexpr NamedValue<PoolKind> kPools[] = {{"sum", PoolKind::sum}, {"mean", PoolKind::mean}};
constexpr NamedValue<BaselineKind> kBaselines[] = {
    {"linear", BaselineKind::linear}, {"nonlinear_mlp", BaselineKind::nonlinear_mlp}};

template <typename T, std::size_t N>
T parse_enum(const NamedValue<T> (&table)[N], const std::string& s, const char* what) {
  for (const auto& nv : table) {
    if (s == nv.name) return nv.value;
  }
  std::string options;
  for (const auto& nv : table) {
    if (!options.empty()) options += "|";
    options += nv.name;
  }
  throw ConfigError(std::string("bad ") + what + " '" + s + "' (expected " + options + ")");
}

template <typename T, std::size_t N>
const char* enum_name(const NamedValue<T> (&table)[N], T v) {
  for (const auto& nv : table) {
    if (nv.value == v) return nv.name;
  }
  return "?";
}

}  // namespace

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

namespace {

// App-style operating points: the slot game follows the set-encoder recipe
// (mask 12, batch 512, 50 epochs, lr 1e-3, weight decay 1e-4), the flat game
// the MLP recipe (mask 32, verifier lr 1e-4, prover lr 5e-4, L1 0.1,
// dropout 0.3).
GameConfig slot_game_defaults() {
  GameConfig g;
  g.gamma = 0.5;
  g.mask_size = 12;
  g.epochs = 50;
  g.warmup_epochs = 5;
  g.batch_size = 512;
  g.lr_verifier = 1e-3;
  g.lr_provers = 1e-3;
  g.weight_decay_verifier = 1e-4;
  g.weight_decay_provers = 1e-4;
  g.l1_penalty = 0.0;
  g.selector = SelectorArch::sum_pool_mlp;
  g.verifier_encoder = SelectorArch::sum_pool_mlp;
  g.granularity = Granularity::slot_block;
  g.encoding = EncodingKind::slot;
  g.verifier_hidden = 64;
  g.prover_hidden = 64;
  g.dropout = 0.0;
  return g;
}

GameConfig flat_game_defaults() {
  GameConfig g;
  g.gamma = 0.5;
  g.mask_size = 32;
  g.epochs = 100;
  g.warmup_epochs = 5;
  g.batch_size = 256;
  g.lr_verifier = 1e-4;
  g.lr_provers = 5e-4;
  g.weight_decay_verifier = 1e-4;
  g.weight_decay_provers = 1e-4;
  g.l1_penalty = 0.1;
  g.selector = SelectorArch::mlp;
  g.verifier_encoder = SelectorArch::mlp;
  g.granularity = Granularity::feature;
  g.encoding = EncodingKind::flat;
  g.verifier_hidden = 512;
  g.prover_hidden = 512;
  g.dropout = 0.3;
  return g;
}

}  // namespace

RunConfig default_config(const std::string& preset) {
  RunConfig cfg;
  cfg.baseline.kind = BaselineKind::nonlinear_mlp;
  cfg.baseline.epochs = 30;
  cfg.baseline.batch_size = 256;
  cfg.baseline.lr = 1e-3;
  cfg.baseline.weight_decay = 1e-4;
  cfg.baseline.hidden = 128;
  cfg.baseline.seed = 1;

  const std::string base = preset.size() > 5 && preset.ends_with("-grid")
                               ? preset.substr(0, preset.size() - 5) + "-analog"
                               : preset;
  if (base == "hans3-analog" || base == "hans7-analog") {
    cfg.dataset.preset = preset;
    cfg.dataset.encoding = EncodingKind::slot;
    cfg.dataset.clean_ratio = 1.0;
    cfg.dataset.seed = 7;
    cfg.game = slot_game_defaults();
    cfg.game.seed = 1;
    if (base == "hans7-analog") {
      cfg.dataset.train = 7000;
      cfg.dataset.val = 1400;
      cfg.dataset.test = 1400;
    } else {
      cfg.dataset.train = 3000;
      cfg.dataset.val = 750;
      cfg.dataset.test = 750;
    }
  } else if (base == "xor2") {
    cfg.dataset.preset = "xor2";
    cfg.dataset.encoding = EncodingKind::flat;
    cfg.dataset.train = 2000;
    cfg.dataset.val = 500;
    cfg.dataset.test = 1000;
    cfg.dataset.clean_ratio = 1.0;
    cfg.dataset.seed = 7;
    cfg.game = flat_game_defaults();
    cfg.game.seed = 1;
    // eight concepts only: a small mask and network train faster, and the
    // L1/dropout regularization tuned for C=10^4 is far too strong; mask 4
    // leaves the provers room to explore while they search for the bit pair
    cfg.game.mask_size = 4;
    cfg.game.epochs = 60;
    cfg.game.warmup_epochs = 10;
    cfg.game.batch_size = 128;
    cfg.game.lr_verifier = 1e-3;
    cfg.game.lr_provers = 1e-3;
    cfg.game.l1_penalty = 0.01;
    cfg.game.dropout = 0.0;
    cfg.game.verifier_hidden = 32;
    cfg.game.prover_hidden = 32;
    cfg.sweep.kind = "mask_grid";
    cfg.sweep.models = {"ncv"};
  } else {
    throw ConfigError("unknown config preset '" + preset + "'");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// json round trip
// ---------------------------------------------------------------------------

namespace {

void overlay_dataset(DatasetConfig& d, const json& j) {
  d.preset = j.value("preset", d.preset);
  d.train = j.value("train", d.train);
  d.val = j.value("val", d.val);
  d.test = j.value("test", d.test);
  d.clean_ratio = j.value("clean_ratio", d.clean_ratio);
  if (j.contains("encoding")) {
    d.encoding = parse_enum(kEncodings, j["encoding"].get<std::string>(), "encoding");
  }
  d.seed = j.value("seed", d.seed);
}

void overlay_game(GameConfig& g, const json& j) {
  g.gamma = j.value("gamma", g.gamma);
  g.mask_size = j.value("mask_size", g.mask_size);
  g.epochs = j.value("epochs", g.epochs);
  g.warmup_epochs = j.value("warmup_epochs", g.warmup_epochs);
  g.batch_size = j.value("batch_size", g.batch_size);
  g.lr_verifier = j.value("lr_verifier", g.lr_verifier);
  g.lr_provers = j.value("lr_provers", g.lr_provers);
  g.weight_decay_verifier = j.value("weight_decay_verifier", g.weight_decay_verifier);
  g.weight_decay_provers = j.value("weight_decay_provers", g.weight_decay_provers);
  g.l1_penalty = j.value("l1_penalty", g.l1_penalty);
  if (j.contains("selector")) {
    g.selector = parse_enum(kSelectors, j["selector"].get<std::string>(), "selector");
  }
  if (j.contains("verifier_encoder")) {
    g.verifier_encoder =
        parse_enum(kSelectors, j["verifier_encoder"].get<std::string>(), "verifier_encoder");
  }
  if (j.contains("granularity")) {
    g.granularity =
        parse_enum(kGranularities, j["granularity"].get<std::string>(), "granularity");
  }
  g.seed = j.value("seed", g.seed);
  if (j.contains("encoding")) {
    g.encoding = parse_enum(kEncodings, j["encoding"].get<std::string>(), "encoding");
  }
  g.verifier_hidden = j.value("verifier_hidden", g.verifier_hidden);
  g.prover_hidden = j.value("prover_hidden", g.prover_hidden);
  g.attention_heads = j.value("attention_heads", g.attention_heads);
  g.attention_blocks = j.value("attention_blocks", g.attention_blocks);
  if (j.contains("pooling")) {
    g.pooling = parse_enum(kPools, j["pooling"].get<std::string>(), "pooling");
  }
  g.dropout = j.value("dropout", g.dropout);
}

void overlay_baseline(BaselineConfig& b, const json& j) {
  if (j.contains("kind")) {
    b.kind = parse_enum(kBaselines, j["kind"].get<std::string>(), "baseline kind");
  }
  b.epochs = j.value("epochs", b.epochs);
  b.batch_size = j.value("batch_size", b.batch_size);
  b.lr = j.value("lr", b.lr);
  b.weight_decay = j.value("weight_decay", b.weight_decay);
  b.hidden = j.value("hidden", b.hidden);
  b.seed = j.value("seed", b.seed);
}

void overlay_sweep(SweepConfig& s, const json& j) {
  s.kind = j.value("kind", s.kind);
  if (j.contains("clean_ratios")) s.clean_ratios = j["clean_ratios"].get<std::vector<double>>();
  if (j.contains("mask_sizes")) {
    s.mask_sizes = j["mask_sizes"].get<std::vector<std::size_t>>();
  }
  if (j.contains("models")) s.models = j["models"].get<std::vector<std::string>>();
  if (j.contains("seeds")) s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
}

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  std::string preset = "hans3-analog";
  if (j.contains("dataset") && j["dataset"].contains("preset")) {
    preset = j["dataset"]["preset"].get<std::string>();
  }
  RunConfig cfg = default_config(preset);
  try {
    if (j.contains("dataset")) overlay_dataset(cfg.dataset, j["dataset"]);
    if (j.contains("game")) overlay_game(cfg.game, j["game"]);
    if (j.contains("baseline")) overlay_baseline(cfg.baseline, j["baseline"]);
    if (j.contains("sweep")) overlay_sweep(cfg.sweep, j["sweep"]);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return cfg;
}

std::string config_to_json_text(const RunConfig& cfg, int indent) {
  json j;
  j["dataset"] = {{"preset", cfg.dataset.preset},
                  {"train", cfg.dataset.train},
                  {"val", cfg.dataset.val},
                  {"test", cfg.dataset.test},
                  {"clean_ratio", cfg.dataset.clean_ratio},
                  {"encoding", enum_name(kEncodings, cfg.dataset.encoding)},
                  {"seed", cfg.dataset.seed}};
  j["game"] = {{"gamma", cfg.game.gamma},
               {"mask_size", cfg.game.mask_size},
               {"epochs", cfg.game.epochs},
               {"warmup_epochs", cfg.game.warmup_epochs},
               {"batch_size", cfg.game.batch_size},
               {"lr_verifier", cfg.game.lr_verifier},
               {"lr_provers", cfg.game.lr_provers},
               {"weight_decay_verifier", cfg.game.weight_decay_verifier},
               {"weight_decay_provers", cfg.game.weight_decay_provers},
               {"l1_penalty", cfg.game.l1_penalty},
               {"selector", enum_name(kSelectors, cfg.game.selector)},
               {"verifier_encoder", enum_name(kSelectors, cfg.game.verifier_encoder)},
               {"granularity", enum_name(kGranularities, cfg.game.granularity)},
               {"seed", cfg.game.seed},
               {"encoding", enum_name(kEncodings, cfg.game.encoding)},
               {"verifier_hidden", cfg.game.verifier_hidden},
               {"prover_hidden", cfg.game.prover_hidden},
               {"attention_heads", cfg.game.attention_heads},
               {"attention_blocks", cfg.game.attention_blocks},
               {"pooling", enum_name(kPools, cfg.game.pooling)},
               {"dropout", cfg.game.dropout}};
  j["baseline"] = {{"kind", enum_name(kBaselines, cfg.baseline.kind)},
                   {"epochs", cfg.baseline.epochs},
                   {"batch_size", cfg.baseline.batch_size},
                   {"lr", cfg.baseline.lr},
                   {"weight_decay", cfg.baseline.weight_decay},
                   {"hidden", cfg.baseline.hidden},
                   {"seed", cfg.baseline.seed}};
  j["sweep"] = {{"kind", cfg.sweep.kind},
                {"clean_ratios", cfg.sweep.clean_ratios},
                {"mask_sizes", cfg.sweep.mask_sizes},
                {"models", cfg.sweep.models},
                {"seeds", cfg.sweep.seeds}};
  return j.dump(indent);
}

namespace {

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // unquoted strings are taken literally
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

RunConfig resolve_config(const std::optional<std::string>& config_path,
                         const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed_override) {
  json j = json::object();
  if (config_path) {
    std::ifstream is(*config_path);
    if (!is) throw ConfigError("cannot read config file '" + *config_path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    try {
      j = json::parse(ss.str());
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  for (const std::string& ov : overrides) apply_override(j, ov);
  if (seed_override) {
    j["game"]["seed"] = *seed_override;
    j["dataset"]["seed"] = *seed_override;
  }
  return config_from_json_text(j.dump());
}

// ---------------------------------------------------------------------------
// checksums
// ---------------------------------------------------------------------------

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot checksum missing file '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    if (is.eof()) break;
  }
  return h;
}

std::uint64_t normalized_metrics_checksum(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeError("cannot checksum missing file '" + path + "'");
  json j = json::parse(is);
  if (j.contains("wall_clock_seconds")) j["wall_clock_seconds"] = 0.0;
  for (const char* key : {"val", "test", "train"}) {
    if (j.contains(key) && j[key].is_object() && j[key].contains("wall_clock_seconds")) {
      j[key]["wall_clock_seconds"] = 0.0;
    }
  }
  const std::string text = j.dump(2);
  return fnv1a64(text.data(), text.size());
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

namespace {

std::string ratio_tag(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", ratio * 100.0);
  return buf;
}

std::string generate_one(const RunConfig& cfg, const std::string& preset, double clean_ratio,
                         const std::string& out_dir, const std::string& stem_name) {
  const RuleSpec spec = rule_preset(preset);
  const DatasetBundle bundle =
      generate_synthetic(spec, {cfg.dataset.train, cfg.dataset.val, cfg.dataset.test},
                         clean_ratio, cfg.dataset.encoding, cfg.dataset.seed);
  const std::string stem = (fs::path(out_dir) / stem_name).string();
  save_encodings(bundle, stem);
  const MiReport mi = attach_shortcut_statistics(bundle);
  std::ofstream os(stem + ".mi.json");
  os << mi.to_json() << '\n';
  if (!os) throw RuntimeError("failed writing '" + stem + ".mi.json'");
  return stem;
}

}  // namespace

std::string run_generate(const RunConfig& cfg, const std::string& out_dir) {
  if (cfg.dataset.clean_ratio < 0.0 || cfg.dataset.clean_ratio > 1.0) {
    throw ConfigError("clean_ratio must be in [0,1]");
  }
  const std::string& preset = cfg.dataset.preset;
  if (preset.ends_with("-grid")) {
    const std::string base = preset.substr(0, preset.size() - 5) + "-analog";
    rule_preset(base);  // validate before creating anything
    fs::create_directories(out_dir);
    for (double ratio : cfg.sweep.clean_ratios) {
      generate_one(cfg, base, ratio, out_dir, base + "_clean" + ratio_tag(ratio));
    }
    return out_dir;
  }
  rule_preset(preset);
  fs::create_directories(out_dir);
  return generate_one(cfg, preset, cfg.dataset.clean_ratio, out_dir, preset);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TrainOutputs run_train(const RunConfig& cfg, const std::string& dataset_stem,
                       const std::string& out_dir) {
  const DatasetBundle data = load_encodings(dataset_stem);
  validate_game_config(cfg.game, data);  // before any file write
  fs::create_directories(out_dir);

  AgentBundle agents = make_agents(cfg.game, data);
  const TrainLog log = train(agents, data, cfg.game);

  TrainOutputs out;
  out.checkpoint_path = (fs::path(out_dir) / "checkpoint.ncvc").string();
  out.log_path = (fs::path(out_dir) / "train_log.csv").string();
  out.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  const std::string config_snapshot = config_to_json_text(cfg);
  save_agents(out.checkpoint_path, agents, config_snapshot);
  write_training_log_csv(out.log_path, log);

  out.train_report = evaluate_metrics(data.train, agents, cfg.game, data);
  const std::string train_json_path = (fs::path(out_dir) / "metrics_train.json").string();
  {
    std::ofstream os(train_json_path);
    os << out.train_report.to_json() << '\n';
  }
  std::string val_json_path;
  if (data.val.size() > 0) {
    out.val_report = evaluate_metrics(data.val, agents, cfg.game, data);
    val_json_path = (fs::path(out_dir) / "metrics_val.json").string();
    std::ofstream os(val_json_path);
    os << out.val_report.to_json() << '\n';
  }

  json manifest;
  manifest["config"] = json::parse(config_snapshot);
  manifest["dataset"] = {{"stem", dataset_stem},
                         {"preset", data.preset_name},
                         {"seed", data.seed},
                         {"clean_ratio", data.clean_ratio}};
  manifest["seeds"] = {cfg.game.seed};
  char hex[32];
  auto hexsum = [&hex](std::uint64_t h) {
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
  };
  json outputs;
  outputs["checkpoint.ncvc"] = hexsum(file_checksum(out.checkpoint_path));
  outputs["train_log.csv"] = hexsum(file_checksum(out.log_path));
  // metric files carry wall-clock fields; their checksums are taken over a
  // normalized copy with those fields zeroed
  outputs["metrics_train.json"] = "norm:" + hexsum(normalized_metrics_checksum(train_json_path));
  if (!val_json_path.empty()) {
    outputs["metrics_val.json"] = "norm:" + hexsum(normalized_metrics_checksum(val_json_path));
  }
  manifest["outputs"] = outputs;
  std::ofstream os(out.manifest_path);
  os << manifest.dump(2) << '\n';
  if (!os) throw RuntimeError("failed writing manifest '" + out.manifest_path + "'");
  return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

MetricsReport run_eval(const std::string& checkpoint_path, const std::string& dataset_stem,
                       const std::string& split, bool exhaustive,
                       std::string* report_json_out) {
  const DatasetBundle data = load_encodings(dataset_stem);
  auto [header, params] = load_checkpoint(checkpoint_path);
  (void)params;
  const RunConfig cfg = config_from_json_text(header.config_json);
  const AgentBundle agents = load_agents(checkpoint_path, cfg.game, data);

  if (split == "both") {
    MetricsReport val_rep = evaluate_metrics(data.val, agents, cfg.game, data, exhaustive);
    MetricsReport test_rep = evaluate_metrics(data.test, agents, cfg.game, data, exhaustive);
    test_rep.val_test_gap = val_test_gap(val_rep, test_rep);
    if (report_json_out) {
      json j;
      j["val"] = json::parse(val_rep.to_json());
      j["test"] = json::parse(test_rep.to_json());
      *report_json_out = j.dump(2);
    }
    return test_rep;
  }
  const MetricsReport rep =
      evaluate_metrics(data.split(split), agents, cfg.game, data, exhaustive);
  if (report_json_out) *report_json_out = rep.to_json();
  return rep;
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

std::string run_explain(const std::string& checkpoint_path, const std::string& dataset_stem,
                        const std::string& split, const std::vector<std::uint64_t>& ids,
                        bool use_morgana, std::vector<std::uint64_t>* unknown_out) {
  const DatasetBundle data = load_encodings(dataset_stem);
  auto [header, params] = load_checkpoint(checkpoint_path);
  (void)params;
  const RunConfig cfg = config_from_json_text(header.config_json);
  const AgentBundle agents = load_agents(checkpoint_path, cfg.game, data);
  const Split& s = data.split(split);

  std::string lines;
  for (std::uint64_t id : ids) {
    if (id >= s.size()) {
      if (unknown_out) unknown_out->push_back(id);
      continue;
    }
    const CertificateRecord rec =
        infer(s.samples[id], id, agents, cfg.game, data, use_morgana);
    lines += certificate_to_json(rec);
    lines += '\n';
  }
  return lines;
}

}  // namespace ncv
