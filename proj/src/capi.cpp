#include "ncv/ncv.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncv/runner.hpp"

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return NCV_OK;
  } catch (const ncv::ConfigError& e) {
    g_last_error = e.what();
    return NCV_ERR_CONFIG;
  } catch (const ncv::ContractError& e) {
    g_last_error = e.what();
    return NCV_ERR_CONTRACT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return NCV_ERR_RUNTIME;
  }
}

int require(const void* p, const char* what) {
  if (p) return NCV_OK;
  g_last_error = std::string(what) + " must not be NULL";
  return NCV_ERR_CONFIG;
}

}  // namespace

struct ncv_dataset {
  ncv::DatasetBundle bundle;
};

struct ncv_model {
  ncv::DatasetBundle bundle;
  ncv::RunConfig config;
  ncv::AgentBundle agents;
};

extern "C" {

const char* ncv_version(void) { return "1.0.0"; }

const char* ncv_last_error(void) { return g_last_error.c_str(); }

void ncv_string_free(char* s) { std::free(s); }

int ncv_config_resolve(const char* config_path_or_null, const char* const* overrides,
                       size_t n_overrides, long long seed_or_negative,
                       char** config_json_out) {
  if (int rc = require(config_json_out, "config_json_out")) return rc;
  return guarded([&] {
    std::optional<std::string> path;
    if (config_path_or_null) path = config_path_or_null;
    std::vector<std::string> ovs;
    for (size_t i = 0; i < n_overrides; ++i) ovs.emplace_back(overrides[i]);
    std::optional<std::uint64_t> seed;
    if (seed_or_negative >= 0) seed = static_cast<std::uint64_t>(seed_or_negative);
    const ncv::RunConfig cfg = ncv::resolve_config(path, ovs, seed);
    *config_json_out = dup_string(ncv::config_to_json_text(cfg));
  });
}

int ncv_generate(const char* config_json, const char* out_dir, char** stem_out) {
  if (int rc = require(config_json, "config_json")) return rc;
  if (int rc = require(out_dir, "out_dir")) return rc;
  return guarded([&] {
    const ncv::RunConfig cfg = ncv::config_from_json_text(config_json);
    const std::string stem = ncv::run_generate(cfg, out_dir);
    if (stem_out) *stem_out = dup_string(stem);
  });
}

int ncv_train(const char* config_json, const char* dataset_stem, const char* out_dir,
              char** manifest_json_out) {
  if (int rc = require(config_json, "config_json")) return rc;
  if (int rc = require(dataset_stem, "dataset_stem")) return rc;
  if (int rc = require(out_dir, "out_dir")) return rc;
  return guarded([&] {
    const ncv::RunConfig cfg = ncv::config_from_json_text(config_json);
    const ncv::TrainOutputs out = ncv::run_train(cfg, dataset_stem, out_dir);
    if (manifest_json_out) {
      std::ifstream is(out.manifest_path);
      std::string text((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
      *manifest_json_out = dup_string(text);
    }
  });
}

int ncv_eval(const char* checkpoint_path, const char* dataset_stem, const char* split,
             int exhaustive, char** report_json_out) {
  if (int rc = require(checkpoint_path, "checkpoint_path")) return rc;
  if (int rc = require(dataset_stem, "dataset_stem")) return rc;
  return guarded([&] {
    std::string text;
    ncv::run_eval(checkpoint_path, dataset_stem, split ? split : "both", exhaustive != 0,
                  &text);
    if (report_json_out) *report_json_out = dup_string(text);
  });
}

int ncv_sweep(const char* config_json, const char* out_dir) {
  if (int rc = require(config_json, "config_json")) return rc;
  if (int rc = require(out_dir, "out_dir")) return rc;
  int status = NCV_OK;
  const int rc = guarded([&] {
    if (!ncv::run_sweep(ncv::config_from_json_text(config_json), out_dir)) {
      g_last_error = "one or more sweep cells failed; partial results were kept";
      status = NCV_ERR_RUNTIME;
    }
  });
  return rc != NCV_OK ? rc : status;
}

int ncv_explain(const char* checkpoint_path, const char* dataset_stem, const char* split,
                const unsigned long long* ids, size_t n_ids, int use_morgana,
                char** jsonl_out, char** warnings_out) {
  if (int rc = require(checkpoint_path, "checkpoint_path")) return rc;
  if (int rc = require(dataset_stem, "dataset_stem")) return rc;
  if (warnings_out) *warnings_out = nullptr;
  return guarded([&] {
    std::vector<std::uint64_t> id_list(ids, ids + n_ids);
    std::vector<std::uint64_t> unknown;
    const std::string lines = ncv::run_explain(checkpoint_path, dataset_stem,
                                               split ? split : "test", id_list,
                                               use_morgana != 0, &unknown);
    if (jsonl_out) *jsonl_out = dup_string(lines);
    if (warnings_out && !unknown.empty()) {
      std::string w = "unknown sample ids skipped:";
      for (std::uint64_t id : unknown) w += " " + std::to_string(id);
      *warnings_out = dup_string(w);
    }
  });
}

int ncv_dataset_open(const char* stem, ncv_dataset** out) {
  if (int rc = require(stem, "stem")) return rc;
  if (int rc = require(out, "out")) return rc;
  return guarded([&] {
    auto* d = new ncv_dataset{ncv::load_encodings(stem)};
    *out = d;
  });
}

void ncv_dataset_close(ncv_dataset* d) { delete d; }

int ncv_dataset_info(const ncv_dataset* d, char** json_out) {
  if (int rc = require(d, "dataset")) return rc;
  if (int rc = require(json_out, "json_out")) return rc;
  return guarded([&] {
    nlohmann::json j;
    const ncv::DatasetBundle& b = d->bundle;
    j["kind"] = b.kind == ncv::EncodingKind::flat ? "flat" : "slot";
    j["klasses"] = b.klasses;
    if (b.kind == ncv::EncodingKind::flat) {
      j["flat_width"] = b.flat_width;
    } else {
      j["slot_count"] = b.slot_count;
      j["slot_width"] = b.slot_width;
    }
    j["counts"] = {{"train", b.train.size()}, {"val", b.val.size()}, {"test", b.test.size()}};
    j["clean_ratio"] = b.clean_ratio;
    j["seed"] = b.seed;
    j["preset"] = b.preset_name;
    *json_out = dup_string(j.dump(2));
  });
}

int ncv_model_open(const char* checkpoint_path, const char* dataset_stem, ncv_model** out) {
  if (int rc = require(checkpoint_path, "checkpoint_path")) return rc;
  if (int rc = require(dataset_stem, "dataset_stem")) return rc;
  if (int rc = require(out, "out")) return rc;
  return guarded([&] {
    auto m = std::make_unique<ncv_model>();
    m->bundle = ncv::load_encodings(dataset_stem);
    auto [header, params] = ncv::load_checkpoint(checkpoint_path);
    (void)params;
    m->config = ncv::config_from_json_text(header.config_json);
    m->agents = ncv::load_agents(checkpoint_path, m->config.game, m->bundle);
    *out = m.release();
  });
}

void ncv_model_close(ncv_model* m) { delete m; }

int ncv_model_infer(const ncv_model* m, const char* split, unsigned long long sample_id,
                    int use_morgana, char** certificate_json_out) {
  if (int rc = require(m, "model")) return rc;
  if (int rc = require(certificate_json_out, "certificate_json_out")) return rc;
  return guarded([&] {
    const ncv::Split& s = m->bundle.split(split ? split : "test");
    if (sample_id >= s.size()) {
      throw ncv::ContractError("sample id " + std::to_string(sample_id) +
                               " out of range (split has " + std::to_string(s.size()) +
                               " samples)");
    }
    const ncv::CertificateRecord rec =
        ncv::infer(s.samples[sample_id], sample_id, m->agents, m->config.game, m->bundle,
                   use_morgana != 0);
    *certificate_json_out = dup_string(ncv::certificate_to_json(rec));
  });
}

}  // extern "C"
