#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ncv/ncv.h"

namespace fs = std::filesystem;

namespace {

struct Scoped {
  char* s = nullptr;
  ~Scoped() { ncv_string_free(s); }
  std::string str() const { return s ? s : ""; }
};

fs::path fresh_dir(const char* tag) {
  const fs::path dir = fs::temp_directory_path() / (std::string("ncv_capi_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string tiny_config() {
  const char* ovs[] = {"dataset.preset=xor2",    "dataset.train=160",
                       "dataset.val=48",         "dataset.test=64",
                       "game.epochs=3",          "game.warmup_epochs=2",
                       "game.batch_size=32",     "game.verifier_hidden=16",
                       "game.prover_hidden=16"};
  Scoped cfg;
  REQUIRE(ncv_config_resolve(nullptr, ovs, 9, 21, &cfg.s) == NCV_OK);
  return cfg.str();
}

}  // namespace

TEST_CASE("config resolution reports bad input through status codes") {
  Scoped out;
  const char* bad[] = {"game.selector=warp"};
  CHECK(ncv_config_resolve(nullptr, bad, 1, -1, &out.s) == NCV_ERR_CONFIG);
  CHECK(std::strlen(ncv_last_error()) > 0);
  CHECK(ncv_config_resolve("/no/such/config.json", nullptr, 0, -1, &out.s) ==
        NCV_ERR_CONFIG);
  CHECK(ncv_config_resolve(nullptr, nullptr, 0, -1, nullptr) == NCV_ERR_CONFIG);
}

TEST_CASE("generate, train, eval, explain through the C surface") {
  const auto dir = fresh_dir("pipeline");
  const std::string cfg = tiny_config();

  Scoped stem;
  REQUIRE(ncv_generate(cfg.c_str(), (dir / "data").string().c_str(), &stem.s) == NCV_OK);
  CHECK(fs::exists(stem.str() + ".train.ncvd"));

  Scoped manifest;
  REQUIRE(ncv_train(cfg.c_str(), stem.s, (dir / "run").string().c_str(), &manifest.s) ==
          NCV_OK);
  CHECK(manifest.str().find("checkpoint.ncvc") != std::string::npos);
  const std::string ckpt = (dir / "run" / "checkpoint.ncvc").string();

  Scoped report;
  REQUIRE(ncv_eval(ckpt.c_str(), stem.s, "test", 1, &report.s) == NCV_OK);
  CHECK(report.str().find("\"completeness\"") != std::string::npos);
  CHECK(report.str().find("\"exhaustive_soundness\"") != std::string::npos);
  CHECK(report.str().find("\"rejection_rate\"") != std::string::npos);

  Scoped both;
  REQUIRE(ncv_eval(ckpt.c_str(), stem.s, "both", 0, &both.s) == NCV_OK);
  CHECK(both.str().find("\"val\"") != std::string::npos);
  CHECK(both.str().find("\"val_test_gap\"") != std::string::npos);

  const unsigned long long ids[] = {0, 1, 12345};
  Scoped jsonl, warnings;
  REQUIRE(ncv_explain(ckpt.c_str(), stem.s, "test", ids, 3, 0, &jsonl.s, &warnings.s) ==
          NCV_OK);
  CHECK(warnings.s != nullptr);
  CHECK(warnings.str().find("12345") != std::string::npos);
  const std::string lines = jsonl.str();
  CHECK(std::count(lines.begin(), lines.end(), '\n') == 2);

  // bad checkpoint path maps to a runtime error
  Scoped nope;
  CHECK(ncv_eval("/no/such.ncvc", stem.s, "test", 0, &nope.s) == NCV_ERR_RUNTIME);
  fs::remove_all(dir);
}

TEST_CASE("opaque handles: dataset info and per-sample certificates") {
  const auto dir = fresh_dir("handles");
  const std::string cfg = tiny_config();
  Scoped stem;
  REQUIRE(ncv_generate(cfg.c_str(), (dir / "data").string().c_str(), &stem.s) == NCV_OK);
  Scoped manifest;
  REQUIRE(ncv_train(cfg.c_str(), stem.s, (dir / "run").string().c_str(), &manifest.s) ==
          NCV_OK);

  ncv_dataset* data = nullptr;
  REQUIRE(ncv_dataset_open(stem.s, &data) == NCV_OK);
  Scoped info;
  REQUIRE(ncv_dataset_info(data, &info.s) == NCV_OK);
  CHECK(info.str().find("\"kind\": \"flat\"") != std::string::npos);
  CHECK(info.str().find("\"klasses\": 2") != std::string::npos);

  ncv_model* model = nullptr;
  const std::string ckpt = (dir / "run" / "checkpoint.ncvc").string();
  REQUIRE(ncv_model_open(ckpt.c_str(), stem.s, &model) == NCV_OK);
  Scoped cert;
  REQUIRE(ncv_model_infer(model, "test", 0, 0, &cert.s) == NCV_OK);
  CHECK(cert.str().find("\"prover\":\"merlin\"") != std::string::npos);
  CHECK(cert.str().find("\"posterior\"") != std::string::npos);

  Scoped cert2;
  CHECK(ncv_model_infer(model, "test", 999999, 0, &cert2.s) == NCV_ERR_CONTRACT);

  ncv_model_close(model);
  ncv_dataset_close(data);

  ncv_dataset* missing = nullptr;
  CHECK(ncv_dataset_open("/no/such/stem", &missing) == NCV_ERR_RUNTIME);
  CHECK(std::string(ncv_version()) == "1.0.0");
  fs::remove_all(dir);
}
