#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "l2ae/experiment.hpp"
#include "support/tempdir.hpp"

namespace l2ae {
namespace {

Json patched(Json j, const Json& patch) {
  j.merge_patch(patch);
  return j;
}

Json blob_config(const std::string& task) {
  return patched(Json::parse(R"({
    "seed": 4,
    "dataset": {"name": "blobs",
                "blobs": {"classes": 5, "per_class": 300, "height": 8, "width": 8, "noise": 0.05}},
    "model": {"hidden": [32], "latent_dim": 8},
    "train": {"epochs": 60, "batch_size": 32},
    "cluster": {"k": 5, "restarts": 5}
  })"),
                 {{"task", task}});
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path);
  out << j.dump(2);
}

struct Cli {
  int code;
  std::string out, err;
};

Cli run_cli(const testing::TempDir& dir, const std::string& args) {
  const std::string out = dir.file("stdout.txt"), err = dir.file("stderr.txt");
  const std::string cmd = std::string(L2AE_CLI) + " " + args + " >" + out + " 2>" + err;
  const int status = std::system(cmd.c_str());
  Cli r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  while (!r.out.empty() && r.out.back() == '\n') r.out.pop_back();
  return r;
}

std::string config_error(const Json& j) {
  try {
    parse_experiment_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Schema

TEST(ExperimentConfig, DefaultsResolve) {
  const auto c = parse_experiment_config(patched(blob_config("train"), {{"train", nullptr}, {"model", nullptr}}));
  EXPECT_EQ(c.task, Task::train);
  EXPECT_EQ(c.model.variant, Variant::dense);
  EXPECT_EQ(c.model.normalization, NormalizationMode::unit_ball);
  EXPECT_EQ(c.model.latent_dim, 10u);
  EXPECT_EQ(c.model.height, 8u);
  EXPECT_EQ(c.train.epochs, 100u);
  EXPECT_EQ(c.train.batch_size, 256u);
  EXPECT_EQ(c.train.seed, Rng(4).child("train").seed());
  EXPECT_EQ(c.cluster.split, "train");
  EXPECT_EQ(c.anomaly.setup.k, 9u);
  EXPECT_EQ(c.anomaly.setup.repetitions, 10u);
  EXPECT_DOUBLE_EQ(c.anomaly.setup.keep_ratio, 0.1);
}

TEST(ExperimentConfig, ConvDefaultsToLongerTraining) {
  const auto c = parse_experiment_config(
      patched(blob_config("train"), {{"train", nullptr}, {"model", {{"variant", "conv"}}}}));
  EXPECT_EQ(c.model.variant, Variant::conv);
  EXPECT_FALSE(c.model.conv.empty());
  EXPECT_EQ(c.train.epochs, 200u);
}

TEST(ExperimentConfig, ErrorsNameTheFieldPath) {
  const auto base = blob_config("cluster");
  EXPECT_EQ(config_error(patched(base, {{"colour", 1}})), "colour: unknown key");
  EXPECT_EQ(config_error(patched(base, {{"model", {{"depth", 3}}}})), "model.depth: unknown key");
  EXPECT_EQ(config_error(patched(base, {{"train", {{"optimiser", "adam"}}}})), "train.optimiser: unknown key");
  EXPECT_EQ(config_error(patched(base, {{"dataset", {{"blobs", {{"hue", 2}}}}}})), "dataset.blobs.hue: unknown key");
  EXPECT_NE(config_error(patched(base, {{"train", {{"epochs", "ten"}}}})).find("train.epochs"), std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"cluster", {{"k", 0}}}})).find("cluster.k"), std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"cluster", {{"split", "val"}}}})).find("cluster.split"), std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"task", "dance"}})).find("task"), std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"dataset", {{"name", "cifar"}}}})).find("dataset.name"), std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"model", {{"normalization", "group"}}}})).find("model.normalization"),
            std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"compare", {{"modes", {"none", "spectral"}}}}})).find("compare.modes[1]"),
            std::string::npos);
  EXPECT_NE(config_error(patched(base, {{"anomaly", {{"keep_ratio", 1.5}}}})).find("anomaly"), std::string::npos);
  Json no_task = base;
  no_task.erase("task");
  EXPECT_EQ(config_error(no_task), "task: required field missing");
}

TEST(ExperimentConfig, CheckpointRules) {
  EXPECT_NE(config_error(blob_config("export-embedding")).find("checkpoint"), std::string::npos);
  EXPECT_NE(config_error(patched(blob_config("cluster"), {{"checkpoint", "/nonexistent/m.l2ck"}})).find("checkpoint"),
            std::string::npos);
}

TEST(ExperimentConfig, BatchNormNeedsBatchesOfTwo) {
  const auto base = blob_config("compare-norm");
  EXPECT_NE(config_error(patched(base, {{"train", {{"batch_size", 1}}}})).find("train.batch_size"), std::string::npos);
  EXPECT_NE(config_error(patched(blob_config("train"), {{"model", {{"normalization", "batch"}}},
                                                        {"train", {{"batch_size", 1}}}}))
                .find("train.batch_size"),
            std::string::npos);
}

TEST(ExperimentConfig, MissingDataFilesAreConfigErrors) {
  const Json j = {{"task", "train"}, {"dataset", {{"name", "idx"}, {"train_images", "/nonexistent/a"}}}};
  EXPECT_NE(config_error(j).find("dataset.train_images"), std::string::npos);
  testing::TempDir empty;
  EXPECT_NE(config_error({{"task", "train"}, {"dataset", {{"name", "idx"}}}}).find("dataset.train_images: required"),
            std::string::npos);
  EXPECT_NE(config_error({{"task", "train"}, {"dataset", {{"name", "usps"}, {"train_file", "/nonexistent/u.txt"}}}})
                .find("dataset.train_file: file not found"),
            std::string::npos);
  EXPECT_THROW(parse_experiment_config({{"task", "train"}, {"dataset", {{"name", "mnist"}}}}, {}, empty.path()),
               ConfigError);
}

TEST(ExperimentConfig, DataRootResolvesBundledSubset) {
  const auto c = parse_experiment_config({{"task", "train"}, {"dataset", {{"name", "mnist5k"}}}}, {},
                                         testing::data_root());
  EXPECT_EQ(c.dataset.train_images, testing::mnist5k_images());
  EXPECT_EQ(c.model.height, 28u);
}

TEST(ConfigDigest, CoversResultsButNotOutputLocation) {
  const auto base = blob_config("cluster");
  const auto d0 = config_digest(parse_experiment_config(base));
  EXPECT_EQ(d0.size(), 64u);
  EXPECT_EQ(config_digest(parse_experiment_config(patched(base, {{"output_dir", "elsewhere"}}))), d0);
  EXPECT_NE(config_digest(parse_experiment_config(base, 5)), d0);
  EXPECT_NE(config_digest(parse_experiment_config(patched(base, {{"train", {{"epochs", 61}}}}))), d0);
  EXPECT_NE(config_digest(parse_experiment_config(patched(base, {{"cluster", {{"k", 6}}}}))), d0);
  // An explicit value equal to the default resolves to the same config.
  EXPECT_EQ(config_digest(parse_experiment_config(patched(base, {{"model", {{"normalization", "unit-ball"}}}}))), d0);
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(OutputDir, NeverReusesADirectory) {
  testing::TempDir dir;
  const std::string digest(64, 'a');
  const auto a = fresh_output_dir(dir.path().string(), "train", digest);
  const auto b = fresh_output_dir(dir.path().string(), "train", digest);
  const auto c = fresh_output_dir(dir.path().string(), "train", digest);
  EXPECT_EQ(a.filename(), "train-aaaaaaaaaaaaaaaa");
  EXPECT_EQ(b.filename(), "train-aaaaaaaaaaaaaaaa-r2");
  EXPECT_EQ(c.filename(), "train-aaaaaaaaaaaaaaaa-r3");
}

TEST(ShippedConfigs, ParseOrNeedOnlyData) {
  std::size_t parsed = 0;
  for (const auto& entry : std::filesystem::directory_iterator(L2AE_CONFIG_DIR)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".json" || name == "schema.json") continue;
    const Json j = read_json_file(entry.path().string());
    try {
      if (j.at("task") == "export-embedding") {
        EXPECT_THROW(parse_experiment_config(j, {}, testing::data_root()), ConfigError) << name;
        const Json with_ck = patched(j, {{"checkpoint", "/nonexistent/m.l2ck"}});
        EXPECT_THROW(parse_experiment_config(with_ck, {}, testing::data_root()), ConfigError) << name;
        continue;
      }
      parse_experiment_config(j, {}, testing::data_root());
      ++parsed;
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      EXPECT_EQ(msg.rfind("dataset.", 0), 0u) << name << ": " << msg;
      EXPECT_NE(msg.find("set L2AE_DATA_DIR"), std::string::npos) << name << ": " << msg;
    }
  }
  EXPECT_GE(parsed, 5u);
}

TEST(ShippedConfigs, SchemaDefaultsAreAccepted) {
  const Json schema = read_json_file(std::string(L2AE_CONFIG_DIR) + "/schema.json");
  const auto& top = schema.at("properties");
  EXPECT_EQ(schema.at("additionalProperties"), false);
  for (const char* section : {"model", "train", "cluster", "anomaly", "compare", "embedding"}) {
    for (const auto& [key, prop] : top.at(section).at("properties").items()) {
      if (!prop.contains("default")) continue;
      const Json j = patched(blob_config("cluster"), {{section, {{key, prop.at("default")}}}});
      EXPECT_EQ(config_error(j), "") << section << "." << key;
    }
  }
  std::set<std::string> schema_keys;
  for (const auto& [key, prop] : top.items()) schema_keys.insert(key);
  for (const auto& key : resolved_json(parse_experiment_config(blob_config("anomaly"))).items())
    EXPECT_TRUE(schema_keys.count(key.key())) << key.key();
}

TEST(ConfigDigest, FollowsCheckpointContent) {
  testing::TempDir dir;
  const auto trained =
      run_experiment(parse_experiment_config(patched(blob_config("train"), {{"train", {{"epochs", 1}}}})),
                     dir.file("a"));
  const auto ck = dir.file("model.l2ck");
  std::filesystem::copy_file(trained.dir / "model.l2ck", ck);
  const Json j = patched(blob_config("export-embedding"), {{"checkpoint", ck}});
  const auto before = config_digest(parse_experiment_config(j));
  const auto other =
      run_experiment(parse_experiment_config(patched(blob_config("train"), {{"train", {{"epochs", 2}}}})),
                     dir.file("b"));
  std::filesystem::copy_file(other.dir / "model.l2ck", ck, std::filesystem::copy_options::overwrite_existing);
  EXPECT_NE(config_digest(parse_experiment_config(j)), before);
}

// Commands through the library

TEST(Commands, TrainWritesArtifacts) {
  testing::TempDir dir;
  auto c = parse_experiment_config(patched(blob_config("train"), {{"train", {{"epochs", 7}}}}));
  const auto out = run_experiment(c, dir.path().string());
  for (const char* f : {"config.json", "report.json", "model.l2ck", "model-history.csv"})
    EXPECT_TRUE(std::filesystem::exists(out.dir / f)) << f;
  EXPECT_EQ(line_count(out.dir / "model-history.csv"), 7u + 1u);
  const auto report = Json::parse(slurp(out.dir / "report.json"));
  EXPECT_EQ(report["task"], "train");
  EXPECT_EQ(report["config_digest"], config_digest(c));
  EXPECT_EQ(report["toolkit_version"], kToolkitVersion);
  EXPECT_TRUE(report.contains("wall_time_seconds"));
  EXPECT_EQ(report["metrics"]["history"]["epochs"], 7);
  EXPECT_EQ(Json::parse(slurp(out.dir / "config.json")), resolved_json(c));
  const auto bytes = slurp(out.dir / "model.l2ck");
  EXPECT_EQ(report["metrics"]["checkpoint_sha256"], sha256_hex(bytes));
}

TEST(Commands, RerunIsBitIdentical) {
  testing::TempDir dir;
  const auto c = parse_experiment_config(patched(blob_config("cluster"), {{"train", {{"epochs", 5}}}}));
  const auto a = run_experiment(c, dir.path().string());
  const auto b = run_experiment(c, dir.path().string());
  EXPECT_NE(a.dir, b.dir);
  EXPECT_EQ(slurp(a.dir / "run0.l2ck"), slurp(b.dir / "run0.l2ck"));
  EXPECT_EQ(a.report["metrics"].dump(), b.report["metrics"].dump());
  EXPECT_EQ(slurp(a.dir / "run0-centroids.csv"), slurp(b.dir / "run0-centroids.csv"));
  EXPECT_EQ(a.report["config_digest"], b.report["config_digest"]);
}

TEST(Commands, ConvOnUspsRecordsLatentDimTen) {
  testing::TempDir dir;
  {
    std::ofstream f(dir.file("usps.txt"));
    Rng rng(8);
    for (int i = 0; i < 40; ++i) {
      f << (i % 10);
      for (int j = 0; j < 256; ++j) f << ' ' << 2 * rng.uniform() - 1;
      f << '\n';
    }
  }
  const Json j = {{"task", "train"},
                  {"dataset", {{"name", "usps"}, {"train_file", dir.file("usps.txt")}}},
                  {"model", {{"variant", "conv"}}},
                  {"train", {{"epochs", 2}, {"batch_size", 16}}}};
  const auto c = parse_experiment_config(j);
  EXPECT_EQ(c.model.height, 16u);
  EXPECT_EQ(c.model.width, 16u);
  const auto out = run_experiment(c, dir.file("out"));
  EXPECT_EQ(out.report["model"]["latent_dim"], 10);
  EXPECT_EQ(out.report["model"]["variant"], "conv");
  EXPECT_EQ(out.report["metrics"]["latent_dim"], 10);
  const auto ck = load_checkpoint((out.dir / "model.l2ck").string());
  EXPECT_EQ(ck.spec.latent_dim, 10u);
  EXPECT_EQ(encode_dataset(ck, load_usps_text(dir.file("usps.txt"))).shape(), (Shape{40, 10}));
}

TEST(Commands, BlobClusteringIsNearPerfect) {
  testing::TempDir dir;
  const auto out = run_experiment(parse_experiment_config(blob_config("cluster")), dir.path().string());
  EXPECT_GE(out.report["metrics"]["acc"]["mean"].get<double>(), 0.99);
  EXPECT_EQ(line_count(out.dir / "run0-centroids.csv"), 5u + 1u);
  std::ifstream in(out.dir / "run0-centroids.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "cluster,z0,z1,z2,z3,z4,z5,z6,z7");
}

TEST(Commands, ClusterFromCheckpointSkipsTraining) {
  testing::TempDir dir;
  const auto trained =
      run_experiment(parse_experiment_config(patched(blob_config("train"), {{"train", {{"epochs", 3}}}})),
                     dir.file("a"));
  const auto ck = (trained.dir / "model.l2ck").string();
  const auto out = run_experiment(parse_experiment_config(patched(blob_config("cluster"), {{"checkpoint", ck}})),
                                  dir.file("b"));
  EXPECT_FALSE(std::filesystem::exists(out.dir / "run0.l2ck"));
  EXPECT_EQ(out.report["metrics"]["runs"][0]["checkpoint"], ck);
  EXPECT_TRUE(std::filesystem::exists(out.dir / "run0-centroids.csv"));
}

TEST(Commands, SyntheticOutlierBlobIsDetected) {
  testing::TempDir dir;
  const Json j = patched(blob_config("anomaly"),
                         {{"dataset", {{"holdout_per_class", 100}}},
                          {"anomaly", {{"anomaly_class", 4}, {"keep_ratio", 0.05}, {"k", 4}, {"repetitions", 2},
                                       {"kmeans_restarts", 5}}}});
  const auto out = run_experiment(parse_experiment_config(j), dir.path().string());
  const auto& m = out.report["metrics"];
  EXPECT_GT(m["mean_auc_cluster"].get<double>(), 0.9);
  EXPECT_EQ(m["repetitions"].size(), 2u);
  EXPECT_EQ(m["test_samples"], 500);
  EXPECT_EQ(m["test_anomalies"], 100);
  for (const char* f : {"rep0-roc-cluster.csv", "rep0-roc-reconstruction.csv", "rep1-roc-cluster.csv"})
    EXPECT_TRUE(std::filesystem::exists(out.dir / f)) << f;
  std::ifstream roc(out.dir / "rep0-roc-cluster.csv");
  std::string header;
  std::getline(roc, header);
  EXPECT_EQ(header, "threshold,fpr,tpr");
}

TEST(Commands, AnomalyNeedsATestSplit) {
  testing::TempDir dir;
  EXPECT_THROW(run_experiment(parse_experiment_config(blob_config("anomaly")), dir.path().string()), ConfigError);
}

TEST(Commands, CompareNormReportsEveryMode) {
  testing::TempDir dir;
  const auto c = parse_experiment_config(patched(blob_config("compare-norm"), {{"train", {{"epochs", 2}}}}));
  const auto out = run_experiment(c, dir.path().string());
  const auto& modes = out.report["metrics"]["modes"];
  for (const char* m : {"none", "unit-ball", "batch", "layer"}) {
    ASSERT_TRUE(modes.contains(m)) << m;
    EXPECT_EQ(modes[m]["runs"][0]["train_seed"], modes["none"]["runs"][0]["train_seed"]);
    EXPECT_TRUE(std::filesystem::exists(out.dir / (std::string(m) + "-run0.l2ck")));
  }
}

TEST(Commands, ExportEmbedding) {
  testing::TempDir dir;
  const auto trained =
      run_experiment(parse_experiment_config(patched(blob_config("train"), {{"train", {{"epochs", 3}}}})),
                     dir.file("a"));
  const Json j = patched(blob_config("export-embedding"), {{"checkpoint", (trained.dir / "model.l2ck").string()}});
  const auto out = run_experiment(parse_experiment_config(j), dir.file("b"));
  EXPECT_EQ(line_count(out.dir / "embedding.csv"), 1500u + 1u);
  EXPECT_EQ(line_count(out.dir / "class_centroids.csv"), 5u + 1u);
  std::ifstream in(out.dir / "embedding.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "index,label,x,y");
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string idx, label, x, y;
    std::getline(ls, idx, ',');
    std::getline(ls, label, ',');
    std::getline(ls, x, ',');
    std::getline(ls, y, ',');
    EXPECT_LE(std::hypot(std::stod(x), std::stod(y)), 1.0 + 1e-5);
  }
}

// Process contract

TEST(Binary, ExitCodes) {
  testing::TempDir dir;
  write_json(dir.file("ok.json"), patched(blob_config("train"), {{"train", {{"epochs", 2}}}}));
  auto ok = run_cli(dir, "train --config " + dir.file("ok.json") + " --out " + dir.file("out") + " -q");
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(ok.out) / "model.l2ck")) << ok.out;

  write_json(dir.file("unknown.json"), patched(blob_config("train"), {{"model", {{"depth", 3}}}}));
  auto bad = run_cli(dir, "train --config " + dir.file("unknown.json"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("model.depth"), std::string::npos) << bad.err;

  write_json(dir.file("emb.json"), blob_config("export-embedding"));
  auto missing = run_cli(dir, "export-embedding --config " + dir.file("emb.json"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("checkpoint"), std::string::npos) << missing.err;

  auto absent = run_cli(dir, "cluster --config " + dir.file("ok.json") + " --checkpoint " + dir.file("nope.l2ck"));
  EXPECT_EQ(absent.code, 2);

  EXPECT_EQ(run_cli(dir, "").code, 2);
  EXPECT_EQ(run_cli(dir, "fly --config " + dir.file("ok.json")).code, 2);
  EXPECT_EQ(run_cli(dir, "train --config " + dir.file("ok.json") + " --jobs 0").code, 2);
  EXPECT_EQ(run_cli(dir, "train").code, 2);
  EXPECT_EQ(run_cli(dir, "cluster --config " + dir.file("ok.json")).code, 2) << "task in config disagrees";

  {
    std::ofstream junk(dir.file("junk.l2ck"));
    junk << "not a checkpoint";
  }
  auto runtime =
      run_cli(dir, "export-embedding --config " + dir.file("emb.json") + " --checkpoint " + dir.file("junk.l2ck"));
  EXPECT_EQ(runtime.code, 1) << runtime.err;

  EXPECT_EQ(run_cli(dir, "--help").code, 0);
}

TEST(Binary, SeedOverrideChangesTheDigest) {
  testing::TempDir dir;
  write_json(dir.file("c.json"), patched(blob_config("train"), {{"train", {{"epochs", 1}}}}));
  const auto a = run_cli(dir, "train -q --config " + dir.file("c.json") + " --out " + dir.file("o"));
  const auto b = run_cli(dir, "train -q --config " + dir.file("c.json") + " --out " + dir.file("o") + " --seed 99");
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  const auto ra = Json::parse(slurp(std::filesystem::path(a.out) / "report.json"));
  const auto rb = Json::parse(slurp(std::filesystem::path(b.out) / "report.json"));
  EXPECT_NE(ra["config_digest"], rb["config_digest"]);
  EXPECT_EQ(Json::parse(slurp(std::filesystem::path(b.out) / "config.json"))["seed"], 99);
}

}  // namespace
}  // namespace l2ae
