#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "anomaly.hpp"
#include "checkpoint.hpp"
#include "clustering.hpp"
#include "config_json.hpp"
#include "data.hpp"
#include "embedding.hpp"
#include "training.hpp"

namespace l2ae {

inline constexpr const char* kToolkitVersion = "0.1.0";

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

// Dataset section.

struct BlobConfig {
  int classes = 10;
  std::size_t per_class = 100;
  std::size_t height = 8, width = 8;
  double separation = 1.0, noise = 0.05;
};

struct DatasetConfig {
  std::string name = "mnist";  // mnist | mnist5k | idx | usps | blobs
  std::string train_images, train_labels, test_images, test_labels;  // IDX
  std::string train_file, test_file;                                  // USPS text
  BlobConfig blobs;
  std::size_t holdout_per_class = 0;  // carve a test split out of the training files
  std::size_t subsample_per_class = 0, subsample_total = 0;  // applied to the training split
};

struct ClusterTask {
  std::size_t k = 10;
  std::size_t restarts = 20;
  std::size_t max_iter = 300;
  std::size_t runs = 1;
  std::string split = "train";
};

struct AnomalyTask {
  AnomalySetup setup;
  std::size_t kmeans_restarts = 20;
};

enum class Task { train, cluster, anomaly, compare_norm, export_embedding };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::train: return "train";
    case Task::cluster: return "cluster";
    case Task::anomaly: return "anomaly";
    case Task::compare_norm: return "compare-norm";
    case Task::export_embedding: return "export-embedding";
  }
  return "train";
}

inline Task parse_task(const std::string& s) {
  for (auto t : {Task::train, Task::cluster, Task::anomaly, Task::compare_norm, Task::export_embedding})
    if (to_string(t) == s) return t;
  if (s == "compare-normalization") return Task::compare_norm;
  throw ConfigError("unknown task '" + s + "' (expected train|cluster|anomaly|compare-norm|export-embedding)");
}

/// One experiment after defaults and paths are resolved.
struct ExperimentConfig {
  Task task = Task::train;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DatasetConfig dataset;
  AutoencoderSpec model;
  TrainConfig train;
  ClusterTask cluster;
  AnomalyTask anomaly;
  std::vector<NormalizationMode> compare_modes = {NormalizationMode::none, NormalizationMode::unit_ball,
                                                  NormalizationMode::batch, NormalizationMode::layer};
  std::string checkpoint;  // cluster: optional; export-embedding: required
  std::string embedding_split = "train";
};

namespace detail {

inline std::string first_existing(const std::string& base) {
  for (const auto& p : {base, base + ".gz"})
    if (std::filesystem::exists(p)) return p;
  return "";
}

inline void need_file(std::string& path, const std::string& field, bool defaulted) {
  if (path.empty()) throw ConfigError(field + ": required for this dataset");
  if (const auto found = first_existing(path); !found.empty()) {
    path = found;
    return;
  }
  throw ConfigError(field + ": file not found: " + path +
                    (defaulted ? " (default location; set L2AE_DATA_DIR or give the path)" : ""));
}

inline void resolve_dataset_paths(DatasetConfig& d, const std::string& root) {
  bool defaulted = false;
  auto fill = [&](std::string& slot, const std::string& candidate) {
    if (slot.empty()) {
      slot = candidate;
      defaulted = true;
    }
  };
  if (d.name == "mnist") {
    fill(d.train_images, root + "/mnist/train-images-idx3-ubyte");
    fill(d.train_labels, root + "/mnist/train-labels-idx1-ubyte");
    if (d.test_images.empty() && d.test_labels.empty() && !first_existing(root + "/mnist/t10k-images-idx3-ubyte").empty()) {
      d.test_images = root + "/mnist/t10k-images-idx3-ubyte";
      d.test_labels = root + "/mnist/t10k-labels-idx1-ubyte";
    }
  } else if (d.name == "mnist5k") {
    fill(d.train_images, root + "/mnist5k/mnist5k-images-idx3-ubyte.gz");
    fill(d.train_labels, root + "/mnist5k/mnist5k-labels-idx1-ubyte.gz");
  } else if (d.name == "usps") {
    fill(d.train_file, root + "/usps/train.txt");
    if (d.test_file.empty() && std::filesystem::exists(root + "/usps/test.txt")) d.test_file = root + "/usps/test.txt";
  }
  const bool idx = d.name == "mnist" || d.name == "mnist5k" || d.name == "idx";
  if (idx) {
    need_file(d.train_images, "dataset.train_images", defaulted);
    need_file(d.train_labels, "dataset.train_labels", defaulted);
    if (d.test_images.empty() != d.test_labels.empty())
      throw ConfigError("dataset: test_images and test_labels must be given together");
    if (!d.test_images.empty()) {
      need_file(d.test_images, "dataset.test_images", defaulted);
      need_file(d.test_labels, "dataset.test_labels", defaulted);
    }
  } else if (d.name == "usps") {
    need_file(d.train_file, "dataset.train_file", defaulted);
    if (!d.test_file.empty()) need_file(d.test_file, "dataset.test_file", defaulted);
  }
}

inline std::tuple<std::size_t, std::size_t, std::size_t> dataset_shape(const DatasetConfig& d) {
  if (d.name == "usps") return {kUspsSide, kUspsSide, 1};
  if (d.name == "blobs") return {d.blobs.height, d.blobs.width, 1};
  return {28, 28, 1};
}

}  // namespace detail

inline std::string default_data_root() {
  const char* env = std::getenv("L2AE_DATA_DIR");
  return env && *env ? env : "data";
}

/// Parses and validates an experiment config. Every error names its field path.
inline ExperimentConfig parse_experiment_config(const Json& j, std::optional<std::uint64_t> seed_override = {},
                                                const std::string& data_root = default_data_root()) {
  ObjectReader r(j, "");
  ExperimentConfig c;
  try {
    c.task = parse_task(r.require<std::string>("task"));
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.rfind("task", 0) == 0 ? msg : "task: " + msg);
  }
  c.seed = seed_override ? *seed_override : r.get<std::uint64_t>("seed", 0);
  if (seed_override) r.get<std::uint64_t>("seed", 0);
  c.output_dir = r.get<std::string>("output_dir", c.output_dir);
  c.checkpoint = r.get<std::string>("checkpoint", "");

  auto ds = r.object("dataset");
  auto& d = c.dataset;
  d.name = ds.get<std::string>("name", d.name);
  if (d.name != "mnist" && d.name != "mnist5k" && d.name != "idx" && d.name != "usps" && d.name != "blobs")
    throw ConfigError("dataset.name: unknown dataset '" + d.name + "' (expected mnist|mnist5k|idx|usps|blobs)");
  d.train_images = ds.get<std::string>("train_images", "");
  d.train_labels = ds.get<std::string>("train_labels", "");
  d.test_images = ds.get<std::string>("test_images", "");
  d.test_labels = ds.get<std::string>("test_labels", "");
  d.train_file = ds.get<std::string>("train_file", "");
  d.test_file = ds.get<std::string>("test_file", "");
  d.holdout_per_class = ds.get<std::size_t>("holdout_per_class", 0);
  d.subsample_per_class = ds.get<std::size_t>("subsample_per_class", 0);
  d.subsample_total = ds.get<std::size_t>("subsample_total", 0);
  if (d.subsample_per_class && d.subsample_total)
    throw ConfigError("dataset: subsample_per_class and subsample_total are exclusive");
  if (ds.has("blobs")) {
    if (d.name != "blobs") throw ConfigError("dataset.blobs: only valid with name \"blobs\"");
    auto b = ds.object("blobs");
    d.blobs.classes = b.get<int>("classes", d.blobs.classes);
    d.blobs.per_class = b.get<std::size_t>("per_class", d.blobs.per_class);
    d.blobs.height = b.get<std::size_t>("height", d.blobs.height);
    d.blobs.width = b.get<std::size_t>("width", d.blobs.width);
    d.blobs.separation = b.get<double>("separation", d.blobs.separation);
    d.blobs.noise = b.get<double>("noise", d.blobs.noise);
    b.finish();
    if (d.blobs.classes < 1 || d.blobs.per_class < 1 || d.blobs.height < 1 || d.blobs.width < 1)
      throw ConfigError("dataset.blobs: sizes must be positive");
    if (!(d.blobs.separation > 0) || !(d.blobs.noise >= 0))
      throw ConfigError("dataset.blobs: separation must be > 0 and noise >= 0");
  }
  ds.finish();
  detail::resolve_dataset_paths(d, data_root);

  const auto [h, w, ch] = detail::dataset_shape(d);
  AutoencoderSpec base = AutoencoderSpec::dense_for(h, w, ch, NormalizationMode::unit_ball);
  if (r.has("model")) {
    const Json& m = r.raw("model");
    if (m.is_object() && m.contains("variant") && m.at("variant") == "conv")
      base = AutoencoderSpec::conv_for(h, w, ch, NormalizationMode::unit_ball);
    c.model = spec_from_json(m, "model", base);
  } else {
    c.model = base;
  }

  TrainConfig tbase;
  tbase.epochs = c.model.variant == Variant::conv ? 200 : 100;
  tbase.seed = Rng(c.seed).child("train").seed();
  c.train = r.has("train") ? train_config_from_json(r.raw("train"), "train", tbase) : tbase;
  if (c.model.normalization == NormalizationMode::batch && c.train.batch_size < 2)
    throw ConfigError("train.batch_size: batch normalization needs batch_size >= 2");

  if (r.has("cluster")) {
    auto k = r.object("cluster");
    c.cluster.k = k.get<std::size_t>("k", c.cluster.k);
    c.cluster.restarts = k.get<std::size_t>("restarts", c.cluster.restarts);
    c.cluster.max_iter = k.get<std::size_t>("max_iter", c.cluster.max_iter);
    c.cluster.runs = k.get<std::size_t>("runs", c.cluster.runs);
    c.cluster.split = k.get<std::string>("split", c.cluster.split);
    k.finish();
    if (c.cluster.k < 1) throw ConfigError("cluster.k: must be >= 1");
    if (c.cluster.restarts < 1) throw ConfigError("cluster.restarts: must be >= 1");
    if (c.cluster.max_iter < 1) throw ConfigError("cluster.max_iter: must be >= 1");
    if (c.cluster.runs < 1) throw ConfigError("cluster.runs: must be >= 1");
    if (c.cluster.split != "train" && c.cluster.split != "test")
      throw ConfigError("cluster.split: expected \"train\" or \"test\"");
  }
  if (r.has("anomaly")) {
    auto a = r.object("anomaly");
    auto& s = c.anomaly.setup;
    s.anomaly_class = a.get<int>("anomaly_class", s.anomaly_class);
    s.keep_ratio = a.get<double>("keep_ratio", s.keep_ratio);
    s.k = a.get<std::size_t>("k", s.k);
    s.repetitions = a.get<std::size_t>("repetitions", s.repetitions);
    c.anomaly.kmeans_restarts = a.get<std::size_t>("kmeans_restarts", c.anomaly.kmeans_restarts);
    a.finish();
    try {
      s.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("anomaly: ") + e.what());
    }
    if (c.anomaly.kmeans_restarts < 1) throw ConfigError("anomaly.kmeans_restarts: must be >= 1");
  }
  c.anomaly.setup.master_seed = Rng(c.seed).child("anomaly").seed();
  if (r.has("compare")) {
    auto cm = r.object("compare");
    const auto names = cm.get_list<std::string>("modes", {});
    cm.finish();
    if (names.empty()) throw ConfigError("compare.modes: must list at least one mode");
    c.compare_modes.clear();
    for (std::size_t i = 0; i < names.size(); ++i) {
      try {
        c.compare_modes.push_back(parse_normalization(names[i]));
      } catch (const ConfigError& e) {
        throw ConfigError("compare.modes[" + std::to_string(i) + "]: " + e.what());
      }
    }
    if (c.train.batch_size < 2) throw ConfigError("train.batch_size: compare-norm needs batch_size >= 2");
  }
  if (r.has("embedding")) {
    auto e = r.object("embedding");
    c.embedding_split = e.get<std::string>("split", c.embedding_split);
    e.finish();
    if (c.embedding_split != "train" && c.embedding_split != "test")
      throw ConfigError("embedding.split: expected \"train\" or \"test\"");
  }
  r.finish();

  if (c.task == Task::export_embedding && c.checkpoint.empty())
    throw ConfigError("checkpoint: export-embedding needs a checkpoint path");
  if (!c.checkpoint.empty() && !std::filesystem::exists(c.checkpoint))
    throw ConfigError("checkpoint: file not found: " + c.checkpoint);
  if (c.task == Task::compare_norm && c.train.batch_size < 2)
    throw ConfigError("train.batch_size: compare-norm needs batch_size >= 2");
  return c;
}

/// Canonical JSON of everything that affects results (the output directory does not).
inline Json resolved_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  Json ds = {{"name", d.name},
             {"holdout_per_class", d.holdout_per_class},
             {"subsample_per_class", d.subsample_per_class},
             {"subsample_total", d.subsample_total}};
  if (d.name == "blobs") {
    ds["blobs"] = {{"classes", d.blobs.classes},       {"per_class", d.blobs.per_class},
                   {"height", d.blobs.height},         {"width", d.blobs.width},
                   {"separation", d.blobs.separation}, {"noise", d.blobs.noise}};
  } else if (d.name == "usps") {
    ds["train_file"] = d.train_file;
    ds["test_file"] = d.test_file;
  } else {
    ds["train_images"] = d.train_images;
    ds["train_labels"] = d.train_labels;
    ds["test_images"] = d.test_images;
    ds["test_labels"] = d.test_labels;
  }
  Json j = {{"task", to_string(c.task)}, {"seed", c.seed}, {"dataset", ds}, {"model", to_json(c.model)},
            {"train", to_json(c.train)}};
  if (!c.checkpoint.empty()) {
    j["checkpoint"] = c.checkpoint;
    if (std::filesystem::exists(c.checkpoint)) {
      const auto bytes = detail::read_file_bytes(c.checkpoint);
      j["checkpoint_sha256"] = sha256_hex(bytes.data(), bytes.size());
    }
  }
  switch (c.task) {
    case Task::cluster:
    case Task::compare_norm:
      j["cluster"] = {{"k", c.cluster.k},
                      {"restarts", c.cluster.restarts},
                      {"max_iter", c.cluster.max_iter},
                      {"runs", c.cluster.runs},
                      {"split", c.cluster.split}};
      if (c.task == Task::compare_norm) {
        Json modes = Json::array();
        for (auto m : c.compare_modes) modes.push_back(to_string(m));
        j["compare"] = {{"modes", modes}};
      }
      break;
    case Task::anomaly: {
      const auto& s = c.anomaly.setup;
      j["anomaly"] = {{"anomaly_class", s.anomaly_class}, {"keep_ratio", s.keep_ratio},
                      {"k", s.k},                         {"repetitions", s.repetitions},
                      {"kmeans_restarts", c.anomaly.kmeans_restarts}};
      break;
    }
    case Task::export_embedding: j["embedding"] = {{"split", c.embedding_split}}; break;
    case Task::train: break;
  }
  return j;
}

inline std::string config_digest(const ExperimentConfig& c) { return sha256_hex(resolved_json(c).dump()); }

// Data.

struct ExperimentData {
  ImageDataset train;
  std::optional<ImageDataset> test;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const Rng rng = Rng(c.seed).child("data");
  ExperimentData out;
  if (d.name == "blobs") {
    out.train = with_shape(synth_blobs(d.blobs.classes, d.blobs.per_class, d.blobs.height * d.blobs.width,
                                       d.blobs.separation, d.blobs.noise, rng.child("blobs")),
                           d.blobs.height, d.blobs.width, 1);
  } else if (d.name == "usps") {
    out.train = load_usps_text(d.train_file);
    if (!d.test_file.empty()) out.test = load_usps_text(d.test_file);
  } else {
    out.train = load_mnist_idx(d.train_images, d.train_labels);
    if (!d.test_images.empty()) out.test = load_mnist_idx(d.test_images, d.test_labels);
  }
  if (d.holdout_per_class) {
    if (out.test) throw ConfigError("dataset.holdout_per_class: the dataset already has a test split");
    const auto split = stratified_holdout(out.train, d.holdout_per_class, rng.child("holdout"));
    out.test = select(out.train, split.subsets.at("test"), out.train.source + ":holdout-test");
    out.train = select(out.train, split.subsets.at("train"), out.train.source + ":holdout-train");
  }
  if (d.subsample_per_class) out.train = subsample_per_class(out.train, d.subsample_per_class, rng.child("subsample"));
  if (d.subsample_total) out.train = subsample_total(out.train, d.subsample_total, rng.child("subsample"));
  return out;
}

// Runs.

struct RunContext {
  std::size_t jobs = 1;
  std::function<void(const std::string&)> log;

  void say(const std::string& s) const {
    if (log) log(s);
  }
};

struct RunOutput {
  std::filesystem::path dir;
  Json report;
};

/// `<root>/<task>-<digest16>`, or the first free `-rN` sibling; created empty.
inline std::filesystem::path fresh_output_dir(const std::string& root, const std::string& task,
                                              const std::string& digest) {
  const std::string base = task + "-" + digest.substr(0, 16);
  std::filesystem::path dir = std::filesystem::path(root) / base;
  for (int n = 2; std::filesystem::exists(dir); ++n) dir = std::filesystem::path(root) / (base + "-r" + std::to_string(n));
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
}

inline void write_centroids_csv(const std::filesystem::path& p, const CentroidSet& c) {
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write " + p.string());
  out << "cluster";
  for (std::size_t q = 0; q < c.centroids.dim(1); ++q) out << ",z" << q;
  out << "\n";
  char buf[40];
  for (std::size_t j = 0; j < c.k; ++j) {
    out << j;
    for (std::size_t q = 0; q < c.centroids.dim(1); ++q) {
      std::snprintf(buf, sizeof buf, ",%.17g", c.centroids(j, q));
      out << buf;
    }
    out << "\n";
  }
}

namespace detail {

inline Json history_json(const TrainHistory& h) {
  return {{"epochs", h.loss.size()},
          {"best_epoch", h.best_epoch},
          {"best_loss", h.loss.at(h.best_epoch)},
          {"final_loss", h.loss.back()}};
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (auto x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline Json summary(const std::vector<double>& v) {
  double sq = 0;
  const double m = mean_of(v);
  for (auto x : v) sq += (x - m) * (x - m);
  return {{"mean", m},
          {"std", v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0},
          {"min", *std::min_element(v.begin(), v.end())},
          {"max", *std::max_element(v.begin(), v.end())}};
}

inline EpochObserver epoch_logger(const RunContext& ctx, const std::string& tag, std::size_t epochs) {
  if (!ctx.log) return {};
  return [&ctx, tag, epochs](const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "[%s] epoch %zu/%zu loss %.6f (%.1fs)", tag.c_str(), r.epoch + 1, epochs, r.loss,
                  r.seconds);
    ctx.say(buf);
  };
}

inline std::uint64_t run_seed(std::uint64_t train_seed, std::size_t run) {
  return Rng(train_seed).child("run").child(static_cast<std::uint64_t>(run)).seed();
}

inline Checkpoint train_and_save(const ImageDataset& ds, const AutoencoderSpec& spec, const TrainConfig& cfg,
                                 const std::filesystem::path& dir, const std::string& stem, const RunContext& ctx,
                                 Json& record) {
  const auto result = train(ds, spec, cfg, epoch_logger(ctx, stem, cfg.epochs));
  const auto bytes = checkpoint_bytes(result.checkpoint);
  write_bytes((dir / (stem + ".l2ck")).string(), bytes);
  write_history_csv((dir / (stem + "-history.csv")).string(), result.history);
  record["train_seed"] = cfg.seed;
  record["history"] = history_json(result.history);
  record["checkpoint_sha256"] = sha256_hex(bytes.data(), bytes.size());
  return result.checkpoint;
}

inline const ImageDataset& pick_split(const ExperimentData& data, const std::string& split, const std::string& field) {
  if (split == "test") {
    if (!data.test) throw ConfigError(field + ": the dataset has no test split");
    return *data.test;
  }
  return data.train;
}

inline Json cluster_once(const Checkpoint& ck, const ImageDataset& ds, const ClusterTask& t, const Rng& rng,
                         const RunContext& ctx, const std::filesystem::path& centroids_path) {
  KMeansOptions opt;
  opt.k = t.k;
  opt.restarts = t.restarts;
  opt.max_iter = t.max_iter;
  opt.jobs = ctx.jobs;
  const auto km = kmeans(encode_dataset(ck, ds), opt, rng);
  write_centroids_csv(centroids_path, km.centroids);
  return {{"acc", clustering_accuracy(ds.labels, km.assignment)},
          {"inertia", km.centroids.inertia},
          {"kmeans_restart", km.restart},
          {"kmeans_iterations", km.iterations},
          {"samples", ds.size()}};
}

inline Json cmd_train(const ExperimentConfig& c, const ExperimentData& data, const std::filesystem::path& dir,
                      const RunContext& ctx) {
  Json rec;
  const auto ck = train_and_save(data.train, c.model, c.train, dir, "model", ctx, rec);
  rec["train_samples"] = data.train.size();
  rec["latent_dim"] = encode_dataset(ck, select(data.train, {0}, "probe")).dim(1);
  return rec;
}

inline Json cmd_cluster(const ExperimentConfig& c, const ExperimentData& data, const std::filesystem::path& dir,
                        const RunContext& ctx) {
  const auto& ds = pick_split(data, c.cluster.split, "cluster.split");
  Json runs = Json::array();
  std::vector<double> accs;
  for (std::size_t r = 0; r < c.cluster.runs; ++r) {
    Json rec = {{"run", r}};
    const std::string stem = "run" + std::to_string(r);
    Checkpoint ck;
    if (!c.checkpoint.empty()) {
      ck = load_checkpoint(c.checkpoint);
      rec["checkpoint"] = c.checkpoint;
    } else {
      auto cfg = c.train;
      cfg.seed = run_seed(c.train.seed, r);
      ck = train_and_save(data.train, c.model, cfg, dir, stem, ctx, rec);
    }
    const Rng km_rng = Rng(c.seed).child("kmeans").child(static_cast<std::uint64_t>(r));
    rec["clustering"] = cluster_once(ck, ds, c.cluster, km_rng, ctx, dir / (stem + "-centroids.csv"));
    accs.push_back(rec["clustering"]["acc"].get<double>());
    ctx.say("[cluster] run " + std::to_string(r) + " ACC " + std::to_string(accs.back()));
    runs.push_back(rec);
  }
  return {{"runs", runs}, {"acc", summary(accs)}};
}

inline Json cmd_compare(const ExperimentConfig& c, const ExperimentData& data, const std::filesystem::path& dir,
                        const RunContext& ctx) {
  const auto& ds = pick_split(data, c.cluster.split, "cluster.split");
  Json modes = Json::object();
  for (auto mode : c.compare_modes) {
    auto spec = c.model;
    spec.normalization = mode;
    Json runs = Json::array();
    std::vector<double> accs;
    for (std::size_t r = 0; r < c.cluster.runs; ++r) {
      Json rec = {{"run", r}};
      auto cfg = c.train;
      cfg.seed = run_seed(c.train.seed, r);
      const std::string stem = to_string(mode) + "-run" + std::to_string(r);
      const auto ck = train_and_save(data.train, spec, cfg, dir, stem, ctx, rec);
      const Rng km_rng = Rng(c.seed).child("kmeans").child(static_cast<std::uint64_t>(r));
      rec["clustering"] = cluster_once(ck, ds, c.cluster, km_rng, ctx, dir / (stem + "-centroids.csv"));
      accs.push_back(rec["clustering"]["acc"].get<double>());
      ctx.say("[compare-norm] " + to_string(mode) + " run " + std::to_string(r) + " ACC " +
              std::to_string(accs.back()));
      runs.push_back(rec);
    }
    modes[to_string(mode)] = {{"runs", runs}, {"acc", summary(accs)}};
  }
  return {{"modes", modes}};
}

inline Json cmd_anomaly(const ExperimentConfig& c, const ExperimentData& data, const std::filesystem::path& dir,
                        const RunContext& ctx) {
  if (!data.test) throw ConfigError("dataset: the anomaly task needs a test split (test files or holdout_per_class)");
  ProtocolOptions opt;
  opt.kmeans_restarts = c.anomaly.kmeans_restarts;
  opt.jobs = ctx.jobs;
  if (ctx.log)
    opt.on_epoch = [&](std::size_t rep, const EpochRecord& r) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[anomaly] repetition %zu epoch %zu/%zu loss %.6f (%.1fs)", rep, r.epoch + 1,
                    c.train.epochs, r.loss, r.seconds);
      ctx.say(buf);
    };
  const auto result = run_protocol(data.train, *data.test, c.model, c.train, c.anomaly.setup, opt);
  Json reps = Json::array();
  std::vector<std::size_t> flagged;
  for (const auto& rep : result.repetitions) {
    const std::string stem = "rep" + std::to_string(rep.repetition);
    write_roc_csv((dir / (stem + "-roc-cluster.csv")).string(), rep.roc_cluster);
    write_roc_csv((dir / (stem + "-roc-reconstruction.csv")).string(), rep.roc_reconstruction);
    if (!rep.zero_centroids.empty()) flagged.push_back(rep.repetition);
    reps.push_back({{"repetition", rep.repetition},
                    {"train_seed", rep.train_seed},
                    {"train_samples", rep.train_size},
                    {"kept_anomalies", rep.kept_anomalies},
                    {"best_epoch", rep.best_epoch},
                    {"final_loss", rep.final_loss},
                    {"auc_cluster", rep.auc_cluster},
                    {"auc_reconstruction", rep.auc_reconstruction},
                    {"auc_reconstruction_flipped", rep.auc_reconstruction_flipped},
                    {"zero_centroids", rep.zero_centroids}});
  }
  return {{"repetitions", reps},
          {"test_samples", data.test->size()},
          {"test_anomalies", data.test->count(c.anomaly.setup.anomaly_class)},
          {"mean_auc_cluster", result.mean_auc_cluster},
          {"mean_auc_reconstruction", result.mean_auc_reconstruction},
          {"mean_auc_reconstruction_flipped", result.mean_auc_reconstruction_flipped},
          {"orientation", {{"cluster", to_string(Orientation::higher_is_normal)},
                           {"reconstruction", to_string(Orientation::higher_is_anomalous)}}},
          {"flags", {{"zero_centroid_repetitions", flagged}}}};
}

inline Json cmd_export_embedding(const ExperimentConfig& c, const ExperimentData& data,
                                 const std::filesystem::path& dir, const RunContext&) {
  const auto ck = load_checkpoint(c.checkpoint);
  const auto& ds = pick_split(data, c.embedding_split, "embedding.split");
  const auto e = pca_2d(encode_dataset(ck, ds));
  write_embedding_csv((dir / "embedding.csv").string(), e, ds.labels);
  const auto centroids = class_centroids(e, ds.labels);
  write_class_centroids_csv((dir / "class_centroids.csv").string(), centroids);
  Json cls = Json::array();
  for (const auto& cc : centroids) cls.push_back({{"label", cc.label}, {"count", cc.count}, {"x", cc.x}, {"y", cc.y}});
  return {{"samples", ds.size()},
          {"latent_dim", ck.spec.latent_dim},
          {"explained_variance", e.variance},
          {"class_centroids", cls}};
}

}  // namespace detail

/// Runs one experiment into a fresh digest-named directory below `out_root`.
///
/// The directory receives `config.json` (the resolved config), the task's
/// artifacts and `report.json`. The report's `metrics` object depends only on
/// the resolved config; timing lives outside it.
inline RunOutput run_experiment(const ExperimentConfig& c, const std::string& out_root, const RunContext& ctx = {}) {
  const auto start = std::chrono::steady_clock::now();
  const Json resolved = resolved_json(c);
  const std::string digest = sha256_hex(resolved.dump());
  if (!c.checkpoint.empty()) {
    const auto ck = load_checkpoint(c.checkpoint);
    if (c.task == Task::export_embedding || c.task == Task::cluster) {
      const auto [h, w, ch] = detail::dataset_shape(c.dataset);
      if (ck.spec.height != h || ck.spec.width != w || ck.spec.channels != ch)
        throw ConfigError("checkpoint: model input " + std::to_string(ck.spec.height) + "x" +
                          std::to_string(ck.spec.width) + " does not match the dataset");
    }
  }
  const auto data = load_experiment_data(c);
  const auto dir = fresh_output_dir(out_root, to_string(c.task), digest);
  write_text(dir / "config.json", resolved.dump(2) + "\n");
  ctx.say("[" + to_string(c.task) + "] output " + dir.string());

  Json metrics;
  switch (c.task) {
    case Task::train: metrics = detail::cmd_train(c, data, dir, ctx); break;
    case Task::cluster: metrics = detail::cmd_cluster(c, data, dir, ctx); break;
    case Task::compare_norm: metrics = detail::cmd_compare(c, data, dir, ctx); break;
    case Task::anomaly: metrics = detail::cmd_anomaly(c, data, dir, ctx); break;
    case Task::export_embedding: metrics = detail::cmd_export_embedding(c, data, dir, ctx); break;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  RunOutput out;
  out.dir = dir;
  out.report = {{"task", to_string(c.task)},
                {"config_digest", digest},
                {"toolkit_version", kToolkitVersion},
                {"dataset", {{"train_samples", data.train.size()},
                             {"test_samples", data.test ? data.test->size() : 0},
                             {"source", data.train.source}}},
                {"model", {{"variant", to_string(c.model.variant)},
                           {"normalization", to_string(c.model.normalization)},
                           {"latent_dim", c.model.latent_dim}}},
                {"metrics", metrics},
                {"wall_time_seconds", secs}};
  write_text(dir / "report.json", out.report.dump(2) + "\n");
  return out;
}

}  // namespace l2ae
