#include "mnce/cli.hpp"

#include <charconv>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mnce/errors.hpp"
#include "mnce/io.hpp"

namespace mnce::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::uint64_t> SweepOptions::seeds() const {
  std::vector<std::uint64_t> out;
  for (int k = 0; k < num_seeds; ++k) out.push_back(first_seed + static_cast<std::uint64_t>(k));
  return out;
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.experiment.train.loss.margin = -0.2;
  return cfg;
}

namespace {

// ---------------------------------------------------------------------------
// Config document

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object", path_);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void real(const std::string& key, double& target) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key) + " must be a number", field(key));
      target = v->get<double>();
    }
  }

  void integer(const std::string& key, int& target) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key) + " must be an integer", field(key));
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
        throw ConfigError(field(key) + " is out of range", field(key));
      }
      target = static_cast<int>(x);
    }
  }

  void size(const std::string& key, std::size_t& target) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
        throw ConfigError(field(key) + " must be a non-negative integer", field(key));
      }
      target = v->get<std::size_t>();
    }
  }

  void seed(const std::string& key, std::uint64_t& target) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(field(key) + " must be a non-negative integer", field(key));
      target = v->get<std::uint64_t>();
    }
  }

  void boolean(const std::string& key, bool& target) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + " must be true or false", field(key));
      target = v->get<bool>();
    }
  }

  void ints(const std::string& key, std::vector<int>& target) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + " must be a list of integers", field(key));
      target.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) throw ConfigError(field(key) + " must be a list of integers", field(key));
        target.push_back(e.get<int>());
      }
    }
  }

  void reals(const std::string& key, std::vector<double>& target) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + " must be a list of numbers", field(key));
      target.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) throw ConfigError(field(key) + " must be a list of numbers", field(key));
        target.push_back(e.get<double>());
      }
    }
  }

  std::optional<Section> child(const std::string& key) {
    if (const json* v = find(key)) return Section(*v, field(key));
    return std::nullopt;
  }

  /// Rejects keys that no reader asked for.
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key " + field(key), field(key));
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_synth(Section s, SynthConfig& c) {
  s.integer("num_classes", c.num_classes);
  s.integer("latent_dim", c.latent_dim);
  s.integer("grid_h", c.grid_h);
  s.integer("grid_w", c.grid_w);
  s.real("source_region_frac", c.source_region_frac);
  s.real("faulty_positive_rate", c.faulty_positive_rate);
  s.real("feature_noise_std", c.feature_noise_std);
  s.integer("samples_per_class", c.samples_per_class);
  s.integer("test_samples_per_class", c.test_samples_per_class);
  s.seed("seed", c.seed);
  s.finish();
}

void read_loss(Section s, LossConfig& c) {
  s.real("tau", c.tau);
  s.real("margin", c.margin);
  s.real("epsilon", c.pool.epsilon);
  s.real("beta", c.pool.beta);
  s.boolean("detach_weights", c.pool.detach_weights);
  s.boolean("symmetric", c.symmetric);
  s.finish();
}

void read_train(Section s, TrainConfig& c) {
  s.integer("epochs", c.epochs);
  s.integer("batch_size", c.batch_size);
  if (const json* v = s.find("optimizer")) {
    const std::string kind = v->is_string() ? v->get<std::string>() : "";
    if (kind == "adam") {
      c.optimizer.kind = OptimizerKind::kAdam;
    } else if (kind == "sgd") {
      c.optimizer.kind = OptimizerKind::kSgd;
    } else {
      throw ConfigError("train.optimizer must be \"adam\" or \"sgd\"", "train.optimizer");
    }
  }
  s.real("learning_rate", c.optimizer.learning_rate);
  s.real("weight_decay", c.optimizer.weight_decay);
  s.real("beta1", c.optimizer.beta1);
  s.real("beta2", c.optimizer.beta2);
  s.real("adam_eps", c.optimizer.eps);
  s.seed("seed", c.seed);
  s.size("hidden_dim", c.hidden_dim);
  s.size("embed_dim", c.embed_dim);
  s.boolean("normalize_output", c.normalize_output);
  if (auto loss = s.child("loss")) read_loss(*loss, c.loss);
  s.finish();
}

ThresholdRule parse_threshold(const json& v, const std::string& field) {
  if (v.is_string() && v.get<std::string>() == "median") return ThresholdRule::median();
  if (v.is_number()) return ThresholdRule::absolute(v.get<double>());
  throw ConfigError(field + " must be \"median\" or a number", field);
}

void read_eval(Section s, EvalConfig& c) {
  if (const json* v = s.find("threshold")) c.threshold = parse_threshold(*v, "eval.threshold");
  s.real("auc_step", c.auc_step);
  s.integer("upsample", c.upsample);
  s.integer("batch_size", c.batch_size);
  s.finish();
}

void read_split(Section s, ExperimentConfig& c) {
  s.ints("heard_classes", c.heard_classes);
  s.ints("unheard_classes", c.unheard_classes);
  s.finish();
}

void read_sweep(Section s, SweepOptions& c) {
  s.reals("margins", c.margins);
  s.integer("num_seeds", c.num_seeds);
  s.seed("first_seed", c.first_seed);
  int threads = static_cast<int>(c.threads);
  s.integer("threads", threads);
  if (threads < 1) throw ConfigError("sweep.threads must be positive", "sweep.threads");
  c.threads = static_cast<unsigned>(threads);
  s.finish();
}

void validate(const RunConfig& cfg) {
  cfg.experiment.synth.validate();
  try {
    cfg.experiment.train.validate();
  } catch (const ConfigError& e) {
    // Loss and pooling checks report bare names.
    if (e.field().find('.') != std::string::npos) throw;
    throw ConfigError(e.what(), "train.loss." + e.field());
  }
  cfg.experiment.eval.validate();
  if (cfg.sweep.margins.empty()) throw ConfigError("sweep.margins is empty", "sweep.margins");
  if (cfg.sweep.num_seeds < 1) throw ConfigError("sweep.num_seeds must be positive", "sweep.num_seeds");
  if (cfg.output_dir.empty()) throw ConfigError("output_dir is empty", "output_dir");
}

json to_json(const RunConfig& cfg) {
  const auto& e = cfg.experiment;
  json j;
  j["synth"] = {
      {"num_classes", e.synth.num_classes},
      {"latent_dim", e.synth.latent_dim},
      {"grid_h", e.synth.grid_h},
      {"grid_w", e.synth.grid_w},
      {"source_region_frac", e.synth.source_region_frac},
      {"faulty_positive_rate", e.synth.faulty_positive_rate},
      {"feature_noise_std", e.synth.feature_noise_std},
      {"samples_per_class", e.synth.samples_per_class},
      {"test_samples_per_class", e.synth.test_samples_per_class},
      {"seed", e.synth.seed},
  };
  const auto& t = e.train;
  j["train"] = {
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"optimizer", t.optimizer.kind == OptimizerKind::kAdam ? "adam" : "sgd"},
      {"learning_rate", t.optimizer.learning_rate},
      {"weight_decay", t.optimizer.weight_decay},
      {"beta1", t.optimizer.beta1},
      {"beta2", t.optimizer.beta2},
      {"adam_eps", t.optimizer.eps},
      {"seed", t.seed},
      {"hidden_dim", t.hidden_dim},
      {"embed_dim", t.embed_dim},
      {"normalize_output", t.normalize_output},
      {"loss",
       {
           {"tau", t.loss.tau},
           {"margin", t.loss.margin},
           {"epsilon", t.loss.pool.epsilon},
           {"beta", t.loss.pool.beta},
           {"detach_weights", t.loss.pool.detach_weights},
           {"symmetric", t.loss.symmetric},
       }},
  };
  j["eval"] = {
      {"threshold", e.eval.threshold.kind == ThresholdRule::Kind::kMedian ? json("median")
                                                                            : json(e.eval.threshold.value)},
      {"auc_step", e.eval.auc_step},
      {"upsample", e.eval.upsample},
      {"batch_size", e.eval.batch_size},
  };
  j["split"] = {{"heard_classes", e.heard_classes}, {"unheard_classes", e.unheard_classes}};
  j["sweep"] = {
      {"margins", cfg.sweep.margins},
      {"num_seeds", cfg.sweep.num_seeds},
      {"first_seed", cfg.sweep.first_seed},
      {"threads", cfg.sweep.threads},
  };
  j["output_dir"] = cfg.output_dir;
  return j;
}

}  // namespace

RunConfig parse_config(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what(), "config");
  }
  RunConfig cfg = default_config();
  Section root(doc, "");
  if (!root.has("synth")) throw ConfigError("missing required field synth", "synth");
  if (!root.has("train")) throw ConfigError("missing required field train", "train");
  read_synth(*root.child("synth"), cfg.experiment.synth);
  read_train(*root.child("train"), cfg.experiment.train);
  if (auto s = root.child("eval")) read_eval(*s, cfg.experiment.eval);
  if (auto s = root.child("split")) read_split(*s, cfg.experiment);
  if (auto s = root.child("sweep")) read_sweep(*s, cfg.sweep);
  if (const json* v = root.find("output_dir")) {
    if (!v->is_string()) throw ConfigError("output_dir must be a string", "output_dir");
    cfg.output_dir = v->get<std::string>();
  }
  root.finish();
  validate(cfg);
  return cfg;
}

std::string dump_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string config_hash(const RunConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  j["sweep"].erase("threads");
  return io::hex64(io::fnv1a(j.dump()));
}

namespace {

// ---------------------------------------------------------------------------
// Shared helpers

using io::format_double;

std::string threshold_text(const ThresholdRule& rule) {
  return rule.kind == ThresholdRule::Kind::kMedian ? "median" : format_double(rule.value);
}

io::CsvWriter csv_for(const RunConfig& cfg, std::string_view command) {
  io::CsvWriter w(config_hash(cfg));
  w.comment("command=" + std::string(command));
  w.comment("threshold=" + threshold_text(cfg.experiment.eval.threshold) +
            " auc_step=" + format_double(cfg.experiment.eval.auc_step));
  return w;
}

json annotations_json(const Split& split, int upsample) {
  json arr = json::array();
  for (const auto* set : {&split.heard_test, &split.unheard_test}) {
    for (const auto& s : *set) {
      const auto& b = s.gt_region;
      arr.push_back({
          {"id", s.id},
          {"height", s.image.height() * static_cast<std::size_t>(upsample)},
          {"width", s.image.width() * static_cast<std::size_t>(upsample)},
          {"boxes", json::array({json::array({b.x0, b.y0, b.x1, b.y1})})},
      });
    }
  }
  return arr;
}

void write_json(const fs::path& path, const json& j) { io::atomic_write(path, j.dump(1) + "\n"); }

json read_json(const fs::path& path) {
  const std::string text = io::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what(), path.string());
  }
}

std::vector<std::string> record_cells(const RunRecord& r) {
  return {format_double(r.margin),
          std::to_string(r.seed),
          format_double(r.retrieval_accuracy),
          format_double(r.ciou_at_half),
          format_double(r.auc),
          format_double(r.final_loss),
          r.status};
}

const std::vector<std::string> kRunHeader{"margin", "seed", "retrieval_accuracy", "ciou_at_half",
                                          "auc", "final_loss", "status"};

const std::vector<std::string> kAggregateHeader{
    "margin",   "runs",          "retrieval_accuracy_mean", "retrieval_accuracy_std", "ciou_at_half_mean",
    "ciou_at_half_std", "auc_mean", "auc_std", "final_loss_mean", "final_loss_std"};

std::vector<std::string> aggregate_cells(const MarginAggregate& a) {
  return {format_double(a.margin),
          std::to_string(a.runs),
          format_double(a.retrieval_accuracy.mean),
          format_double(a.retrieval_accuracy.stddev),
          format_double(a.ciou_at_half.mean),
          format_double(a.ciou_at_half.stddev),
          format_double(a.auc.mean),
          format_double(a.auc.stddev),
          format_double(a.final_loss.mean),
          format_double(a.final_loss.stddev)};
}

// Runs table, then an aggregate table introduced by a comment line.
void append_report(io::CsvWriter& w, const ExperimentReport& rep, bool with_label) {
  auto header = kRunHeader;
  if (with_label) header.insert(header.begin(), "split");
  w.row(header);
  for (const auto& r : rep.runs) {
    auto cells = record_cells(r);
    if (with_label) cells.insert(cells.begin(), rep.label);
    w.row(cells);
  }
}

void append_aggregates(io::CsvWriter& w, const std::vector<const ExperimentReport*>& reps, bool with_label) {
  w.comment("aggregate");
  auto header = kAggregateHeader;
  if (with_label) header.insert(header.begin(), "split");
  w.row(header);
  for (const auto* rep : reps) {
    for (const auto& a : rep->aggregates) {
      auto cells = aggregate_cells(a);
      if (with_label) cells.insert(cells.begin(), rep->label);
      w.row(cells);
    }
  }
}

std::string plot_csv(const RunConfig& cfg, std::string_view command,
                     const std::vector<const ExperimentReport*>& reps) {
  io::CsvWriter w = csv_for(cfg, command);
  w.row({"split", "margin", "metric", "mean", "std", "runs"});
  for (const auto* rep : reps) {
    for (const auto& a : rep->aggregates) {
      const std::pair<const char*, const Summary*> metrics[] = {
          {"retrieval_accuracy", &a.retrieval_accuracy},
          {"ciou_at_half", &a.ciou_at_half},
          {"auc", &a.auc},
      };
      for (const auto& [name, s] : metrics) {
        w.row({rep->label, format_double(a.margin), name, format_double(s->mean), format_double(s->stddev),
               std::to_string(a.runs)});
      }
    }
  }
  return w.str();
}

// Finished runs are stored one file per (label, margin, seed) so an
// interrupted sweep can pick up where it stopped.
class MarkerStore {
 public:
  MarkerStore(fs::path dir, std::string hash) : dir_(std::move(dir)), hash_(std::move(hash)) {}

  RunCache cache() {
    RunCache c;
    c.lookup = [this](const std::string& label, double margin, std::uint64_t seed) {
      return lookup(label, margin, seed);
    };
    c.store = [this](const std::string& label, const RunRecord& r) { store(label, r); };
    return c;
  }

  std::size_t hits() const { return hits_; }

 private:
  fs::path path_for(const std::string& label, double margin, std::uint64_t seed) const {
    return dir_ / (label + "_m" + format_double(margin) + "_s" + std::to_string(seed) + ".json");
  }

  std::optional<RunRecord> lookup(const std::string& label, double margin, std::uint64_t seed) {
    const fs::path p = path_for(label, margin, seed);
    std::error_code ec;
    if (!fs::exists(p, ec)) return std::nullopt;
    try {
      const json j = json::parse(io::read_file(p));
      if (j.at("config_hash").get<std::string>() != hash_) return std::nullopt;
      RunRecord r;
      r.margin = parse(j.at("margin"));
      r.seed = j.at("seed").get<std::uint64_t>();
      r.retrieval_accuracy = parse(j.at("retrieval_accuracy"));
      r.ciou_at_half = parse(j.at("ciou_at_half"));
      r.auc = parse(j.at("auc"));
      r.final_loss = parse(j.at("final_loss"));
      r.status = j.at("status").get<std::string>();
      if (r.margin != margin || r.seed != seed) return std::nullopt;
      std::lock_guard lock(mu_);
      ++hits_;
      return r;
    } catch (const std::exception&) {
      // Unreadable marker: rerun.
      return std::nullopt;
    }
  }

  void store(const std::string& label, const RunRecord& r) {
    const json j = {
        {"config_hash", hash_},
        {"margin", format_double(r.margin)},
        {"seed", r.seed},
        {"retrieval_accuracy", format_double(r.retrieval_accuracy)},
        {"ciou_at_half", format_double(r.ciou_at_half)},
        {"auc", format_double(r.auc)},
        {"final_loss", format_double(r.final_loss)},
        {"status", r.status},
    };
    io::atomic_write(path_for(label, r.margin, r.seed), j.dump() + "\n");
  }

  static double parse(const json& v) {
    const std::string s = v.get<std::string>();
    double out = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number");
    return out;
  }

  fs::path dir_;
  std::string hash_;
  std::mutex mu_;
  std::size_t hits_ = 0;
};

// ---------------------------------------------------------------------------
// Commands

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<unsigned> threads;
  std::optional<std::string> margins;
  bool print_config = false;
};

std::vector<double> parse_margins(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("empty entry in --margins", "margins");
    item = item.substr(b, e - b + 1);
    double v = 0.0;
    const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc{} || res.ptr != item.data() + item.size() || !std::isfinite(v)) {
      throw ConfigError("cannot parse margin '" + item + "'", "margins");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--margins is empty", "margins");
  return out;
}

RunConfig load(const CommonFlags& flags) {
  RunConfig cfg = default_config();
  if (!flags.config_path.empty()) {
    cfg = parse_config(io::read_file(flags.config_path));
  }
  if (flags.seed) {
    cfg.experiment.synth.seed = *flags.seed;
    cfg.experiment.train.seed = *flags.seed;
    cfg.sweep.first_seed = *flags.seed;
  }
  if (flags.out_dir) cfg.output_dir = *flags.out_dir;
  if (flags.threads) {
    if (*flags.threads < 1) throw ConfigError("--threads must be positive", "threads");
    cfg.sweep.threads = *flags.threads;
  }
  if (flags.margins) cfg.sweep.margins = parse_margins(*flags.margins);
  validate(cfg);
  return cfg;
}

void require_config(const CommonFlags& flags) {
  if (flags.config_path.empty()) throw ConfigError("--config is required for this command", "config");
}

int cmd_print_config(const CommonFlags& flags, std::ostream& out) {
  out << dump_config(load(flags));
  return kExitOk;
}

int cmd_gen_data(const CommonFlags& flags, std::ostream& out) {
  require_config(flags);
  const RunConfig cfg = load(flags);
  const Split split = experiment_split(cfg.experiment);
  const fs::path dir = cfg.output_dir;
  io::atomic_write(dir / "dataset.bin", io::encode_dataset(split));
  write_json(dir / "annotations.json", annotations_json(split, cfg.experiment.eval.upsample));

  std::map<int, std::array<std::size_t, 3>> counts;
  std::size_t faulty = 0;
  for (const auto& s : split.train) {
    ++counts[s.class_id][0];
    faulty += s.is_faulty_positive ? 1 : 0;
  }
  for (const auto& s : split.heard_test) ++counts[s.class_id][1];
  for (const auto& s : split.unheard_test) ++counts[s.class_id][2];
  const double fraction = split.train.empty() ? 0.0 : static_cast<double>(faulty) / static_cast<double>(split.train.size());

  io::CsvWriter w = csv_for(cfg, "gen-data");
  w.comment("train_faulty_positive_fraction=" + format_double(fraction));
  w.row({"class_id", "train", "heard_test", "unheard_test"});
  for (const auto& [cls, c] : counts) {
    w.row({std::to_string(cls), std::to_string(c[0]), std::to_string(c[1]), std::to_string(c[2])});
  }
  io::atomic_write(dir / "dataset_summary.csv", w.str());

  out << "dataset: " << split.train.size() << " train, " << split.heard_test.size() << " heard test, "
      << split.unheard_test.size() << " unheard test scenes over " << counts.size() << " classes\n";
  out << "train faulty-positive fraction: " << format_double(fraction) << " (configured "
      << format_double(cfg.experiment.synth.faulty_positive_rate) << ")\n";
  out << "wrote dataset.bin, annotations.json, dataset_summary.csv\n";
  return kExitOk;
}

// Compares two config documents while ignoring the epoch budget.
bool same_run(const RunConfig& a, const RunConfig& b) {
  RunConfig x = a, y = b;
  x.experiment.train.epochs = 0;
  y.experiment.train.epochs = 0;
  return config_hash(x) == config_hash(y);
}

json predictions_json(const EvalResult& res) {
  json arr = json::array();
  for (std::size_t k = 0; k < res.ids.size(); ++k) {
    const Mat2& m = res.maps[k];
    arr.push_back({{"id", res.ids[k]},
                   {"height", m.rows()},
                   {"width", m.cols()},
                   {"scores", std::vector<double>(m.values().begin(), m.values().end())}});
  }
  return arr;
}

int cmd_train(const CommonFlags& flags, bool resume, const std::string& dataset_path, std::ostream& out) {
  require_config(flags);
  const RunConfig cfg = load(flags);
  const TrainConfig& tc = cfg.experiment.train;
  const fs::path dir = cfg.output_dir;
  const fs::path ckpt_path = dir / "checkpoint.bin";

  const Split split = dataset_path.empty() ? experiment_split(cfg.experiment)
                                           : io::decode_dataset(io::read_file(dataset_path));
  if (split.train.empty()) throw ConfigError("training set is empty", "synth.samples_per_class");

  TrainState state;
  if (resume && fs::exists(ckpt_path)) {
    io::Checkpoint ckpt = io::decode_checkpoint(io::read_file(ckpt_path));
    if (!same_run(parse_config(ckpt.config_json), cfg)) {
      throw ConfigError("checkpoint " + ckpt_path.string() + " was written for a different config", "resume");
    }
    if (ckpt.state.epochs_done > tc.epochs) {
      throw ConfigError("checkpoint has more epochs than train.epochs", "train.epochs");
    }
    state = std::move(ckpt.state);
    out << "resuming at epoch " << state.epochs_done << "\n";
  } else {
    state.encoder = initial_encoder(tc, split.train);
  }

  // Location and thread count are not part of the run's identity.
  RunConfig canonical = cfg;
  canonical.output_dir = ".";
  canonical.sweep.threads = 1;
  const std::string config_doc = dump_config(canonical);
  auto save = [&] { io::atomic_write(ckpt_path, io::encode_checkpoint({config_doc, state})); };
  save();
  for (int e = state.epochs_done; e < tc.epochs; ++e) {
    TrainConfig step = tc;
    step.epochs = e + 1;
    continue_training(state, split.train, step);
    save();
    out << "epoch " << (e + 1) << "/" << tc.epochs << " loss " << format_double(state.loss_history.back()) << "\n";
  }

  io::CsvWriter loss = csv_for(cfg, "train");
  loss.row({"epoch", "mean_loss"});
  for (std::size_t k = 0; k < state.loss_history.size(); ++k) {
    loss.row({std::to_string(k + 1), format_double(state.loss_history[k])});
  }
  io::atomic_write(dir / "loss.csv", loss.str());

  io::CsvWriter report = csv_for(cfg, "train");
  report.row({"split", "margin", "epochs", "retrieval_accuracy", "ciou_at_0.5_percent", "auc_percent", "final_loss"});
  io::CsvWriter samples = csv_for(cfg, "train");
  samples.row({"split", "sample_id", "ciou"});
  json predictions = json::array();
  const double final_loss = state.loss_history.empty() ? 0.0 : state.loss_history.back();
  for (const auto& [label, set] : {std::pair<std::string, const std::vector<SyntheticScene>*>{"heard", &split.heard_test},
                                   {"unheard", &split.unheard_test}}) {
    if (set->empty()) continue;
    const EvalResult res = evaluate(state.encoder, *set, tc.loss.pool, cfg.experiment.eval);
    report.row({label, format_double(tc.loss.margin), std::to_string(state.epochs_done),
                format_double(res.retrieval_accuracy), format_double(res.ciou_at_half),
                format_double(100.0 * res.curve.auc), format_double(final_loss)});
    for (std::size_t k = 0; k < res.ids.size(); ++k) samples.row({label, res.ids[k], format_double(res.cious[k])});
    for (auto& p : predictions_json(res)) predictions.push_back(std::move(p));
    out << label << ": retrieval " << format_double(res.retrieval_accuracy) << ", cIoU@0.5 "
        << format_double(res.ciou_at_half) << "%, AUC " << format_double(100.0 * res.curve.auc) << "%\n";
  }
  io::atomic_write(dir / "train_report.csv", report.str());
  io::atomic_write(dir / "samples.csv", samples.str());
  write_json(dir / "predictions.json", predictions);
  write_json(dir / "annotations.json", annotations_json(split, cfg.experiment.eval.upsample));
  return kExitOk;
}

int cmd_sweep(const CommonFlags& flags, std::ostream& out) {
  require_config(flags);
  const RunConfig cfg = load(flags);
  const fs::path dir = cfg.output_dir;
  MarkerStore markers(dir / "runs", config_hash(cfg));
  const RunCache cache = markers.cache();
  const ExperimentReport rep =
      margin_sweep(cfg.sweep.margins, cfg.sweep.seeds(), cfg.experiment, cfg.sweep.threads, &cache);

  io::CsvWriter w = csv_for(cfg, "sweep");
  append_report(w, rep, false);
  append_aggregates(w, {&rep}, false);
  io::atomic_write(dir / "sweep.csv", w.str());
  io::atomic_write(dir / "sweep_plot.csv", plot_csv(cfg, "sweep", {&rep}));

  out << "margin  runs  retrieval        cIoU@0.5          AUC\n";
  for (const auto& a : rep.aggregates) {
    out << format_double(a.margin) << "  " << a.runs << "  " << format_double(a.retrieval_accuracy.mean) << " +- "
        << format_double(a.retrieval_accuracy.stddev) << "  " << format_double(a.ciou_at_half.mean) << " +- "
        << format_double(a.ciou_at_half.stddev) << "  " << format_double(a.auc.mean) << "\n";
  }
  out << "reused " << markers.hits() << " finished runs\n";
  return kExitOk;
}

int cmd_open_set(const CommonFlags& flags, std::ostream& out) {
  require_config(flags);
  const RunConfig cfg = load(flags);
  const fs::path dir = cfg.output_dir;
  MarkerStore markers(dir / "runs", config_hash(cfg));
  const RunCache cache = markers.cache();
  const OpenSetReport rep =
      open_set_eval(cfg.sweep.margins, cfg.sweep.seeds(), cfg.experiment, cfg.sweep.threads, &cache);

  io::CsvWriter w = csv_for(cfg, "open-set");
  auto heard_classes = std::string("heard_classes=");
  for (int c : rep.heard.classes) heard_classes += std::to_string(c) + " ";
  auto unheard_classes = std::string("unheard_classes=");
  for (int c : rep.unheard.classes) unheard_classes += std::to_string(c) + " ";
  w.comment(heard_classes);
  w.comment(unheard_classes);
  w.row([] {
    auto h = kRunHeader;
    h.insert(h.begin(), "split");
    return h;
  }());
  for (const auto* r : {&rep.heard, &rep.unheard}) {
    for (const auto& run : r->runs) {
      auto cells = record_cells(run);
      cells.insert(cells.begin(), r->label);
      w.row(cells);
    }
  }
  append_aggregates(w, {&rep.heard, &rep.unheard}, true);
  io::atomic_write(dir / "open_set.csv", w.str());
  io::atomic_write(dir / "open_set_plot.csv", plot_csv(cfg, "open-set", {&rep.heard, &rep.unheard}));

  for (const auto* r : {&rep.heard, &rep.unheard}) {
    for (const auto& a : r->aggregates) {
      out << r->label << " margin " << format_double(a.margin) << ": retrieval "
          << format_double(a.retrieval_accuracy.mean) << ", cIoU@0.5 " << format_double(a.ciou_at_half.mean)
          << ", AUC " << format_double(a.auc.mean) << "\n";
    }
  }
  return kExitOk;
}

struct EvalMapsFlags {
  std::string predictions;
  std::string annotations;
  std::optional<std::string> threshold;
  std::optional<double> auc_step;
};

int cmd_eval_maps(const CommonFlags& flags, const EvalMapsFlags& em, std::ostream& out) {
  RunConfig cfg = load(flags);
  if (em.threshold) {
    if (*em.threshold == "median") {
      cfg.experiment.eval.threshold = ThresholdRule::median();
    } else {
      double v = 0.0;
      const auto& t = *em.threshold;
      const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
      if (res.ec != std::errc{} || res.ptr != t.data() + t.size() || !std::isfinite(v)) {
        throw ConfigError("--threshold must be 'median' or a number", "threshold");
      }
      cfg.experiment.eval.threshold = ThresholdRule::absolute(v);
    }
  }
  if (em.auc_step) cfg.experiment.eval.auc_step = *em.auc_step;
  cfg.experiment.eval.validate();

  const json preds = read_json(em.predictions);
  const json anns = read_json(em.annotations);
  if (!preds.is_array()) throw ConfigError("predictions must be a JSON array", "predictions");
  if (!anns.is_array()) throw ConfigError("annotations must be a JSON array", "annotations");

  std::map<std::string, PredictionMap> pred_by_id;
  for (const auto& p : preds) {
    try {
      const auto id = p.at("id").get<std::string>();
      const auto h = p.at("height").get<std::size_t>();
      const auto w = p.at("width").get<std::size_t>();
      auto scores = p.at("scores").get<std::vector<double>>();
      if (!pred_by_id.emplace(id, PredictionMap{Mat2(h, w, std::move(scores)), 0, 0}).second) {
        throw ConfigError("duplicate prediction id " + id, "predictions");
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed prediction record: ") + e.what(), "predictions");
    }
  }
  std::map<std::string, ConsensusMap> gt_by_id;
  for (const auto& a : anns) {
    try {
      const auto id = a.at("id").get<std::string>();
      const auto h = a.at("height").get<std::size_t>();
      const auto w = a.at("width").get<std::size_t>();
      std::vector<Box> boxes;
      for (const auto& b : a.at("boxes")) {
        const auto v = b.get<std::vector<double>>();
        if (v.size() != 4) throw ConfigError("box must have 4 coordinates", "annotations");
        boxes.push_back(Box{v[0], v[1], v[2], v[3]});
      }
      if (!gt_by_id.emplace(id, consensus_from_boxes(boxes, h, w)).second) {
        throw ConfigError("duplicate annotation id " + id, "annotations");
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed annotation record: ") + e.what(), "annotations");
    }
  }

  std::vector<std::string> missing_gt, missing_pred;
  for (const auto& [id, p] : pred_by_id) {
    if (!gt_by_id.count(id)) missing_gt.push_back(id);
  }
  for (const auto& [id, g] : gt_by_id) {
    if (!pred_by_id.count(id)) missing_pred.push_back(id);
  }
  if (!missing_gt.empty() || !missing_pred.empty()) {
    std::string msg = "sample ids do not match.";
    if (!missing_pred.empty()) {
      msg += " missing predictions:";
      for (const auto& id : missing_pred) msg += " " + id;
      msg += ".";
    }
    if (!missing_gt.empty()) {
      msg += " missing annotations:";
      for (const auto& id : missing_gt) msg += " " + id;
      msg += ".";
    }
    throw ConfigError(msg, "predictions");
  }

  // std::map iteration keeps the output in id order regardless of file order.
  io::CsvWriter w = csv_for(cfg, "eval-maps");
  w.row({"sample_id", "ciou"});
  std::vector<double> cious;
  for (auto& [id, pred] : pred_by_id) {
    const ConsensusMap& gt = gt_by_id.at(id);
    pred.target_h = gt.height();
    pred.target_w = gt.width();
    const double c = ciou(pred, gt, cfg.experiment.eval.threshold);
    cious.push_back(c);
    w.row({id, format_double(c)});
  }
  const double at_half = ciou_at_half(cious);
  const double auc = 100.0 * eval_curve(cious, cfg.experiment.eval.auc_step).auc;
  w.row({"ciou_at_0.5_percent", format_double(at_half)});
  w.row({"auc_percent", format_double(auc)});
  const fs::path dir = flags.out_dir ? fs::path(*flags.out_dir) : fs::path(cfg.output_dir);
  io::atomic_write(dir / "eval_maps.csv", w.str());
  out << cious.size() << " samples: cIoU@0.5 " << format_double(at_half) << "%, AUC " << format_double(auc) << "%\n";
  return kExitOk;
}

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_path, "JSON config file");
  app->add_option("--seed", f.seed, "overrides synth.seed, train.seed and sweep.first_seed");
  app->add_option("--out", f.out_dir, "output directory");
  app->add_option("--threads", f.threads, "worker threads for sweeps");
  app->add_option("--margins", f.margins, "comma-separated margins for sweeps");
  app->add_flag("--print-config", f.print_config, "print the resolved config and exit");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"marginNCE toolkit: synthetic data, training, margin sweeps and localization metrics"};
  app.require_subcommand(1);
  CommonFlags flags;
  bool resume = false;
  std::string dataset_path;
  EvalMapsFlags em;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset and its annotations");
  auto* trn = app.add_subcommand("train", "train one model and evaluate it");
  auto* swp = app.add_subcommand("sweep", "train over a grid of margins and seeds");
  auto* opn = app.add_subcommand("open-set", "train on heard classes, evaluate on heard and unheard");
  auto* evm = app.add_subcommand("eval-maps", "score prediction maps against box annotations");
  auto* prc = app.add_subcommand("print-config", "print the resolved config");
  for (auto* sub : {gen, trn, swp, opn, evm, prc}) add_common(sub, flags);
  trn->add_flag("--resume", resume, "continue from <out>/checkpoint.bin if present");
  trn->add_option("--dataset", dataset_path, "dataset file written by gen-data");
  evm->add_option("--predictions", em.predictions, "prediction maps (JSON)")->required();
  evm->add_option("--annotations", em.annotations, "box annotations (JSON)")->required();
  evm->add_option("--threshold", em.threshold, "'median' or an absolute score threshold");
  evm->add_option("--auc-step", em.auc_step, "threshold step of the success curve");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (flags.print_config || prc->parsed()) return cmd_print_config(flags, out);
    if (gen->parsed()) return cmd_gen_data(flags, out);
    if (trn->parsed()) return cmd_train(flags, resume, dataset_path, out);
    if (swp->parsed()) return cmd_sweep(flags, out);
    if (opn->parsed()) return cmd_open_set(flags, out);
    if (evm->parsed()) return cmd_eval_maps(flags, em, out);
  } catch (const ConfigError& e) {
    err << "config error";
    if (!e.field().empty()) err << " [" << e.field() << "]";
    err << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DimensionError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace mnce::cli
