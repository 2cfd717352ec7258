// Command-line driver: data generation, teacher pretraining, student
// training, compression, evaluation, calibration, probing and timing.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <thread>

#include "incomes/calib/calibration.hpp"
#include "incomes/train/pretrain.hpp"
#include "incomes/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace incomes;
using json = nlohmann::json;

namespace {

/// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t parallelism = std::max(1u, std::thread::hardware_concurrency());
};

struct MissingField : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const Common& c) {
  if (c.config_path.empty()) return json::object();
  std::ifstream is(c.config_path);
  if (!is) throw ContractError("config: cannot open " + c.config_path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ContractError("config: " + c.config_path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ContractError("config: document must be an object");
  return j;
}

json section(const json& doc, const char* name) {
  if (!doc.contains(name)) return json::object();
  if (!doc.at(name).is_object()) throw ContractError(std::string("config: field '") + name + "': expected an object");
  return doc.at(name);
}

/// Creates the run directory; an existing non-empty directory is refused so
/// that earlier runs are never overwritten.
fs::path fresh_out(const Common& c, const std::string& sub) {
  fs::path out = c.out.empty() ? fs::path("runs") / (sub + "-seed" + std::to_string(c.seed)) : fs::path(c.out);
  if (fs::exists(out) && !fs::is_empty(out))
    throw ContractError("out: run directory " + out.string() + " is not empty");
  fs::create_directories(out);
  return out;
}

void echo_config(const fs::path& out, const json& resolved) {
  std::ofstream os(out / "config.json");
  os << resolved.dump(2) << '\n';
}

void require_path(const std::string& value, const std::string& field) {
  if (value.empty()) throw MissingField(field + ": required path not given");
  if (!fs::exists(value)) throw MissingField(field + ": no such file " + value);
}

WorldSpec world_spec(const json& doc, std::uint64_t seed, const std::string& world_path) {
  json w = section(doc, "world");
  if (!world_path.empty()) {
    std::ifstream is(world_path);
    if (!is) throw ContractError("world: cannot open " + world_path);
    try {
      w = json::parse(is);
    } catch (const json::exception& e) {
      throw FormatError("world: " + world_path + ": " + e.what());
    }
  } else {
    w["seed"] = seed;
  }
  return WorldSpec::from_json(w);
}

std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& field) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ContractError(field + ": expected positive integers, got '" + item + "'");
    }
  }
  if (out.empty()) throw ContractError(field + ": empty list");
  return out;
}

ModelState<float> load_model(const std::string& path, const std::string& field) {
  require_path(path, field);
  return load_checkpoint<float>(path);
}

// ---- subcommands ----

struct GenData {
  std::size_t n_cases = 500;
  std::string pool_sizes = "1";
  std::string kinds = "recall,paraphrase_portability,multi_hop,locality";
  bool hard_negatives = false;
};

int run_gen_data(const Common& c, const GenData& o) {
  json doc = load_config(c);
  WorldSpec ws = world_spec(doc, c.seed, "");
  auto sizes = parse_sizes(o.pool_sizes, "pool_size");
  std::vector<std::string> kinds;
  {
    std::stringstream ss(o.kinds);
    std::string k;
    while (std::getline(ss, k, ',')) {
      try {
        case_kind_from_string(k);
      } catch (const FormatError&) {
        throw ContractError("kinds: unknown case kind '" + k + "'");
      }
      kinds.push_back(k);
    }
  }
  const auto w = gen_world(ws);
  const fs::path out = fresh_out(c, "gen-data");
  {
    std::ofstream os(out / "world.json");
    os << ws.to_json().dump(2) << '\n';
  }
  json files = json::array();
  for (const auto& k : kinds) {
    const CaseKind kind = case_kind_from_string(k);
    std::vector<int> hops = kind == CaseKind::multi_hop ? std::vector<int>{2, 3, 4} : std::vector<int>{1};
    for (int h : hops)
      for (std::size_t ps : sizes) {
        CaseSpec spec;
        spec.kind = kind;
        spec.hops = h;
        spec.n_cases = o.n_cases;
        spec.pool_size = std::max<std::size_t>(ps, kind == CaseKind::multi_hop ? static_cast<std::size_t>(h) : 1);
        spec.hard_negatives = o.hard_negatives;
        spec.seed = c.seed;
        auto cases = gen_cases(w, spec);
        const std::string name = "cases_" + cases.front().label() + "_p" + std::to_string(spec.pool_size) + ".jsonl";
        save_cases(cases, out / name);
        files.push_back(name);
      }
  }
  echo_config(out, {{"subcommand", "gen-data"},
                    {"seed", c.seed},
                    {"world", ws.to_json()},
                    {"n_cases", o.n_cases},
                    {"pool_sizes", sizes},
                    {"kinds", kinds},
                    {"hard_negatives", o.hard_negatives},
                    {"files", files}});
  std::cout << "wrote " << files.size() << " datasets to " << out.string() << '\n';
  return 0;
}

struct Pretrain {
  std::string world;
  long max_steps = -1;
};

int run_pretrain(const Common& c, const Pretrain& o) {
  json doc = load_config(c);
  WorldSpec ws = world_spec(doc, c.seed, o.world);
  json pj = section(doc, "pretrain");
  if (o.max_steps >= 0) pj["max_steps"] = o.max_steps;
  PretrainConfig pc = PretrainConfig::from_json(pj);
  ModelConfig mc = ModelConfig::from_json(section(doc, "model"));
  mc.vocab_size = ws.vocab_size;
  mc.gist_token_id = static_cast<int>(ws.vocab_size) - 1;
  mc.validate();
  const auto w = gen_world(ws);
  const fs::path out = fresh_out(c, "pretrain");
  echo_config(out, {{"subcommand", "pretrain"}, {"seed", c.seed}, {"world", ws.to_json()}, {"model", mc.to_json()}, {"pretrain", pc.to_json()}});
  Rng rng = Rng::derive(c.seed, "init");
  auto model = ModelState<float>::init(mc, rng);
  std::ofstream log(out / "pretrain.jsonl");
  auto rep = pretrain_base(model, w, pc, c.seed, &log);
  save_checkpoint(model, out / "teacher.ckpt");
  json r{{"steps", rep.steps}, {"conditioned_recall", rep.conditioned_recall}, {"reached_target", rep.reached_target}, {"last_loss", rep.last_loss}};
  std::ofstream(out / "report.json") << r.dump(2) << '\n';
  std::cout << r.dump() << '\n';
  return 0;
}

struct Train {
  std::string teacher, world;
  long steps = -1;
  std::string cross_layers;
  bool no_zero_gist = false, no_query_loss = false, golden_loss = false;
  double lambda_g = -1;
};

int run_train(const Common& c, const Train& o) {
  json doc = load_config(c);
  WorldSpec ws = world_spec(doc, c.seed, o.world);
  auto teacher = load_model(o.teacher, "teacher");
  json tj = section(doc, "train");
  // the student inherits the teacher's architecture
  json model = teacher.config.to_json();
  if (tj.contains("model")) model.update(tj.at("model"));
  model.erase("cross_layers");
  tj["model"] = model;
  if (!tj.contains("flags")) tj["flags"] = json::object();
  if (!o.cross_layers.empty()) tj["flags"]["cross_layers"] = o.cross_layers;
  if (o.no_zero_gist) tj["flags"]["zero_gist"] = false;
  if (o.no_query_loss) tj["flags"]["loss_on_query"] = false;
  if (o.golden_loss) tj["flags"]["golden_loss"] = true;
  if (o.lambda_g >= 0) tj["flags"]["lambda_g"] = o.lambda_g;
  if (o.steps >= 0) {
    if (!tj.contains("schedule")) tj["schedule"] = json::object();
    tj["schedule"]["total_steps"] = o.steps;
  }
  tj["seed"] = c.seed;
  TrainConfig tc = TrainConfig::from_json(tj);
  if (tc.model.vocab_size != ws.vocab_size) throw ContractError("world.vocab_size: does not match the teacher's vocabulary");
  const auto w = gen_world(ws);
  const fs::path out = fresh_out(c, "train");
  echo_config(out, {{"subcommand", "train"}, {"seed", c.seed}, {"teacher", o.teacher}, {"world", ws.to_json()}, {"train", tc.to_json()}});
  auto student = make_student(teacher, tc);
  Curriculum cur(w, tc.mix);
  std::ofstream metrics(out / "metrics.jsonl");
  TrainIo io;
  io.metrics = &metrics;
  io.checkpoint_dir = out / "checkpoints";
  auto res = run_training(teacher, student, cur, tc, io);
  save_checkpoint(student, out / "student.ckpt");
  std::cout << "trained " << res.steps << " steps; student at " << (out / "student.ckpt").string() << '\n';
  return 0;
}

/// Unique edits of a set of datasets, keyed by their text.
std::vector<EditRecord> unique_edits(const std::vector<std::string>& data) {
  std::vector<EditRecord> out;
  std::set<std::vector<int>> seen;
  std::set<std::int64_t> ids;
  for (const auto& path : data) {
    require_path(path, "data");
    for (const auto& cs : load_cases(path))
      for (const auto& e : cs.edits)
        if (seen.insert(e.tokens).second) {
          EditRecord r = e;
          while (ids.count(r.edit_id)) r.edit_id += 1000000;
          ids.insert(r.edit_id);
          out.push_back(std::move(r));
        }
  }
  return out;
}

struct Compress {
  std::string student;
  std::vector<std::string> data;
};

int run_compress(const Common& c, const Compress& o) {
  auto student = load_model(o.student, "student");
  if (o.data.empty()) throw MissingField("data: at least one dataset is required");
  auto edits = unique_edits(o.data);
  const fs::path out = fresh_out(c, "compress");
  echo_config(out, {{"subcommand", "compress"}, {"seed", c.seed}, {"student", o.student}, {"data", o.data}, {"parallelism", c.parallelism}});
  auto pool = GistPool<float>::build(compress_batch(student, edits, c.parallelism));
  save_pool(pool, student.config, out / "pool.bin");
  std::ofstream os(out / "pool_edits.jsonl");
  for (const auto& e : edits) os << json{{"edit_id", e.edit_id}, {"tokens", e.tokens}}.dump() << '\n';
  std::cout << "compressed " << edits.size() << " edits (" << pool.payload_bytes() << " bytes)\n";
  return 0;
}

struct Eval {
  std::string student, teacher, pool;
  std::vector<std::string> data;
  std::string methods = "incomes,icl,base";
  double temperature = -1;
};

int run_eval(const Common& c, const Eval& o) {
  std::vector<Method> methods;
  {
    std::stringstream ss(o.methods);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (m == "incomes") methods.push_back(Method::incomes);
      else if (m == "icl") methods.push_back(Method::icl);
      else if (m == "base") methods.push_back(Method::base);
      else throw ContractError("methods: unknown method '" + m + "'");
    }
  }
  const bool need_student = std::find(methods.begin(), methods.end(), Method::incomes) != methods.end();
  std::optional<ModelState<float>> student;
  if (need_student) student = load_model(o.student, "student");
  auto teacher = load_model(o.teacher, "teacher");
  if (o.data.empty()) throw MissingField("data: at least one dataset is required");
  std::vector<BenchmarkCase> cases;
  for (const auto& p : o.data) {
    require_path(p, "data");
    auto part = load_cases(p);
    cases.insert(cases.end(), part.begin(), part.end());
  }
  EvalOptions opt;
  opt.methods = methods;
  opt.parallelism = c.parallelism;
  opt.temperature = o.temperature > 0 ? o.temperature : student ? student->config.inference_temperature : 0.45;
  std::optional<GistCache<float>> cache;
  if (student) {
    cache.emplace(*student);
    if (!o.pool.empty()) {
      require_path(o.pool, "pool");
      auto pool = load_pool<float>(o.pool, student->config);
      const fs::path listing = fs::path(o.pool).parent_path() / "pool_edits.jsonl";
      require_path(listing.string(), "pool");
      std::ifstream is(listing);
      std::map<std::int64_t, std::vector<int>> text;
      std::string line;
      while (std::getline(is, line))
        if (!line.empty()) {
          auto j = json::parse(line);
          text[j.at("edit_id").get<std::int64_t>()] = j.at("tokens").get<std::vector<int>>();
        }
      for (std::size_t i = 0; i < pool.size(); ++i) {
        auto it = text.find(pool[i].edit_id);
        if (it == text.end()) throw FormatError("pool: edit " + std::to_string(pool[i].edit_id) + " missing from " + listing.string());
        cache->insert(it->second, pool[i]);
      }
    }
  }
  const fs::path out = fresh_out(c, "eval");
  echo_config(out, {{"subcommand", "eval"},  {"seed", c.seed},       {"student", o.student},       {"teacher", o.teacher},
                    {"pool", o.pool},        {"data", o.data},       {"methods", o.methods},       {"temperature", opt.temperature},
                    {"parallelism", c.parallelism}});
  auto rep = evaluate(student ? &*student : nullptr, teacher, cases, opt, cache ? &*cache : nullptr);
  std::ofstream js(out / "report.jsonl");
  rep.write_jsonl(js);
  std::ofstream ts(out / "report.tsv");
  rep.write_tsv(ts);
  rep.write_tsv(std::cout);
  return 0;
}

struct Calibrate {
  std::string student, world;
  std::string pool_sizes = "1,10,20,40,80,200,300";
  std::size_t n_probes = 100;
};

int run_calibrate(const Common& c, const Calibrate& o) {
  auto student = load_model(o.student, "student");
  json doc = load_config(c);
  WorldSpec ws = world_spec(doc, c.seed, o.world);
  auto sizes = parse_sizes(o.pool_sizes, "pool_size");
  const auto w = gen_world(ws);
  const fs::path out = fresh_out(c, "calibrate");
  echo_config(out, {{"subcommand", "calibrate"}, {"seed", c.seed}, {"student", o.student}, {"world", ws.to_json()},
                    {"pool_sizes", sizes}, {"n_probes", o.n_probes}, {"parallelism", c.parallelism}});
  auto probes = make_probe_set(w, o.n_probes, *std::max_element(sizes.begin(), sizes.end()) - 1, c.seed);
  auto rows = calibrate_temperature(student, probes, sizes, {}, c.parallelism);
  std::ofstream os(out / "calibration.tsv");
  write_calibration_tsv(rows, os);
  write_calibration_tsv(rows, std::cout);
  return 0;
}

struct Probe {
  std::string student, world, tag;
  std::size_t pool_size = 32, n_probes = 50;
  double temperature = -1;
};

int run_probe(const Common& c, const Probe& o) {
  auto student = load_model(o.student, "student");
  json doc = load_config(c);
  WorldSpec ws = world_spec(doc, c.seed, o.world);
  if (o.pool_size == 0) throw ContractError("pool_size: must be positive");
  const double T = o.temperature > 0 ? o.temperature : student.config.inference_temperature;
  const std::string tag = o.tag.empty() ? fs::path(o.student).stem().string() : o.tag;
  const auto w = gen_world(ws);
  const fs::path out = fresh_out(c, "probe");
  echo_config(out, {{"subcommand", "probe"}, {"seed", c.seed}, {"student", o.student}, {"world", ws.to_json()}, {"pool_size", o.pool_size},
                    {"n_probes", o.n_probes}, {"temperature", T}, {"tag", tag}});
  auto probes = make_probe_set(w, o.n_probes, o.pool_size - 1, c.seed);
  GistCache<float> cache(student);
  std::vector<ProbeTrace> traces(probes.size());
  parallel_for(probes.size(), c.parallelism, [&](std::size_t i) {
    std::vector<EditRecord> edits{probes[i].edit};
    edits.insert(edits.end(), probes[i].distractors.begin(), probes[i].distractors.end());
    traces[i] = probe_run(student, cache.pool_for(edits), self_copy_input(probes[i].edit), std::optional<std::size_t>(0),
                          static_cast<float>(T), tag);
  });
  std::ofstream os(out / "probe.tsv");
  write_probe_header(os);
  for (const auto& tr : traces) write_probe_tsv(tr, os);
  json layers{{"layers", student.config.cross_layers}, {"mean_zero_gist_prob", layer_zero_gist_means(traces)}};
  std::ofstream(out / "layers.json") << layers.dump(2) << '\n';
  std::cout << layers.dump() << '\n';
  return 0;
}

struct Bench {
  std::string student;
  std::size_t n_edits = 100, repeats = 5;
};

int run_bench(const Common& c, const Bench& o) {
  json doc = load_config(c);
  ModelState<float> student;
  if (!o.student.empty()) {
    student = load_model(o.student, "student");
  } else {
    Rng rng = Rng::derive(c.seed, "bench");
    student = extend_model(ModelState<float>::init(ModelConfig::from_json(section(doc, "model")), rng), rng);
  }
  WorldSpec ws = world_spec(doc, c.seed, "");
  ws.vocab_size = student.config.vocab_size;
  const auto w = gen_world(ws);
  if (o.n_edits == 0 || o.n_edits > w.overrides.size()) throw ContractError("n_edits: must be in [1, " + std::to_string(w.overrides.size()) + "]");
  if (o.repeats == 0) throw ContractError("repeats: must be positive");
  std::vector<EditRecord> edits;
  for (std::size_t i = 0; i < o.n_edits; ++i) edits.push_back(w.edit_record(w.overrides[i], static_cast<std::int64_t>(i)));
  const fs::path out = fresh_out(c, "bench");
  echo_config(out, {{"subcommand", "bench"}, {"seed", c.seed}, {"student", o.student}, {"model", student.config.to_json()},
                    {"n_edits", o.n_edits}, {"repeats", o.repeats}});
  auto r = efficiency_bench(student, edits, o.repeats);
  std::ofstream(out / "efficiency.json") << r.to_json().dump(2) << '\n';
  std::cout << r.to_json().dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gist-compressed in-context model editing on a synthetic fact world"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config_path, "JSON config document; flags override it");
    s->add_option("--seed", common.seed, "Seed for every random choice");
    s->add_option("--out", common.out, "Fresh run directory");
    s->add_option("--parallelism", common.parallelism, "Worker threads")->check(CLI::PositiveNumber);
  };

  GenData gd;
  auto* s_gen = app.add_subcommand("gen-data", "Generate the world and benchmark datasets");
  add_common(s_gen);
  s_gen->add_option("--n-cases", gd.n_cases, "Cases per condition");
  s_gen->add_option("--pool-size", gd.pool_sizes, "Candidate edits per case (comma list)");
  s_gen->add_option("--kinds", gd.kinds, "Comma list of case kinds");
  s_gen->add_flag("--hard-negatives", gd.hard_negatives, "Prefer same-subject distractors");

  Pretrain pt;
  auto* s_pt = app.add_subcommand("pretrain", "Pretrain the base (teacher) model");
  add_common(s_pt);
  s_pt->add_option("--world", pt.world, "world.json from gen-data");
  s_pt->add_option("--max-steps", pt.max_steps, "Step budget");

  Train tr;
  auto* s_tr = app.add_subcommand("train", "Train the gist student against a teacher");
  add_common(s_tr);
  s_tr->add_option("--teacher", tr.teacher, "Teacher checkpoint");
  s_tr->add_option("--world", tr.world, "world.json from gen-data");
  s_tr->add_option("--steps", tr.steps, "Training steps");
  s_tr->add_option("--cross-layers", tr.cross_layers, "half|all")->check(CLI::IsMember({"half", "all"}));
  s_tr->add_flag("--no-zero-gist", tr.no_zero_gist, "Train without the zero-gist entry");
  s_tr->add_flag("--no-query-loss", tr.no_query_loss, "Restrict the loss to answer tokens");
  s_tr->add_flag("--golden-loss", tr.golden_loss, "Add the golden-gist auxiliary loss");
  s_tr->add_option("--lambda-g", tr.lambda_g, "Weight of the golden-gist loss");

  Compress cp;
  auto* s_cp = app.add_subcommand("compress", "Compress the edits of datasets into a gist pool file");
  add_common(s_cp);
  s_cp->add_option("--student", cp.student, "Student checkpoint");
  s_cp->add_option("--data", cp.data, "Dataset files");

  Eval ev;
  auto* s_ev = app.add_subcommand("eval", "Evaluate methods on datasets");
  add_common(s_ev);
  s_ev->add_option("--student", ev.student, "Student checkpoint");
  s_ev->add_option("--teacher", ev.teacher, "Base model checkpoint (ICL, base and locality gold)");
  s_ev->add_option("--pool", ev.pool, "pool.bin from compress");
  s_ev->add_option("--data", ev.data, "Dataset files");
  s_ev->add_option("--methods", ev.methods, "Comma list of incomes, icl, base");
  s_ev->add_option("--temperature", ev.temperature, "Cross-attention temperature");

  Calibrate ca;
  auto* s_ca = app.add_subcommand("calibrate", "Fit cross-attention temperatures per pool size");
  add_common(s_ca);
  s_ca->add_option("--student", ca.student, "Student checkpoint");
  s_ca->add_option("--world", ca.world, "world.json from gen-data");
  s_ca->add_option("--pool-size", ca.pool_sizes, "Comma list of pool sizes");
  s_ca->add_option("--n-probes", ca.n_probes, "Probe instances");

  Probe pr;
  auto* s_pr = app.add_subcommand("probe", "Per-token selection traces");
  add_common(s_pr);
  s_pr->add_option("--student", pr.student, "Student checkpoint");
  s_pr->add_option("--world", pr.world, "world.json from gen-data");
  s_pr->add_option("--pool-size", pr.pool_size, "Pool size");
  s_pr->add_option("--n-probes", pr.n_probes, "Probe instances");
  s_pr->add_option("--temperature", pr.temperature, "Cross-attention temperature");
  s_pr->add_option("--tag", pr.tag, "Run tag written into every row");

  Bench bn;
  auto* s_bn = app.add_subcommand("bench", "Compression vs concatenated-context timing and memory");
  add_common(s_bn);
  s_bn->add_option("--student", bn.student, "Student checkpoint (default: fresh model from config)");
  s_bn->add_option("--n-edits", bn.n_edits, "Edits to compress");
  s_bn->add_option("--repeats", bn.repeats, "Timed repetitions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (s_gen->parsed()) return run_gen_data(common, gd);
    if (s_pt->parsed()) return run_pretrain(common, pt);
    if (s_tr->parsed()) return run_train(common, tr);
    if (s_cp->parsed()) return run_compress(common, cp);
    if (s_ev->parsed()) return run_eval(common, ev);
    if (s_ca->parsed()) return run_calibrate(common, ca);
    if (s_pr->parsed()) return run_probe(common, pr);
    if (s_bn->parsed()) return run_bench(common, bn);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
