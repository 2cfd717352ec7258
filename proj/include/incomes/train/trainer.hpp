#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>

#include "incomes/core/optim.hpp"
#include "incomes/model/checkpoint.hpp"
#include "incomes/train/curriculum.hpp"

namespace incomes {

struct TrainConfig {
  ModelConfig model;
  LrSchedule schedule{1e-3, 1e-5, 100, 2000};
  bool loss_on_query = true;
  bool golden_loss = false;
  double lambda_g = 0.1;
  std::uint64_t seed = 0;
  std::size_t examples_per_step = 12;
  double clip_norm = 1.0;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 500;
  CurriculumMix mix;

  void validate() const {
    auto bad = [](const std::string& f, const std::string& why) { throw ContractError("training config: " + f + ": " + why); };
    model.validate();
    if (model.cross_layers.empty()) bad("flags.cross_layers", "at least one cross layer is required");
    if (!(schedule.max_lr > 0)) bad("schedule.max_lr", "must be positive");
    if (schedule.min_lr < 0 || schedule.min_lr > schedule.max_lr) bad("schedule.min_lr", "must be in [0, max_lr]");
    if (schedule.warmup_steps < 0) bad("schedule.warmup_steps", "must be non-negative");
    if (schedule.total_steps <= 0) bad("schedule.total_steps", "must be positive");
    if (lambda_g < 0) bad("flags.lambda_g", "must be non-negative");
    if (examples_per_step == 0) bad("train.examples_per_step", "must be positive");
    if (mix.max_hops < 2 || mix.max_hops > 4) bad("train.max_hops", "must be in [2, 4]");
  }

  std::string cross_layers_mode() const {
    if (model.cross_layers == ModelConfig::all_layers(model.n_layers)) return "all";
    if (model.cross_layers == ModelConfig::upper_half(model.n_layers)) return "half";
    return "custom";
  }

  nlohmann::json to_json() const {
    nlohmann::json flags{{"zero_gist", model.zero_gist},
                         {"loss_on_query", loss_on_query},
                         {"golden_loss", golden_loss},
                         {"lambda_g", lambda_g}};
    const std::string mode = cross_layers_mode();
    if (mode == "custom") flags["cross_layers"] = model.cross_layers;
    else flags["cross_layers"] = mode;
    return {{"model", model.to_json()},
            {"schedule",
             {{"max_lr", schedule.max_lr},
              {"min_lr", schedule.min_lr},
              {"warmup_steps", schedule.warmup_steps},
              {"total_steps", schedule.total_steps}}},
            {"flags", flags},
            {"seed", seed},
            {"train",
             {{"examples_per_step", examples_per_step},
              {"clip_norm", clip_norm},
              {"log_every", log_every},
              {"checkpoint_every", checkpoint_every},
              {"max_hops", mix.max_hops},
              {"mix", {mix.recall, mix.paraphrase, mix.multi_hop, mix.locality}},
              {"hard_negative_rate", mix.hard_negative_rate}}}};
  }

  /// Missing keys keep defaults; flags override the model section.
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto get = [](const nlohmann::json& obj, const char* section, const char* key, auto& field) {
      if (!obj.contains(key)) return;
      try {
        obj.at(key).get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("training config: field '") + section + key + "': " + e.what());
      }
    };
    if (!j.is_object()) throw ContractError("training config: document must be an object");
    nlohmann::json model = j.value("model", nlohmann::json::object());
    if (j.contains("flags")) {
      const auto& f = j.at("flags");
      if (f.contains("cross_layers")) model["cross_layers"] = f.at("cross_layers");
      if (f.contains("zero_gist")) model["zero_gist"] = f.at("zero_gist");
      get(f, "flags.", "loss_on_query", c.loss_on_query);
      get(f, "flags.", "golden_loss", c.golden_loss);
      get(f, "flags.", "lambda_g", c.lambda_g);
    }
    c.model = ModelConfig::from_json(model);
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      get(s, "schedule.", "max_lr", c.schedule.max_lr);
      get(s, "schedule.", "min_lr", c.schedule.min_lr);
      get(s, "schedule.", "warmup_steps", c.schedule.warmup_steps);
      get(s, "schedule.", "total_steps", c.schedule.total_steps);
    }
    get(j, "", "seed", c.seed);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      get(t, "train.", "examples_per_step", c.examples_per_step);
      get(t, "train.", "clip_norm", c.clip_norm);
      get(t, "train.", "log_every", c.log_every);
      get(t, "train.", "checkpoint_every", c.checkpoint_every);
      get(t, "train.", "max_hops", c.mix.max_hops);
      get(t, "train.", "hard_negative_rate", c.mix.hard_negative_rate);
      if (t.contains("mix")) {
        std::vector<double> m;
        get(t, "train.", "mix", m);
        if (m.size() != 4) throw ContractError("training config: field 'train.mix': expected 4 rates");
        c.mix.recall = m[0];
        c.mix.paraphrase = m[1];
        c.mix.multi_hop = m[2];
        c.mix.locality = m[3];
      }
    }
    c.validate();
    return c;
  }
};

/// The extended student for a teacher: same base weights, the flags'
/// cross-layer set and zero-gist choice, fresh cross-attention weights.
template <class T>
ModelState<T> make_student(const ModelState<T>& teacher, const TrainConfig& cfg) {
  if (teacher.extended()) throw ContractError("make_student: teacher must be a base model");
  ModelState<T> base = teacher;
  base.config.cross_layers = cfg.model.cross_layers;
  base.config.zero_gist = cfg.model.zero_gist;
  base.config.inference_temperature = cfg.model.inference_temperature;
  base.config.train_temperature = cfg.model.train_temperature;
  base.config.canonical_gist_position = cfg.model.canonical_gist_position;
  Rng rng = Rng::derive(cfg.seed, "extend");
  return extend_model(base, rng);
}

struct StepRecord {
  std::size_t step = 0;
  int edit_batch_size = 0;
  LossBreakdown loss;
  double lr = 0;
  StepDiagnostics diag;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step},
                     {"edit_batch_size", edit_batch_size},
                     {"weighted_ce", loss.weighted_ce},
                     {"kl", loss.kl},
                     {"golden_aux", nullptr},
                     {"total", loss.total},
                     {"lr", lr},
                     {"mean_zero_gist_prob", diag.mean_zero_gist_prob},
                     {"mean_golden_prob", diag.mean_golden_prob},
                     {"mean_entropy", diag.mean_entropy}};
    if (loss.golden_aux) j["golden_aux"] = *loss.golden_aux;
    return j;
  }
};

struct TrainIo {
  std::ostream* metrics = nullptr;  // one JSON record per emission
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  std::size_t steps = 0;
  std::vector<StepRecord> history;
  std::optional<std::filesystem::path> last_checkpoint;
};

/// One optimisation step's data: the edit batch and the teacher signal.
template <class T>
struct PreparedStep {
  int edit_batch_size = 0;
  std::vector<TrainingExample> examples;
  std::vector<TeacherOutputs<T>> outputs;
  std::vector<TokenWeights<T>> weights;
};

template <class T>
PreparedStep<T> prepare_step(const ModelState<T>& teacher, const Curriculum& cur, Rng& rng, const TrainConfig& cfg) {
  PreparedStep<T> p;
  p.edit_batch_size = sample_edit_batch_size(rng);
  Episode ep = cur.sample(rng, static_cast<std::size_t>(p.edit_batch_size), cfg.examples_per_step);
  p.examples = Curriculum::examples(ep, cfg.loss_on_query);
  p.outputs = teacher_passes(teacher, std::span<const TrainingExample>(p.examples));
  for (const auto& o : p.outputs) p.weights.push_back(token_weights(o));
  return p;
}

/// Continued training of `student` against the frozen `teacher`.
template <class T>
TrainResult run_training(const ModelState<T>& teacher, ModelState<T>& student, const Curriculum& cur,
                         const TrainConfig& cfg, const TrainIo& io = {}) {
  cfg.validate();
  if (!student.extended()) throw ContractError("run_training: student must be extended");
  if (teacher.extended()) throw ContractError("run_training: teacher must be a base model");
  Rng rng = Rng::derive(cfg.seed, "train");
  typename Adam<T>::Options aopt;
  aopt.clip_norm = cfg.clip_norm;
  Adam<T> adam(student.parameters(), cfg.schedule, aopt);
  LossFlags flags{cfg.golden_loss, cfg.lambda_g};
  TrainResult res;
  if (io.checkpoint_dir) std::filesystem::create_directories(*io.checkpoint_dir);
  auto checkpoint = [&](std::size_t step) {
    if (!io.checkpoint_dir) return;
    const auto path = *io.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt");
    save_checkpoint(student, path);
    save_checkpoint(student, *io.checkpoint_dir / "last.ckpt");
    res.last_checkpoint = path;
  };
  const auto total = static_cast<std::size_t>(cfg.schedule.total_steps);
  for (std::size_t step = 0; step < total; ++step) {
    PreparedStep<T> p = prepare_step(teacher, cur, rng, cfg);
    bool golden_possible = false;
    for (const auto& ex : p.examples)
      for (int gi : ex.golden) golden_possible = golden_possible || gi >= 0;
    LossFlags step_flags = flags;
    step_flags.golden_loss = flags.golden_loss && golden_possible;

    student.zero_grad();
    Graph<T> g(true);
    StepLoss<T> sl = full_loss(g, student, std::span<const TrainingExample>(p.examples),
                               std::span<const TeacherOutputs<T>>(p.outputs), std::span<const TokenWeights<T>>(p.weights),
                               step_flags);
    if (!std::isfinite(sl.breakdown.total)) {
      throw NumericError("run_training: non-finite loss at step " + std::to_string(step) +
                         (res.last_checkpoint ? "; last good checkpoint " + res.last_checkpoint->string() : std::string()));
    }
    g.backward(sl.total);
    StepRecord rec;
    rec.step = step;
    rec.edit_batch_size = p.edit_batch_size;
    rec.loss = sl.breakdown;
    rec.diag = sl.diag;
    rec.lr = adam.step();
    res.history.push_back(rec);
    res.steps = step + 1;
    if (io.metrics && (step % cfg.log_every == 0 || step + 1 == total)) *io.metrics << rec.to_json().dump() << std::endl;
    if (io.on_step) io.on_step(rec);
    if (cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0 && student.all_finite()) checkpoint(step + 1);
  }
  if (student.all_finite() && (!res.last_checkpoint || cfg.checkpoint_every == 0 || res.steps % cfg.checkpoint_every != 0)) checkpoint(res.steps);
  return res;
}

}  // namespace incomes
