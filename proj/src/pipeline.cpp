#include "tp/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>

#include <json.hpp>

#include "tp/binary_io.hpp"
#include "tp/comnhallu.hpp"
#include "tp/decoder.hpp"
#include "tp/detector.hpp"
#include "tp/error.hpp"
#include "tp/eval.hpp"
#include "tp/rng.hpp"
#include "tp/states.hpp"

namespace tp {

namespace fs = std::filesystem;

namespace {

using Json = nlohmann::ordered_json;

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

const std::string& need(const std::string& path, const char* what) {
  if (path.empty()) throw MissingArtifactError("missing " + std::string(what) + ": no path given");
  return path;
}

const std::string& need_file(const std::string& path, const char* what) {
  need(path, what);
  if (!fs::exists(path)) throw MissingArtifactError("missing " + std::string(what) + ": " + path + " does not exist");
  return path;
}

void need_traces(const std::string& stem) {
  need(stem, "traces");
  const auto p = trace_paths(stem);
  for (const auto& f : {p.metadata, p.blob}) {
    if (!fs::exists(f)) throw MissingArtifactError("missing traces: " + f.string() + " does not exist");
  }
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_manifest(const fs::path& artifact, const std::string& stage, const PipelineConfig& cfg,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  Json j;
  j["stage"] = stage;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["config"] = Json::parse(to_json(cfg));
  io::write_file(artifact.string() + ".manifest.json", j.dump(2) + "\n");
}

std::vector<std::vector<double>> vectors(const std::vector<LabeledState>& states) {
  std::vector<std::vector<double>> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.vector);
  return out;
}

Vocabulary load_vocab(const PipelineConfig& cfg) { return Vocabulary::load(need_file(cfg.vocab, "vocabulary")); }

TrainConfig train_config(const PipelineConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.learning_rate = cfg.learning_rate;
  t.seed = cfg.seed;
  return t;
}

DecodeConfig decode_config(const PipelineConfig& cfg, const Vocabulary* vocab) {
  DecodeConfig d;
  d.tau = cfg.tau;
  d.n_b = cfg.n_b;
  d.max_tokens = cfg.max_tokens;
  d.layer = cfg.layer;
  d.k_candidates = cfg.k_candidates;
  d.vocabulary = vocab;
  d.per_sentence_budget = cfg.per_sentence_budget;
  return d;
}

// Stages.

std::vector<LabeledState> collect(const std::vector<Trace>& traces, const PipelineConfig& cfg, const Vocabulary& vocab,
                                  Diagnostics* diag) {
  std::vector<LabeledState> states;
  for (auto t : traces) {
    identify_object_tokens(t, vocab);
    auto s = collect_labeled_states(t, cfg.layer, &vocab, diag);
    states.insert(states.end(), s.begin(), s.end());
  }
  if (cfg.downsample) states = downsample_majority(states, cfg.seed);
  return states;
}

void stage_collect(const PipelineConfig& cfg, std::ostream& log) {
  need_traces(cfg.traces);
  const auto vocab = load_vocab(cfg);
  const auto& out = need(cfg.out, "output path");
  const auto corpus = read_traces(cfg.traces);
  Diagnostics diag;
  const auto states = collect(corpus.traces, cfg, vocab, &diag);
  std::size_t pos = 0;
  for (const auto& s : states) pos += s.label == 1;
  ensure_parent(out);
  write_states(out, states, config_hash(cfg));
  write_manifest(out, "collect", cfg, {cfg.traces, cfg.vocab}, {out});
  for (const auto& m : diag.messages) log << "note: " << m << "\n";
  log << "collected " << states.size() << " states (" << pos << " hallucinated) from " << corpus.traces.size()
      << " traces -> " << out << "\n";
}

DetectorCheckpoint train(const std::vector<LabeledState>& states, const PipelineConfig& cfg, std::ostream& log) {
  auto [tr, va] = split_states(states, cfg.split, cfg.seed);
  const auto res = train_detector(tr, va, train_config(cfg));
  DetectorCheckpoint ck;
  ck.model = res.model;
  ck.calibration = calibrate_thresholds(res.model, va, cfg.alphas);
  ck.config_hash = config_hash(cfg);
  std::vector<int> labels;
  for (const auto& s : va) labels.push_back(s.label);
  const double auc = roc_auc(detector_scores(res.model, va), labels);
  const auto m = evaluate_detector(res.model, va, cfg.tau);
  char buf[200];
  std::snprintf(buf, sizeof buf, "trained on %zu states, best epoch %d, val AUC %.4f, TPR %.3f FPR %.3f at tau %.2f\n",
                tr.size(), res.best_epoch, auc, m.tpr, m.fpr, cfg.tau);
  log << buf;
  return ck;
}

void stage_train(const PipelineConfig& cfg, std::ostream& log) {
  const auto file = read_states(need_file(cfg.states, "states file"));
  const auto& out = need(cfg.out, "output path");
  const auto ck = train(file.states, cfg, log);
  ensure_parent(out);
  save_detector(out, ck);
  write_manifest(out, "train", cfg, {cfg.states}, {out});
  log << "detector -> " << out << "\n";
}

void stage_calibrate(const PipelineConfig& cfg, std::ostream& log) {
  auto ck = load_detector(need_file(cfg.detector, "detector checkpoint"));
  const auto file = read_states(need_file(cfg.states, "states file"));
  ck.calibration = calibrate_thresholds(ck.model, file.states, cfg.alphas);
  const std::string out = cfg.out.empty() ? cfg.detector : cfg.out;
  ensure_parent(out);
  save_detector(out, ck);
  write_manifest(out, "calibrate", cfg, {cfg.detector, cfg.states}, {out});
  for (const auto& [a, t] : ck.calibration.entries) {
    const auto m = evaluate_detector(ck.model, file.states, t);
    char buf[160];
    std::snprintf(buf, sizeof buf, "alpha %.4f  threshold %.6f  TPR %.3f  FPR %.4f  LR+ %g\n", a, t, m.tpr, m.fpr,
                  m.lr_plus);
    log << buf;
  }
}

void stage_align(const PipelineConfig& cfg, std::ostream& log) {
  const auto src = read_states(need_file(cfg.source_states, "source states"));
  const auto tgt = read_states(need_file(cfg.target_states, "target states"));
  const auto& out = need(cfg.out, "output path");
  AnchorPairs anchors;
  const bool anchored = !cfg.source_anchors.empty() || !cfg.target_anchors.empty();
  if (anchored) {
    anchors.source = vectors(read_states(need_file(cfg.source_anchors, "source anchors")).states);
    anchors.target = vectors(read_states(need_file(cfg.target_anchors, "target anchors")).states);
  }
  Diagnostics diag;
  auto bundle = fit_comnhallu(vectors(src.states), vectors(tgt.states), cfg.d_prime, anchored ? &anchors : nullptr, &diag);
  bundle.config_hash = config_hash(cfg);
  ensure_parent(out);
  save_bundle(out, bundle);
  std::vector<std::string> inputs{cfg.source_states, cfg.target_states};
  if (anchored) inputs.insert(inputs.end(), {cfg.source_anchors, cfg.target_anchors});
  write_manifest(out, "align", cfg, inputs, {out});
  for (const auto& m : diag.messages) log << "note: " << m << "\n";
  log << "aligned d_s=" << bundle.source.mean.size() << " d_t=" << bundle.target.mean.size() << " d'=" << cfg.d_prime
      << (anchored ? " (anchored)" : "") << " -> " << out << "\n";
}

struct DecodeRun {
  std::vector<Trace> traces;
  std::vector<PassRecord> passes;
  std::size_t steps = 0;
  std::size_t backtraces = 0;
};

DecodeRun decode_all(const std::vector<std::unique_ptr<Oracle>>& oracles, const std::vector<std::set<std::string>>& refs,
                     const std::vector<std::string>& ids, const PipelineConfig& cfg, const Vocabulary* vocab,
                     const Scorer* scorer, bool truthprint) {
  DecodeRun run;
  auto dc = decode_config(cfg, vocab);
  for (std::size_t i = 0; i < oracles.size(); ++i) {
    auto r = truthprint ? decode_truthprint(*oracles[i], *scorer, dc) : decode_greedy(*oracles[i], dc);
    r.trace.trace_id = ids[i];
    r.trace.reference_objects = refs[i];
    run.steps += r.oracle_steps;
    run.backtraces += static_cast<std::size_t>(r.backtraces);
    run.passes.insert(run.passes.end(), r.passes.begin(), r.passes.end());
    run.traces.push_back(std::move(r.trace));
  }
  return run;
}

void stage_decode(const PipelineConfig& cfg, std::ostream& log) {
  if (cfg.mode != "greedy" && cfg.mode != "truthprint") throw ConfigError("mode must be greedy or truthprint");
  const auto& out = need(cfg.out, "output path");
  std::vector<std::unique_ptr<Oracle>> oracles;
  std::vector<std::set<std::string>> refs;
  std::vector<std::string> ids;
  std::vector<std::string> inputs;
  std::optional<Vocabulary> vocab;
  if (!cfg.vocab.empty()) vocab = load_vocab(cfg);

  if (cfg.oracle == "synthetic") {
    if (!vocab) vocab = synth_vocabulary(cfg.synth);
    for (std::size_t i = 0; i < cfg.images; ++i) {
      auto o = std::make_unique<SyntheticOracle>(cfg.synth, cfg.first_image + i);
      refs.push_back(o->present());
      ids.push_back("synth-" + std::to_string(cfg.synth.seed) + "-" + std::to_string(cfg.first_image + i));
      oracles.push_back(std::move(o));
    }
  } else if (cfg.oracle == "script") {
    oracles.push_back(std::make_unique<ScriptedOracle>(script_table_from_json(io::read_file(need_file(cfg.script, "script")))));
    refs.emplace_back();
    ids.push_back("script");
    inputs.push_back(cfg.script);
  } else if (cfg.oracle == "trace-replay") {
    need_traces(cfg.traces);
    const auto corpus = read_traces(cfg.traces);
    for (const auto& t : corpus.traces) {
      oracles.push_back(std::make_unique<ScriptedOracle>(script_from_trace(t, cfg.layer, corpus.header.dim)));
      refs.push_back(t.reference_objects);
      ids.push_back(t.trace_id);
    }
    inputs.push_back(cfg.traces);
  } else {
    throw ConfigError("oracle must be synthetic, script or trace-replay");
  }

  std::optional<DetectorCheckpoint> ck;
  std::optional<AlignmentBundle> bundle;
  Scorer scorer;
  if (cfg.mode == "truthprint") {
    ck = load_detector(need_file(cfg.detector, "detector checkpoint"));
    inputs.push_back(cfg.detector);
    if (!cfg.bundle.empty()) {
      bundle = load_bundle(need_file(cfg.bundle, "alignment bundle"));
      inputs.push_back(cfg.bundle);
    }
    scorer = make_scorer(ck->model, bundle ? &*bundle : nullptr);
  }
  const auto run = decode_all(oracles, refs, ids, cfg, vocab ? &*vocab : nullptr, &scorer, cfg.mode == "truthprint");
  ensure_parent(out);
  write_traces(run.traces, out);
  std::vector<std::string> outputs{out + ".jsonl", out + ".bin"};
  if (cfg.mode == "truthprint") {
    io::write_file(out + ".passes.jsonl", pass_records_jsonl(run.passes));
    outputs.push_back(out + ".passes.jsonl");
  }
  write_manifest(out, "decode", cfg, inputs, outputs);
  log << cfg.mode << " decoded " << run.traces.size() << " captions, " << run.steps << " oracle steps, "
      << run.backtraces << " backtraces -> " << out << "\n";
}

ReportSection section(const std::string& name, const std::vector<Trace>& traces, const Vocabulary* vocab) {
  ReportSection s;
  s.name = name;
  s.chair = chair_for_traces(traces, vocab);
  try {
    s.pmc = pmc_stats(traces, vocab);
  } catch (const UndefinedMetricError&) {
  }
  s.extra["objects_per_caption"] = static_cast<double>(s.chair.n_objects) / static_cast<double>(s.chair.n_sentences);
  return s;
}

void stage_eval(const PipelineConfig& cfg, std::ostream& log) {
  need_traces(cfg.traces);
  auto corpus = read_traces(cfg.traces);
  std::optional<Vocabulary> vocab;
  if (!cfg.vocab.empty()) {
    vocab = load_vocab(cfg);
    for (auto& t : corpus.traces) identify_object_tokens(t, *vocab);
  }
  std::vector<std::string> inputs{cfg.traces};
  if (!cfg.references.empty()) {
    const auto j = nlohmann::json::parse(io::read_file(need_file(cfg.references, "references")));
    for (auto& t : corpus.traces) {
      if (!j.contains(t.trace_id)) throw MissingArtifactError("references have no entry for trace " + t.trace_id);
      const auto objs = j.at(t.trace_id).get<std::vector<std::string>>();
      t.reference_objects = {objs.begin(), objs.end()};
    }
    inputs.push_back(cfg.references);
  }
  const auto sec = section(fs::path(cfg.traces).filename().string(), corpus.traces, vocab ? &*vocab : nullptr);
  if (!cfg.out.empty()) {
    ensure_parent(cfg.out);
    io::write_file(cfg.out, report_json({sec}));
    write_manifest(cfg.out, "eval", cfg, inputs, {cfg.out});
  }
  log << report_text({sec});
}

void stage_e2e(const PipelineConfig& cfg, std::ostream& log) {
  const fs::path dir = cfg.out.empty() ? fs::path("tprint_e2e") : fs::path(cfg.out);
  fs::create_directories(dir);
  const auto vocab = synth_vocabulary(cfg.synth);
  io::write_file(dir / "vocab.tsv", vocab.serialize());

  const auto corpus = synthetic_corpus(cfg.synth, cfg.train_images, 0);
  write_traces(corpus, (dir / "train").string());
  log << "synthetic corpus: " << corpus.size() << " captions -> " << (dir / "train").string() << "\n";

  Diagnostics diag;
  const auto states = collect(corpus, cfg, vocab, &diag);
  write_states(dir / "states.jsonl", states, config_hash(cfg));
  log << "collected " << states.size() << " states\n";

  const auto ck = train(states, cfg, log);
  save_detector(dir / "detector.tpdet", ck);

  std::vector<std::unique_ptr<Oracle>> oracles;
  std::vector<std::set<std::string>> refs;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < cfg.images; ++i) {
    auto o = std::make_unique<SyntheticOracle>(cfg.synth, cfg.first_image + i);
    refs.push_back(o->present());
    ids.push_back("synth-" + std::to_string(cfg.synth.seed) + "-" + std::to_string(cfg.first_image + i));
    oracles.push_back(std::move(o));
  }
  const auto scorer = make_scorer(ck.model);
  const auto greedy = decode_all(oracles, refs, ids, cfg, &vocab, nullptr, false);
  const auto tp = decode_all(oracles, refs, ids, cfg, &vocab, &scorer, true);
  write_traces(greedy.traces, (dir / "greedy").string());
  write_traces(tp.traces, (dir / "truthprint").string());
  io::write_file(dir / "truthprint.passes.jsonl", pass_records_jsonl(tp.passes));

  auto g = section("greedy", greedy.traces, &vocab);
  g.extra["oracle_steps"] = static_cast<double>(greedy.steps);
  auto t = section("truthprint", tp.traces, &vocab);
  t.extra["oracle_steps"] = static_cast<double>(tp.steps);
  t.extra["backtraces"] = static_cast<double>(tp.backtraces);
  t.extra["chair_i_reduction"] = 1.0 - t.chair.chair_i / g.chair.chair_i;
  io::write_file(dir / "report.json", report_json({g, t}));
  write_manifest(dir / "report.json", "e2e", cfg, {},
                 {"vocab.tsv", "train.jsonl", "train.bin", "states.jsonl", "detector.tpdet", "greedy.jsonl",
                  "greedy.bin", "truthprint.jsonl", "truthprint.bin", "truthprint.passes.jsonl", "report.json"});
  log << report_text({g, t});
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> v{"collect", "train", "calibrate", "align", "decode", "eval", "e2e"};
  return v;
}

void validate(const PipelineConfig& c) {
  std::vector<std::string> bad;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) bad.push_back(msg);
  };
  check(c.tau > 0.0 && c.tau < 1.0, "tau must lie in (0, 1)");
  check(c.d_prime >= 1, "d_prime must be positive");
  check(c.n_b >= 0, "n_b must be non-negative");
  check(c.k_candidates >= 2, "k_candidates must be at least 2");
  check(c.max_tokens >= 1, "max_tokens must be at least 1");
  check(c.split > 0.0 && c.split < 1.0, "split must lie in (0, 1)");
  for (double a : c.alphas) check(a >= 0.0 && a <= 1.0, "alphas must lie in [0, 1]");
  check(c.epochs >= 1, "epochs must be positive");
  check(c.batch_size >= 1, "batch_size must be positive");
  check(c.learning_rate > 0.0, "learning_rate must be positive");
  check(c.mode == "greedy" || c.mode == "truthprint", "mode must be greedy or truthprint");
  check(c.oracle == "synthetic" || c.oracle == "script" || c.oracle == "trace-replay",
        "oracle must be synthetic, script or trace-replay");
  check(c.train_images >= 2, "train_images must be at least 2");
  try {
    validate(c.synth);
  } catch (const ConfigError& e) {
    bad.push_back(e.what());
  }
  if (!bad.empty()) {
    std::string msg = "invalid config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
}

std::string to_json(const PipelineConfig& c) {
  Json j;
  j["tau"] = c.tau;
  j["d_prime"] = c.d_prime;
  j["layer"] = c.layer;
  j["n_b"] = c.n_b;
  j["k_candidates"] = c.k_candidates;
  j["max_tokens"] = c.max_tokens;
  j["per_sentence_budget"] = c.per_sentence_budget;
  j["seed"] = c.seed;
  j["split"] = c.split;
  j["alphas"] = c.alphas;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["downsample"] = c.downsample;
  j["mode"] = c.mode;
  j["oracle"] = c.oracle;
  j["images"] = c.images;
  j["first_image"] = c.first_image;
  j["train_images"] = c.train_images;
  j["synth"] = Json::parse(to_json(c.synth));
  j["vocab"] = c.vocab;
  j["traces"] = c.traces;
  j["states"] = c.states;
  j["detector"] = c.detector;
  j["bundle"] = c.bundle;
  j["source_states"] = c.source_states;
  j["target_states"] = c.target_states;
  j["source_anchors"] = c.source_anchors;
  j["target_anchors"] = c.target_anchors;
  j["script"] = c.script;
  j["references"] = c.references;
  j["out"] = c.out;
  return j.dump(2);
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig c;
  std::vector<std::string> bad;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "tau") c.tau = v.get<double>();
      else if (key == "d_prime") c.d_prime = v.get<std::size_t>();
      else if (key == "layer") c.layer = v.get<int>();
      else if (key == "n_b") c.n_b = v.get<int>();
      else if (key == "k_candidates") c.k_candidates = v.get<std::size_t>();
      else if (key == "max_tokens") c.max_tokens = v.get<std::size_t>();
      else if (key == "per_sentence_budget") c.per_sentence_budget = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "split") c.split = v.get<double>();
      else if (key == "alphas") c.alphas = v.get<std::vector<double>>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "downsample") c.downsample = v.get<bool>();
      else if (key == "mode") c.mode = v.get<std::string>();
      else if (key == "oracle") c.oracle = v.get<std::string>();
      else if (key == "images") c.images = v.get<std::size_t>();
      else if (key == "first_image") c.first_image = v.get<std::uint64_t>();
      else if (key == "train_images") c.train_images = v.get<std::size_t>();
      else if (key == "synth") {
        try {
          c.synth = synth_config_from_json(v.dump());
        } catch (const ConfigError& e) {
          bad.push_back(e.what());
        }
      } else if (key == "vocab") c.vocab = v.get<std::string>();
      else if (key == "traces") c.traces = v.get<std::string>();
      else if (key == "states") c.states = v.get<std::string>();
      else if (key == "detector") c.detector = v.get<std::string>();
      else if (key == "bundle") c.bundle = v.get<std::string>();
      else if (key == "source_states") c.source_states = v.get<std::string>();
      else if (key == "target_states") c.target_states = v.get<std::string>();
      else if (key == "source_anchors") c.source_anchors = v.get<std::string>();
      else if (key == "target_anchors") c.target_anchors = v.get<std::string>();
      else if (key == "script") c.script = v.get<std::string>();
      else if (key == "references") c.references = v.get<std::string>();
      else if (key == "out") c.out = v.get<std::string>();
      else bad.push_back(key + ": unknown key");
    } catch (const nlohmann::json::exception&) {
      bad.push_back(key + ": wrong type");
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
  validate(c);
  return c;
}

std::string config_hash(const PipelineConfig& cfg) { return hex16(rng::fnv1a(to_json(cfg))); }

int run_stage(const std::string& stage, const PipelineConfig& cfg, std::ostream& log, std::ostream& err) {
  try {
    validate(cfg);
    if (stage == "collect") stage_collect(cfg, log);
    else if (stage == "train") stage_train(cfg, log);
    else if (stage == "calibrate") stage_calibrate(cfg, log);
    else if (stage == "align") stage_align(cfg, log);
    else if (stage == "decode") stage_decode(cfg, log);
    else if (stage == "eval") stage_eval(cfg, log);
    else if (stage == "e2e") stage_e2e(cfg, log);
    else throw ConfigError("unknown stage '" + stage + "'");
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MissingArtifactError& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace tp
