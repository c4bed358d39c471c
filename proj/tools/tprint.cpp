#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <sstream>
#include <json.hpp>

#include "tp/binary_io.hpp"
#include "tp/error.hpp"
#include "tp/pipeline.hpp"

namespace {

enum class Kind { kNumber, kText, kList, kFlag };

struct Opt {
  std::string flag;
  std::string key;
  Kind kind;
  std::string help;
  std::string value;
  bool on = false;
  CLI::Option* handle = nullptr;
};

nlohmann::json to_value(const Opt& o) {
  switch (o.kind) {
    case Kind::kText:
      return o.value;
    case Kind::kFlag:
      return o.on;
    case Kind::kList: {
      auto arr = nlohmann::json::array();
      std::string item;
      std::istringstream in(o.value);
      while (std::getline(in, item, ',')) arr.push_back(nlohmann::json::parse(item));
      return arr;
    }
    case Kind::kNumber:
      return nlohmann::json::parse(o.value);
  }
  return {};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tprint: hallucination detection and truthful decoding pipeline"};
  app.require_subcommand(1);

  std::map<std::string, std::vector<Opt>> opts;
  auto opt = [&](const std::string& sub, std::string flag, std::string key, Kind kind, std::string help) {
    opts[sub].push_back({std::move(flag), std::move(key), kind, std::move(help), {}, false, nullptr});
  };
  for (const auto& s : tp::stage_names()) opt(s, "--out", "out", Kind::kText, "output artifact path");

  opt("collect", "--traces", "traces", Kind::kText, "trace file stem");
  opt("collect", "--vocab", "vocab", Kind::kText, "object vocabulary");
  opt("collect", "--layer", "layer", Kind::kNumber, "hidden layer");
  opt("collect", "--downsample", "downsample", Kind::kFlag, "balance classes");

  opt("train", "--states", "states", Kind::kText, "labeled states file");
  opt("train", "--split", "split", Kind::kNumber, "training fraction");
  opt("train", "--seed", "seed", Kind::kNumber, "seed");
  opt("train", "--epochs", "epochs", Kind::kNumber, "training epochs");
  opt("train", "--tau", "tau", Kind::kNumber, "threshold for the reported metrics");
  opt("train", "--alphas", "alphas", Kind::kList, "comma-separated target false-positive rates");

  opt("calibrate", "--detector", "detector", Kind::kText, "detector checkpoint");
  opt("calibrate", "--states", "states", Kind::kText, "labeled states file");
  opt("calibrate", "--alphas", "alphas", Kind::kList, "comma-separated target false-positive rates");

  opt("align", "--source-states", "source_states", Kind::kText, "source-domain states");
  opt("align", "--target-states", "target_states", Kind::kText, "target-domain states");
  opt("align", "--source-anchors", "source_anchors", Kind::kText, "paired source anchor states");
  opt("align", "--target-anchors", "target_anchors", Kind::kText, "paired target anchor states");
  opt("align", "--d-prime", "d_prime", Kind::kNumber, "shared subspace dimension");

  opt("decode", "--mode", "mode", Kind::kText, "greedy or truthprint");
  opt("decode", "--oracle", "oracle", Kind::kText, "synthetic, script or trace-replay");
  opt("decode", "--detector", "detector", Kind::kText, "detector checkpoint");
  opt("decode", "--bundle", "bundle", Kind::kText, "alignment bundle for source-domain states");
  opt("decode", "--tau", "tau", Kind::kNumber, "detector threshold");
  opt("decode", "--n-b", "n_b", Kind::kNumber, "traceback budget");
  opt("decode", "--max-tokens", "max_tokens", Kind::kNumber, "token limit");
  opt("decode", "--layer", "layer", Kind::kNumber, "hidden layer");
  opt("decode", "--vocab", "vocab", Kind::kText, "object vocabulary");
  opt("decode", "--traces", "traces", Kind::kText, "trace stem for trace-replay");
  opt("decode", "--script", "script", Kind::kText, "script table for the script oracle");
  opt("decode", "--images", "images", Kind::kNumber, "synthetic images to caption");
  opt("decode", "--first-image", "first_image", Kind::kNumber, "first synthetic image index");
  opt("decode", "--per-sentence-budget", "per_sentence_budget", Kind::kFlag, "reset the budget per sentence");

  opt("eval", "--traces", "traces", Kind::kText, "trace file stem");
  opt("eval", "--references", "references", Kind::kText, "JSON map trace_id -> reference objects");
  opt("eval", "--vocab", "vocab", Kind::kText, "object vocabulary (re-marks objects)");

  opt("e2e", "--images", "images", Kind::kNumber, "evaluation images");
  opt("e2e", "--train-images", "train_images", Kind::kNumber, "training images");
  opt("e2e", "--seed", "seed", Kind::kNumber, "seed");

  const std::map<std::string, std::string> about{
      {"collect", "label object-token states from traces"},
      {"train", "train and calibrate the detector"},
      {"calibrate", "recalibrate detector thresholds"},
      {"align", "fit a cross-model alignment bundle"},
      {"decode", "caption with greedy or truthprint decoding"},
      {"eval", "CHAIR and PMC report for traces"},
      {"e2e", "synthetic corpus through train, decode and eval"},
  };
  std::map<std::string, std::string> config_path, synth_path;
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : tp::stage_names()) {
    auto* sub = app.add_subcommand(name, about.at(name));
    subs[name] = sub;
    sub->add_option("--config", config_path[name], "JSON config; flags override it");
    if (name == "decode" || name == "e2e") sub->add_option("--synth-config", synth_path[name], "synthetic oracle config");
    for (auto& o : opts[name]) {
      o.handle = o.kind == Kind::kFlag ? sub->add_flag(o.flag, o.on, o.help) : sub->add_option(o.flag, o.value, o.help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return tp::kExitConfig;
  }

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    try {
      nlohmann::json cfg = nlohmann::json::object();
      if (!config_path[name].empty()) cfg = nlohmann::json::parse(tp::io::read_file(config_path[name]));
      if (!cfg.is_object()) throw tp::ConfigError("config must be a JSON object");
      if (!synth_path[name].empty()) cfg["synth"] = nlohmann::json::parse(tp::io::read_file(synth_path[name]));
      for (const auto& o : opts[name]) {
        if (o.handle->count() > 0) cfg[o.key] = to_value(o);
      }
      const auto pc = tp::pipeline_config_from_json(cfg.dump());
      return tp::run_stage(name, pc, std::cout, std::cerr);
    } catch (const tp::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return tp::kExitConfig;
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return tp::kExitConfig;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return tp::kExitMissing;
    }
  }
  return tp::kExitConfig;
}
