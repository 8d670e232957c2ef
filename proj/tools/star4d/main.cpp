// star4d: synthesize data, train the tokenizer and the transformer, generate,
// evaluate and inspect the container clustering.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "star4d/pipeline.hpp"

using namespace star4d;

namespace {

struct Common {
  std::string config_file;
  std::string out;
  std::vector<std::string> assignments;
  long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key=value config file with [section] headers");
  cmd->add_option("--seed", c.seed, "seed for every random choice of the command");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.assignments, "override one key, e.g. --set train_vq.steps=100");
}

// File, then command flags, then --set assignments.
RunConfig build_run(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags) {
  try {
    Config config = c.config_file.empty() ? Config() : Config::load(c.config_file);
    for (const auto& [k, v] : flags) config.set(k, v);
    if (c.seed >= 0) config.set("run.seed", std::to_string(c.seed));
    for (const auto& a : c.assignments) config.set_assignment(a);
    return RunConfig::from(config);
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"4D object generation with a grouped autoregressive transformer"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<std::string, std::string>> flags;
  auto flag = [&](CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags.emplace_back(key, v); },
                                          help);
  };

  auto* synth = app.add_subcommand("synth", "render a synthetic dataset");
  add_common(synth, common);
  flag(synth, "--objects", "scene.objects", "object count");
  flag(synth, "--size", "scene.size", "frame height and width (multiple of 8)");
  flag(synth, "--timesteps", "scene.timesteps", "frames per object");
  flag(synth, "--views", "scene.views", "cameras per frame");

  std::string dataset, vq, star, resume, generated, tokens, video, text;
  int object = 0;
  bool all = false, no_text = false, no_video = false;

  auto* train_vq = app.add_subcommand("train-vqvae", "train the 4D tokenizer");
  add_common(train_vq, common);
  train_vq->add_option("--dataset", dataset, "dataset directory")->required();
  train_vq->add_option("--resume", resume, "continue from a tokenizer checkpoint");
  flag(train_vq, "--steps", "train_vq.steps", "total optimizer steps");

  auto* train_star = app.add_subcommand("train-star", "train the transformer on frozen tokens");
  add_common(train_star, common);
  train_star->add_option("--dataset", dataset, "dataset directory")->required();
  train_star->add_option("--vq", vq, "tokenizer checkpoint")->required();
  train_star->add_option("--resume", resume, "continue from a transformer checkpoint");
  flag(train_star, "--steps", "train_star.steps", "total optimizer steps");

  auto* generate = app.add_subcommand("generate", "sample tokens, decode and render");
  add_common(generate, common);
  generate->add_option("--vq", vq, "tokenizer checkpoint")->required();
  generate->add_option("--star", star, "transformer checkpoint");
  generate->add_option("--dataset", dataset, "dataset supplying captions, videos and cameras");
  generate->add_option("--object", object, "dataset object to condition on");
  generate->add_flag("--all", all, "generate for every dataset object");
  generate->add_option("--text", text, "prompt; overrides the caption");
  generate->add_option("--video", video, "directory of t{t}_v0.ppm conditioning frames");
  generate->add_flag("--no-text", no_text, "drop the text prefix");
  generate->add_flag("--no-video", no_video, "drop the video prefix");
  generate->add_option("--tokens", tokens, "decode this token grid instead of sampling");
  flag(generate, "--temperature", "sampling.temperature", "softmax temperature; 0 is greedy");
  flag(generate, "--top-k", "sampling.top_k", "keep the k most likely tokens; 0 keeps all");

  auto* eval = app.add_subcommand("eval", "score generated frames against a dataset");
  add_common(eval, common);
  eval->add_option("--generated", generated, "generated output directory")->required();
  eval->add_option("--dataset", dataset, "ground-truth dataset")->required();
  eval->add_option("--object", object, "dataset object for a single-object output");

  auto* report = app.add_subcommand("cluster-report", "tabulate container clustering for one object");
  add_common(report, common);
  report->add_option("--vq", vq, "tokenizer checkpoint")->required();
  report->add_option("--star", star, "transformer checkpoint")->required();
  report->add_option("--dataset", dataset, "dataset directory")->required();
  report->add_option("--object", object, "dataset object");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "star4d: [cli] " << e.what() << '\n';
    return 2;
  }

  try {
    const RunConfig run = build_run(common, flags);
    if (synth->parsed()) {
      cmd_synth(run, common.out, std::cout);
    } else if (train_vq->parsed()) {
      cmd_train_vqvae(run, dataset, common.out, resume, std::cout);
    } else if (train_star->parsed()) {
      cmd_train_star(run, dataset, vq, common.out, resume, std::cout);
    } else if (generate->parsed()) {
      GenerateOptions o;
      o.dataset = dataset;
      o.object = object;
      o.all_objects = all;
      if (generate->count("--text") > 0) o.text = text;
      o.video_dir = video;
      o.use_text = !no_text;
      o.use_video = !no_video;
      o.vq_checkpoint = vq;
      o.star_checkpoint = star;
      o.tokens = tokens;
      if (o.tokens.empty() && o.star_checkpoint.empty()) {
        throw StageError("cli", "generate needs --star, or --tokens for decode-only output");
      }
      cmd_generate(run, o, common.out, std::cout);
    } else if (eval->parsed()) {
      cmd_eval(run, generated, dataset, object, common.out, std::cout);
    } else if (report->parsed()) {
      cmd_cluster_report(run, {dataset, vq, star, object}, common.out, std::cout);
    }
  } catch (const StageError& e) {
    std::cerr << "star4d: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "star4d: [internal] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
