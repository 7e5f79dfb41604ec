// slu: train, evaluate, predict with and benchmark joint intent/slot models.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "slu/commands.hpp"

namespace {

namespace fs = std::filesystem;

int run(int argc, char** argv) {
  CLI::App app{"Joint intent classification and slot labeling"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, data, out;
  std::optional<std::uint64_t> seed;
  bool lowercase = false, repair = false;
  int repeats = 10;
  std::size_t utterances = 200;
  double mean_span = 1.8;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data, "three-file data root (with train/ valid/ test/) or training split");
  train->add_option("--out", out, "run directory (overrides output.run_dir)");
  train->add_option("--seed", seed, "training seed (overrides train.seed)");
  train->add_flag("--lowercase", lowercase, "lowercase all tokens");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a three-file split");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data, "three-file split directory")->required();
  eval->add_option("--out", out, "also write the JSON report here");
  eval->add_flag("--lowercase", lowercase);

  auto* predict = app.add_subcommand("predict", "tag a seq.in file");
  predict->add_option("--checkpoint", checkpoint)->required();
  predict->add_option("--data", data, "seq.in file or directory containing one")->required();
  predict->add_option("--out", out, "directory for seq.out and label")->required();
  predict->add_flag("--lowercase", lowercase);
  predict->add_flag("--repair", repair, "repair predicted tags into valid IOB");

  auto* attn = app.add_subcommand("attn-dump", "dump intent pooling weights as JSON lines");
  attn->add_option("--checkpoint", checkpoint)->required();
  attn->add_option("--data", data, "seq.in file or directory containing one")->required();
  attn->add_option("--out", out, "output file (default stdout)");
  attn->add_flag("--lowercase", lowercase);

  auto* bench = app.add_subcommand("bench", "time batch-size-1 inference");
  bench->add_option("--checkpoint", checkpoint)->required();
  bench->add_option("--data", data, "seq.in file or directory containing one")->required();
  bench->add_option("--repeats", repeats, "timed passes (at least 3)");
  bench->add_option("--out", out, "also write the JSON report here");
  bench->add_flag("--lowercase", lowercase);

  auto* synth = app.add_subcommand("synth", "write a synthetic three-file corpus");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--seed", seed);
  synth->add_option("--utterances", utterances);
  synth->add_option("--mean-span-length", mean_span);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto write_json = [&](const slu::json& j) {
    if (!out.empty()) std::ofstream(out) << j.dump(2) << '\n';
    std::cout << j.dump(2) << '\n';
  };

  if (*train) {
    slu::ExperimentConfig cfg = slu::load_experiment_config(config_path);
    if (!data.empty()) slu::apply_data_root(cfg.data, data);
    if (!out.empty()) cfg.run_dir = out;
    if (seed) cfg.train.seed = *seed;
    if (lowercase) cfg.data.lowercase = true;
    const auto outcome = slu::cmd_train(cfg, std::cerr);
    std::cout << outcome.run_dir.string() << '\n';
  } else if (*eval) {
    const slu::EvalReport r = slu::cmd_eval(checkpoint, data, lowercase);
    write_json(slu::to_json(r));
    std::cerr << slu::format_table(r);
  } else if (*predict) {
    const auto s = slu::cmd_predict(checkpoint, data, out, lowercase, repair, std::cerr);
    std::cerr << s.lines << " lines tagged into " << out << '\n';
  } else if (*attn) {
    if (out.empty()) {
      slu::cmd_attn_dump(checkpoint, data, lowercase, std::cout);
    } else {
      std::ofstream f(out);
      if (!f) throw slu::DataError("cannot write " + out);
      slu::cmd_attn_dump(checkpoint, data, lowercase, f);
    }
  } else if (*bench) {
    write_json(slu::cmd_bench(checkpoint, data, repeats, lowercase));
  } else if (*synth) {
    slu::cmd_synth(out, utterances, seed.value_or(1), mean_span);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const slu::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
