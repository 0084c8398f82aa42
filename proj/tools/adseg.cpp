#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adseg/adseg.hpp"

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw adseg::IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw adseg::ConfigError(path + ": " + e.what());
  }
}

void print_json_line(const nlohmann::json& j) { std::cerr << j.dump() << '\n'; }

adseg::AdaptConfig preset_config(const std::string& preset, const std::string& file) {
  adseg::AdaptConfig base = preset == "paper" ? adseg::paper_config() : adseg::desk_config();
  return file.empty() ? base : adseg::adapt_config_from_json(read_json(file), base);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive segmentation with test-time adaptation"};
  app.require_subcommand(1);

  // train
  std::string data_dir, out_path, train_config;
  std::uint64_t train_seed = 0;
  bool verbose = false;
  auto* train = app.add_subcommand("train", "train a base model on DIR/images + DIR/masks");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_path, "checkpoint to write")->required();
  train->add_option("--seed", train_seed, "random seed");
  train->add_option("--config", train_config, "training config (JSON)");
  train->add_flag("-v,--verbose", verbose, "log epochs as JSON lines on stderr");

  // eval
  std::string eval_data, ckpt_path, mode = "frozen", report_path, csv_path, adapt_config;
  double target_iou = -1;
  int seeds = 3;
  std::uint64_t first_seed = 1;
  auto* eval = app.add_subcommand("eval", "simulated-user evaluation");
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval->add_option("--mode", mode, "frozen, ia, sa, ia+sa or sa-nocorr")->capture_default_str();
  eval->add_option("--target-iou", target_iou, "IoU threshold for clicks@q");
  eval->add_option("--seeds", seeds, "number of seeds")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--first-seed", first_seed, "first seed")->capture_default_str();
  eval->add_option("--report", report_path, "report JSON to write")->required();
  eval->add_option("--csv", csv_path, "IoU@k curve CSV");
  std::string preset = "desk";
  eval->add_option("--config", adapt_config, "adaptation config (JSON), applied over the preset");
  eval->add_option("--preset", preset, "desk or paper")->capture_default_str()->check(CLI::IsMember({"desk", "paper"}));
  eval->add_flag("-v,--verbose", verbose, "log adaptation steps as JSON lines on stderr");

  // synth
  std::string spec = "domainA", synth_out;
  std::size_t count = 50, size = 64;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--spec", spec, "domainA, domainB or class")->capture_default_str();
  synth->add_option("--n", count, "number of images")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--size", size, "image height and width")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->required();

  // serve
  std::string serve_ckpt, host = "127.0.0.1", serve_config;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "HTTP annotation service");
  serve->add_option("--ckpt", serve_ckpt, "checkpoint")->required();
  serve->add_option("--port", port, "port")->capture_default_str();
  serve->add_option("--host", host, "bind address")->capture_default_str();
  serve->add_option("--config", serve_config, "adaptation config (JSON), applied over the preset");
  serve->add_option("--preset", preset, "desk or paper")->capture_default_str()->check(CLI::IsMember({"desk", "paper"}));
  std::uint64_t serve_seed = 0;
  serve->add_option("--seed", serve_seed, "seed for guidance subsampling");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      adseg::TrainingConfig tc;
      if (!train_config.empty()) tc = adseg::training_config_from_json(read_json(train_config));
      const adseg::Dataset data = adseg::load_dataset(data_dir, tc.arch.height, tc.arch.width);
      adseg::AdaptLog log;
      if (verbose) log = [](const nlohmann::json& j) {
        if (j.value("phase", "") == "train_epoch") print_json_line(j);
      };
      const adseg::TrainResult tr = adseg::train_base(data, tc, train_seed, log);
      adseg::Checkpoint ck{tr.params, adseg::base_importance(tr.params, data, tc.importance_samples, tc.disk_radius)};
      adseg::save_checkpoint(out_path, ck);
      std::cout << "trained on " << data.size() << " images, final loss " << tr.epoch_losses.back() << ", wrote "
                << out_path << '\n';
    } else if (*eval) {
      adseg::AdaptConfig cfg = preset_config(preset, adapt_config);
      if (target_iou >= 0) cfg.target_iou = target_iou;
      adseg::validate(cfg);
      const adseg::Checkpoint ck = adseg::load_checkpoint(ckpt_path);
      const adseg::Dataset data = adseg::load_dataset(eval_data, ck.params.arch.height, ck.params.arch.width);
      std::vector<std::uint64_t> seed_list;
      for (int s = 0; s < seeds; ++s) seed_list.push_back(first_seed + static_cast<std::uint64_t>(s));
      adseg::EvalOptions opts;
      if (verbose) opts.log = print_json_line;
      const adseg::EvalReport r = adseg::evaluate_sequence(data, ck, adseg::parse_mode(mode), cfg, seed_list, opts);
      adseg::save_report(r, report_path);
      if (!csv_path.empty()) adseg::save_curve_csv({r}, csv_path);
      std::printf("%s on %s: clicks@%.0f%% = %.3f (std %.3f over %zu seeds)\n", r.mode.c_str(), r.dataset.c_str(),
                  cfg.target_iou * 100, r.mean_clicks, r.std_clicks, r.runs.size());
    } else if (*synth) {
      adseg::SynthSpec s;
      s.generator = adseg::parse_generator(spec);
      s.count = count;
      s.height = s.width = size;
      adseg::save_dataset(adseg::synth_dataset(s, synth_seed), synth_out);
      std::cout << "wrote " << count << " " << spec << " images to " << synth_out << '\n';
    } else if (*serve) {
      adseg::ServiceConfig sc;
      sc.adapt = preset_config(preset, serve_config);
      sc.seed = serve_seed;
      adseg::AnnotationService service(adseg::load_checkpoint(serve_ckpt), sc);
      std::cout << "listening on " << host << ':' << port << std::endl;
      if (!service.listen(host, port)) {
        std::cerr << "error: cannot listen on " << host << ':' << port << '\n';
        return 1;
      }
    }
  } catch (const adseg::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
