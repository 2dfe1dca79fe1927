// fsp: synthetic data, support sampling, pose estimation, evaluation and
// video registration from the command line.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fsp/fsp.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitDataset = 2;
constexpr int kExitEstimation = 3;

int exit_code_for(fsp::Errc c) {
  switch (c) {
    case fsp::Errc::DatasetFormatError:
    case fsp::Errc::IoError:
    case fsp::Errc::NotEnoughFrames:
      return kExitDataset;
    case fsp::Errc::PoseEstimationFailed:
    case fsp::Errc::EmptyQuery:
    case fsp::Errc::EmptyMask:
    case fsp::Errc::NoConsensus:
    case fsp::Errc::RegistrationDiverged:
    case fsp::Errc::TooFewFrames:
    case fsp::Errc::EmptyCloud:
      return kExitEstimation;
    default:
      return kExitOther;
  }
}

fsp::EvalConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return fsp::config_from_json(fsp::read_json(path));
}

std::string query_mask_name(const fsp::fs::path& dir, const std::string& object_id) {
  const std::string per_object = "mask_" + object_id + ".png";
  if (fsp::fs::exists(dir / per_object)) return per_object;
  if (fsp::fs::exists(dir / "mask.png")) return "mask.png";
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot 6D pose toolkit"};
  app.require_subcommand(0, 1);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the default configuration as JSON and exit");

  // synth gen / synth video
  auto* synth = app.add_subcommand("synth", "Synthetic data generation");
  synth->require_subcommand(1);
  auto* gen = synth->add_subcommand("gen", "Render a multi-object scene dataset");
  fsp::DatasetSpec dspec;
  std::string gen_out, textures;
  gen->add_option("--scenes", dspec.scenes, "Scene count")->required();
  gen->add_option("--objects-per-scene", dspec.objects_per_scene, "Objects per scene")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", dspec.seed, "Seed")->required();
  gen->add_option("--textures", textures, "Directory of PNG textures");

  auto* video = synth->add_subcommand("video", "Render a turntable sequence");
  fsp::TurntableSpec tspec;
  std::string video_out;
  bool video_masks = false;
  video->add_option("--frames", tspec.frames, "Frame count")->capture_default_str();
  video->add_option("--step-deg", tspec.step_deg, "Rotation per frame, degrees")->capture_default_str();
  video->add_option("--seed", tspec.seed, "Seed")->capture_default_str();
  video->add_option("--out", video_out, "Output directory")->required();
  video->add_flag("--masks", video_masks, "Also write object masks");

  auto* sample = app.add_subcommand("sample-views", "Farthest-rotation support selection");
  std::string sv_dataset, sv_object, sv_out;
  std::size_t sv_k = 16;
  sample->add_option("--dataset", sv_dataset, "Dataset directory")->required();
  sample->add_option("--object", sv_object, "Object id")->required();
  sample->add_option("--k", sv_k, "Support views")->capture_default_str();
  sample->add_option("--out", sv_out, "support.json path")->required();

  auto* estimate = app.add_subcommand("estimate", "Estimate one query pose");
  std::string es_support, es_query, es_config, es_out;
  bool es_icp = false;
  estimate->add_option("--support", es_support, "support.json")->required();
  estimate->add_option("--query", es_query, "Query directory")->required();
  estimate->add_option("--config", es_config, "Config JSON");
  estimate->add_option("--out", es_out, "pose.json path")->required();
  estimate->add_flag("--icp", es_icp, "Refine with ICP");

  auto* eval = app.add_subcommand("eval", "Evaluate a dataset");
  std::string ev_dataset, ev_config, ev_out;
  std::size_t ev_k = 0;
  bool ev_oracle = false;
  eval->add_option("--dataset", ev_dataset, "Dataset directory")->required();
  eval->add_option("--k", ev_k, "Support views (overrides config)");
  eval->add_option("--config", ev_config, "Config JSON");
  eval->add_option("--out", ev_out, "Report directory")->required();
  eval->add_flag("--oracle-pose", ev_oracle, "Use ground truth as the prediction");

  auto* reg = app.add_subcommand("register", "Support set from an RGBD video");
  std::string rg_video, rg_out;
  fsp::RegistrationParams rparams;
  reg->add_option("--video", rg_video, "Directory of frame_* directories")->required();
  reg->add_option("--k", rparams.k, "Support views")->capture_default_str();
  reg->add_option("--out", rg_out, "support.json path")->required();

  CLI11_PARSE(app, argc, argv);

  if (print_config) {
    std::cout << fsp::config_to_json(fsp::EvalConfig{}).dump(2) << '\n';
    return kExitOk;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return kExitOther;
  }

  try {
    if (gen->parsed()) {
      if (!textures.empty()) dspec.textures = textures;
      const auto index = fsp::generate_dataset(gen_out, dspec);
      std::printf("wrote %zu scenes, %zu objects to %s\n", dspec.scenes, index.objects.size(), gen_out.c_str());
    } else if (video->parsed()) {
      const auto v = fsp::render_turntable(tspec);
      fsp::write_video(video_out, v.frames, video_masks);
      std::printf("wrote %zu frames to %s\n", v.frames.size(), video_out.c_str());
    } else if (sample->parsed()) {
      const auto set = fsp::build_support_set(sv_dataset, sv_object, sv_k);
      const std::vector<std::string> masks(set.views.size(), "mask_" + sv_object + ".png");
      fsp::write_json(sv_out, fsp::support_to_json(set, masks));
      std::printf("selected %zu views for %s\n", set.views.size(), sv_object.c_str());
    } else if (estimate->parsed()) {
      auto cfg = load_config(es_config);
      cfg.icp = cfg.icp || es_icp;
      const auto support = fsp::load_support(es_support);
      const fsp::fs::path qdir = es_query;
      const auto query = fsp::load_patch(qdir, query_mask_name(qdir, support.object_id), false);
      const auto result = fsp::estimate_pose(support, query, cfg, fsp::weights_for(cfg));
      fsp::write_json(es_out, fsp::pose_to_json(result.pose));
      std::printf("chosen view %zu, loss %.6g m^2, %zu matches%s\n", result.chosen_view,
                  result.per_view_losses[result.chosen_view], result.match_count[result.chosen_view],
                  result.refined ? ", ICP refined" : "");
    } else if (eval->parsed()) {
      auto cfg = load_config(ev_config);
      if (ev_k) cfg.support_k = ev_k;
      cfg.oracle_pose = cfg.oracle_pose || ev_oracle;
      const auto report = fsp::run_eval(ev_dataset, cfg);
      fsp::write_report(ev_out, report);
      fsp::write_predictions(ev_out, report);
      std::printf("%-8s %8s %8s %10s %10s\n", "object", "ADDS-AUC", "ADD-AUC", "ADD-0.1d", "random");
      for (const auto& o : report.objects)
        std::printf("%-8s %8.4f %8.4f %10.4f %10.4f\n", o.object_id.c_str(), o.adds.auc, o.add.auc,
                    o.add.recall_at_0p1d, o.random_pose_add_recall);
    } else if (reg->parsed()) {
      const auto dirs = fsp::video_frame_dirs(rg_video);
      auto result = fsp::register_from_video(fsp::load_video(rg_video), rparams);
      const fsp::fs::path out = rg_out;
      const fsp::fs::path mask_dir = fsp::fs::absolute(out).parent_path() / (out.stem().string() + "_masks");
      fsp::fs::create_directories(mask_dir);
      std::vector<std::string> masks;
      for (std::size_t j = 0; j < result.selected.size(); ++j) {
        const auto frame = dirs[result.selected[j]];
        const auto mask_path = mask_dir / (frame.filename().string() + ".png");
        fsp::write_png(mask_path, fsp::mask_to_png(result.support.views[j].mask));
        masks.push_back(mask_path.string());
        result.support.sources[j] = fsp::fs::absolute(frame).string();
      }
      result.support.object_id = "video";
      fsp::write_json(out, fsp::support_to_json(result.support, masks));
      std::printf("registered %zu frames, selected %zu views\n", dirs.size(), result.selected.size());
    }
  } catch (const fsp::Error& e) {
    std::cerr << "error [" << fsp::to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOk;
}
