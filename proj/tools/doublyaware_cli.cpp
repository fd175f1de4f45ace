// Command-line front end: train, eval, ablate.

#include <cstdlib>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "doublyaware/common.hpp"
#include "doublyaware/trainer.hpp"

namespace da = doublyaware;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal-planning TD-MPC with group-relative policy learning"};
  app.require_subcommand(1);

  std::string config_path, mode, out_dir, checkpoint, env_name, modes_arg, seeds_arg;
  std::uint64_t seed = 0;
  std::size_t episodes = 10;
  bool policy_only = false;

  auto* train = app.add_subcommand("train", "Run the collect-plan-learn loop");
  train->add_option("--config", config_path, "JSON run configuration")->required();
  auto* train_seed = train->add_option("--seed", seed, "Base seed");
  auto* train_mode = train->add_option("--mode", mode, "doublyaware|tdmpc_cp|tdmpc_vanilla");
  auto* train_out = train->add_option("--out", out_dir, "Output directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoints/step_<n> directory")->required();
  eval->add_option("--env", env_name, "Environment id")->required();
  eval->add_option("--episodes", episodes, "Number of episodes")->required();
  eval->add_option("--seed", seed, "Evaluation seed");
  eval->add_option("--config", config_path, "Run configuration supplying planner settings");
  eval->add_flag("--policy-only", policy_only, "Act with the policy mean instead of the planner");

  auto* ablate = app.add_subcommand("ablate", "Run a mode x seed matrix");
  ablate->add_option("--config", config_path, "Base JSON run configuration")->required();
  ablate->add_option("--modes", modes_arg, "Comma-separated modes")->required();
  ablate->add_option("--seeds", seeds_arg, "Comma-separated seeds")->required();
  auto* ablate_out = ablate->add_option("--out", out_dir, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      da::trainer::RunConfig cfg = da::trainer::load_config(config_path);
      if (*train_seed) cfg.seed = seed;
      if (*train_mode) cfg.mode = da::trainer::parse_mode(mode);
      if (*train_out) cfg.out_dir = out_dir;
      const auto r = da::trainer::train(cfg);
      std::cout << "env_steps " << r.env_steps << " grad_steps " << r.grad_steps << " final_eval_mean "
                << r.final_eval_mean << '\n';
    } else if (*eval) {
      da::planner::PlannerConfig planner;
      if (!config_path.empty()) planner = da::trainer::effective_config(da::trainer::load_config(config_path)).planner;
      if (episodes == 0) throw da::ContractViolation("eval: --episodes must be at least 1");
      const auto s = da::trainer::evaluate_checkpoint(checkpoint, da::env::parse_env_id(env_name), episodes, seed,
                                                      policy_only, planner);
      std::cout << da::trainer::to_json(s).dump() << '\n';
    } else if (*ablate) {
      da::trainer::RunConfig cfg = da::trainer::load_config(config_path);
      if (*ablate_out) cfg.out_dir = out_dir;
      std::vector<da::trainer::Mode> modes;
      for (const auto& m : split(modes_arg)) modes.push_back(da::trainer::parse_mode(m));
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split(seeds_arg)) seeds.push_back(std::stoull(s));
      const auto r = da::trainer::ablate(cfg, modes, seeds);
      std::cout << r.verdict << '\n';
    }
  } catch (const da::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const da::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const da::VersionError& e) {
    std::cerr << "version error: " << e.what() << '\n';
    return 4;
  } catch (const da::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return EXIT_SUCCESS;
}
