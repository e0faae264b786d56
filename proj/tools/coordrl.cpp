// coordrl: verify | sft | rl | eval | ablate

#include <CLI11.hpp>

#include "coordrl/cli/commands.hpp"

int main(int argc, char** argv) {
  using namespace coordrl::cli;
  CLI::App app{"Continuous coordinate policies for zoom-in visual reasoning on a synthetic grid"};
  app.require_subcommand(1);

  Invocation inv;
  std::string config_path, out;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Key-value config file");
    sub->add_option("--seed", seed, "Run seed (overrides the config)");
    sub->add_option("--out", out, "Output directory (overrides the config)");
    sub->add_option("--set", inv.overrides.sets, "Override one config key: key=value (repeatable)");
  };
  auto* verify = app.add_subcommand("verify", "Run the self-verification suites");
  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning");
  auto* rl = app.add_subcommand("rl", "GRPO training");
  auto* eval = app.add_subcommand("eval", "Deterministic evaluation of a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "Paired ablation runs");
  for (auto* sub : {verify, sft, rl, eval, ablate}) add_common(sub);
  for (auto* sub : {sft, rl, ablate}) sub->add_flag("--skip-verify", inv.skip_verify, "Do not gate on the verify suites");
  eval->add_option("--checkpoint", inv.checkpoint, "Checkpoint to evaluate")->required();
  ablate->add_option("--axis", inv.axis, "loss_family | sharing | lambda | baseline")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  for (auto* sub : app.get_subcommands()) {
    inv.command = sub->get_name();
    if (sub->count("--config")) inv.overrides.config_path = config_path;
    if (sub->count("--seed")) inv.overrides.seed = seed;
    if (sub->count("--out")) inv.overrides.out = out;
  }
  return run(inv);
}
