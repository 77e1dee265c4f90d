#include <cstdio>
#include <exception>

#include "commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"o2mag: masked attention grafting for anomaly synthesis on procedural textures"};
  app.require_subcommand(1);
  o2mag::cli::add_dataset_commands(app);
  o2mag::cli::add_generation_commands(app);
  o2mag::cli::add_evaluation_commands(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
