#pragma once

#include <CLI11.hpp>

namespace o2mag::cli {

void add_dataset_commands(CLI::App& app);
void add_generation_commands(CLI::App& app);
void add_evaluation_commands(CLI::App& app);

}  // namespace o2mag::cli
