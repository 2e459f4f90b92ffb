// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "peftlab/workbench/commands.hpp"

int main(int argc, char** argv) {
  // stdout carries reports; diagnostics go to stderr.
  spdlog::set_default_logger(spdlog::stderr_color_mt("peftlab"));
  spdlog::set_level(spdlog::level::warn);
  spdlog::cfg::load_env_levels();
  return peftlab::workbench::run_cli(argc, argv, std::cout, std::cerr);
}
