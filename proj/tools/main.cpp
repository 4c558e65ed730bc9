// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "evimelody/cli.hpp"

int main(int argc, char** argv) {
  return evimelody::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
