// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "pesc/cli/app.hpp"

int main(int argc, char **argv) { return pesc::run_cli(argc, argv, std::cout, std::cerr); }
