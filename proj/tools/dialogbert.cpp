// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "dialogbert/cli.hpp"

int main(int argc, char** argv) { return dialogbert::cli::run(argc, argv); }
