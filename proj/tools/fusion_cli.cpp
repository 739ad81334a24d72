// SPDX-License-Identifier: Apache-2.0
#include "fusion/cli.hpp"

int main(int argc, char** argv) { return fusion::cli::dispatch(argc, argv); }
