// SPDX-License-Identifier: Apache-2.0
#include "mmt/cli.hpp"

int main(int argc, char** argv) { return mmt::run_cli(argc, argv); }
