// SPDX-License-Identifier: Apache-2.0
#include "mats/cli.hpp"

int main(int argc, char** argv) { return mats::cli_dispatch(argc, argv); }
