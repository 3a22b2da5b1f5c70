// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// gating failure. Optional argument: directory holding the shipped presets.

#include <cstdio>

#include "vajra/selftest.hpp"

int main(int argc, char** argv) {
  vajra::SelftestOptions opt;
  if (argc > 1) opt.config_dir = argv[1];
  const bool ok = vajra::run_acceptance(opt, stdout);
  std::printf("%s\n", ok ? "acceptance: all gating criteria pass" : "acceptance: FAILED");
  return ok ? 0 : 1;
}
