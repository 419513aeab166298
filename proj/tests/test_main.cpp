#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "gram/common.hpp"

int main(int argc, char** argv) {
  gram::set_log_level(0);
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
