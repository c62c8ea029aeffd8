#include "doctest.h"
TEST_SUITE("selector") {
TEST_CASE("placeholder") { CHECK(true); }
}
