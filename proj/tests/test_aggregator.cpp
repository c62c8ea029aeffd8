#include "doctest.h"
TEST_SUITE("aggregator") {
TEST_CASE("placeholder") { CHECK(true); }
}
