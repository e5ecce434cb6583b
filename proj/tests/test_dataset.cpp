#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dwm/dataset.hpp"
#include "dwm/errors.hpp"
#include "support.hpp"

using namespace dwm;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    const auto path = fs::temp_directory_path() / ("dwm_test_" + name);
    std::ofstream(path) << content;
    return path.string();
}

}  // namespace

TEST_CASE("missing token marks rows unobserved") {
    const auto path = write_temp("na.csv", "y,w,x\n1.5,1,0.3\nNA,0,1.2\n2.5,1,-0.7\n");
    const Dataset ds = load_csv(path, {"y", "w", "", {"x"}});
    CHECK(ds.rows() == 3);
    CHECK(ds.observed(0));
    CHECK_FALSE(ds.observed(1));
    CHECK(ds.observed(2));
    CHECK(ds.outcome(2) == 2.5);
    CHECK_THROWS_AS(ds.outcome(1), ConsistencyError);
    CHECK(ds.covariate_names().front() == "intercept");
    CHECK(ds.covariates()(1, 1) == 1.2);
}

TEST_CASE("explicit observed column must agree with the outcome") {
    const auto path = write_temp("bad_s.csv", "y,w,s,x\n1.0,1,1,0.3\n,0,1,1.2\n2.0,0,0,0.5\n");
    CHECK_THROWS_AS(load_csv(path, {"y", "w", "s", {"x"}}), ConsistencyError);

    const auto ok = write_temp("ok_s.csv", "y,w,s,x\n1.0,1,1,0.3\n,0,0,1.2\n2.0,0,0,0.5\n");
    const Dataset ds = load_csv(ok, {"y", "w", "s", {"x"}});
    CHECK_FALSE(ds.observed(2));
}

TEST_CASE("schema errors name the offending row") {
    const auto path = write_temp("bad_w.csv", "y,w,x\n1.0,1,0.3\n2.0,2,1.2\n");
    try {
        load_csv(path, {"y", "w", "", {"x"}});
        FAIL("expected a schema error");
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
    const auto missing_x = write_temp("missing_x.csv", "y,w,x\n1.0,1,NA\n2.0,0,1.2\n");
    CHECK_THROWS_AS(load_csv(missing_x, {"y", "w", "", {"x"}}), SchemaError);
    CHECK_THROWS_AS(load_csv(path, {"y", "treat", "", {"x"}}), SchemaError);
}

TEST_CASE("rank-deficient covariates list the dependent column") {
    const auto path = write_temp("rank.csv", "y,w,a,b\n1,1,1,2\n2,0,2,4\n3,1,3,6\n4,0,5,10\n");
    try {
        load_csv(path, {"y", "w", "", {"a", "b"}});
        FAIL("expected a rank error");
    } catch (const RankError& e) {
        CHECK(std::string(e.what()).find("b") != std::string::npos);
    }
}

TEST_CASE("save and load round-trip") {
    const Dataset ds = testsupport::synthetic(100, 7);
    const auto path = (fs::temp_directory_path() / "dwm_roundtrip.csv").string();
    const ColumnMap map{"y", "w", "s", {"x1", "x2"}};
    save_csv(ds, path, map);
    const Dataset back = load_csv(path, map);
    REQUIRE(back.rows() == ds.rows());
    CHECK(back.covariates() == ds.covariates());
    CHECK(back.treatments() == ds.treatments());
    CHECK(back.observed_mask() == ds.observed_mask());
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        if (ds.observed(i)) CHECK(back.outcome(i) == ds.outcome(i));
    }
}

TEST_CASE("arm split partitions the rows") {
    Matrix x(3, 1);
    x << 0.1, 0.5, 0.9;
    const Dataset ds(Vector::Constant(3, 1.0), {1, 1, 0}, {1, 0, 1}, x, {"x"});
    CHECK(ds.split_by_arm(ArmSelector::treated()) == std::vector<std::size_t>{0});
    CHECK(ds.split_by_arm(ArmSelector::control()) == std::vector<std::size_t>{1});

    const Dataset none(Vector::Constant(3, 1.0), {0, 0, 0}, {1, 0, 1}, x, {"x"});
    CHECK_THROWS_AS(none.split_by_arm(ArmSelector::treated()), InfeasibleError);

    const Dataset big = testsupport::synthetic(500, 3);
    std::size_t missing = 0;
    for (std::size_t i = 0; i < big.rows(); ++i) missing += big.observed(i) ? 0 : 1;
    CHECK(big.split_by_arm(ArmSelector::treated()).size() + big.split_by_arm(ArmSelector::control()).size() + missing ==
          big.rows());
}

TEST_CASE("augmented design expands treatment dummies") {
    Matrix x(4, 1);
    x << 0.1, 0.5, 0.9, 1.3;
    const Dataset ds(Vector::Zero(4), {1, 1, 1, 1}, {0, 1, 2, 1}, x, {"x"}, 3);
    const Design z = ds.augmented_design();
    CHECK(z.names == std::vector<std::string>{"intercept", "W1", "W2", "x"});
    CHECK(z.values(2, 2) == 1.0);
    CHECK(z.values(1, 1) == 1.0);
    CHECK(z.values(0, 1) == 0.0);

    const Dataset two = testsupport::synthetic(20, 1);
    CHECK(two.augmented_design().names == std::vector<std::string>{"intercept", "W", "x1", "x2"});
}

TEST_CASE("summary reports arm means") {
    const Dataset ds = testsupport::synthetic(200, 11);
    const auto j = summarize(ds);
    CHECK(j["rows"] == 200);
    CHECK(j["by_arm"]["treated"]["count"].get<std::size_t>() + j["by_arm"]["control"]["count"].get<std::size_t>() ==
          200);
    CHECK(j["by_arm"]["treated"]["covariates"].contains("x1"));
}
