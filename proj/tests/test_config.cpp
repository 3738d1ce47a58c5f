#include <catch2/catch_amalgamated.hpp>

#include "dico/config.hpp"

using dico::Config;
using dico::parse_config_text;

TEST_CASE("empty config yields the full defaults", "[config]") {
    Config cfg = parse_config_text("");
    REQUIRE(cfg.model.K == 8);
    REQUIRE(cfg.model.M == 8);
    REQUIRE(cfg.model.d_c == 256);
    REQUIRE(cfg.model.d_h == 2048);
    REQUIRE(cfg.model.K_m == 256);
    REQUIRE(cfg.model.T == 3);
    REQUIRE(cfg.model.tau_p == 1.0);
    REQUIRE(cfg.loss.lambda_s == 0.5);
    REQUIRE(cfg.loss.lambda_b == 0.5);
    REQUIRE(cfg.loss.lambda_r == 0.01);
    REQUIRE(cfg.optim.precision == dico::Precision::F32);
    REQUIRE(cfg == Config{});
}

TEST_CASE("config accepts comments, overrides, and the published variants", "[config]") {
    Config cfg = parse_config_text(
        "# ablation override\n"
        "loss.lambda_r = 0.1\n"
        "\n"
        "model.K_m = 512   # prototype count variant\n");
    REQUIRE(cfg.loss.lambda_r == 0.1);
    REQUIRE(cfg.model.K_m == 512);
}

TEST_CASE("config rejects bad input with line numbers", "[config]") {
    SECTION("unknown key") {
        try {
            parse_config_text("model.K = 4\nmodel.unknown_thing = 3\n");
            FAIL("expected ConfigError");
        } catch (const dico::ConfigError& e) {
            const std::string msg = e.what();
            REQUIRE(msg.find("line 2") != std::string::npos);
            REQUIRE(msg.find("model.unknown_thing") != std::string::npos);
        }
    }
    SECTION("type mismatch") {
        try {
            parse_config_text("\nmodel.K = banana\n");
            FAIL("expected ConfigError");
        } catch (const dico::ConfigError& e) {
            REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
    SECTION("d_h invariant") {
        REQUIRE_THROWS_AS(parse_config_text("model.d_h = 100\n"), dico::ConfigError);
    }
    SECTION("temperatures must stay positive") {
        REQUIRE_THROWS_AS(parse_config_text("model.tau_p = 0\n"), dico::ConfigError);
        REQUIRE_THROWS_AS(parse_config_text("loss.tau_init = -1\n"), dico::ConfigError);
    }
    SECTION("negative loss weight") {
        REQUIRE_THROWS_AS(parse_config_text("loss.lambda_s = -0.5\n"), dico::ConfigError);
    }
    SECTION("missing equals sign") {
        REQUIRE_THROWS_AS(parse_config_text("model.K 4\n"), dico::ConfigError);
    }
}

TEST_CASE("serialize then parse is the identity", "[config]") {
    Config cfg;
    cfg.model.K = 4;
    cfg.model.M = 2;
    cfg.model.d_c = 8;
    cfg.model.d_h = 16;
    cfg.model.tau_p = 1.25;
    cfg.loss.lambda_r = 0.1;
    cfg.loss.bidirectional_local = true;
    cfg.optim.lr = 3e-6;
    cfg.optim.precision = dico::Precision::F64;
    cfg.data.sigma = 0.017;
    cfg.data.p = 0.12345678901234567;
    cfg.seeds.train = 0xdeadbeefcafeull;
    Config back = parse_config_text(cfg.serialize());
    REQUIRE(back == cfg);
}
