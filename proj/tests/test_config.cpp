#include <gtest/gtest.h>

#include "haed/config.hpp"
#include "test_util.hpp"

using namespace haed;
using namespace haed_test;

namespace {

std::pair<std::string, std::string> error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const Error& e) {
    return {e.code(), e.what()};
  }
  return {"", ""};
}

}  // namespace

TEST(Config, EmptyObjectGivesTextDefaults) {
  const auto c = parse_config_text("{}");
  EXPECT_EQ(c.dataset.kind, Source::text);
  EXPECT_EQ(c.dataset.hierarchy.mode, HierarchyMode::word);
  EXPECT_EQ(c.dataset.hierarchy.k, 12u);
  EXPECT_EQ(c.model.k, 12u);
  EXPECT_EQ(c.model.encoder.embed_dim, 10u);
  EXPECT_EQ(c.model.encoder.kind, EncoderKind::mlp);
  EXPECT_EQ(c.model.main.kind, MainKind::transformer);
  EXPECT_EQ(c.model.main.layers, 6u);
  EXPECT_EQ(c.model.main.model_dim, 356u);
  EXPECT_EQ(c.model.main.ff_dim, 1424u);
  EXPECT_EQ(c.model.main.heads, 8u);
  EXPECT_EQ(c.model.main.head_dim, 32u);
  EXPECT_EQ(c.model.decoder.units, 1024u);
  EXPECT_EQ(c.optimizer.lr_enc_dec, 0.002);
  EXPECT_EQ(c.optimizer.lr_main, 0.00035);
  EXPECT_EQ(c.optimizer.clip_norm, 0.01);
  EXPECT_EQ(c.optimizer.beta1, 0.9);
  EXPECT_EQ(c.optimizer.beta2, 0.999);
  EXPECT_EQ(c.optimizer.eps, 1e-8);
  EXPECT_EQ(c.schedule.warmup_steps, 2000u);
  EXPECT_EQ(c.schedule.floor_fraction, 0.05);
  EXPECT_EQ(c.objective.extra_negative_batches, 3u);
  EXPECT_EQ(c.dataset.batch.unit, BatchUnit::segments);
}

TEST(Config, DuplicateObjectKeysMerge) {
  const auto c = parse_config_text(R"({"model":{"main":{"heads":12}},"model":{"decoder":{"units":2000}}})");
  EXPECT_EQ(c.model.main.heads, 12u);
  EXPECT_EQ(c.model.decoder.units, 2000u);
  EXPECT_EQ(c.model.main.layers, 6u);
}

TEST(Config, DuplicateScalarRejected) {
  EXPECT_EQ(error_of(R"({"run":{"seed":1,"seed":2}})").first, "DuplicateKey");
}

TEST(Config, IemObjectiveDefaults) {
  const auto c = parse_config_text(R"({"objective":{"kind":"iem"}})");
  EXPECT_EQ(c.model.main.heads, 12u);
  EXPECT_EQ(c.model.decoder.units, 2000u);
}

TEST(Config, RecurrentMainHasNoWarmup) {
  const auto c = parse_config_text(R"({"model":{"main":{"kind":"rnn"}}})");
  EXPECT_EQ(c.schedule.warmup_steps, 0u);
}

TEST(Config, ImageDefaults) {
  const auto c = parse_config_text(R"({"dataset":{"kind":"image"}})");
  EXPECT_EQ(c.dataset.hierarchy.mode, HierarchyMode::fixed_k);
  EXPECT_EQ(c.dataset.batch.unit, BatchUnit::documents);
  EXPECT_EQ(c.dataset.batch.count, 32u);
  EXPECT_EQ(c.dataset.batch.window, 100u);
  EXPECT_EQ(error_of(R"({"dataset":{"kind":"image","hierarchy":{"mode":"word"}}})").first, "InvalidValue");
}

TEST(Config, UnknownKeysArePathQualified) {
  auto [code, msg] = error_of(R"({"typo_key":1})");
  EXPECT_EQ(code, "UnknownKey");
  EXPECT_NE(msg.find("typo_key"), std::string::npos);
  std::tie(code, msg) = error_of(R"({"model":{"main":{"depth":3}}})");
  EXPECT_EQ(code, "UnknownKey");
  EXPECT_NE(msg.find("model.main.depth"), std::string::npos);
}

TEST(Config, TypeMismatch) {
  auto [code, msg] = error_of(R"({"run":{"steps":"ten"}})");
  EXPECT_EQ(code, "TypeMismatch");
  EXPECT_NE(msg.find("run.steps"), std::string::npos);
  EXPECT_EQ(error_of(R"({"run":{"steps":-3}})").first, "TypeMismatch");
  EXPECT_EQ(error_of(R"({"model":[]})").first, "TypeMismatch");
  EXPECT_EQ(error_of(R"({"model":{"encoder":{"mlp_hidden":[1,"a"]}}})").first, "TypeMismatch");
}

TEST(Config, InvariantViolations) {
  auto [code, msg] = error_of(R"({"dataset":{"hierarchy":{"k":0}}})");
  EXPECT_EQ(code, "InvalidValue");
  EXPECT_NE(msg.find("dataset.hierarchy.k"), std::string::npos);
  EXPECT_EQ(error_of(R"({"dataset":{"batch":{"window":101}}})").first, "InvalidValue");
  EXPECT_EQ(error_of(R"({"dataset":{"batch":{"window":50}},"model":{"main":{"max_positions":40}}})").first,
            "InvalidValue");
  EXPECT_EQ(error_of(R"({"optimizer":{"lr_main":0}})").first, "InvalidValue");
  EXPECT_EQ(error_of(R"({"run":{"steps":100}})").first, "InvalidValue");
  EXPECT_EQ(error_of(R"({"objective":{"kind":"mle"}})").first, "InvalidValue");
}

TEST(Config, MalformedJson) { EXPECT_EQ(error_of("{\"run\":").first, "ParseError"); }

TEST(Config, ResolutionIsPureAndHashIsStable) {
  const std::string text = R"({"run":{"seed":5},"model":{"decoder":{"units":64}}})";
  const auto a = parse_config_text(text), b = parse_config_text(text);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  auto c = a;
  c.run.seed = 6;
  EXPECT_NE(config_hash(a), config_hash(c));
  c = a;
  c.run.out_dir = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(c));
}

TEST(Config, ResolvedSnapshotRoundTrips) {
  const auto a = parse_config_text(R"({"objective":{"kind":"iem"},"model":{"encoder":{"kind":"rnn"}}})");
  const auto b = resolve_config(to_json(a));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(config_hash(a), config_hash(b));
}

TEST(Config, ArchHashIgnoresDecoderOnly) {
  auto a = parse_config_text("{}");
  auto b = a;
  b.model.decoder.units = 7;
  EXPECT_EQ(arch_hash(a.model), arch_hash(b.model));
  b.model.main.layers = 2;
  EXPECT_NE(arch_hash(a.model), arch_hash(b.model));
}

TEST(Config, ParseFromFile) {
  const auto dir = scratch("config_file");
  std::ofstream(dir / "c.json") << R"({"run":{"seed":3}})";
  EXPECT_EQ(parse_config(dir / "c.json").run.seed, 3u);
  EXPECT_THROW(parse_config(dir / "missing.json"), Error);
}
