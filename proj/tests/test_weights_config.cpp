#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "ettk/config.hpp"
#include "ettk/weights.hpp"

using namespace ettk;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (std::filesystem::temp_directory_path() / name).string();
  }
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("weights round-trip bitwise, both dtypes") {
  std::mt19937 rng(3);
  std::vector<WeightEntry> entries;
  entries.push_back({"a.w", random_uniform<float>({3, 4, 5}, rng)});
  entries.push_back({"b.bias", random_uniform<double>({7}, rng)});
  entries.push_back({"c", random_uniform<float>({1}, rng)});

  TempFile f("ettk_roundtrip.etwb");
  save_weights(f.path, entries);
  const auto loaded = load_weights(f.path);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].name == "a.w");
  const auto& a0 = std::get<Tensor<float>>(entries[0].tensor);
  const auto& l0 = std::get<Tensor<float>>(loaded[0].tensor);
  CHECK(a0.shape() == l0.shape());
  CHECK(std::memcmp(a0.data(), l0.data(), sizeof(float) * static_cast<std::size_t>(a0.numel())) == 0);
  const auto& a1 = std::get<Tensor<double>>(entries[1].tensor);
  const auto& l1 = std::get<Tensor<double>>(loaded[1].tensor);
  CHECK(std::memcmp(a1.data(), l1.data(), sizeof(double) * static_cast<std::size_t>(a1.numel())) == 0);

  // save(load(x)) is byte-identical on disk
  TempFile g("ettk_roundtrip2.etwb");
  save_weights(g.path, loaded);
  std::ifstream fa(f.path, std::ios::binary), fb(g.path, std::ios::binary);
  const std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(da == db);
}

TEST_CASE("wrong magic fails before reading tensors") {
  TempFile f("ettk_badmagic.etwb");
  std::ofstream out(f.path, std::ios::binary);
  out << "NOPE" << std::string(64, '\0');
  out.close();
  CHECK_THROWS_WITH_AS(load_weights(f.path), doctest::Contains("magic"), std::invalid_argument);
  CHECK_THROWS_AS(load_weights("/nonexistent/z.etwb"), std::runtime_error);
}

TEST_CASE("head parameters pack and unpack by name") {
  std::mt19937 rng(5);
  HeadConfig cfg;
  cfg.kind = HeadKind::kExemplar;
  cfg.d = 4;
  cfg.d_qk = 4;
  cfg.e = 2;
  auto head = init_head<float>(cfg, rng);
  const auto entries = pack_params(head, "head");
  CHECK(entries.size() > 50);

  auto head2 = init_head<float>(cfg, rng);  // different values
  unpack_params(head2, "head", entries);
  auto corr = random_uniform<float>({4, 6, 6}, rng);
  const auto a = head_forward(corr, head);
  const auto b = head_forward(corr, head2);
  CHECK(max_abs_diff(a.cls_logits, b.cls_logits) == 0.0f);
  CHECK(max_abs_diff(a.ltrb, b.ltrb) == 0.0f);

  // a missing tensor is reported by name
  auto trimmed = entries;
  trimmed.pop_back();
  CHECK_THROWS_WITH_AS(unpack_params(head2, "head", trimmed), doctest::Contains("reg.proj.bias"),
                       std::invalid_argument);

  // a shape mismatch is rejected
  HeadConfig other = cfg;
  other.e = 3;
  auto head3 = init_head<float>(other, rng);
  CHECK_THROWS_WITH_AS(unpack_params(head3, "head", entries), doctest::Contains("shape"), std::invalid_argument);
}

TEST_CASE("run config json round trip and validation") {
  RunConfig c;
  c.head_kind = "conv_residual";
  c.e = 16;
  c.s = 2;
  c.tcond = true;
  c.penalty.k = 0.1;
  c.seed = 99;
  const auto text = c.to_json_string();
  const auto back = config_from_json_string(text);
  CHECK(back.head_kind == "conv_residual");
  CHECK(back.e == 16);
  CHECK(back.s == 2);
  CHECK(back.tcond);
  CHECK(back.penalty.k == doctest::Approx(0.1));
  CHECK(back.seed == 99);

  CHECK_THROWS_WITH_AS(config_from_json_string(R"({"head_kind": "banana"})"), doctest::Contains("head_kind"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(config_from_json_string(R"({"Z": 4})"), doctest::Contains("odd"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(config_from_json_string(R"({"E": 0})"), doctest::Contains("E"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(config_from_json_string(R"({"penalty": {"w": 1.5}})"), doctest::Contains("penalty.w"),
                       std::invalid_argument);
  CHECK_THROWS_AS(config_from_json_string("not json"), std::invalid_argument);

  // defaults match the documented run configuration
  const auto d = config_from_json_string("{}");
  CHECK(d.head_kind == "exemplar");
  CHECK(d.e == 4);
  CHECK(d.s == 1);
  CHECK(d.z == 3);
  CHECK(d.d == 128);
  CHECK(d.d_qk == 64);
  CHECK(d.penalty.k == doctest::Approx(0.04));
  CHECK(d.penalty.w == doctest::Approx(0.42));
  CHECK(d.penalty.lr == doctest::Approx(0.7));
}
