#include "doctest_torch.hpp"

#include "dmd/checkpoint.hpp"
#include "dmd/errors.hpp"
#include "dmd/records.hpp"
#include "helpers.hpp"

using namespace dmd;

namespace {

Checkpoint sample_checkpoint() {
    Checkpoint c;
    c.meta = R"({"epoch":3,"note":"x"})";
    c.tensors.emplace_back("a", torch::randn({2, 3}));
    c.tensors.emplace_back("b", torch::randn({4}, torch::kFloat64));
    c.tensors.emplace_back("steps", torch::tensor({7, 8}, torch::kLong));
    c.tensors.emplace_back("scalar", torch::tensor(1.5f));
    c.blobs.emplace_back("blob", std::vector<std::uint8_t>{1, 2, 3, 250});
    return c;
}

}  // namespace

TEST_CASE("checkpoint bytes round trip bit-identically") {
    const auto c = sample_checkpoint();
    const auto bytes = serialize_checkpoint(c);
    const auto back = deserialize_checkpoint(bytes);
    CHECK(back.meta == c.meta);
    REQUIRE(back.tensors.size() == c.tensors.size());
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
        CHECK(back.tensors[i].first == c.tensors[i].first);
        CHECK((back.tensors[i].second.scalar_type() == c.tensors[i].second.scalar_type()));
        CHECK(torch::equal(back.tensors[i].second, c.tensors[i].second));
    }
    CHECK(*back.blob("blob") == c.blobs[0].second);
    CHECK(back.tensor("missing") == nullptr);
    CHECK(serialize_checkpoint(back) == bytes);
}

TEST_CASE("damaged checkpoints are rejected") {
    const auto bytes = serialize_checkpoint(sample_checkpoint());
    auto cut = bytes;
    cut.resize(bytes.size() - 9);
    CHECK_THROWS_AS(deserialize_checkpoint(cut), ChecksumError);
    auto flipped = bytes;
    flipped[bytes.size() - 10] ^= 1;
    CHECK_THROWS_AS(deserialize_checkpoint(flipped), ChecksumError);
    auto magic = bytes;
    magic[1] = 'Q';
    CHECK_THROWS_AS(deserialize_checkpoint(magic), VersionError);
}

TEST_CASE("module state round trips through a checkpoint file") {
    testing::TempDir dir("ckpt");
    torch::manual_seed(1);
    torch::nn::Linear a(3, 2), b(3, 2);
    Checkpoint c;
    c.add_module("lin.", *a);
    save_checkpoint(c, dir / "c.bin");
    load_checkpoint(dir / "c.bin").load_module("lin.", *b);
    CHECK(torch::equal(a->weight, b->weight));
    CHECK(torch::equal(a->bias, b->bias));
    CHECK_THROWS_AS(c.load_module("other.", *b), DataError);
}

TEST_CASE("torch archives survive the byte conversion") {
    torch::serialize::OutputArchive out;
    out.write("x", torch::arange(5));
    const auto bytes = archive_bytes(out);
    torch::serialize::InputArchive in;
    load_archive(in, bytes);
    torch::Tensor x;
    in.read("x", x);
    CHECK(torch::equal(x, torch::arange(5)));
}

TEST_CASE("scalar log lines round trip") {
    testing::TempDir dir("log");
    {
        ScalarLog log(dir / "l.jsonl");
        log.write(1, "mse", 0.25);
        log.write(2, "total", -3.5e-7);
    }
    {
        ScalarLog log(dir / "l.jsonl", true);
        log.write(3, "mse", 1.0);
    }
    const auto recs = read_scalar_log(dir / "l.jsonl");
    REQUIRE(recs.size() == 3);
    CHECK(recs[1].step == 2);
    CHECK(recs[1].term == "total");
    CHECK(recs[1].value == -3.5e-7);
    CHECK(scalar_record_line(recs[0]) == R"({"step":1,"term":"mse","value":0.25})");
}
