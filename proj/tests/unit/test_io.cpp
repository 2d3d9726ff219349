#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "flowseg/config.hpp"
#include "flowseg/frvs.hpp"
#include "flowseg/pgm.hpp"
#include "test_util.hpp"

using namespace flowseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("flowseg_io_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

io::FrvsTensor random_frvs_tensor(Rng& rng, int id) {
    const int ndim = static_cast<int>(rng.uniform_int(0, 4));
    nn::Dims dims;
    std::vector<uint32_t> udims;
    for (int d = 0; d < ndim; ++d) {
        dims.push_back(rng.uniform_int(1, 5));
        udims.push_back(static_cast<uint32_t>(dims.back()));
    }
    const std::string name = "t" + std::to_string(id) + std::string(static_cast<size_t>(rng.uniform_int(0, 6)), 'x');
    switch (rng.uniform_int(0, 2)) {
        case 0:
            return io::FrvsTensor::from_f32(name, testing::random_tensor<float>(dims, rng, 1e3));
        case 1:
            return io::FrvsTensor::from_f64(name, testing::random_tensor<double>(dims, rng, 1e-3));
        default: {
            int64_t n = 1;
            for (auto d : dims) n *= d;
            std::vector<uint8_t> v(static_cast<size_t>(n));
            for (auto& b : v) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
            return io::FrvsTensor::from_u8(name, udims, v);
        }
    }
}

}  // namespace

TEST_CASE("frvs layout matches the byte-level description") {
    io::FrvsFile f;
    f.add(io::FrvsTensor::from_u8("ab", {2, 1}, std::vector<uint8_t>{7, 9}));
    nn::Tensor<float> x({1});
    x[0] = 1.0f;
    f.add(io::FrvsTensor::from_f32("c", x));

    std::vector<uint8_t> expect = {'F', 'R', 'V', 'S'};
    put_u32(expect, 1);
    put_u32(expect, 2);
    expect.insert(expect.end(), {2, 0, 'a', 'b', 2, 2});
    put_u32(expect, 2);
    put_u32(expect, 1);
    expect.insert(expect.end(), {7, 9});
    expect.insert(expect.end(), {1, 0, 'c', 0, 1});
    put_u32(expect, 1);
    expect.insert(expect.end(), {0x00, 0x00, 0x80, 0x3f});
    CHECK(f.serialize() == expect);
}

TEST_CASE("frvs write, read, write is byte-identical for 100 random tensors") {
    const auto dir = scratch_dir("frvs");
    Rng rng(2024);
    for (int i = 0; i < 100; ++i) {
        io::FrvsFile f;
        const int count = static_cast<int>(rng.uniform_int(1, 3));
        for (int k = 0; k < count; ++k) f.add(random_frvs_tensor(rng, k));
        const auto a = dir / "a.frvs", b = dir / "b.frvs";
        f.write(a);
        const auto back = io::FrvsFile::read(a);
        back.write(b);
        REQUIRE(io::read_bytes(a) == io::read_bytes(b));
        for (size_t k = 0; k < f.tensors().size(); ++k) {
            const auto& x = f.tensors()[k];
            const auto& y = back.tensors()[k];
            CHECK(x.name == y.name);
            CHECK(x.dtype == y.dtype);
            CHECK(x.dims == y.dims);
            CHECK(y.payload.size() == y.numel() * io::dtype_size(y.dtype));
        }
    }
}

TEST_CASE("frvs rejects malformed input") {
    io::FrvsFile f;
    f.add(io::FrvsTensor::from_u8("m", {3}, std::vector<uint8_t>{1, 2, 3}));
    auto bytes = f.serialize();

    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(io::FrvsFile::parse(truncated), ContractError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(io::FrvsFile::parse(trailing), ContractError);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(io::FrvsFile::parse(magic), ContractError);
    auto dtype = bytes;
    dtype[4 + 4 + 4 + 2 + 1] = 9;
    CHECK_THROWS_AS(io::FrvsFile::parse(dtype), ContractError);

    CHECK_THROWS_AS(f.add(io::FrvsTensor::from_u8("m", {1}, std::vector<uint8_t>{0})), ContractError);
    CHECK_THROWS_AS(io::FrvsFile::read("/nonexistent/x.frvs"), FileError);
}

TEST_CASE("frvs text tensors carry utf-8 unchanged") {
    const std::string text = "paradigm = video2mask-flow\n# größe \xe2\x86\x92 ok\n";
    CHECK(io::tensor_text(io::text_tensor("cfg", text)) == text);
}

TEST_CASE("pgm encodes P5 with maxval 255 and foreground 255") {
    MaskTensor m(2, 2, 3);
    m.set(1, 0, 2, true);
    m.set(1, 1, 0, true);
    const auto bytes = io::encode_pgm(m, 1);
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 6);
    CHECK(std::memcmp(bytes.data(), header.data(), header.size()) == 0);
    const std::vector<uint8_t> pixels(bytes.begin() + static_cast<long>(header.size()), bytes.end());
    CHECK(pixels == std::vector<uint8_t>{0, 0, 255, 255, 0, 0});
    CHECK_THROWS_AS(io::encode_pgm(m, 2), ContractError);
}

TEST_CASE("pgm frames round-trip bit-exactly") {
    const auto dir = scratch_dir("pgm");
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        MaskTensor m(rng.uniform_int(1, 4), rng.uniform_int(1, 9), rng.uniform_int(1, 9));
        for (int64_t t = 0; t < m.frames(); ++t)
            for (int64_t y = 0; y < m.height(); ++y)
                for (int64_t x = 0; x < m.width(); ++x) m.set(t, y, x, rng.uniform() < 0.4);
        const auto sub = dir / std::to_string(trial);
        io::write_pgm_frames(sub, m);
        const auto back = io::read_pgm_frames(sub);
        CHECK(back.same_shape(m));
        CHECK(back.bits() == m.bits());
        const auto first = io::read_bytes(sub / "frame_000.pgm");
        io::write_pgm_frames(sub, back);
        CHECK(io::read_bytes(sub / "frame_000.pgm") == first);
    }
}

TEST_CASE("pgm decoding accepts comments and rejects unsupported files") {
    using namespace std::string_literals;
    const std::string with_comment = "P5\n# made by hand\n2 1\n255\n\xff\x00"s;
    const auto m = io::decode_pgm(std::vector<uint8_t>(with_comment.begin(), with_comment.end()));
    CHECK(m.width() == 2);
    CHECK(m.at(0, 0, 0) == 1);
    CHECK(m.at(0, 0, 1) == 0);
    auto bytes_of = [](const std::string& s) { return std::vector<uint8_t>(s.begin(), s.end()); };
    CHECK_THROWS_AS(io::decode_pgm(bytes_of("P2\n1 1\n255\n0")), ContractError);
    CHECK_THROWS_AS(io::decode_pgm(bytes_of("P5\n1 1\n65535\n\0\0"s)), ContractError);
    CHECK_THROWS_AS(io::decode_pgm(bytes_of("P5\n2 2\n255\n\0"s)), ContractError);
}

TEST_CASE("config defaults serialize and parse back") {
    const cli::RunConfig c;
    CHECK(cli::RunConfig::parse(c.to_text()) == c);
    CHECK(cli::RunConfig::parse("") == c);
}

TEST_CASE("config round-trips random valid configurations") {
    Rng rng(11);
    const char* paradigms[] = {"video2mask-flow", "noise2mask-flow", "onestep-mask", "onestep-velocity"};
    for (int i = 0; i < 50; ++i) {
        cli::RunConfig c;
        c.seed = rng.next_u64();
        c.p_bbs = rng.uniform();
        c.lr = std::exp(rng.uniform(-12.0, -2.0));
        c.kl_weight = rng.uniform(0.0, 1e-2);
        c.paradigm = paradigms[rng.uniform_int(0, 3)];
        c.spa = rng.uniform() < 0.5;
        c.dvi = rng.uniform() < 0.5;
        c.ode_steps = static_cast<int>(rng.uniform_int(1, 100));
        c.train_samples = rng.uniform_int(0, 5000);
        c.data_dir = "runs/data " + std::to_string(i);
        c.j_aggregation = rng.uniform() < 0.5 ? "per-clip" : "per-frame";
        const auto text = c.to_text();
        const auto back = cli::RunConfig::parse(text);
        CHECK(back == c);
        CHECK(back.to_text() == text);
    }
}

TEST_CASE("config parsing rules") {
    const auto c = cli::RunConfig::parse("# comment\n  seed = 42   # trailing\n\nspa = off\ndvi = true\nlr=0.001\n");
    CHECK(c.seed == 42);
    CHECK_FALSE(c.spa);
    CHECK(c.dvi);
    CHECK(c.lr == 0.001);

    auto message = [](const std::string& text) {
        try {
            cli::RunConfig::parse(text);
        } catch (const ContractError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(message("seed = 1\nlearning_rate = 3\n").find("line 2") != std::string::npos);
    CHECK(message("learning_rate = 3\n").find("learning_rate") != std::string::npos);
    CHECK(message("seed\n").find("line 1") != std::string::npos);
    CHECK(message("epochs = ten\n").find("epochs") != std::string::npos);
    CHECK(message("spa = maybe\n").find("spa") != std::string::npos);
    CHECK(message("p_bbs = 1.5\n") != "no error");
    CHECK(message("paradigm = mask2video\n") != "no error");
    CHECK(message("net_width = 100\n") != "no error");
    CHECK(message("j_aggregation = mean\n") != "no error");
}

TEST_CASE("config maps onto the module configurations") {
    cli::RunConfig c;
    c.paradigm = "onestep-velocity";
    c.p_bbs = 0.25;
    c.dvi = false;
    c.lr = 1e-3;
    c.net_width = 64;
    c.latent_channels = 4;
    c.j_aggregation = "per-frame";
    const auto f = c.flow_config();
    CHECK(f.paradigm == flow::Paradigm::onestep_velocity);
    CHECK(f.p_bbs == 0.25);
    CHECK_FALSE(f.dvi);
    CHECK(f.optim.lr == 1e-3);
    const auto n = c.net_config();
    CHECK(n.width == 64);
    CHECK(n.latent_channels == 4);
    CHECK_FALSE(n.dvi);
    CHECK(c.codec_config().latent_channels == 4);
    CHECK(c.eval_options().j_aggregation == metrics::JAggregation::per_frame);
}
