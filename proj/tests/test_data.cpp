#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "c2v/data.hpp"
#include "oracles.hpp"

using namespace c2v;
namespace fs = std::filesystem;

namespace {
std::string temp_path(const char* name) {
    return (fs::temp_directory_path() / name).string();
}
}  // namespace

TEST(Generate, SameSeedIsBitIdentical) {
    auto a = generate_dataset(99, 8, 16, 16, 4);
    auto b = generate_dataset(99, 8, 16, 16, 4);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image.vec(), b[i].image.vec());
        EXPECT_EQ(a[i].label.values, b[i].label.values);
    }
}

TEST(Generate, DifferentSeedsDiffer) {
    auto a = generate_dataset(1, 2, 16, 16, 4);
    auto b = generate_dataset(2, 2, 16, 16, 4);
    EXPECT_NE(a[0].image.vec(), b[0].image.vec());
}

TEST(Generate, EmptyCount) {
    EXPECT_TRUE(generate_dataset(1, 0, 16, 16, 4).empty());
}

TEST(Generate, RejectsBadArguments) {
    EXPECT_THROW(generate_dataset(1, 1, 16, 16, 1), ValueError);
    EXPECT_THROW(generate_dataset(1, 1, 15, 16, 4), ValueError);
}

TEST(Generate, ClassPixelSharesWithinBounds) {
    // independent counting pass over the default-size dataset
    int k = 4;
    auto data = generate_dataset(7, 200, 32, 32, k);
    std::vector<long long> counts(k, 0);
    long long total = 0;
    for (const auto& s : data) {
        for (int32_t v : s.label.values) {
            ASSERT_GE(v, 0);
            ASSERT_LT(v, k);
            ++counts[v];
            ++total;
        }
    }
    for (int c = 0; c < k; ++c) {
        double share = static_cast<double>(counts[c]) / static_cast<double>(total);
        EXPECT_GE(share, 0.02) << "class " << c;
        EXPECT_LE(share, 0.70) << "class " << c;
    }
}

TEST(Generate, EveryImageHasForegroundAndValidRange) {
    auto data = generate_dataset(11, 50, 32, 32, 4);
    for (const auto& s : data) {
        bool any_fg = false;
        for (int32_t v : s.label.values) any_fg = any_fg || v != 0;
        EXPECT_TRUE(any_fg);
        for (double v : s.image.vec()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Flip, ForcedFlipTwiceIsIdentity) {
    auto data = generate_dataset(3, 1, 16, 16, 4);
    SynthSample twice = flip_horizontal(flip_horizontal(data[0]));
    EXPECT_EQ(twice.image.vec(), data[0].image.vec());
    EXPECT_EQ(twice.label.values, data[0].label.values);
}

TEST(Flip, ColumnIndexOracle) {
    auto data = generate_dataset(4, 1, 16, 16, 4);
    SynthSample flipped = flip_horizontal(data[0]);
    int w = 16;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < w; ++x)
            EXPECT_EQ(flipped.label.at(0, y, x), data[0].label.at(0, y, w - 1 - x));
}

TEST(Crop, FullWindowIsIdentity) {
    auto data = generate_dataset(5, 1, 16, 16, 4);
    Rng rng(1);
    SynthSample out = crop_resize(data[0], 16, 16, rng);
    EXPECT_EQ(out.image.vec(), data[0].image.vec());
    EXPECT_EQ(out.label.values, data[0].label.values);
}

TEST(Crop, OversizedWindowRejected) {
    auto data = generate_dataset(5, 1, 16, 16, 4);
    Rng rng(1);
    EXPECT_THROW(crop_resize(data[0], 20, 16, rng), ValueError);
}

TEST(Crop, ResizeBackKeepsShapeAndLabels) {
    auto data = generate_dataset(6, 1, 32, 32, 4);
    Rng rng(2);
    SynthSample out = crop_resize(data[0], 24, 24, rng);
    EXPECT_EQ(out.image.shape(), (std::vector<int>{3, 32, 32}));
    EXPECT_EQ(out.label.values.size(), 32u * 32u);
    for (int32_t v : out.label.values) {
        EXPECT_GE(v, 0);
        EXPECT_LT(v, 4);
    }
    for (double v : out.image.vec()) {
        EXPECT_GE(v, -1e-12);
        EXPECT_LE(v, 1.0 + 1e-12);
    }
}

TEST(Augment, NoFlipFullCropIsIdentity) {
    auto data = generate_dataset(8, 1, 16, 16, 4);
    Rng rng(3);
    SynthSample out = augment(data[0], rng, 16, 16, 0.0);
    EXPECT_EQ(out.image.vec(), data[0].image.vec());
}

TEST(Augment, DeterministicGivenSameStream) {
    auto data = generate_dataset(9, 1, 32, 32, 4);
    Rng a(77), b(77);
    SynthSample x = augment(data[0], a, 28, 28);
    SynthSample y = augment(data[0], b, 28, 28);
    EXPECT_EQ(x.image.vec(), y.image.vec());
    EXPECT_EQ(x.label.values, y.label.values);
}

TEST(Container, EmptyEntrySetRoundTrips) {
    std::string blob = encode_container({});
    auto back = decode_container(blob);
    EXPECT_TRUE(back.empty());
}

TEST(Container, SingleTensorBitwise) {
    Tensor t({2, 2}, {1.5, -2.25, 1e-300, 3.0});
    auto back = decode_container(encode_container({{"x", t}}));
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].name, "x");
    EXPECT_EQ(back[0].tensor.shape(), t.shape());
    EXPECT_EQ(back[0].tensor.vec(), t.vec());
}

TEST(Container, RandomTensorsUpToRankSixRoundTripBitwise) {
    Rng rng(10);
    for (int trial = 0; trial < 30; ++trial) {
        int rank = rng.uniform_int(1, 6);
        std::vector<int> shape;
        for (int i = 0; i < rank; ++i) shape.push_back(rng.uniform_int(1, 4));
        Tensor t(shape);
        for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
        auto back = decode_container(encode_container({{"t", t}}));
        EXPECT_EQ(back[0].tensor.shape(), t.shape());
        EXPECT_EQ(back[0].tensor.vec(), t.vec());
    }
}

TEST(Container, FileRoundTrip) {
    std::string path = temp_path("c2v_test_container.c2vt");
    Tensor t({3}, {1, 2, 3});
    save_container(path, {{"a", t}});
    auto back = load_container(path);
    EXPECT_EQ(back[0].tensor.vec(), t.vec());
    fs::remove(path);
}

TEST(Container, BadMagicKind) {
    std::string blob = encode_container({{"a", Tensor({1}, {1.0})}});
    blob[0] = 'X';
    try {
        decode_container(blob);
        FAIL() << "expected ContainerError";
    } catch (const ContainerError& e) {
        EXPECT_EQ(e.kind, ContainerError::Kind::BadMagic);
    }
}

TEST(Container, TruncationKindAtEveryPrefix) {
    std::string blob = encode_container({{"tensor", Tensor({2, 2}, {1, 2, 3, 4})}});
    // every strict prefix must raise Truncated (after the magic check)
    for (size_t cut = 4; cut < blob.size(); ++cut) {
        try {
            decode_container(blob.substr(0, cut));
            FAIL() << "expected ContainerError at cut " << cut;
        } catch (const ContainerError& e) {
            EXPECT_EQ(e.kind, ContainerError::Kind::Truncated) << "cut " << cut;
        }
    }
}

TEST(Container, DuplicateNamesRejectedOnSave) {
    Tensor t({1}, {1.0});
    try {
        encode_container({{"a", t}, {"a", t}});
        FAIL() << "expected ContainerError";
    } catch (const ContainerError& e) {
        EXPECT_EQ(e.kind, ContainerError::Kind::DuplicateName);
    }
}

TEST(Container, DuplicateNamesRejectedOnLoad) {
    Tensor t({1}, {1.0});
    std::string blob = encode_container({{"aa", t}, {"ab", t}});
    // patch the second name to collide with the first
    size_t pos = blob.find("ab");
    ASSERT_NE(pos, std::string::npos);
    blob[pos + 1] = 'a';
    try {
        decode_container(blob);
        FAIL() << "expected ContainerError";
    } catch (const ContainerError& e) {
        EXPECT_EQ(e.kind, ContainerError::Kind::DuplicateName);
    }
}

TEST(Container, BadVersionKind) {
    std::string blob = encode_container({});
    blob[4] = 9;  // version little-endian low byte
    try {
        decode_container(blob);
        FAIL() << "expected ContainerError";
    } catch (const ContainerError& e) {
        EXPECT_EQ(e.kind, ContainerError::Kind::BadVersion);
    }
}

TEST(Container, MissingFileIsIoKind) {
    try {
        load_container(temp_path("c2v_does_not_exist.c2vt"));
        FAIL() << "expected ContainerError";
    } catch (const ContainerError& e) {
        EXPECT_EQ(e.kind, ContainerError::Kind::Io);
    }
}

TEST(Dataset, SaveLoadRoundTrip) {
    auto data = generate_dataset(12, 3, 16, 16, 4);
    std::string path = temp_path("c2v_test_dataset.c2vt");
    save_dataset(path, data);
    auto back = load_dataset(path);
    ASSERT_EQ(back.size(), data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        EXPECT_EQ(back[i].image.vec(), data[i].image.vec());
        EXPECT_EQ(back[i].label.values, data[i].label.values);
    }
    fs::remove(path);
}
