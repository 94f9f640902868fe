#include <gtest/gtest.h>

#include "c2v/models.hpp"
#include "oracles.hpp"

using namespace c2v;

namespace {
Tensor rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

TeacherArch tiny_teacher_arch() {
    TeacherArch a;
    a.num_classes = 4;
    a.widths = {16, 32, 64, 64};
    return a;
}

StudentArch tiny_student_arch() {
    StudentArch a;
    a.num_classes = 4;
    a.height = 32;
    a.width = 32;
    return a;
}
}  // namespace

TEST(Teacher, OutputShapes) {
    Rng rng(1);
    TeacherNet net(tiny_teacher_arch(), rng);
    Rng drng(2);
    Tensor x = rand_tensor({2, 3, 32, 32}, drng, 0, 1);
    FeatureBundle out = net.forward(x);
    EXPECT_EQ(out.logits.shape(), (std::vector<int>{2, 4, 32, 32}));
    EXPECT_EQ(out.features.shape(), (std::vector<int>{2, 64, 8, 8}));
    EXPECT_TRUE(out.logits.all_finite());
    EXPECT_TRUE(out.features.all_finite());
}

TEST(Teacher, ZeroHeadGivesUniformSoftmax) {
    Rng rng(3);
    TeacherNet net(tiny_teacher_arch(), rng);
    // zero out the head parameters (last two entries of the parameter list)
    auto params = net.parameters();
    for (auto& p : params) {
        if (p.name.rfind("teacher.head", 0) == 0) {
            std::fill(p.tensor.impl()->data.begin(), p.tensor.impl()->data.end(), 0.0);
        }
    }
    Rng drng(4);
    Tensor x = rand_tensor({1, 3, 32, 32}, drng, 0, 1);
    FeatureBundle out = net.forward(x);
    for (double v : out.logits.vec()) EXPECT_DOUBLE_EQ(v, 0.0);
    Tensor probs = softmax(out.logits, 1);
    for (double v : probs.vec()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Teacher, DeterministicAndBatchConsistent) {
    Rng rng_a(5), rng_b(5);
    TeacherNet a(tiny_teacher_arch(), rng_a);
    TeacherNet b(tiny_teacher_arch(), rng_b);
    auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.vec(), pb[i].tensor.vec());

    Rng drng(6);
    Tensor one = rand_tensor({1, 3, 32, 32}, drng, 0, 1);
    Tensor two({2, 3, 32, 32});
    std::copy(one.vec().begin(), one.vec().end(), two.data());
    std::copy(one.vec().begin(), one.vec().end(), two.data() + one.numel());
    FeatureBundle out = a.forward(two);
    size_t plane = out.logits.numel() / 2;
    for (size_t i = 0; i < plane; ++i)
        EXPECT_DOUBLE_EQ(out.logits.data()[i], out.logits.data()[plane + i]);
}

TEST(Teacher, RejectsIndivisibleExtents) {
    Rng rng(7);
    TeacherNet net(tiny_teacher_arch(), rng);
    Tensor x({1, 3, 30, 32});
    EXPECT_THROW(net.forward(x), ShapeError);
}

TEST(Student, TokenCountFromPatchSize) {
    Rng rng(8);
    StudentNet net(tiny_student_arch(), rng);
    EXPECT_EQ(net.token_count(), 64);  // (32/4)^2
    Rng drng(9);
    Tensor x = rand_tensor({2, 3, 32, 32}, drng, 0, 1);
    FeatureBundle out = net.forward(x);
    EXPECT_EQ(out.logits.shape(), (std::vector<int>{2, 4, 32, 32}));
    EXPECT_EQ(out.features.shape(), (std::vector<int>{2, 64, 64}));
}

TEST(Student, ZeroDecoderGivesUniformPredictions) {
    Rng rng(10);
    StudentNet net(tiny_student_arch(), rng);
    for (auto& p : net.parameters()) {
        if (p.name.rfind("student.dec", 0) == 0) {
            std::fill(p.tensor.impl()->data.begin(), p.tensor.impl()->data.end(), 0.0);
        }
    }
    Rng drng(11);
    Tensor x = rand_tensor({1, 3, 32, 32}, drng, 0, 1);
    FeatureBundle out = net.forward(x);
    Tensor probs = softmax(out.logits, 1);
    for (double v : probs.vec()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Student, PatchPermutationEquivariantWithZeroPositional) {
    // positional embeddings are zero-initialized, so a fresh student is
    // permutation-equivariant over input patches
    Rng rng(12);
    StudentArch arch = tiny_student_arch();
    arch.height = arch.width = 16;
    StudentNet net(arch, rng);
    Rng drng(13);
    Tensor x = rand_tensor({1, 3, 16, 16}, drng, 0, 1);
    // swap patch (0,0) with patch (1,2) in a 4x4 patch grid
    Tensor xs = x;
    Tensor swapped({1, 3, 16, 16}, std::vector<double>(x.vec()));
    int p = 4, grid = 4;
    auto swap_patches = [&](Tensor& img, int ta, int tb) {
        int ay = ta / grid, ax = ta % grid, by = tb / grid, bx = tb % grid;
        for (int c = 0; c < 3; ++c)
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx) {
                    double* base = img.data() + (static_cast<size_t>(c) * 16 + 0) * 16;
                    std::swap(base[(ay * p + dy) * 16 + ax * p + dx],
                              base[(by * p + dy) * 16 + bx * p + dx]);
                }
    };
    int ta = 0, tb = 6;
    swap_patches(swapped, ta, tb);
    Tensor fa = net.forward(x).features;
    Tensor fb = net.forward(swapped).features;
    int d = fa.dim(2);
    for (int t = 0; t < fa.dim(1); ++t) {
        int src = t == ta ? tb : (t == tb ? ta : t);
        for (int j = 0; j < d; ++j)
            EXPECT_NEAR(fb.data()[t * d + j], fa.data()[src * d + j], 1e-9);
    }
}

TEST(Student, ParameterCountBelowTeacher) {
    Rng rng(14);
    TeacherNet teacher(tiny_teacher_arch(), rng);
    StudentNet student(tiny_student_arch(), rng);
    size_t tc = count_params(teacher.parameters());
    size_t sc = count_params(student.parameters());
    EXPECT_LT(sc, tc);
}

TEST(AttentionPool, ConstantFieldSymmetry) {
    Rng rng(15);
    AttentionPoolHead head(16, 16, 2, rng);
    Tensor features = Tensor::full({2, 16, 4, 4}, 0.7);
    auto [pooled, spatial] = attention_pool(head, features);
    EXPECT_EQ(pooled.shape(), (std::vector<int>{2, 16}));
    EXPECT_EQ(spatial.shape(), (std::vector<int>{2, 16, 16}));
    // all tokens identical -> pooled output equals every spatial output
    for (int b = 0; b < 2; ++b)
        for (int t = 0; t < 16; ++t)
            for (int j = 0; j < 16; ++j)
                EXPECT_NEAR(spatial.data()[(b * 16 + t) * 16 + j], pooled.data()[b * 16 + j],
                            1e-10);
}

TEST(AttentionPool, SingleSpatialTokenBruteForce) {
    Rng rng(16);
    int d = 4;
    AttentionPoolHead head(d, d, 1, rng);
    Tensor features = rand_tensor({1, d, 1, 1}, rng);
    auto [pooled, spatial] = attention_pool(head, features);
    // with one spatial token the GAP token equals it; both attention inputs
    // are identical, so every output is Wo Wv token
    Tensor token({1, d});
    for (int j = 0; j < d; ++j) token.data()[j] = features.data()[j];
    Tensor expected = matmul(matmul(token, head.attn.w_value), head.attn.w_out);
    for (int j = 0; j < d; ++j) {
        EXPECT_NEAR(pooled.data()[j], expected.data()[j], 1e-12);
        EXPECT_NEAR(spatial.data()[j], expected.data()[j], 1e-12);
    }
}

TEST(AttentionPool, ProjectionAppliedWhenDimsDiffer) {
    Rng rng(17);
    AttentionPoolHead head(8, 16, 2, rng);
    EXPECT_TRUE(head.has_proj);
    Tensor features = rand_tensor({1, 8, 2, 2}, rng);
    auto [pooled, spatial] = attention_pool(head, features);
    EXPECT_EQ(pooled.shape(), (std::vector<int>{1, 16}));
    EXPECT_EQ(spatial.shape(), (std::vector<int>{1, 4, 16}));
}

TEST(AlignHead, IdentityOnConstantTokens) {
    Rng rng(18);
    AlignHead head(4, 4, rng);
    head.weight = Tensor({4, 4});
    for (int i = 0; i < 4; ++i) head.weight.data()[i * 4 + i] = 1.0;
    head.bias = Tensor::zeros({4});
    Tensor tokens = Tensor::full({2, 5, 4}, 1.25);
    auto [pooled, per_token] = align_head(head, tokens);
    for (double v : pooled.vec()) EXPECT_DOUBLE_EQ(v, 1.25);
    for (double v : per_token.vec()) EXPECT_DOUBLE_EQ(v, 1.25);
}

TEST(AlignHead, ZeroWeightsGiveZero) {
    Rng rng(19);
    AlignHead head(4, 6, rng);
    std::fill(head.weight.impl()->data.begin(), head.weight.impl()->data.end(), 0.0);
    Tensor tokens = rand_tensor({1, 3, 4}, rng);
    auto [pooled, per_token] = align_head(head, tokens);
    for (double v : pooled.vec()) EXPECT_DOUBLE_EQ(v, 0.0);
    for (double v : per_token.vec()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(AlignHead, MatchesBruteForceLinearAlgebra) {
    Rng rng(20);
    AlignHead head(3, 5, rng);
    Tensor tokens = rand_tensor({2, 4, 3}, rng);
    auto [pooled, per_token] = align_head(head, tokens);
    for (int b = 0; b < 2; ++b) {
        double mean_tok[3] = {0, 0, 0};
        for (int t = 0; t < 4; ++t)
            for (int j = 0; j < 3; ++j) mean_tok[j] += tokens.data()[(b * 4 + t) * 3 + j] / 4.0;
        for (int o = 0; o < 5; ++o) {
            double v = head.bias.data()[o];
            for (int j = 0; j < 3; ++j) v += mean_tok[j] * head.weight.data()[j * 5 + o];
            EXPECT_NEAR(pooled.data()[b * 5 + o], v, 1e-12);
        }
        for (int t = 0; t < 4; ++t)
            for (int o = 0; o < 5; ++o) {
                double v = head.bias.data()[o];
                for (int j = 0; j < 3; ++j)
                    v += tokens.data()[(b * 4 + t) * 3 + j] * head.weight.data()[j * 5 + o];
                EXPECT_NEAR(per_token.data()[(b * 4 + t) * 5 + o], v, 1e-12);
            }
    }
}

TEST(Checkpoint, TeacherRoundTripPreservesForward) {
    Rng rng(21);
    TeacherNet net(tiny_teacher_arch(), rng);
    auto entries = net.to_entries(123);
    std::string blob = encode_container(entries);
    int64_t step = 0;
    TeacherNet back = TeacherNet::from_entries(decode_container(blob), &step);
    EXPECT_EQ(step, 123);
    Rng drng(22);
    Tensor x = rand_tensor({1, 3, 32, 32}, drng, 0, 1);
    EXPECT_EQ(net.forward(x).logits.vec(), back.forward(x).logits.vec());
}

TEST(Checkpoint, StudentRoundTripPreservesForward) {
    Rng rng(23);
    StudentNet net(tiny_student_arch(), rng);
    auto entries = net.to_entries(77);
    StudentNet back = StudentNet::from_entries(decode_container(encode_container(entries)));
    Rng drng(24);
    Tensor x = rand_tensor({1, 3, 32, 32}, drng, 0, 1);
    EXPECT_EQ(net.forward(x).logits.vec(), back.forward(x).logits.vec());
}

TEST(Checkpoint, StudentEntriesExcludeTrainingHeads) {
    Rng rng(25);
    StudentNet net(tiny_student_arch(), rng);
    for (const auto& e : net.to_entries(0)) {
        EXPECT_EQ(e.name.find("align"), std::string::npos);
        EXPECT_EQ(e.name.find("pool"), std::string::npos);
    }
}

TEST(Checkpoint, WrongKindRejected) {
    Rng rng(26);
    TeacherNet net(tiny_teacher_arch(), rng);
    auto entries = net.to_entries(0);
    EXPECT_THROW(StudentNet::from_entries(entries), ContainerError);
}
