#include <gtest/gtest.h>

#include <algorithm>

#include "tadsr/losses.hpp"
#include "tadsr/nets.hpp"
#include "test_util.hpp"

using namespace tadsr;
using tadsr::testing::rel_error;

namespace {

// Smooth nonlinear denoiser so the score-difference identities are not trivially linear.
template <class S>
struct TanhDenoiser {
    Tensor<S> operator()(const Tensor<S>& zt, const Tensor<S>& zy, int t) const {
        Tensor<S> out(zt.shape());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = std::tanh(S(0.8) * zt[i] + S(0.1) * static_cast<S>(t)) * S(0.9) + S(0.2) * zy[i];
        }
        return out;
    }
};

Var<float> scores(Shape s, float v) { return Var<float>(Tensor<float>(s, v)); }

}  // namespace

TEST(Losses, TeacherLoss) {
    const DiffusionSchedule s({0.01, 0.25, 0.64}, 1.0);
    Rng rng(1);
    const auto z0 = randn<float>(Shape{2, 3, 4, 4}, rng);
    EXPECT_EQ(teacher_loss(s, Var<float>(z0), z0, 2, false).item(), 0.f);
    Tensor<float> shifted = z0;
    for (auto& v : shifted.span()) v += 0.3f;
    EXPECT_NEAR(teacher_loss(s, Var<float>(shifted), z0, 2, false).item(), 0.09, 1e-6);
    EXPECT_NEAR(teacher_loss(s, Var<float>(shifted), z0, 2, true).item(), 0.09 * 1.21875, 1e-6);
    EXPECT_THROW((void)teacher_loss(s, Var<float>(z0), Tensor<float>(Shape{1, 3, 4, 4}), 2, false), ShapeError);
}

TEST(Losses, VanillaDistill) {
    Rng rng(2);
    const auto a = randn<double>(Shape{2, 2, 3, 3}, rng);
    EXPECT_EQ(vanilla_distill_loss(Var<double>(a), a).item(), 0.0);
    Tensor<double> b = a;
    for (auto& v : b.span()) v -= 0.5;
    EXPECT_NEAR(vanilla_distill_loss(Var<double>(a), b).item(), 0.25, 1e-14);
    const auto target = randn<double>(a.shape(), rng);
    auto x = Var<double>::leaf(a, true);
    backward(vanilla_distill_loss(x, target));
    const double n = static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double want = 2 * (a[i] - target[i]) / n;
        EXPECT_LT(rel_error(x.grad()[i], want, 1e-12), 1e-10);
    }
    EXPECT_LT(tadsr::testing::max_grad_error(a, [&](const Var<double>& v) { return vanilla_distill_loss(v, target); }),
              1e-4);
}

TEST(Losses, HsdEquivalenceSingleAndDouble) {
    const auto s = build_schedule(ScheduleParams{});
    for (int tp = 1; tp <= 3; ++tp) {
        Rng rng(100 + tp);
        for (int rep = 0; rep < 5; ++rep) {
            const Shape sh{2, 3, 8, 8};
            const auto stu = randn<double>(sh, rng), tch = randn<double>(sh, rng), zy = randn<double>(sh, rng);
            const auto ep = randn<double>(sh, rng);
            const auto r = hsd_residual<double>(TanhDenoiser<double>{}, s, stu, tch, zy, tp, ep);
            const auto d = hsd_score_difference<double>(TanhDenoiser<double>{}, s, stu, tch, zy, tp, ep);
            const double w2 = s.hsd_weight(tp, 3, 64);
            double worst = 0;
            for (std::size_t i = 0; i < r.size(); ++i) worst = std::max(worst, rel_error(d[i], w2 * r[i], 1e-14));
            EXPECT_LT(worst, 1e-10);

            const auto stu_f = tensor_cast<float>(stu), tch_f = tensor_cast<float>(tch);
            const auto zy_f = tensor_cast<float>(zy), ep_f = tensor_cast<float>(ep);
            const auto rf = hsd_residual<float>(TanhDenoiser<float>{}, s, stu_f, tch_f, zy_f, tp, ep_f);
            const auto df = hsd_score_difference<float>(TanhDenoiser<float>{}, s, stu_f, tch_f, zy_f, tp, ep_f);
            // Relative to the residual scale: cancellation in z0_stu - z0_tch dominates single-precision error.
            double scale = 0;
            for (std::size_t i = 0; i < rf.size(); ++i) scale = std::max(scale, std::abs(w2 * rf[i]));
            for (std::size_t i = 0; i < rf.size(); ++i) {
                EXPECT_LT(std::abs(df[i] - w2 * rf[i]) / scale, 1e-5);
            }
        }
    }
}

TEST(Losses, HsdZeroPoint) {
    const auto s = build_schedule(ScheduleParams{});
    Rng rng(3);
    const Shape sh{2, 3, 8, 8};
    const auto z = randn<double>(sh, rng), zy = randn<double>(sh, rng), ep = randn<double>(sh, rng);
    auto v = Var<double>::leaf(z, true);
    const auto loss = hsd_loss(TanhDenoiser<double>{}, s, v, z, zy, 2, ep);
    EXPECT_EQ(loss.item(), 0.0);
    backward(loss);
    EXPECT_EQ(max_abs(v.grad()), 0.0);
}

TEST(Losses, HsdGradientIsWeightedResidual) {
    const auto s = build_schedule(ScheduleParams{});
    Rng rng(4);
    const Shape sh{1, 1, 4, 4};
    const auto stu = randn<double>(sh, rng), tch = randn<double>(sh, rng), zy = randn<double>(sh, rng);
    const auto ep = randn<double>(sh, rng);
    for (int tp = 1; tp <= 3; ++tp) {
        const auto r = hsd_residual<double>(TanhDenoiser<double>{}, s, stu, tch, zy, tp, ep);
        const double w2 = s.hsd_weight(tp, 1, 16);
        auto v = Var<double>::leaf(stu, true);
        backward(hsd_loss(TanhDenoiser<double>{}, s, v, tch, zy, tp, ep));
        // Surrogate with r frozen: L(x) = w2 * sum(r * x).
        Tensor<double> x = stu;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double fd = tadsr::testing::central_difference(x, i, [&] {
                double acc = 0;
                for (std::size_t j = 0; j < x.size(); ++j) acc += r[j] * x[j];
                return w2 * acc;
            });
            EXPECT_LT(rel_error(fd, w2 * r[i], 1e-12), 1e-4);
            EXPECT_LT(rel_error(v.grad()[i], w2 * r[i], 1e-12), 1e-12);
        }
    }
}

TEST(Losses, HsdBatchAveraging) {
    const auto s = build_schedule(ScheduleParams{});
    Rng rng(5);
    const Shape sh{3, 2, 4, 4};
    const auto stu = randn<double>(sh, rng), tch = randn<double>(sh, rng), zy = randn<double>(sh, rng);
    const auto ep = randn<double>(sh, rng);
    const auto r = hsd_residual<double>(TanhDenoiser<double>{}, s, stu, tch, zy, 1, ep);
    auto v = Var<double>::leaf(stu, true);
    backward(hsd_loss(TanhDenoiser<double>{}, s, v, tch, zy, 1, ep));
    const double w2 = s.hsd_weight(1, 2, 16);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(v.grad()[i], w2 * r[i] / 3, 1e-14);
}

TEST(Losses, HsdRejectsLargeTimestep) {
    const auto s = build_schedule(ScheduleParams{});
    const Shape sh{1, 1, 4, 4};
    const Tensor<double> z(sh);
    EXPECT_THROW((void)hsd_loss(TanhDenoiser<double>{}, s, Var<double>(z), z, z, 4, z), LossError);
    EXPECT_THROW((void)hsd_loss(TanhDenoiser<double>{}, s, Var<double>(z), z, z, 0, z), LossError);
    EXPECT_THROW((void)sds_loss(TanhDenoiser<double>{}, s, Var<double>(z), z, 5, z), LossError);
}

TEST(Losses, SdsGradient) {
    const auto s = build_schedule(ScheduleParams{});
    Rng rng(6);
    const Shape sh{2, 1, 4, 4};
    const auto stu = randn<double>(sh, rng), zy = randn<double>(sh, rng), ep = randn<double>(sh, rng);
    auto v = Var<double>::leaf(stu, true);
    backward(sds_loss(TanhDenoiser<double>{}, s, v, zy, 2, ep));
    const auto zt = forward_sample(s, stu, zy, 2, ep);
    const auto e = predicted_noise(s, zt, TanhDenoiser<double>{}(zt, zy, 2), zy, 2);
    for (std::size_t i = 0; i < stu.size(); ++i) EXPECT_NEAR(v.grad()[i], (e[i] - ep[i]) / (16.0 * 2), 1e-12);
}

TEST(Losses, AdvGenClosedForms) {
    const Shape b{4, 1, 1, 1};
    EXPECT_EQ(adv_gen_loss<float>({scores(b, -2), scores(b, -2), scores(b, -2)}).item(), 6.f);
    EXPECT_EQ(adv_gen_loss<float>({scores(b, 0), scores(b, 0), scores(b, 0)}).item(), 0.f);
    EXPECT_EQ(adv_gen_loss<float>({scores(b, 1), scores(b, 1), scores(b, 1)}).item(), -3.f);
    EXPECT_THROW((void)adv_gen_loss<float>({}), LossError);
}

TEST(Losses, AdvDiscClosedForms) {
    const Shape b{5, 1, 1, 1};
    EXPECT_EQ(adv_disc_loss<float>({scores(b, -2)}, {scores(b, 2)}).item(), 0.f);
    EXPECT_EQ(adv_disc_loss<float>({scores(b, 0)}, {scores(b, 0)}).item(), 2.f);
    EXPECT_EQ(adv_disc_loss<float>({scores(b, 1), scores(b, 1)}, {scores(b, -1), scores(b, -1)}).item(), 8.f);
    EXPECT_THROW((void)adv_disc_loss<float>({scores(b, 0)}, {scores(b, 0), scores(b, 0)}), LossError);
}

TEST(Losses, HingeBoundsAndPermutation) {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        const Shape b{6, 1, 1, 1};
        std::vector<Var<float>> f, r;
        for (int k = 0; k < 3; ++k) {
            f.emplace_back(randn<float>(b, rng, 2.f));
            r.emplace_back(randn<float>(b, rng, 2.f));
        }
        const float l = adv_disc_loss(f, r).item();
        EXPECT_GE(l, 0.f);
        bool all_inactive = true;
        for (int k = 0; k < 3; ++k) {
            for (int i = 0; i < 6; ++i) all_inactive &= f[k].value()[i] <= -1 && r[k].value()[i] >= 1;
        }
        EXPECT_EQ(l == 0.f, all_inactive);
        // Reverse the batch order in every tensor.
        auto flip = [](const Var<float>& v) {
            auto t = v.value();
            std::reverse(t.span().begin(), t.span().end());
            return Var<float>(t);
        };
        std::vector<Var<float>> f2, r2;
        for (int k = 0; k < 3; ++k) {
            f2.push_back(flip(f[k]));
            r2.push_back(flip(r[k]));
        }
        EXPECT_NEAR(adv_disc_loss(f2, r2).item(), l, 1e-5);
        EXPECT_NEAR(adv_gen_loss(f2).item(), adv_gen_loss(f).item(), 1e-5);
    }
}

TEST(Losses, TotalGenLoss) {
    const Var<double> d(Tensor<double>::scalar(1.0)), h(Tensor<double>::scalar(0.5)), a(Tensor<double>::scalar(2.0));
    EXPECT_NEAR(total_gen_loss(d, h, a, 1.0, 0.02).item(), 1.54, 1e-15);
    EXPECT_NEAR(total_gen_loss(d, h, a, 0.1, 0.2).item(), 1.45, 1e-15);
    EXPECT_EQ(total_gen_loss(d, h, a, 0.0, 0.0).item(), 1.0);
    EXPECT_THROW((void)total_gen_loss(d, h, a, -0.1, 0.0), LossError);
    EXPECT_THROW((void)total_gen_loss(d, h, a, 0.0, -1.0), LossError);
}

TEST(Losses, AdversarialGradientReachesStudentOutput) {
    UNetConfig uc;
    uc.base_channels = 8;
    uc.blocks_per_scale = 1;
    uc.time_embed_dim = 16;
    uc.groups = 4;
    UNet<float> teacher(uc, 1);
    teacher.params().set_trainable(false);
    DiscriminatorConfig dc;
    dc.feature_channels = uc.feature_channels();
    dc.time_embed_dim = 16;
    dc.hidden = 16;
    dc.groups = 4;
    TimeAwareDiscriminator<float> disc(dc, 2);
    disc.params().set_trainable(false);
    const auto s = build_schedule(ScheduleParams{});
    Rng rng(3);
    const Shape sh{2, 3, 16, 16};
    auto z0 = Var<float>::leaf(randn<float>(sh, rng), true);
    const auto zy = randn<float>(sh, rng), e = randn<float>(sh, rng);
    const auto zt = forward_sample(s, z0, zy, 5, e);
    backward(adv_gen_loss(disc.discriminate(extract_features(teacher, zt, zy, 5), 5).per_scale));
    EXPECT_GT(max_abs(z0.grad()), 0.f);
    EXPECT_FALSE(disc.params().any_grad());
    EXPECT_FALSE(teacher.params().any_grad());
}
