#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "tadsr/checkpoint.hpp"

using namespace tadsr;

namespace {

std::filesystem::path scratch(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p;
}

UNetConfig tiny() {
    UNetConfig c;
    c.base_channels = 4;
    c.channel_mults = {1, 2};
    c.blocks_per_scale = 1;
    c.time_embed_dim = 8;
    c.groups = 2;
    return c;
}

}  // namespace

TEST(Io, Float32LittleEndian) {
    const auto p = scratch("tadsr_io_f32.bin");
    const std::vector<float> v{1.0f, -2.5f, 3.25f};
    write_f32<float>(p, v);
    ASSERT_EQ(std::filesystem::file_size(p), 12u);
    std::ifstream is(p, std::ios::binary);
    unsigned char bytes[4];
    is.read(reinterpret_cast<char*>(bytes), 4);
    // 1.0f = 0x3f800000
    EXPECT_EQ(bytes[0], 0x00);
    EXPECT_EQ(bytes[3], 0x3f);
    is.seekg(0);
    EXPECT_EQ(read_f32<float>(is, 3), v);
    EXPECT_THROW((void)read_tensor_f32<float>(p, Shape{1, 1, 2, 2}), IoError);
    std::filesystem::remove(p);
}

TEST(Io, UNetCheckpointRoundTrip) {
    const auto dir = scratch("tadsr_io_unet");
    UNet<float> net(tiny(), 3);
    ScheduleParams sp;
    sp.kappa = 1.5;
    save_unet(dir, net, {sp, 42, 7, {{"note", "x"}}});
    const auto m = read_json(dir / "manifest.json");
    EXPECT_EQ(m["kind"], "unet");
    EXPECT_EQ(m["step"], 42);
    EXPECT_EQ(m["schedule"]["eta"].size(), 16u);
    EXPECT_DOUBLE_EQ(m["schedule"]["eta"][15].get<double>(), build_schedule(sp).eta(15));
    EXPECT_EQ(m["tensors"].size(), net.params().size());
    EXPECT_EQ(std::filesystem::file_size(dir / "params.f32"), net.parameter_count() * 4);

    const auto back = load_unet<float>(dir);
    EXPECT_EQ(back.net.config(), net.config());
    EXPECT_TRUE(back.net.params().values_equal(net.params()));
    EXPECT_EQ(back.meta.schedule, sp);
    EXPECT_EQ(back.meta.step, 42);
    EXPECT_EQ(back.meta.seed, 7u);
    EXPECT_EQ(back.meta.extra["note"], "x");
    EXPECT_THROW((void)load_discriminator<float>(dir), IoError);
    std::filesystem::remove_all(dir);
}

TEST(Io, DiscriminatorCheckpointRoundTrip) {
    const auto dir = scratch("tadsr_io_disc");
    DiscriminatorConfig dc;
    dc.feature_channels = {4, 8};
    dc.time_embed_dim = 8;
    dc.hidden = 8;
    dc.groups = 2;
    dc.time_aware = false;
    TimeAwareDiscriminator<float> d(dc, 5);
    save_discriminator(dir, d, {{}, 3, 1, {}});
    const auto back = load_discriminator<float>(dir);
    EXPECT_EQ(back.disc.config(), dc);
    EXPECT_TRUE(back.disc.params().values_equal(d.params()));
    std::filesystem::remove_all(dir);
}

TEST(Io, CorruptCheckpointRejected) {
    const auto dir = scratch("tadsr_io_bad");
    UNet<float> net(tiny(), 3);
    save_unet(dir, net, {});
    std::filesystem::resize_file(dir / "params.f32", 16);
    EXPECT_THROW((void)load_unet<float>(dir), IoError);
    EXPECT_THROW((void)load_unet<float>(scratch("tadsr_io_missing")), IoError);
    std::filesystem::remove_all(dir);
}
