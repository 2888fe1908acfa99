#include "adaptseg/synth.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "adaptseg/rng.hpp"

namespace fs = std::filesystem;

namespace adaptseg {

void SynthDomainParams::validate() const {
    if (height < 16 || width < 16) throw ConfigError("synthetic images must be at least 16x16");
    if (base_level <= 0.0 || base_level > 1.0) throw ConfigError("base_level must be in (0, 1]");
    if (contrast < 0.0) throw ConfigError("contrast must be nonnegative");
    if (base_level - contrast < 0.02) {
        throw ConfigError("base_level - contrast must stay >= 0.02 so cracks never clamp to black");
    }
    if (texture_scale < 0.0 || texture_amplitude < 0.0) throw ConfigError("texture controls must be nonnegative");
    if (crack_width_px < 1) throw ConfigError("crack_width_px must be >= 1");
    if (crack_count < 0) throw ConfigError("crack_count must be nonnegative");
    if (occlusion_rate < 0.0) throw ConfigError("occlusion_rate must be nonnegative");
    if (shadow_strength < 0.0 || shadow_strength > 0.8) throw ConfigError("shadow_strength must be in [0, 0.8]");
}

namespace {

void paint_disc(cv::Mat& mask, double cx, double cy, double radius) {
    const int r = static_cast<int>(std::ceil(radius));
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            if (dx * dx + dy * dy > radius * radius) continue;
            const int x = static_cast<int>(std::lround(cx)) + dx;
            const int y = static_cast<int>(std::lround(cy)) + dy;
            if (x >= 0 && x < mask.cols && y >= 0 && y < mask.rows) mask.at<std::uint8_t>(y, x) = 1;
        }
    }
}

/// Random-walk polyline with border bounces so the full crack length always
/// lands inside the frame.
void walk_crack(cv::Mat& mask, Rng& rng, const SynthDomainParams& p) {
    const double margin = 0.1 * std::min(p.height, p.width);
    double x = rng.uniform(margin, p.width - margin);
    double y = rng.uniform(margin, p.height - margin);
    double theta = rng.uniform(0.0, 2.0 * M_PI);
    const int steps = static_cast<int>(0.8 * std::max(p.height, p.width));
    const double radius = 0.5 * p.crack_width_px;

    for (int s = 0; s < steps; ++s) {
        theta += rng.normal(0.0, 0.15);
        x += std::cos(theta);
        y += std::sin(theta);
        if (x < 1.0) { x = 1.0; theta = M_PI - theta; }
        if (x > p.width - 2.0) { x = p.width - 2.0; theta = M_PI - theta; }
        if (y < 1.0) { y = 1.0; theta = -theta; }
        if (y > p.height - 2.0) { y = p.height - 2.0; theta = -theta; }
        paint_disc(mask, x, y, radius);
    }
}

DomainSample render_one(const SynthDomainParams& p, std::uint64_t image_seed, Domain domain,
                        const std::string& sub_name, double* fraction_out) {
    Rng rng(image_seed);

    // Correlated background texture.
    cv::Mat gray(p.height, p.width, CV_32FC1);
    for (int y = 0; y < p.height; ++y) {
        for (int x = 0; x < p.width; ++x) gray.at<float>(y, x) = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    if (p.texture_amplitude > 0.0) {
        const int k = 2 * static_cast<int>(std::lround(p.texture_scale)) + 1;
        cv::Mat blurred;
        cv::blur(gray, blurred, cv::Size(k, k));
        cv::Scalar mean, stddev;
        cv::meanStdDev(blurred, mean, stddev);
        const double scale = stddev[0] > 1e-9 ? p.texture_amplitude / stddev[0] : 0.0;
        gray = (blurred - mean[0]) * scale + p.base_level;
    } else {
        gray.setTo(p.base_level);
    }

    // Cracks: flat dark value, mask records every painted pixel.
    cv::Mat mask = cv::Mat::zeros(p.height, p.width, CV_8UC1);
    for (int c = 0; c < p.crack_count; ++c) walk_crack(mask, rng, p);
    const float crack_value = static_cast<float>(p.base_level - p.contrast);
    gray.setTo(crack_value, mask);

    // Shadow: one smooth multiplicative blob.
    if (p.shadow_strength > 0.0) {
        const double cx = rng.uniform(0.0, p.width);
        const double cy = rng.uniform(0.0, p.height);
        const double sigma = rng.uniform(0.25, 0.5) * std::min(p.height, p.width);
        for (int y = 0; y < p.height; ++y) {
            for (int x = 0; x < p.width; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double blob = std::exp(-d2 / (2.0 * sigma * sigma));
                gray.at<float>(y, x) *= static_cast<float>(1.0 - p.shadow_strength * blob);
            }
        }
    }

    // Occluders cover cracks; covered pixels leave the mask.
    int occluders = static_cast<int>(std::floor(p.occlusion_rate));
    if (rng.uniform() < p.occlusion_rate - occluders) ++occluders;
    for (int o = 0; o < occluders; ++o) {
        const int w = static_cast<int>(rng.uniform(0.10, 0.28) * std::min(p.height, p.width));
        const int h = static_cast<int>(rng.uniform(0.10, 0.28) * std::min(p.height, p.width));
        const int x0 = static_cast<int>(rng.uniform_int(0, std::max(0, p.width - w - 1)));
        const int y0 = static_cast<int>(rng.uniform_int(0, std::max(0, p.height - h - 1)));
        const float color = static_cast<float>(rng.uniform(0.25, 0.9));
        const cv::Rect rect(x0, y0, std::max(1, w), std::max(1, h));
        gray(rect).setTo(color);
        mask(rect).setTo(std::uint8_t{0});
    }

    cv::min(gray, 1.0f, gray);
    cv::max(gray, 0.0f, gray);

    // Slight deterministic per-image channel tint.
    const double tr = 1.0 + rng.uniform(-0.03, 0.03);
    const double tg = 1.0 + rng.uniform(-0.03, 0.03);
    const double tb = 1.0 + rng.uniform(-0.03, 0.03);

    auto base = torch::from_blob(gray.data, {p.height, p.width}, torch::kFloat32).clone();
    auto image = torch::stack({(base * tr).clamp(0, 1), (base * tg).clamp(0, 1), (base * tb).clamp(0, 1)});

    auto label = torch::from_blob(mask.data, {p.height, p.width}, torch::kUInt8).clone().to(torch::kLong);
    if (fraction_out != nullptr) {
        *fraction_out = label.sum().item<double>() / (static_cast<double>(p.height) * p.width);
    }

    DomainSample sample;
    sample.image = image;
    sample.label = label;
    sample.sub_dataset = sub_name;
    sample.domain = domain;
    return sample;
}

}  // namespace

SynthDataset generate_synthetic_domain(const SynthDomainParams& params, int n, Domain domain,
                                       const std::string& sub_name) {
    params.validate();
    if (n < 1) throw ConfigError("need at least one synthetic image");

    SynthDataset dataset;
    dataset.samples.reserve(static_cast<std::size_t>(n));
    dataset.crack_fractions.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double fraction = 0.0;
        dataset.samples.push_back(render_one(params, Rng::mix(params.seed, static_cast<std::uint64_t>(i)),
                                             domain, sub_name, &fraction));
        dataset.crack_fractions.push_back(fraction);
    }
    return dataset;
}

SynthDomainParams synth_domain_a(std::uint64_t seed) {
    SynthDomainParams p;
    p.base_level = 0.72;
    p.contrast = 0.5;
    p.texture_scale = 2.0;
    p.texture_amplitude = 0.04;
    p.crack_width_px = 2;
    p.crack_count = 2;
    p.occlusion_rate = 0.0;
    p.shadow_strength = 0.0;
    p.seed = seed;
    return p;
}

SynthDomainParams synth_domain_b(std::uint64_t seed) {
    SynthDomainParams p;
    p.base_level = 0.58;
    p.contrast = 0.2;
    p.texture_scale = 4.0;
    p.texture_amplitude = 0.1;
    p.crack_width_px = 3;
    p.crack_count = 2;
    p.occlusion_rate = 0.25;
    p.shadow_strength = 0.3;
    p.seed = seed;
    return p;
}

void write_dataset_tree(const SynthDataset& dataset, const fs::path& dir, const std::string& sub_name) {
    const auto images_dir = dir / sub_name / "images";
    const auto masks_dir = dir / sub_name / "masks";
    fs::create_directories(images_dir);
    fs::create_directories(masks_dir);

    char stem[32];
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        std::snprintf(stem, sizeof(stem), "img_%05zu", i);
        const auto& sample = dataset.samples[i];

        const auto hw = sample.image.sizes();
        const int height = static_cast<int>(hw[1]);
        const int width = static_cast<int>(hw[2]);

        auto rgb8 = (sample.image * 255.0).round().clamp(0, 255).to(torch::kUInt8);
        auto hwc = rgb8.permute({1, 2, 0}).contiguous();
        cv::Mat rgb(height, width, CV_8UC3, hwc.data_ptr<std::uint8_t>());
        cv::Mat bgr;
        cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
        if (!cv::imwrite((images_dir / (std::string(stem) + ".png")).string(), bgr)) {
            throw IngestError("failed to write " + (images_dir / (std::string(stem) + ".png")).string());
        }

        auto mask8 = (sample.label.value() * 255).to(torch::kUInt8).contiguous();
        cv::Mat mask(height, width, CV_8UC1, mask8.data_ptr<std::uint8_t>());
        if (!cv::imwrite((masks_dir / (std::string(stem) + ".png")).string(), mask)) {
            throw IngestError("failed to write " + (masks_dir / (std::string(stem) + ".png")).string());
        }
    }
}

}  // namespace adaptseg
