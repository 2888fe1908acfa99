#ifndef ADAPTSEG_SYNTH_HPP
#define ADAPTSEG_SYNTH_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adaptseg/data.hpp"

namespace adaptseg {

/// Controls for the procedural two-domain crack generator. Cracks are
/// random-walk polylines over a correlated-noise background, optionally
/// shadowed and occluded; masks are exactly the visible crack pixels.
struct SynthDomainParams {
    int height = 256;
    int width = 256;
    double base_level = 0.65;        // background gray
    double contrast = 0.45;          // crack value = base_level - contrast
    double texture_scale = 2.0;      // noise correlation length, px
    double texture_amplitude = 0.06;
    int crack_width_px = 2;
    int crack_count = 2;
    double occlusion_rate = 0.0;     // expected occluders per image
    double shadow_strength = 0.0;    // in [0, 0.8]
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthDataset {
    std::vector<DomainSample> samples;
    std::vector<double> crack_fractions;  // per image
};

/// Renders n images deterministically from params.seed. Bit-identical for
/// identical (params, n).
SynthDataset generate_synthetic_domain(const SynthDomainParams& params, int n,
                                       Domain domain = Domain::source,
                                       const std::string& sub_name = "synthetic");

/// Preset "domain A": bright, high contrast, thin clean cracks.
SynthDomainParams synth_domain_a(std::uint64_t seed);
/// Preset "domain B": darker, low contrast, coarse texture, shadows and
/// occlusions.
SynthDomainParams synth_domain_b(std::uint64_t seed);

/// Writes the dataset in the standard tree layout:
/// dir/<sub_name>/images/*.png and dir/<sub_name>/masks/*.png.
void write_dataset_tree(const SynthDataset& dataset, const std::filesystem::path& dir,
                        const std::string& sub_name);

}  // namespace adaptseg

#endif
