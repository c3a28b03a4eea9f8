#pragma once

#include <string>
#include <vector>

namespace msca {

/// Architecture hyperparameters shared by the pyramid, attention and decoder.
/// Per-scale vectors are indexed by scale i = 0 (finest) .. levels (coarsest).
struct ModelConfig {
    int levels = 4;               // L; the model has L + 1 scales
    int classes = 8;              // M, label vocabulary size
    int image_channels = 32;      // N, compressed image-feature width
    int label_width = 32;         // label-feature width at every scale
    std::vector<int> backbone_channels{16, 24, 32, 32, 32};
    std::vector<int> attention_slots{8, 16, 16, 16, 16};  // K per scale
    std::vector<int> decoder_channels{32, 48, 64, 96, 128};
    int spade_hidden = 32;
    std::vector<int> disc_channels{32, 64, 64, 64};

    int scales() const { return levels + 1; }
    int divisor() const { return 1 << levels; }

    // Throws std::invalid_argument when per-scale vectors disagree with levels.
    void validate() const;

    // Small variant used by gradient checks and fast unit tests.
    static ModelConfig tiny(int levels = 2, int classes = 3);
};

}  // namespace msca
