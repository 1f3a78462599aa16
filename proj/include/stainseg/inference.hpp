#pragma once

#include "stainseg/image.hpp"
#include "stainseg/network.hpp"

namespace stainseg {

// Whole-image inference: tiles the RGB image with edge-flush offsets, runs
// eval-mode forward on each tile, and averages the class probabilities of
// overlapping tiles. Returns [num_classes, H, W].
Image infer_probabilities(Model& model, const Image& rgb, std::size_t tile_size, std::size_t stride,
                          std::size_t batch_size = 8);

// Per-pixel argmax of a probability image; the first maximum wins.
LabelMap argmax_labels(const Image& probs);

} // namespace stainseg
