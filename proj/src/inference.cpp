#include "stainseg/inference.hpp"

#include "stainseg/dataset.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace stainseg {

Image infer_probabilities(Model& model, const Image& rgb, std::size_t tile_size, std::size_t stride,
                          std::size_t batch_size)
{
    if (rgb.channels != 3)
        throw std::invalid_argument("infer: expected a 3-channel RGB image");
    if (tile_size > rgb.height || tile_size > rgb.width)
        throw std::invalid_argument("infer: image " + std::to_string(rgb.height) + "x" + std::to_string(rgb.width) +
                                    " is smaller than the tile size " + std::to_string(tile_size));
    if (stride < 1 || stride > tile_size)
        throw std::invalid_argument("infer: stride must lie in [1, tile_size]");
    batch_size = std::max<std::size_t>(batch_size, 1);

    struct Origin {
        std::size_t row, col;
    };
    std::vector<Origin> origins;
    for (auto r : tile_offsets(rgb.height, tile_size, stride))
        for (auto c : tile_offsets(rgb.width, tile_size, stride))
            origins.push_back({r, c});

    const std::size_t classes = model.config().num_classes;
    const std::size_t plane = tile_size * tile_size;
    Image sum(classes, rgb.height, rgb.width);
    std::vector<double> count(rgb.height * rgb.width, 0.0);
    for (std::size_t first = 0; first < origins.size(); first += batch_size) {
        const std::size_t n = std::min(batch_size, origins.size() - first);
        Tensor batch({n, 3, tile_size, tile_size});
        auto b = batch.data();
        for (std::size_t i = 0; i < n; ++i) {
            const auto [r0, c0] = origins[first + i];
            for (std::size_t c = 0; c < 3; ++c) // RGB -> BGR
                for (std::size_t y = 0; y < tile_size; ++y)
                    for (std::size_t x = 0; x < tile_size; ++x)
                        b[(i * 3 + c) * plane + y * tile_size + x] = rgb.at(2 - c, r0 + y, c0 + x);
        }
        const Tensor probs = model.forward(nullptr, batch, ops::Mode::eval);
        const auto p = probs.data();
        for (std::size_t i = 0; i < n; ++i) {
            const auto [r0, c0] = origins[first + i];
            for (std::size_t y = 0; y < tile_size; ++y)
                for (std::size_t x = 0; x < tile_size; ++x) {
                    for (std::size_t k = 0; k < classes; ++k)
                        sum.at(k, r0 + y, c0 + x) += p[(i * classes + k) * plane + y * tile_size + x];
                    count[(r0 + y) * rgb.width + c0 + x] += 1.0;
                }
        }
    }
    for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t i = 0; i < count.size(); ++i)
            sum.data[k * count.size() + i] /= count[i];
    return sum;
}

LabelMap argmax_labels(const Image& probs)
{
    LabelMap out(probs.height, probs.width);
    const auto plane = probs.plane();
    for (std::size_t i = 0; i < plane; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < probs.channels; ++k)
            if (probs.data[k * plane + i] > probs.data[best * plane + i])
                best = k;
        out.data[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

} // namespace stainseg
