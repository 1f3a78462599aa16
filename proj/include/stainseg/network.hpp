#pragma once

#include "stainseg/ops.hpp"
#include "stainseg/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace stainseg {

enum class Arch { unet, cd_unet };
const char* arch_name(Arch a);
Arch parse_arch(const std::string& s);

struct NetworkConfig {
    Arch arch = Arch::cd_unet;
    std::size_t base_width = 32; // filters in the first encoder stage
    std::size_t depth = 4;       // pooling steps; the bottleneck sits below the last one
    std::size_t in_channels = 3;
    std::size_t num_classes = 4;
    std::array<std::size_t, 2> cd_filters{6, 3};

    void validate() const;
    std::size_t divisor() const { return std::size_t{1} << depth; }
};

struct NamedBatchNorm {
    std::string name;
    ops::BatchNormState state;
};

struct TrainingMetadata {
    std::uint64_t epoch = 0;
    std::uint64_t seed = 0;
};

// CD-UNET / UNET as an explicit layer graph over the tensor ops.
//
//   cd-unet:  [conv1x1 3->6, BN, ReLU, conv1x1 6->3, BN, ReLU]  then the body
//   body:     depth x (2 x (conv3x3 pad 1, BN, ReLU), maxpool)
//             bottleneck 2 x (conv3x3, BN, ReLU)
//             depth x (up-conv 2x2 stride 2, concat skip, 2 x (conv3x3, BN, ReLU))
//             conv1x1 -> num_classes
//
// Stage i has base_width * 2^i channels. Softmax is applied by forward(),
// logits() exposes the pre-softmax scores.
class Model {
public:
    static Model build(const NetworkConfig& config, std::uint64_t seed);

    const NetworkConfig& config() const { return config_; }
    bool has_cd_segment() const { return config_.arch == Arch::cd_unet; }

    std::span<Parameter> parameters() { return params_; }
    std::span<const Parameter> parameters() const { return params_; }
    std::span<NamedBatchNorm> batchnorms() { return bns_; }
    std::span<const NamedBatchNorm> batchnorms() const { return bns_; }
    Parameter& parameter(const std::string& name);
    const Parameter* find_parameter(const std::string& name) const;

    // Trainable scalar count; running statistics are not included.
    std::size_t param_count() const;

    Tensor logits(Tape* tape, const Tensor& batch, ops::Mode mode);
    Tensor forward(Tape* tape, const Tensor& batch, ops::Mode mode);

    // Output of the whole colour-deconvolution segment, [N, 3, H, W].
    Tensor cd_segment(Tape* tape, const Tensor& batch, ops::Mode mode);
    // Raw response of the first 1x1 convolution, [N, 6, H, W].
    Tensor cd_first_conv(Tape* tape, const Tensor& batch);

    // Deep copy: parameters, momentum buffers and running statistics.
    Model clone() const;

    TrainingMetadata metadata;

private:
    struct ConvUnit {
        std::size_t weight, bias, gamma, beta, bn;
        std::size_t padding;
    };
    struct UpConv {
        std::size_t weight, bias;
    };

    Model() = default;
    std::size_t add_param(const std::string& name, Shape shape, double bound, std::uint64_t seed);
    ConvUnit add_unit(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::uint64_t seed);
    Tensor run_unit(Tape* tape, const ConvUnit& u, const Tensor& x, ops::Mode mode);
    void check_input(const Tensor& batch) const;

    NetworkConfig config_;
    std::vector<Parameter> params_;
    std::vector<NamedBatchNorm> bns_;
    std::vector<ConvUnit> cd_;
    std::vector<ConvUnit> encoder_;
    std::vector<ConvUnit> bottleneck_;
    std::vector<UpConv> up_;
    std::vector<ConvUnit> decoder_;
    UpConv head_{};
};

// Little-endian binary: "CDUN", u32 version, u32-length-prefixed UTF-8 config
// text, u32 record count, then per record: u32 name length, name bytes, u32
// rank, u32 dims, float32 values. Records cover parameters and running stats.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

} // namespace stainseg
