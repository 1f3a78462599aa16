#pragma once

#include "stainseg/augment.hpp"
#include "stainseg/dataset.hpp"
#include "stainseg/network.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stainseg {

struct TrainConfig {
    double base_lr = 0.001;
    double momentum = 0.9;
    std::size_t workers = 1;
    std::size_t per_worker_batch = 16;
    std::size_t epochs = 200;
    std::size_t eval_every = 10; // the final epoch is validated as well
    std::uint64_t seed = 0;
    // Median-frequency-balancing weights of the training split when unset.
    std::optional<std::array<double, kNumClasses>> class_weights;
    std::uint8_t ignore_id = kIgnoreLabel;
    // Batch norm in eval mode during training (running stats used and left untouched).
    bool freeze_batchnorm = false;
    bool augment = true;
    AugmentationConfig augmentation = AugmentationConfig::defaults();
    // Record real elapsed seconds; off keeps metrics files byte-identical across runs.
    bool log_wall_time = false;

    void validate() const;
};

double scaled_learning_rate(double base_lr, std::size_t workers);

// Worker threads used for replica gradients and evaluation: STAINSEG_THREADS
// when set, otherwise the hardware concurrency.
std::size_t thread_budget();

using ConfusionMatrix = std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses>; // [truth][pred]

// Per-pixel argmax over channels of [N, C, H, W]; the first maximum wins.
std::vector<std::uint8_t> predict_labels(const Tensor& probs);

ConfusionMatrix confusion_matrix(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth,
                                 std::uint8_t ignore_id = kIgnoreLabel);
void accumulate(ConfusionMatrix& into, const ConfusionMatrix& add);

struct F1Report {
    std::array<double, kNumClasses> precision{};
    std::array<double, kNumClasses> recall{};
    std::array<double, kNumClasses> f1{};
    std::array<std::uint64_t, kNumClasses> support{};
    std::array<bool, kNumClasses> defined{}; // false when a class is absent from truth and predictions
    double macro_f1 = 0.0;
    double loss = 0.0;

    static F1Report from_confusion(const ConfusionMatrix& m);
};

// One worker's mini-batch: images [B, 3, T, T] (BGR) and B*T*T labels.
struct Shard {
    Tensor images;
    std::vector<std::uint8_t> labels;
};

Shard make_shard(const Dataset& data, std::span<const std::size_t> tiles);

struct StepResult {
    double loss = 0.0;
    ConfusionMatrix confusion{};
};

// One synchronous data-parallel step: every worker replica computes gradients
// on its shard, gradients are summed pairwise in worker order and divided by
// the worker count, and one momentum step with scaled_learning_rate updates
// `model`. Running batch-norm statistics are averaged over workers.
StepResult sync_sgd_step(Model& model, std::span<const Shard> shards, const TrainConfig& config,
                         std::span<const double> class_weights);

F1Report evaluate(Model& model, const Dataset& data, Split split, std::span<const double> class_weights = {},
                  std::size_t batch_size = 8);
F1Report evaluate(Model& model, const Dataset& data, std::span<const std::size_t> tiles,
                  std::span<const double> class_weights = {}, std::size_t batch_size = 8);

struct MetricsRecord {
    std::size_t epoch = 0;
    Split split = Split::train;
    double loss = 0.0;
    std::array<double, kNumClasses> f1{};
    double macro_f1 = 0.0;
    double seconds = 0.0;
};

class MetricsLog {
public:
    // Throws unless the epoch is larger than the last one logged for the same split.
    void add(const MetricsRecord& r);
    const std::vector<MetricsRecord>& records() const { return records_; }
    std::vector<MetricsRecord> for_split(Split s) const;

    static constexpr const char* kHeader = "epoch,split,loss,f1_background,f1_tumor,f1_tissue,f1_necrosis,macro_f1,seconds";
    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
    static MetricsLog read_csv(const std::filesystem::path& path);

private:
    std::vector<MetricsRecord> records_;
};

struct TrainHooks {
    // Files written when set: final.ckpt, best.ckpt, metrics.csv.
    std::filesystem::path output_dir;
    std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
    Model model;
    Model best;
    MetricsLog log;
    std::size_t best_epoch = 0;
    double best_macro_f1 = -1.0;
    std::array<double, kNumClasses> class_weights{};
    bool diverged = false;
    std::string failure;
};

// Epoch = one seeded shuffled pass over the training tiles in global batches of
// workers * per_worker_batch. A trailing partial batch is split evenly over the
// workers; tiles that do not divide evenly sit out that epoch.
TrainResult train(const TrainConfig& config, const NetworkConfig& network, const Dataset& data,
                  const TrainHooks& hooks = {});

} // namespace stainseg
