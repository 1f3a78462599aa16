#include "stainseg/training.hpp"

#include "stainseg/optim.hpp"
#include "stainseg/random.hpp"
#include "stainseg/tape.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace stainseg {

namespace {

// Runs fn(i) for i in [0, n) on up to thread_budget() threads.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn)
{
    const std::size_t threads = std::min(n, thread_budget());
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error)
                        error = std::current_exception();
                }
            }
        });
    for (auto& th : pool)
        th.join();
    if (error)
        std::rethrow_exception(error);
}

std::size_t valid_pixels(std::span<const std::uint8_t> labels, std::uint8_t ignore_id)
{
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [&](auto l) { return l != ignore_id; }));
}

const std::array<double, kNumClasses> kUnitWeights{1.0, 1.0, 1.0, 1.0};

std::string fmt(double v)
{
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed << v;
    return os.str();
}

} // namespace

void TrainConfig::validate() const
{
    if (!(base_lr > 0.0))
        throw std::invalid_argument("train.base_lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("train.momentum must lie in [0, 1)");
    if (workers < 1)
        throw std::invalid_argument("train.workers must be >= 1");
    if (per_worker_batch < 1)
        throw std::invalid_argument("train.per_worker_batch must be >= 1");
    if (eval_every < 1)
        throw std::invalid_argument("train.eval_every must be >= 1");
    if (class_weights)
        for (double w : *class_weights)
            if (!(w >= 0.0) || !std::isfinite(w))
                throw std::invalid_argument("train.class_weights must be finite and >= 0");
    if (augment)
        augmentation.validate();
}

double scaled_learning_rate(double base_lr, std::size_t workers)
{
    if (workers < 1)
        throw std::invalid_argument("worker count must be >= 1");
    return base_lr * static_cast<double>(workers);
}

std::size_t thread_budget()
{
    if (const char* env = std::getenv("STAINSEG_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1)
            return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<std::uint8_t> predict_labels(const Tensor& probs)
{
    if (probs.rank() != 4)
        throw std::invalid_argument("predict_labels expects [N, C, H, W], got " + shape_str(probs.shape()));
    const auto n = probs.dim(0), c = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
    std::vector<std::uint8_t> out(n * plane);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
            std::size_t best = 0;
            double best_v = probs[b * c * plane + i];
            for (std::size_t k = 1; k < c; ++k) {
                const double v = probs[(b * c + k) * plane + i];
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            out[b * plane + i] = static_cast<std::uint8_t>(best);
        }
    return out;
}

ConfusionMatrix confusion_matrix(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth,
                                 std::uint8_t ignore_id)
{
    if (predicted.size() != truth.size())
        throw std::invalid_argument("confusion_matrix: " + std::to_string(predicted.size()) + " predictions for " +
                                    std::to_string(truth.size()) + " labels");
    ConfusionMatrix m{};
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == ignore_id)
            continue;
        if (truth[i] >= kNumClasses || predicted[i] >= kNumClasses)
            throw std::invalid_argument("confusion_matrix: label out of range at index " + std::to_string(i));
        ++m[truth[i]][predicted[i]];
    }
    return m;
}

void accumulate(ConfusionMatrix& into, const ConfusionMatrix& add)
{
    for (std::size_t t = 0; t < kNumClasses; ++t)
        for (std::size_t p = 0; p < kNumClasses; ++p)
            into[t][p] += add[t][p];
}

F1Report F1Report::from_confusion(const ConfusionMatrix& m)
{
    F1Report r;
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
        std::uint64_t predicted = 0, actual = 0;
        for (std::size_t j = 0; j < kNumClasses; ++j) {
            predicted += m[j][k];
            actual += m[k][j];
        }
        const auto tp = static_cast<double>(m[k][k]);
        r.support[k] = actual;
        r.precision[k] = predicted ? tp / static_cast<double>(predicted) : 0.0;
        r.recall[k] = actual ? tp / static_cast<double>(actual) : 0.0;
        const double pr = r.precision[k] + r.recall[k];
        r.f1[k] = pr > 0.0 ? 2.0 * r.precision[k] * r.recall[k] / pr : 0.0;
        r.defined[k] = predicted > 0 || actual > 0;
        if (r.defined[k]) {
            sum += r.f1[k];
            ++defined;
        }
    }
    r.macro_f1 = defined ? sum / static_cast<double>(defined) : 0.0;
    return r;
}

Shard make_shard(const Dataset& data, std::span<const std::size_t> tiles)
{
    if (tiles.empty())
        throw std::invalid_argument("make_shard: no tiles");
    const auto& first = data.tiles.at(tiles[0]).image;
    const std::size_t h = first.height, w = first.width, plane = h * w;
    Shard s;
    s.images = Tensor({tiles.size(), 3, h, w});
    s.labels.resize(tiles.size() * plane);
    for (std::size_t b = 0; b < tiles.size(); ++b) {
        const auto& t = data.tiles.at(tiles[b]);
        if (t.image.channels != 3 || t.image.height != h || t.image.width != w)
            throw std::invalid_argument("make_shard: tile " + std::to_string(tiles[b]) + " is not 3x" +
                                        std::to_string(h) + "x" + std::to_string(w));
        std::copy(t.image.data.begin(), t.image.data.end(), s.images.data().begin() + static_cast<long>(b * 3 * plane));
        std::copy(t.labels.data.begin(), t.labels.data.end(), s.labels.begin() + static_cast<long>(b * plane));
    }
    return s;
}

StepResult sync_sgd_step(Model& model, std::span<const Shard> shards, const TrainConfig& config,
                         std::span<const double> class_weights)
{
    const std::size_t k = shards.size();
    if (k != config.workers)
        throw std::invalid_argument("sync_sgd_step: " + std::to_string(k) + " shards for " +
                                    std::to_string(config.workers) + " workers");
    for (const auto& s : shards) {
        if (s.images.shape() != shards[0].images.shape())
            throw std::invalid_argument("sync_sgd_step: shard shape " + shape_str(s.images.shape()) + " differs from " +
                                        shape_str(shards[0].images.shape()));
        if (s.labels.size() != s.images.dim(0) * s.images.dim(2) * s.images.dim(3))
            throw std::invalid_argument("sync_sgd_step: shard label count does not match its images");
    }
    const auto weights = class_weights.empty() ? std::span<const double>(kUnitWeights) : class_weights;
    const auto mode = config.freeze_batchnorm ? ops::Mode::eval : ops::Mode::train;

    std::vector<Model> replicas;
    replicas.reserve(k);
    for (std::size_t w = 0; w < k; ++w) {
        replicas.push_back(model.clone());
        for (auto& p : replicas.back().parameters())
            p.value.drop_grad();
    }
    std::vector<double> losses(k);
    std::vector<ConfusionMatrix> confusions(k);
    parallel_for(k, [&](std::size_t w) {
        Tape tape;
        const Tensor probs = replicas[w].forward(&tape, shards[w].images, mode);
        const Tensor loss = ops::weighted_cross_entropy(&tape, probs, shards[w].labels, weights, config.ignore_id);
        tape.backward(loss);
        losses[w] = loss.item();
        confusions[w] = confusion_matrix(predict_labels(probs), shards[w].labels, config.ignore_id);
    });

    // Fixed-order pairwise reduction: sum(lo, hi) = sum(lo, mid) + sum(mid, hi).
    auto params = model.parameters();
    const auto reduce = [&](auto&& self, std::size_t p, std::size_t lo, std::size_t hi, std::vector<double>& out) -> void {
        if (hi - lo == 1) {
            auto& g = replicas[lo].parameters()[p].value;
            const auto src = std::as_const(g).grad();
            if (src.empty())
                std::fill(out.begin(), out.end(), 0.0);
            else
                std::copy(src.begin(), src.end(), out.begin());
            return;
        }
        const std::size_t mid = lo + (hi - lo) / 2;
        std::vector<double> right(out.size());
        self(self, p, lo, mid, out);
        self(self, p, mid, hi, right);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] += right[i];
    };
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::vector<double> total(params[p].value.numel());
        reduce(reduce, p, 0, k, total);
        auto g = params[p].value.grad();
        for (std::size_t i = 0; i < total.size(); ++i)
            g[i] = total[i] / static_cast<double>(k);
    }
    sgd_momentum_step(params, scaled_learning_rate(config.base_lr, config.workers), config.momentum);
    zero_grads(params);

    auto bns = model.batchnorms();
    for (std::size_t b = 0; b < bns.size(); ++b) {
        auto& dst = bns[b].state;
        for (std::size_t c = 0; c < dst.running_mean.size(); ++c) {
            double m = 0.0, v = 0.0;
            for (std::size_t w = 0; w < k; ++w) {
                m += replicas[w].batchnorms()[b].state.running_mean[c];
                v += replicas[w].batchnorms()[b].state.running_var[c];
            }
            dst.running_mean[c] = m / static_cast<double>(k);
            dst.running_var[c] = v / static_cast<double>(k);
        }
    }

    StepResult r;
    for (std::size_t w = 0; w < k; ++w) {
        r.loss += losses[w];
        accumulate(r.confusion, confusions[w]);
    }
    r.loss /= static_cast<double>(k);
    return r;
}

F1Report evaluate(Model& model, const Dataset& data, Split split, std::span<const double> class_weights,
                  std::size_t batch_size)
{
    const auto tiles = data.indices(split);
    if (tiles.empty())
        throw std::invalid_argument(std::string("cannot evaluate: split '") + split_name(split) + "' is empty");
    return evaluate(model, data, tiles, class_weights, batch_size);
}

F1Report evaluate(Model& model, const Dataset& data, std::span<const std::size_t> tiles,
                  std::span<const double> class_weights, std::size_t batch_size)
{
    if (tiles.empty())
        throw std::invalid_argument("cannot evaluate an empty tile set");
    batch_size = std::max<std::size_t>(batch_size, 1);
    const auto weights = class_weights.empty() ? std::span<const double>(kUnitWeights) : class_weights;
    const std::size_t batches = (tiles.size() + batch_size - 1) / batch_size;
    std::vector<ConfusionMatrix> confusions(batches);
    std::vector<double> loss_sums(batches);
    std::vector<std::size_t> counts(batches);
    parallel_for(batches, [&](std::size_t b) {
        const auto chunk = tiles.subspan(b * batch_size, std::min(batch_size, tiles.size() - b * batch_size));
        const Shard s = make_shard(data, chunk);
        const Tensor probs = model.forward(nullptr, s.images, ops::Mode::eval);
        confusions[b] = confusion_matrix(predict_labels(probs), s.labels);
        counts[b] = valid_pixels(s.labels, kIgnoreLabel);
        loss_sums[b] = ops::weighted_cross_entropy(nullptr, probs, s.labels, weights, kIgnoreLabel).item() *
                       static_cast<double>(counts[b]);
    });
    ConfusionMatrix total{};
    double loss = 0.0;
    std::size_t pixels = 0;
    for (std::size_t b = 0; b < batches; ++b) {
        accumulate(total, confusions[b]);
        loss += loss_sums[b];
        pixels += counts[b];
    }
    auto report = F1Report::from_confusion(total);
    report.loss = pixels ? loss / static_cast<double>(pixels) : 0.0;
    return report;
}

void MetricsLog::add(const MetricsRecord& r)
{
    for (auto it = records_.rbegin(); it != records_.rend(); ++it)
        if (it->split == r.split) {
            if (r.epoch <= it->epoch)
                throw std::invalid_argument("metrics log: epoch " + std::to_string(r.epoch) + " for split " +
                                            split_name(r.split) + " does not follow epoch " + std::to_string(it->epoch));
            break;
        }
    records_.push_back(r);
}

std::vector<MetricsRecord> MetricsLog::for_split(Split s) const
{
    std::vector<MetricsRecord> out;
    for (const auto& r : records_)
        if (r.split == s)
            out.push_back(r);
    return out;
}

std::string MetricsLog::to_csv() const
{
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : records_) {
        out += std::to_string(r.epoch) + "," + split_name(r.split) + "," + fmt(r.loss);
        for (double f : r.f1)
            out += "," + fmt(f);
        out += "," + fmt(r.macro_f1) + "," + fmt(r.seconds) + "\n";
    }
    return out;
}

void MetricsLog::write_csv(const std::filesystem::path& path) const
{
    std::ofstream f(path);
    if (!f)
        throw std::runtime_error("cannot write " + path.string());
    f << to_csv();
}

MetricsLog MetricsLog::read_csv(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != kHeader)
        throw std::runtime_error(path.string() + ": unexpected metrics header");
    MetricsLog log;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            cells.push_back(cell);
        if (cells.size() != 9)
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 9 columns");
        MetricsRecord r;
        r.epoch = std::stoul(cells[0]);
        r.split = parse_split(cells[1]);
        r.loss = std::stod(cells[2]);
        for (std::size_t k = 0; k < kNumClasses; ++k)
            r.f1[k] = std::stod(cells[3 + k]);
        r.macro_f1 = std::stod(cells[7]);
        r.seconds = std::stod(cells[8]);
        log.add(r);
    }
    return log;
}

TrainResult train(const TrainConfig& config, const NetworkConfig& network, const Dataset& data, const TrainHooks& hooks)
{
    config.validate();
    network.validate();
    auto train_tiles = data.indices(Split::train);
    const auto val_tiles = data.indices(Split::val);
    if (train_tiles.empty())
        throw std::invalid_argument("training split is empty");
    if (val_tiles.empty())
        throw std::invalid_argument("validation split is empty; run split_train_val or tag slides as val");

    std::array<double, kNumClasses> weights{};
    if (config.class_weights)
        weights = *config.class_weights;
    else
        weights = mfb_weights(class_frequencies(data, Split::train));

    Model model = Model::build(network, config.seed);
    model.metadata.seed = config.seed;
    Model best = model.clone();
    Model last_good = model.clone();
    MetricsLog log;
    std::size_t best_epoch = 0;
    double best_f1 = -1.0;
    const auto started = std::chrono::steady_clock::now();
    const auto elapsed = [&] {
        if (!config.log_wall_time)
            return 0.0;
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };
    const auto emit = [&](const MetricsRecord& r) {
        log.add(r);
        if (hooks.on_record)
            hooks.on_record(r);
    };
    const auto save_outputs = [&](const Model& final_model) {
        if (hooks.output_dir.empty())
            return;
        std::filesystem::create_directories(hooks.output_dir);
        save_checkpoint(final_model, hooks.output_dir / "final.ckpt");
        save_checkpoint(best, hooks.output_dir / "best.ckpt");
        log.write_csv(hooks.output_dir / "metrics.csv");
    };

    const std::size_t k = config.workers, b = config.per_worker_batch;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto epoch_seed = Rng::mix(config.seed, epoch);
        Rng rng(epoch_seed);
        rng.shuffle(train_tiles.begin(), train_tiles.end());

        ConfusionMatrix confusion{};
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < train_tiles.size();) {
            const std::size_t remaining = train_tiles.size() - start;
            const std::size_t per_shard = std::min(b, remaining / k);
            if (per_shard == 0)
                break;
            std::vector<Shard> shards;
            for (std::size_t w = 0; w < k; ++w) {
                std::vector<std::size_t> idx(train_tiles.begin() + static_cast<long>(start + w * per_shard),
                                             train_tiles.begin() + static_cast<long>(start + (w + 1) * per_shard));
                if (config.augment) {
                    Dataset tmp;
                    for (std::size_t j = 0; j < idx.size(); ++j) {
                        const auto pos = start + w * per_shard + j;
                        tmp.add(augment(data.tiles[idx[j]], config.augmentation, Rng::mix(epoch_seed, pos + 1)),
                                Split::train);
                        idx[j] = j;
                    }
                    shards.push_back(make_shard(tmp, idx));
                } else {
                    shards.push_back(make_shard(data, idx));
                }
            }
            start += k * per_shard;
            const auto step = sync_sgd_step(model, shards, config, weights);
            if (!std::isfinite(step.loss)) {
                MetricsRecord bad;
                bad.epoch = epoch;
                bad.loss = step.loss;
                bad.seconds = elapsed();
                TrainResult r{last_good, best, log, best_epoch, best_f1, weights, true,
                              "loss became non-finite at epoch " + std::to_string(epoch) + "; kept the model from epoch " +
                                  std::to_string(last_good.metadata.epoch)};
                save_outputs(last_good);
                return r;
            }
            loss_sum += step.loss;
            ++steps;
            accumulate(confusion, step.confusion);
        }
        model.metadata.epoch = epoch;

        const auto train_report = F1Report::from_confusion(confusion);
        MetricsRecord tr;
        tr.epoch = epoch;
        tr.split = Split::train;
        tr.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
        tr.f1 = train_report.f1;
        tr.macro_f1 = train_report.macro_f1;
        tr.seconds = elapsed();
        emit(tr);

        if (epoch % config.eval_every == 0 || epoch == config.epochs) {
            const auto report = evaluate(model, data, val_tiles, weights);
            MetricsRecord vr;
            vr.epoch = epoch;
            vr.split = Split::val;
            vr.loss = report.loss;
            vr.f1 = report.f1;
            vr.macro_f1 = report.macro_f1;
            vr.seconds = elapsed();
            emit(vr);
            if (report.macro_f1 > best_f1) {
                best_f1 = report.macro_f1;
                best_epoch = epoch;
                best = model.clone();
            }
        }
        last_good = model.clone();
    }
    save_outputs(model);
    return TrainResult{model, best, log, best_epoch, best_f1, weights, false, {}};
}

} // namespace stainseg
