#include "run_config.hpp"

#include "stainseg/dataset.hpp"
#include "stainseg/generate.hpp"
#include "stainseg/inference.hpp"
#include "stainseg/introspection.hpp"
#include "stainseg/training.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace stainseg;
using stainseg::cli::RunConfig;

namespace {

// Failures after validation; reported with exit code 2.
struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Args {
    std::string config_file;
    std::string stats_split = "train";
    std::string eval_split = "val";
    std::string checkpoint;
    std::string csv;
    std::string input;
    std::string output;
    std::string mode;
};

std::string fixed(double v, int digits = 4)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

fs::path checkpoint_path(const RunConfig& cfg, const Args& args)
{
    return args.checkpoint.empty() ? fs::path(cfg.get("train.output")) / "best.ckpt" : fs::path(args.checkpoint);
}

Model open_model(const fs::path& path)
{
    if (!fs::exists(path))
        throw std::invalid_argument("checkpoint " + path.string() + " does not exist");
    return load_checkpoint(path);
}

Dataset open_dataset(const RunConfig& cfg)
{
    const fs::path dir = cfg.get("data.dir");
    if (!fs::exists(dir / "manifest.tsv"))
        throw std::invalid_argument("no dataset at " + dir.string() + " (run 'stainseg synth' first)");
    return read_dataset(dir);
}

// Loss weights for eval and stats: configured, else MFB of the training split, else unit.
std::array<double, kNumClasses> loss_weights(const RunConfig& cfg, const Dataset& data)
{
    if (const auto w = cfg.train().class_weights)
        return *w;
    try {
        return mfb_weights(class_frequencies(data, Split::train));
    } catch (const std::exception&) {
        std::array<double, kNumClasses> unit{};
        unit.fill(1.0);
        return unit;
    }
}

int cmd_synth(const RunConfig& cfg)
{
    const SynthConfig sc = cfg.synth();
    const fs::path dir = cfg.get("data.dir");
    auto out = generate_dataset(sc);
    for (const auto& w : out.warnings)
        std::cerr << "warning: " << w << "\n";
    fs::create_directories(dir);
    write_dataset(dir, out.dataset);
    std::ofstream(dir / "synth.ini") << cfg.to_ini();
    std::cout << "wrote " << out.dataset.tiles.size() << " tiles of " << sc.tile_size << "x" << sc.tile_size << " to "
              << dir.string() << " (train " << out.dataset.manifest.count(Split::train) << ", val "
              << out.dataset.manifest.count(Split::val) << ", test " << out.dataset.manifest.count(Split::test) << ")\n";
    return 0;
}

int cmd_stats(const RunConfig& cfg, const Args& args)
{
    const Split split = parse_split(args.stats_split);
    const Dataset data = open_dataset(cfg);
    const ClassStats stats = class_frequencies(data, split);
    std::array<double, kNumClasses> weights{};
    std::string weight_error;
    try {
        weights = mfb_weights(stats);
    } catch (const std::invalid_argument& e) {
        weight_error = e.what();
    }
    std::printf("split %s: %zu tiles, %llu labelled pixels\n", split_name(split), data.manifest.count(split),
                static_cast<unsigned long long>(stats.total));
    std::printf("%-12s %12s %10s %10s\n", "class", "pixels", "frequency", "mfb");
    for (std::size_t c = 0; c < kNumClasses; ++c)
        std::printf("%-12s %12llu %10.4f %10s\n", class_name(c), static_cast<unsigned long long>(stats.counts[c]),
                    stats.frequencies[c], weight_error.empty() ? fixed(weights[c]).c_str() : "-");
    if (!weight_error.empty())
        std::cerr << "note: " << weight_error << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg)
{
    const TrainConfig tc = cfg.train();
    const NetworkConfig nc = cfg.network();
    const Dataset data = open_dataset(cfg);
    TrainHooks hooks;
    hooks.output_dir = cfg.get("train.output");
    fs::create_directories(hooks.output_dir);
    std::ofstream(hooks.output_dir / "config.ini") << cfg.to_ini();
    hooks.on_record = [](const MetricsRecord& r) {
        std::cerr << "epoch " << r.epoch << " " << split_name(r.split) << " loss " << fixed(r.loss) << " macro_f1 "
                  << fixed(r.macro_f1) << "\n";
    };
    const TrainResult result = train(tc, nc, data, hooks);
    if (result.diverged)
        throw RuntimeFailure(result.failure);
    std::cout << "best epoch " << result.best_epoch << " val macro F1 " << fixed(result.best_macro_f1) << "; wrote "
              << hooks.output_dir.string() << "/{final.ckpt,best.ckpt,metrics.csv}\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const Args& args)
{
    const Split split = parse_split(args.eval_split);
    const fs::path ckpt = checkpoint_path(cfg, args);
    const Dataset data = open_dataset(cfg);
    if (data.manifest.count(split) == 0)
        throw std::invalid_argument(std::string("split ") + split_name(split) + " is empty");
    Model model = open_model(ckpt);
    const auto weights = loss_weights(cfg, data);
    const F1Report r = evaluate(model, data, split, weights);

    std::string csv = "split,loss,f1_background,f1_tumor,f1_tissue,f1_necrosis,macro_f1\n";
    csv += split_name(split);
    csv += "," + fixed(r.loss, 6);
    for (double f : r.f1)
        csv += "," + fixed(f, 6);
    csv += "," + fixed(r.macro_f1, 6) + "\n";
    std::cout << csv;
    if (!args.csv.empty())
        std::ofstream(args.csv) << csv;

    std::fprintf(stderr, "%-12s %10s %10s %10s %12s\n", "class", "precision", "recall", "f1", "support");
    for (std::size_t c = 0; c < kNumClasses; ++c)
        std::fprintf(stderr, "%-12s %10s %10s %10s %12llu\n", class_name(c),
                     r.defined[c] ? fixed(r.precision[c]).c_str() : "-", r.defined[c] ? fixed(r.recall[c]).c_str() : "-",
                     r.defined[c] ? fixed(r.f1[c]).c_str() : "-", static_cast<unsigned long long>(r.support[c]));
    std::fprintf(stderr, "%-12s %32s\n", "macro", fixed(r.macro_f1).c_str());
    return 0;
}

int cmd_infer(const RunConfig& cfg, const Args& args)
{
    if (args.input.empty() || args.output.empty())
        throw std::invalid_argument("infer needs --input and --output");
    const std::size_t tile = cfg.get_size("data.tile-size");
    const std::size_t stride = cfg.get_size("data.stride");
    if (stride < 1 || stride > tile)
        throw std::invalid_argument("data.stride must lie in [1, data.tile-size]");
    Model model = open_model(checkpoint_path(cfg, args));
    const Image rgb = read_ppm(args.input);
    const Image probs = infer_probabilities(model, rgb, tile, stride);
    const LabelMap labels = argmax_labels(probs);
    const fs::path out = args.output;
    if (out.has_parent_path())
        fs::create_directories(out.parent_path());
    write_ppm(out, colorize_labels(labels));
    std::cout << "wrote " << labels.height << "x" << labels.width << " label map to " << out.string() << "\n";
    return 0;
}

Image normalized(const Image& g)
{
    Image out = g;
    const double peak = *std::max_element(g.data.begin(), g.data.end());
    if (peak > 0.0)
        for (auto& v : out.data)
            v /= peak;
    return out;
}

int cmd_viz(const RunConfig& cfg, const Args& args)
{
    const VizOptions opts = cfg.viz();
    const auto seed = std::to_string(opts.seed);
    const std::size_t row = cfg.get_size("viz.row"), col = cfg.get_size("viz.col");
    const std::size_t category = cfg.get_size("viz.category");
    const bool needs_input = args.mode == "smoothgrad" || args.mode == "cd";
    if (args.mode != "filters" && args.mode != "output" && !needs_input)
        throw std::invalid_argument("viz --mode must be one of filters, output, smoothgrad, cd");
    if (needs_input && args.input.empty())
        throw std::invalid_argument("viz --mode " + args.mode + " needs --input (an RGB tile)");
    Model model = open_model(checkpoint_path(cfg, args));
    const fs::path dir = cfg.get("viz.output");
    fs::create_directories(dir);
    const std::string target = "_r" + std::to_string(row) + "_c" + std::to_string(col) + "_k" + std::to_string(category);

    if (args.mode == "filters") {
        std::vector<HueSummary> hues;
        for (std::size_t f = 0; f < model.config().cd_filters[0]; ++f) {
            const auto r = maximize_filter_activation(model, f, opts);
            const Image rgb = swap_red_blue(r.image);
            write_ppm(dir / ("filter_f" + std::to_string(f) + "_seed" + seed + ".ppm"), rgb);
            hues.push_back(dominant_hue(rgb));
            std::cout << "filter " << f << " hue " << fixed(hues.back().hue, 1) << " saturation "
                      << fixed(hues.back().saturation, 3) << " objective " << fixed(r.initial_objective) << " -> "
                      << fixed(r.final_objective) << "\n";
        }
        double min_gap = 360.0;
        bool chromatic = true;
        for (std::size_t a = 0; a < hues.size(); ++a) {
            chromatic = chromatic && hues[a].saturation > 0.0;
            for (std::size_t b = a + 1; b < hues.size(); ++b)
                min_gap = std::min(min_gap, hue_distance(hues[a].hue, hues[b].hue));
        }
        const double margin = cfg.get_double("viz.hue-margin");
        std::cout << "minimum pairwise hue distance " << fixed(min_gap, 1) << " (margin " << fixed(margin, 1) << "): "
                  << (chromatic && min_gap > margin ? "distinct" : "not distinct") << "\n";
    } else if (args.mode == "output") {
        const auto r = maximize_output_activation(model, row, col, category, opts);
        const fs::path out = dir / ("output" + target + "_seed" + seed + ".ppm");
        write_ppm(out, swap_red_blue(r.image));
        std::cout << "objective " << fixed(r.initial_objective) << " -> " << fixed(r.final_objective) << "; wrote "
                  << out.string() << "\n";
    } else {
        const Image bgr = swap_red_blue(read_ppm(args.input));
        if (args.mode == "smoothgrad") {
            const auto a = smoothgrad(model, bgr, row, col, category, opts);
            const std::string stem = "smoothgrad" + target + "_seed" + seed;
            write_pgm(dir / (stem + "_gradient.pgm"), normalized(a.gradient));
            write_pgm(dir / (stem + "_mask.pgm"), a.mask);
            write_ppm(dir / (stem + "_overlay.ppm"), swap_red_blue(a.overlay));
            std::cout << "wrote " << (dir / stem).string() << "_{gradient.pgm,mask.pgm,overlay.ppm}\n";
        } else {
            const auto out = cd_segment_outputs(model, bgr);
            for (std::size_t c = 0; c < 3; ++c) {
                write_pgm(dir / ("cd_ch" + std::to_string(c) + ".pgm"), out.normalized[c]);
                const auto [lo, hi] = std::minmax_element(out.raw[c].data.begin(), out.raw[c].data.end());
                std::cout << "channel " << c << " raw range [" << fixed(*lo) << ", " << fixed(*hi) << "]\n";
            }
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-stain histopathology segmentation with a learned colour-deconvolution front end"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    Args args;
    std::map<std::string, std::string> flag_values;
    std::vector<std::pair<CLI::Option*, std::string>> flag_options;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"synth", "Generate virtual slides, tile them and write a dataset directory"},
        {"stats", "Print class frequencies and median-frequency-balancing weights"},
        {"train", "Train unet or cd-unet with simulated synchronous SGD"},
        {"eval", "Per-class F1 of a checkpoint on a dataset split"},
        {"infer", "Segment an RGB image of any size and write a colour label map"},
        {"viz", "Activation maximization, SmoothGrad and colour-deconvolution channel maps"},
    };
    for (const auto& [name, description] : commands) {
        CLI::App* sub = app.add_subcommand(name, description);
        sub->add_option("--config", args.config_file, "INI config file with [data] [network] [train] [viz] sections")
            ->check(CLI::ExistingFile);
        for (const auto& k : RunConfig::keys())
            flag_options.emplace_back(
                sub->add_option("--" + k.key, flag_values[k.key], k.help + " (default: " + k.default_value + ")"), k.key);
        const std::vector<std::pair<std::string, std::string>> aliases{
            {"--slides", "data.slides"}, {"--stains", "data.stains"}, {"--arch", "network.arch"},
            {"--epochs", "train.epochs"}, {"--data", "data.dir"},
        };
        for (const auto& [flag, key] : aliases)
            flag_options.emplace_back(sub->add_option(flag, flag_values[key], "alias of --" + key), key);
        if (name == "synth")
            flag_options.emplace_back(sub->add_option("--out", flag_values["data.dir"], "alias of --data.dir"), "data.dir");
        if (name == "train")
            flag_options.emplace_back(sub->add_option("--out", flag_values["train.output"], "alias of --train.output"),
                                      "train.output");
        if (name == "viz")
            flag_options.emplace_back(sub->add_option("--out", flag_values["viz.output"], "alias of --viz.output"),
                                      "viz.output");
        if (name == "stats" || name == "eval")
            sub->add_option("--split", name == "stats" ? args.stats_split : args.eval_split, "train, val or test")
                ->capture_default_str();
        if (name == "eval" || name == "infer" || name == "viz")
            sub->add_option("--checkpoint", args.checkpoint, "checkpoint file (default: <train.output>/best.ckpt)");
        if (name == "eval")
            sub->add_option("--csv", args.csv, "also write the CSV row to this file");
        if (name == "infer" || name == "viz")
            sub->add_option("--input", args.input, "RGB PPM image");
        if (name == "infer")
            sub->add_option("--output", args.output, "colour label map to write (PPM)");
        if (name == "viz")
            sub->add_option("--mode", args.mode, "filters | output | smoothgrad | cd")->required();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    const CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    try {
        RunConfig cfg;
        if (!args.config_file.empty())
            cfg.load_file(args.config_file);
        for (const auto& [option, key] : flag_options)
            if (option->count() > 0)
                cfg.set(key, flag_values[key]);
        cfg.seed();
        if (command == "synth")
            return cmd_synth(cfg);
        if (command == "stats")
            return cmd_stats(cfg, args);
        if (command == "train")
            return cmd_train(cfg);
        if (command == "eval")
            return cmd_eval(cfg, args);
        if (command == "infer")
            return cmd_infer(cfg, args);
        return cmd_viz(cfg, args);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << command << " failed: " << e.what() << "\n";
        return 2;
    }
}
