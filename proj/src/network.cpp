#include "stainseg/network.hpp"

#include "stainseg/random.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>

namespace stainseg {

const char* arch_name(Arch a)
{
    return a == Arch::unet ? "unet" : "cd-unet";
}

Arch parse_arch(const std::string& s)
{
    if (s == "unet")
        return Arch::unet;
    if (s == "cd-unet" || s == "cdunet" || s == "cd_unet")
        return Arch::cd_unet;
    throw std::invalid_argument("unknown architecture '" + s + "' (expected unet or cd-unet)");
}

void NetworkConfig::validate() const
{
    if (base_width < 1)
        throw std::invalid_argument("network.base_width must be >= 1");
    if (depth < 1 || depth > 8)
        throw std::invalid_argument("network.depth must lie in [1, 8]");
    if (in_channels != 3)
        throw std::invalid_argument("network.in_channels must be 3");
    if (num_classes < 2)
        throw std::invalid_argument("network.num_classes must be >= 2");
    if (arch == Arch::cd_unet && (cd_filters[0] != 6 || cd_filters[1] != 3))
        throw std::invalid_argument("cd-unet requires colour-deconvolution filters (6, 3)");
}

std::size_t Model::add_param(const std::string& name, Shape shape, double bound, std::uint64_t seed)
{
    Tensor t(std::move(shape), 0.0);
    if (bound > 0.0) {
        Rng rng(Rng::mix(seed, params_.size()));
        for (auto& v : t.data())
            v = rng.uniform(-bound, bound);
    }
    params_.emplace_back(name, std::move(t));
    return params_.size() - 1;
}

Model::ConvUnit Model::add_unit(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                                std::uint64_t seed)
{
    ConvUnit u{};
    const double fan_in = static_cast<double>(cin * k * k);
    u.weight = add_param(name + ".conv.weight", {cout, cin, k, k}, std::sqrt(6.0 / fan_in), seed);
    u.bias = add_param(name + ".conv.bias", {cout}, 0.0, seed);
    u.gamma = add_param(name + ".bn.gamma", {cout}, 0.0, seed);
    for (auto& g : params_[u.gamma].value.data())
        g = 1.0;
    u.beta = add_param(name + ".bn.beta", {cout}, 0.0, seed);
    bns_.push_back({name + ".bn", ops::BatchNormState(cout)});
    u.bn = bns_.size() - 1;
    u.padding = (k - 1) / 2;
    return u;
}

Model Model::build(const NetworkConfig& config, std::uint64_t seed)
{
    config.validate();
    Model m;
    m.config_ = config;
    m.metadata.seed = seed;

    std::size_t ch = config.in_channels;
    if (config.arch == Arch::cd_unet) {
        m.cd_.push_back(m.add_unit("cd.1", ch, config.cd_filters[0], 1, seed));
        m.cd_.push_back(m.add_unit("cd.2", config.cd_filters[0], config.cd_filters[1], 1, seed));
        ch = config.cd_filters[1];
    }
    const auto width = [&](std::size_t level) { return config.base_width << level; };
    for (std::size_t i = 0; i < config.depth; ++i) {
        const auto name = "enc" + std::to_string(i);
        m.encoder_.push_back(m.add_unit(name + ".1", ch, width(i), 3, seed));
        m.encoder_.push_back(m.add_unit(name + ".2", width(i), width(i), 3, seed));
        ch = width(i);
    }
    m.bottleneck_.push_back(m.add_unit("bottleneck.1", ch, width(config.depth), 3, seed));
    m.bottleneck_.push_back(m.add_unit("bottleneck.2", width(config.depth), width(config.depth), 3, seed));
    ch = width(config.depth);

    m.up_.resize(config.depth);
    m.decoder_.resize(2 * config.depth);
    for (std::size_t step = 0; step < config.depth; ++step) {
        const std::size_t i = config.depth - 1 - step;
        const auto name = "dec" + std::to_string(i);
        UpConv up{};
        up.weight = m.add_param(name + ".up.weight", {ch, width(i), 2, 2}, std::sqrt(6.0 / static_cast<double>(ch)), seed);
        up.bias = m.add_param(name + ".up.bias", {width(i)}, 0.0, seed);
        m.up_[i] = up;
        m.decoder_[2 * i] = m.add_unit(name + ".1", 2 * width(i), width(i), 3, seed);
        m.decoder_[2 * i + 1] = m.add_unit(name + ".2", width(i), width(i), 3, seed);
        ch = width(i);
    }
    m.head_.weight = m.add_param("head.weight", {config.num_classes, ch, 1, 1}, std::sqrt(6.0 / static_cast<double>(ch)), seed);
    m.head_.bias = m.add_param("head.bias", {config.num_classes}, 0.0, seed);
    return m;
}

Parameter& Model::parameter(const std::string& name)
{
    for (auto& p : params_)
        if (p.name == name)
            return p;
    throw std::invalid_argument("model has no parameter '" + name + "'");
}

const Parameter* Model::find_parameter(const std::string& name) const
{
    for (const auto& p : params_)
        if (p.name == name)
            return &p;
    return nullptr;
}

std::size_t Model::param_count() const
{
    std::size_t n = 0;
    for (const auto& p : params_)
        n += p.value.numel();
    return n;
}

void Model::check_input(const Tensor& batch) const
{
    if (batch.rank() != 4 || batch.dim(1) != config_.in_channels)
        throw std::invalid_argument("model input must be [N, " + std::to_string(config_.in_channels) +
                                    ", H, W], got " + shape_str(batch.shape()));
    const auto d = config_.divisor();
    if (batch.dim(2) % d != 0 || batch.dim(3) % d != 0)
        throw std::invalid_argument("model input spatial size " + std::to_string(batch.dim(2)) + "x" +
                                    std::to_string(batch.dim(3)) + " must be divisible by " + std::to_string(d) +
                                    " (2^depth)");
}

Tensor Model::run_unit(Tape* tape, const ConvUnit& u, const Tensor& x, ops::Mode mode)
{
    Tensor h = ops::conv2d(tape, x, params_[u.weight].value, params_[u.bias].value, u.padding);
    h = ops::batchnorm(tape, h, params_[u.gamma].value, params_[u.beta].value, bns_[u.bn].state, mode);
    return ops::relu(tape, h);
}

Tensor Model::cd_first_conv(Tape* tape, const Tensor& batch)
{
    if (!has_cd_segment())
        throw std::invalid_argument("model has no colour-deconvolution segment");
    check_input(batch);
    const auto& u = cd_[0];
    return ops::conv2d(tape, batch, params_[u.weight].value, params_[u.bias].value, 0);
}

Tensor Model::cd_segment(Tape* tape, const Tensor& batch, ops::Mode mode)
{
    if (!has_cd_segment())
        throw std::invalid_argument("model has no colour-deconvolution segment");
    if (batch.rank() != 4 || batch.dim(1) != config_.in_channels)
        throw std::invalid_argument("cd segment input must be [N, 3, H, W], got " + shape_str(batch.shape()));
    Tensor h = run_unit(tape, cd_[0], batch, mode);
    return run_unit(tape, cd_[1], h, mode);
}

Tensor Model::logits(Tape* tape, const Tensor& batch, ops::Mode mode)
{
    check_input(batch);
    Tensor h = batch;
    for (const auto& u : cd_)
        h = run_unit(tape, u, h, mode);

    std::vector<Tensor> skips;
    for (std::size_t i = 0; i < config_.depth; ++i) {
        h = run_unit(tape, encoder_[2 * i], h, mode);
        h = run_unit(tape, encoder_[2 * i + 1], h, mode);
        skips.push_back(h);
        h = ops::maxpool2(tape, h);
    }
    for (const auto& u : bottleneck_)
        h = run_unit(tape, u, h, mode);
    for (std::size_t step = 0; step < config_.depth; ++step) {
        const std::size_t i = config_.depth - 1 - step;
        h = ops::conv_transpose2d(tape, h, params_[up_[i].weight].value, params_[up_[i].bias].value);
        h = ops::concat_channels(tape, skips[i], h);
        h = run_unit(tape, decoder_[2 * i], h, mode);
        h = run_unit(tape, decoder_[2 * i + 1], h, mode);
    }
    return ops::conv2d(tape, h, params_[head_.weight].value, params_[head_.bias].value, 0);
}

Tensor Model::forward(Tape* tape, const Tensor& batch, ops::Mode mode)
{
    return ops::softmax_channels(tape, logits(tape, batch, mode));
}

Model Model::clone() const
{
    Model m = *this;
    for (auto& p : m.params_)
        p = p.deep_copy();
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'C', 'D', 'U', 'N'};

void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f)
{
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

void put_record(std::string& out, const std::string& name, const Shape& shape, std::span<const double> values)
{
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape)
        put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : values)
        put_f32(out, static_cast<float>(v));
}

class Reader {
public:
    Reader(const std::string& buf, const std::filesystem::path& path) : buf_(buf), path_(path) {}

    std::uint32_t u32()
    {
        need(4, "integer");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes(std::size_t n)
    {
        need(n, "string");
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n, const char* what) const
    {
        if (pos_ + n > buf_.size())
            throw std::runtime_error(path_.string() + ": truncated checkpoint (reading " + what + " at byte " +
                                     std::to_string(pos_) + " of " + std::to_string(buf_.size()) + ")");
    }
    const std::string& buf_;
    std::filesystem::path path_;
    std::size_t pos_ = 0;
};

std::string config_text(const Model& m)
{
    const auto& c = m.config();
    std::ostringstream os;
    os << "arch=" << arch_name(c.arch) << '\n'
       << "base_width=" << c.base_width << '\n'
       << "depth=" << c.depth << '\n'
       << "in_channels=" << c.in_channels << '\n'
       << "num_classes=" << c.num_classes << '\n'
       << "epoch=" << m.metadata.epoch << '\n'
       << "seed=" << m.metadata.seed << '\n';
    return os.str();
}

} // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path)
{
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    const auto text = config_text(model);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;

    const auto params = model.parameters();
    const auto bns = model.batchnorms();
    put_u32(out, static_cast<std::uint32_t>(params.size() + 2 * bns.size()));
    for (const auto& p : params)
        put_record(out, p.name, p.value.shape(), p.value.data());
    for (const auto& bn : bns) {
        const Shape s{bn.state.running_mean.size()};
        put_record(out, bn.name + ".running_mean", s, bn.state.running_mean);
        put_record(out, bn.name + ".running_var", s, bn.state.running_var);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f)
        throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot read checkpoint " + path.string());
    const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(buf, path);

    if (r.bytes(4) != std::string(kMagic, 4))
        throw std::runtime_error(path.string() + ": not a checkpoint (bad magic)");
    if (const auto v = r.u32(); v != kCheckpointVersion)
        throw std::runtime_error(path.string() + ": checkpoint version " + std::to_string(v) + ", expected " +
                                 std::to_string(kCheckpointVersion));

    std::map<std::string, std::string> kv;
    {
        std::istringstream text(r.bytes(r.u32()));
        std::string line;
        while (std::getline(text, line)) {
            const auto eq = line.find('=');
            if (eq != std::string::npos)
                kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }
    const auto get = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end())
            throw std::runtime_error(path.string() + ": checkpoint config lacks '" + key + "'");
        return it->second;
    };
    NetworkConfig cfg;
    cfg.arch = parse_arch(get("arch"));
    cfg.base_width = std::stoul(get("base_width"));
    cfg.depth = std::stoul(get("depth"));
    cfg.in_channels = std::stoul(get("in_channels"));
    cfg.num_classes = std::stoul(get("num_classes"));
    Model m = Model::build(cfg, 0);
    m.metadata.epoch = std::stoull(get("epoch"));
    m.metadata.seed = std::stoull(get("seed"));

    std::map<std::string, std::vector<double>*> targets;
    std::map<std::string, Shape> shapes;
    for (auto& p : m.parameters()) {
        targets[p.name] = &p.value.storage();
        shapes[p.name] = p.value.shape();
    }
    for (auto& bn : m.batchnorms()) {
        targets[bn.name + ".running_mean"] = &bn.state.running_mean;
        targets[bn.name + ".running_var"] = &bn.state.running_var;
        shapes[bn.name + ".running_mean"] = shapes[bn.name + ".running_var"] = Shape{bn.state.running_mean.size()};
    }

    const auto count = r.u32();
    std::size_t filled = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name = r.bytes(r.u32());
        Shape shape(r.u32());
        for (auto& d : shape)
            d = r.u32();
        auto it = targets.find(name);
        if (it == targets.end())
            throw std::runtime_error(path.string() + ": unexpected record '" + name + "'");
        if (shapes[name] != shape)
            throw std::runtime_error(path.string() + ": record '" + name + "' has shape " + shape_str(shape) +
                                     ", model expects " + shape_str(shapes[name]));
        auto& dst = *it->second;
        for (auto& v : dst)
            v = static_cast<double>(r.f32());
        targets.erase(it);
        ++filled;
    }
    if (!targets.empty())
        throw std::runtime_error(path.string() + ": checkpoint is missing record '" + targets.begin()->first + "'");
    if (!r.done())
        throw std::runtime_error(path.string() + ": trailing bytes after the last record");
    return m;
}

} // namespace stainseg
