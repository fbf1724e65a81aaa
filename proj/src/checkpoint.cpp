#include "hmoe/checkpoint.hpp"

#include "hmoe/config.hpp"
#include "hmoe/error.hpp"
#include "hmoe/rng.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace hmoe {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer
{
public:
    explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc)
    {
        if (!out_)
            throw IoError("cannot open " + path.string() + " for writing");
    }

    template <typename T>
    void put(const T& v)
    {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }

    void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }

    void tensor(const std::string& name, const Shape& shape, std::span<const double> values)
    {
        put(static_cast<std::uint32_t>(name.size()));
        bytes(name.data(), name.size());
        put(static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape)
            put(static_cast<std::uint64_t>(d));
        bytes(values.data(), values.size() * sizeof(double));
    }

    void finish()
    {
        out_.flush();
        if (!out_)
            throw IoError("failed writing " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader
{
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary)
    {
        if (!in_)
            throw IoError("cannot read checkpoint " + path.string());
    }

    template <typename T>
    T get()
    {
        T v{};
        read(&v, sizeof(T));
        return v;
    }

    void read(void* dst, std::size_t n)
    {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError("checkpoint " + path_.string() + " is truncated");
    }

    std::string string(std::size_t n)
    {
        if (n > (std::size_t{1} << 30))
            throw FormatError("checkpoint " + path_.string() + " has an implausible string length");
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

struct RawTensor
{
    Shape shape;
    std::vector<double> values;
};

} // namespace

std::uint64_t config_hash(const std::string& config_text) { return fnv1a(config_text); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path)
{
    const std::string text = emit_model_train(ckpt.model_config, ckpt.train_config);
    Writer w(path);
    w.bytes(kCheckpointMagic, 4);
    w.put(kCheckpointVersion);
    w.put(config_hash(text));
    w.put(static_cast<std::uint64_t>(text.size()));
    w.bytes(text.data(), text.size());

    const std::uint64_t count = ckpt.parameters.size() * 3 + 3;
    w.put(count);
    for (const auto& p : ckpt.parameters)
        w.tensor(p.name, p.tensor.shape(), p.tensor.data());
    for (std::size_t i = 0; i < ckpt.parameters.size(); ++i) {
        const Shape s{ckpt.adam_m.at(i).size()};
        w.tensor("adam.m/" + ckpt.parameters[i].name, s, ckpt.adam_m[i]);
        w.tensor("adam.v/" + ckpt.parameters[i].name, s, ckpt.adam_v.at(i));
    }
    const double step = static_cast<double>(ckpt.step);
    const double opt_steps = static_cast<double>(ckpt.optimizer_steps);
    w.tensor("state/step", {}, std::span<const double>(&step, 1));
    w.tensor("state/optimizer_steps", {}, std::span<const double>(&opt_steps, 1));
    w.tensor("state/cum_flops", {}, std::span<const double>(&ckpt.cum_flops, 1));
    w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    Reader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError(path.string() + " is not an HMOE checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
    const auto hash = r.get<std::uint64_t>();
    const std::string text = r.string(r.get<std::uint64_t>());
    if (config_hash(text) != hash)
        throw FormatError("checkpoint " + path.string() + " config hash mismatch");

    Checkpoint ckpt;
    try {
        parse_model_train(text, ckpt.model_config, ckpt.train_config);
    } catch (const ConfigError& e) {
        throw FormatError("checkpoint " + path.string() + " carries an invalid config: " + e.what());
    }

    std::map<std::string, RawTensor> tensors;
    std::vector<std::string> order;
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.string(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8)
            throw FormatError("checkpoint tensor " + name + " has rank " + std::to_string(rank));
        RawTensor t;
        for (std::uint32_t d = 0; d < rank; ++d)
            t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        t.values.resize(shape_numel(t.shape));
        r.read(t.values.data(), t.values.size() * sizeof(double));
        order.push_back(name);
        tensors.emplace(std::move(name), std::move(t));
    }

    auto take = [&](const std::string& name) -> RawTensor& {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw FormatError("checkpoint " + path.string() + " lacks tensor " + name);
        return it->second;
    };
    ckpt.step = static_cast<std::int64_t>(take("state/step").values.at(0));
    ckpt.optimizer_steps = static_cast<std::int64_t>(take("state/optimizer_steps").values.at(0));
    ckpt.cum_flops = take("state/cum_flops").values.at(0);
    for (const auto& name : order) {
        if (name.rfind("adam.", 0) == 0 || name.rfind("state/", 0) == 0)
            continue;
        auto& t = take(name);
        ckpt.parameters.push_back({name, Tensor::from(t.shape, t.values, true)});
        ckpt.adam_m.push_back(take("adam.m/" + name).values);
        ckpt.adam_v.push_back(take("adam.v/" + name).values);
    }
    return ckpt;
}

void load_parameters(Model& model, const std::vector<NamedTensor>& params)
{
    std::map<std::string, const Tensor*> by_name;
    for (const auto& p : params)
        by_name[p.name] = &p.tensor;
    for (auto& p : model.named_parameters()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end())
            throw FormatError("missing parameter " + p.name);
        if (it->second->shape() != p.tensor.shape())
            throw FormatError("parameter " + p.name + " has shape " + shape_str(it->second->shape()) +
                              ", model expects " + shape_str(p.tensor.shape()));
        auto dst = p.tensor.mutable_data();
        const auto src = it->second->data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

Model model_from_checkpoint(const Checkpoint& ckpt)
{
    Model model(ckpt.model_config);
    load_parameters(model, ckpt.parameters);
    return model;
}

} // namespace hmoe
