#include "hmoe/aux_losses.hpp"
#include "hmoe/checkpoint.hpp"
#include "hmoe/cli.hpp"
#include "hmoe/config.hpp"
#include "hmoe/corpus.hpp"
#include "hmoe/error.hpp"
#include "hmoe/layer.hpp"
#include "hmoe/routing.hpp"
#include "hmoe/telemetry.hpp"
#include "hmoe/train.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace pybind11::literals;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

hmoe::Tensor to_tensor(const Array& a)
{
    if (a.ndim() != 2)
        throw hmoe::DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
    const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
    return hmoe::Tensor::from({rows, cols}, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const hmoe::Tensor& t)
{
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Array to_array(const hmoe::Matrix& m)
{
    Array out({m.n, m.n});
    std::copy(m.values.begin(), m.values.end(), out.mutable_data());
    return out;
}

py::dict decision_dict(const hmoe::RoutingDecision& d)
{
    return py::dict("gates"_a = to_array(d.gates), "activated"_a = d.activated);
}

struct PyModel
{
    hmoe::Checkpoint ckpt;
    hmoe::Model model;

    explicit PyModel(hmoe::Checkpoint c) : ckpt(std::move(c)), model(hmoe::model_from_checkpoint(ckpt)) {}
};

} // namespace

PYBIND11_MODULE(_hmoe, m)
{
    m.doc() = "Heterogeneous mixture-of-experts language model toolkit";

    auto base = py::register_exception<hmoe::Error>(m, "HmoeError", PyExc_RuntimeError);
    py::register_exception<hmoe::ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<hmoe::DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<hmoe::IndexError>(m, "IndexError", base.ptr());
    py::register_exception<hmoe::ContractError>(m, "ContractError", base.ptr());
    py::register_exception<hmoe::FormatError>(m, "FormatError", base.ptr());
    py::register_exception<hmoe::IoError>(m, "IoError", base.ptr());
    py::register_exception<hmoe::DivergenceError>(m, "DivergenceError", base.ptr());

    m.def(
        "select_top_k", [](const Array& probs, std::int64_t k) { return decision_dict(hmoe::select_top_k(to_tensor(probs), k)); },
        "probs"_a, "k"_a, "Top-K routing over rows of router probabilities.");
    m.def(
        "select_top_p", [](const Array& probs, double p) { return decision_dict(hmoe::select_top_p(to_tensor(probs), p)); },
        "probs"_a, "p"_a, "Top-P routing: smallest descending prefix whose mass reaches p.");

    m.def(
        "allocate_sizes",
        [](const std::string& strategy, std::int64_t experts, std::int64_t budget,
           const std::vector<std::size_t>& custom) {
            return hmoe::allocate_sizes(hmoe::parse_size_strategy(strategy), experts, budget, custom).h_ffn;
        },
        "strategy"_a, "experts"_a, "budget"_a, "custom"_a = std::vector<std::size_t>{});

    m.def(
        "aux_losses",
        [](const Array& probs, const std::vector<std::vector<std::size_t>>& activated,
           const std::vector<std::size_t>& sizes, const std::string& entropy_sign) {
            hmoe::RoutingDecision d;
            d.probs = to_tensor(probs);
            d.activated = activated;
            d.gates = hmoe::Tensor::full(d.probs.shape(), 0.0);
            if (activated.size() != d.probs.dim(0))
                throw hmoe::DimensionError("activated lists " + std::to_string(activated.size()) +
                                           " tokens, probs has " + std::to_string(d.probs.dim(0)));
            const auto stats = hmoe::assignment_stats(d, sizes);
            const std::size_t n = sizes.size();
            return py::dict("load_balance"_a = hmoe::load_balance_loss(stats, n).item(),
                            "p_penalty"_a = hmoe::p_penalty_loss(stats, n).item(),
                            "entropy"_a = hmoe::entropy_loss(d.probs, hmoe::parse_entropy_sign(entropy_sign)).item());
        },
        "probs"_a, "activated"_a, "sizes"_a, "entropy_sign"_a = "positive",
        "Load-balance, P-Penalty and entropy terms for one layer's routing.");

    m.def("wasserstein_1d", &hmoe::wasserstein_1d, "a"_a, "b"_a);
    m.def("smoothed_kl", &hmoe::smoothed_kl, "a"_a, "b"_a, "eps"_a = 1e-6);
    m.def(
        "expert_similarity_matrix",
        [](const std::vector<hmoe::Histogram>& h) { return to_array(hmoe::expert_similarity_matrix(h)); }, "histograms"_a);
    m.def(
        "expert_synergy_matrix",
        [](const std::vector<hmoe::Histogram>& h, double eps) { return to_array(hmoe::expert_synergy_matrix(h, eps)); },
        "histograms"_a, "eps"_a = 1e-6);

    m.def(
        "tokenize", [](const py::bytes& b) { return hmoe::tokenize_bytes(std::string(b)); }, "data"_a);
    m.def(
        "detokenize", [](const std::vector<std::int32_t>& ids) { return py::bytes(hmoe::detokenize(ids)); }, "ids"_a);
    m.def(
        "synthesize_corpus", [](std::uint64_t seed, std::size_t n) { return py::bytes(hmoe::synthesize_corpus(seed, n)); },
        "seed"_a, "bytes"_a);

    m.def(
        "parse_config",
        [](const std::filesystem::path& path) { return hmoe::emit_config(hmoe::parse_config(path)); }, "path"_a,
        "Validates a config file and returns its effective form with defaults filled in.");

    m.def(
        "train",
        [](const std::filesystem::path& config, bool force, std::optional<std::uint64_t> seed,
           std::optional<std::int64_t> steps) {
            hmoe::cli::TrainOptions opts{force, seed, steps};
            std::ostringstream out, err;
            int rc = 0;
            {
                py::gil_scoped_release release;
                rc = hmoe::cli::cmd_train(config, opts, out, err);
            }
            return py::make_tuple(rc, out.str(), err.str());
        },
        "config"_a, "force"_a = false, "seed"_a = py::none(), "steps"_a = py::none(),
        "Runs the train command. Returns (exit_code, stdout, stderr).");

    m.def(
        "summarize_telemetry",
        [](const std::filesystem::path& dir) {
            const auto s = hmoe::cli::summarize_telemetry(dir);
            return py::dict("rows"_a = s.rows, "steps"_a = s.steps, "layers"_a = s.layers, "experts"_a = s.experts,
                            "final_loss"_a = s.final_loss, "mean_activated_params"_a = s.mean_activated_params,
                            "activation_share"_a = s.activation_share, "sizes"_a = s.sizes);
        },
        "dir"_a);

    py::class_<PyModel>(m, "Model")
        .def_static(
            "load", [](const std::filesystem::path& p) { return PyModel(hmoe::load_checkpoint(p)); }, "path"_a)
        .def_property_readonly("step", [](const PyModel& pm) { return pm.ckpt.step; })
        .def_property_readonly("parameter_count", [](const PyModel& pm) { return pm.model.parameter_count(); })
        .def_property_readonly("expert_sizes", [](const PyModel& pm) { return pm.model.profile().h_ffn; })
        .def(
            "logits",
            [](const PyModel& pm, const std::vector<std::int32_t>& tokens, std::size_t batch, std::size_t seq) {
                return to_array(pm.model.forward(tokens, batch, seq).logits);
            },
            "tokens"_a, "batch"_a, "seq"_a)
        .def(
            "perplexity",
            [](const PyModel& pm, const std::vector<std::int32_t>& tokens) {
                return hmoe::evaluate_perplexity(pm.model, tokens);
            },
            "tokens"_a);
}
