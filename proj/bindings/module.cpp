// pybind11 bindings exposing the main operations: environment stepping,
// tokenization, model evaluation/tracing, probing and the analysis
// statistics, plus pipeline stage execution.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "worldlens/analysis.hpp"
#include "worldlens/extraction.hpp"
#include "worldlens/intervention.hpp"
#include "worldlens/model.hpp"
#include "worldlens/pipeline.hpp"
#include "worldlens/probing.hpp"
#include "worldlens/rollout.hpp"

namespace py = pybind11;
using namespace worldlens;

namespace {

env::Frame frame_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw ShapeError("frame array must be 2-d");
    env::Frame f;
    f.height = static_cast<int>(a.shape(0));
    f.width = static_cast<int>(a.shape(1));
    f.pixels.assign(a.data(), a.data() + a.size());
    return f;
}

py::array_t<float> frame_to_array(const env::Frame& f) {
    py::array_t<float> out({f.height, f.width});
    std::copy(f.pixels.begin(), f.pixels.end(), out.mutable_data());
    return out;
}

py::dict state_to_dict(const env::GameState& st) {
    py::dict d;
    d["variant"] = env::variant_name(st.variant);
    d["ball_x"] = st.ball_x;
    d["ball_y"] = st.ball_y;
    d["ball_vx"] = st.ball_vx;
    d["ball_vy"] = st.ball_vy;
    d["paddle_x"] = st.paddle_x;
    d["paddle_y"] = st.paddle_y;
    d["enemy_y"] = st.enemy_y;
    d["score"] = st.score;
    d["step"] = st.step;
    d["bricks_alive"] = st.bricks_alive;
    return d;
}

std::vector<uint16_t> ids_from_array(const py::array_t<uint16_t, py::array::c_style | py::array::forcecast>& a) {
    return std::vector<uint16_t>(a.data(), a.data() + a.size());
}

void register_exceptions(py::module_& m) {
    static py::exception<Error> base(m, "WorldlensError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ConfigError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const UsageError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ShapeError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const DataError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const NumericalError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const MissingArtifactError& e) {
            PyErr_SetString(PyExc_FileNotFoundError, e.what());
        } catch (const Error& e) {
            PyErr_SetString(PyExc_RuntimeError, e.what());
        }
    });
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "token world-model interpretability workbench (C++ core)";
    register_exceptions(m);

    // --- environment ---------------------------------------------------
    py::class_<env::GameState>(m, "GameState")
        .def_readonly("ball_x", &env::GameState::ball_x)
        .def_readonly("ball_y", &env::GameState::ball_y)
        .def_readonly("ball_vx", &env::GameState::ball_vx)
        .def_readonly("ball_vy", &env::GameState::ball_vy)
        .def_readonly("paddle_x", &env::GameState::paddle_x)
        .def_readonly("paddle_y", &env::GameState::paddle_y)
        .def_readonly("enemy_y", &env::GameState::enemy_y)
        .def_readonly("score", &env::GameState::score)
        .def_readonly("step", &env::GameState::step)
        .def("as_dict", &state_to_dict);

    m.def("reset", [](const std::string& variant, uint64_t seed) {
        return env::reset(env::variant_from_string(variant), seed);
    }, py::arg("variant"), py::arg("seed"));
    m.def("step", [](const env::GameState& st, int action) {
        if (action < 0 || action > 2) throw ConfigError("action must be 0, 1 or 2");
        return env::step(st, static_cast<env::Action>(action));
    }, py::arg("state"), py::arg("action"));
    m.def("render", [](const env::GameState& st) { return frame_to_array(env::render(st)); });
    m.def("ground_truth", [](const env::GameState& st) {
        py::dict d;
        env::PropertyVector pv = env::ground_truth(st);
        for (size_t i = 0; i < pv.names.size(); ++i) d[pv.names[i].c_str()] = pv.values[i];
        return d;
    });
    m.def("property_names", [](const std::string& variant) {
        return env::property_names(env::variant_from_string(variant));
    });

    // --- tokenizer -------------------------------------------------------
    py::class_<tok::Codebook>(m, "Codebook")
        .def_readonly("K", &tok::Codebook::K)
        .def_readonly("patch_dim", &tok::Codebook::patch_dim)
        .def_property_readonly("entries", [](const tok::Codebook& cb) {
            return Eigen::MatrixXf(cb.entries);
        })
        .def("content_hash", &tok::Codebook::content_hash)
        .def("save", &tok::Codebook::save)
        .def_static("load", &tok::Codebook::load);

    m.def("fit_codebook", [](const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& frames,
                             int K, uint64_t seed) {
        std::vector<env::Frame> fs;
        fs.reserve(frames.size());
        for (const auto& a : frames) fs.push_back(frame_from_array(a));
        return tok::fit_codebook(fs, K, seed);
    }, py::arg("frames"), py::arg("K"), py::arg("seed"));
    m.def("encode", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& frame,
                       const tok::Codebook& cb) {
        tok::TokenGrid g = tok::encode(frame_from_array(frame), cb);
        py::array_t<uint16_t> out({4, 4});
        std::copy(g.ids.begin(), g.ids.end(), out.mutable_data());
        return out;
    }, py::arg("frame"), py::arg("codebook"));
    m.def("decode", [](const py::array_t<uint16_t, py::array::c_style | py::array::forcecast>& ids,
                       const tok::Codebook& cb) {
        if (ids.size() != 16) throw ShapeError("token grid must have 16 ids");
        tok::TokenGrid g;
        std::copy(ids.data(), ids.data() + 16, g.ids.begin());
        return frame_to_array(tok::decode(g, cb));
    }, py::arg("ids"), py::arg("codebook"));

    // --- world model -----------------------------------------------------
    py::class_<wm::Transformer>(m, "Transformer")
        .def_static("load", &wm::Transformer::load)
        .def("config", [](const wm::Transformer& t) {
            return py::module_::import("json").attr("loads")(t.config().to_json().dump());
        })
        .def("weights_hash", &wm::Transformer::weights_hash)
        .def("n_params", &wm::Transformer::n_params)
        .def("forward_logits", [](const wm::Transformer& t, const py::array_t<uint16_t, py::array::c_style | py::array::forcecast>& ids) {
            return Eigen::MatrixXf(t.forward_logits(ids_from_array(ids)));
        })
        .def("forward_with_trace", [](const wm::Transformer& t, const py::array_t<uint16_t, py::array::c_style | py::array::forcecast>& ids,
                                      bool want_attention) {
            wm::TraceRecord tr = t.forward_with_trace(ids_from_array(ids), want_attention);
            py::dict d;
            py::list hidden;
            for (const auto& h : tr.hidden) hidden.append(Eigen::MatrixXf(h));
            d["hidden"] = hidden;
            if (want_attention) {
                py::list attn;
                for (const auto& layer : tr.attention) {
                    py::list heads;
                    for (const auto& P : layer) heads.append(Eigen::MatrixXf(P));
                    attn.append(heads);
                }
                d["attention"] = attn;
            }
            d["logits"] = Eigen::MatrixXf(tr.logits);
            return d;
        }, py::arg("ids"), py::arg("want_attention") = true)
        .def("predict_next_frame", [](const wm::Transformer& t, const py::array_t<uint16_t, py::array::c_style | py::array::forcecast>& ids) {
            wm::NextFramePrediction p = t.predict_next_frame(ids_from_array(ids));
            py::dict d;
            d["dists"] = Eigen::MatrixXf(p.dists);
            d["logits"] = Eigen::MatrixXf(p.logits);
            py::array_t<uint16_t> grid({4, 4});
            std::copy(p.grid.begin(), p.grid.end(), grid.mutable_data());
            d["grid"] = grid;
            return d;
        })
        .def("token_embedding", [](const wm::Transformer& t, int id) {
            return Eigen::VectorXf(t.token_embedding(id));
        });

    m.def("make_random_model", [](const py::dict& cfg_dict, uint64_t seed) {
        auto j = nlohmann::json::parse(py::str(py::module_::import("json").attr("dumps")(cfg_dict)).cast<std::string>());
        return wm::make_random_model(wm::ModelConfig::from_json(j), seed);
    }, py::arg("config"), py::arg("seed"));
    m.def("gradient_check", [](int n_probes, uint64_t seed) {
        wm::ModelConfig tiny;
        tiny.n_layers = 1;
        tiny.n_heads = 2;
        tiny.d_model = 8;
        tiny.d_ff = 16;
        tiny.context_frames = 1;
        tiny.codebook_size = 10;
        return wm::gradient_check(tiny, seed, n_probes);
    }, py::arg("n_probes") = 20, py::arg("seed") = 42);

    // --- probing ---------------------------------------------------------
    m.def("r2_score", &probing::r2_score, py::arg("y_true"), py::arg("y_pred"));
    m.def("fit_ridge", [](const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double alpha) {
        probing::LinearProbe p = probing::fit_ridge(X, y, alpha);
        py::dict d;
        d["w"] = Eigen::VectorXd(p.w_raw);
        d["b"] = p.b_raw;
        d["w_std"] = Eigen::VectorXd(p.w_std);
        d["direction"] = Eigen::VectorXd(probing::probe_direction(p));
        return d;
    }, py::arg("X"), py::arg("y"), py::arg("alpha") = 1.0);
    m.def("cross_val_r2", [](const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             const std::string& kind, int k, uint64_t seed, double alpha) {
        probing::CvResult cv = probing::cross_val_r2(X, y, kind, k, seed, alpha);
        return py::make_tuple(cv.mean, cv.stddev, cv.fold_r2);
    }, py::arg("X"), py::arg("y"), py::arg("kind") = "linear", py::arg("k") = 5,
       py::arg("seed") = 0, py::arg("alpha") = 1.0);

    // --- intervention / analysis statistics ------------------------------
    m.def("kl_divergence", &intervention::kl_divergence, py::arg("p"), py::arg("q"),
          py::arg("floor") = 1e-12);
    m.def("token_change_rate", &intervention::token_change_rate);
    m.def("attention_entropy", &analysis::attention_entropy);
    m.def("spearman", &analysis::spearman);
    m.def("pearson", &analysis::pearson);

    // --- pipeline ---------------------------------------------------------
    m.def("default_config", [](const std::string& profile) {
        return py::module_::import("json").attr("loads")(
            pipeline::PipelineConfig::defaults(profile).to_json().dump());
    }, py::arg("profile") = "smoke");
    m.def("run_stage", [](const std::string& stage, const py::dict& cfg_dict) {
        auto j = nlohmann::json::parse(py::str(py::module_::import("json").attr("dumps")(cfg_dict)).cast<std::string>());
        pipeline::PipelineConfig cfg = pipeline::PipelineConfig::from_json(j);
        pipeline::run_stage(stage, cfg);
        return cfg.resolved_out_dir();
    }, py::arg("stage"), py::arg("config"));

    m.attr("__version__") = "0.1.0";
}
