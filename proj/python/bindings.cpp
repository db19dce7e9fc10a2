#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "nre/error.hpp"
#include "nre/framework.hpp"
#include "nre/service.hpp"
#include "nre/tokenize.hpp"

namespace py = pybind11;

namespace {

// JSON documents cross the boundary as strings; the package decodes them.
class Model {
 public:
  explicit Model(const std::string& path)
      : model_(std::make_shared<const nre::RelationModel>(nre::load_checkpoint(path))), extractor_(model_) {}

  std::string extract(const std::string& request) const {
    return extractor_.extract(nre::ExtractionRequest::from_json(nlohmann::json::parse(request))).to_json().dump();
  }
  std::string evaluate(const std::string& path, const std::string& metric) const {
    const auto data = nre::load_jsonl_dataset(path, &model_->relations());
    return nre::evaluate_dataset(*model_, data.instances, metric).to_json().dump();
  }
  std::string architecture() const { return model_->architecture().to_json().dump(); }
  std::vector<std::string> relations() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < model_->relations().size(); ++i) out.push_back(model_->relations().name(i));
    return out;
  }

 private:
  std::shared_ptr<const nre::RelationModel> model_;
  nre::Extractor extractor_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "neural relation extraction";

  static py::exception<nre::Error> error(m, "NreError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const nre::Error& e) {
      py::set_error(error, e.what());
    }
  });

  m.def("word_tokenize", [](const std::string& text) { return nre::word_tokenize(text); });
  m.def("detect_mentions", [](const std::string& text) {
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
    for (const auto& mention : nre::detect_mentions(text)) out.push_back({mention.name, {mention.span.begin, mention.span.end}});
    return out;
  });
  m.def("accuracy", [](const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gold) {
    return nre::evaluate_accuracy(pred, gold);
  });
  m.def("micro_f1", [](const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gold) {
    return nre::evaluate_micro_f1(pred, gold);
  });
  m.def("train", [](const std::string& config_path) {
    py::gil_scoped_release release;
    const auto res = nre::train_from_config(nre::load_train_config(config_path));
    return std::make_pair(res.best_epoch, res.best_value);
  }, py::arg("config_path"));

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("path"))
      .def("extract_json", &Model::extract, py::call_guard<py::gil_scoped_release>())
      .def("evaluate_json", &Model::evaluate, py::arg("path"), py::arg("metric") = "acc")
      .def("architecture_json", &Model::architecture)
      .def_property_readonly("relations", &Model::relations);
}
