// Command line driver: train, eval, infer, serve.

#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "nre/data.hpp"
#include "nre/error.hpp"
#include "nre/framework.hpp"
#include "nre/model.hpp"
#include "nre/service.hpp"

namespace {

nre::TextSpan parse_span(const std::string& text, const char* flag) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) nre::fail(nre::ErrorCode::kInvalidSpan, std::string(flag) + " expects begin,end");
  try {
    return {std::stoul(text.substr(0, comma)), std::stoul(text.substr(comma + 1)), {}};
  } catch (const std::exception&) {
    nre::fail(nre::ErrorCode::kInvalidSpan, std::string(flag) + " expects begin,end");
  }
}

nre::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural relation extraction"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "training config (JSON)")->required();

  std::string ckpt, data, metric = "acc", curve_path;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a JSONL dataset");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--metric", metric)->check(CLI::IsMember({"acc", "f1", "auc"}));
  eval->add_option("--curve", curve_path, "write the PR curve (auc only)");

  std::string text, h, t;
  std::size_t top_k = 1;
  auto* infer = app.add_subcommand("infer", "extract relations from one sentence");
  // --h names the head span, so help is long-form only here.
  infer->set_help_flag("--help", "print this help message and exit");
  infer->add_option("--ckpt", ckpt)->required();
  infer->add_option("--text", text)->required();
  infer->add_option("--h", h, "head span begin,end (code points)");
  infer->add_option("--t", t, "tail span begin,end (code points)");
  infer->add_option("--top-k", top_k)->check(CLI::PositiveNumber);

  int port = 8080;
  std::string host = "127.0.0.1", static_dir;
  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  serve->add_option("--ckpt", ckpt)->required();
  serve->add_option("--port", port);
  serve->add_option("--host", host);
  serve->add_option("--static", static_dir, "directory served at /");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const nre::TrainConfig cfg = nre::load_train_config(config_path);
      const auto result = nre::train_from_config(cfg, &std::cout);
      std::cerr << "best epoch " << result.best_epoch << " val=" << result.best_value << '\n';
    } else if (*eval) {
      const nre::RelationModel model = nre::load_checkpoint(ckpt);
      const auto loaded = nre::load_jsonl_dataset(data, &model.relations());
      if (loaded.skipped) std::cerr << "skipped " << loaded.skipped << " malformed lines\n";
      const auto report = nre::evaluate_dataset(model, loaded.instances, metric);
      if (!curve_path.empty() && report.curve) {
        std::ofstream out(curve_path);
        nre::write_pr_curve(out, *report.curve);
      }
      std::cout << report.to_json().dump() << '\n';
    } else if (*infer) {
      auto model = std::make_shared<const nre::RelationModel>(nre::load_checkpoint(ckpt));
      nre::ExtractionRequest request;
      request.text = text;
      request.top_k = top_k;
      if (!h.empty()) request.head = parse_span(h, "--h");
      if (!t.empty()) request.tail = parse_span(t, "--t");
      const nre::Extractor extractor(model);
      std::cout << extractor.extract(request).to_json().dump() << '\n';
    } else if (*serve) {
      auto model = std::make_shared<const nre::RelationModel>(nre::load_checkpoint(ckpt));
      nre::Service service(model, static_dir);
      const int bound = service.bind(host, port);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on " << host << ':' << bound << std::endl;
      service.listen();
      g_service = nullptr;
    }
  } catch (const nre::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
