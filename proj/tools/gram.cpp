#include "gram/gradcheck.hpp"
#include "gram/pipeline.hpp"
#include "gram/service.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int verbosity = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "pipeline config JSON");
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--out", c.out, "override the output directory");
  cmd->add_option("-v,--verbosity", c.verbosity, "0 silences progress output");
}

gram::PipelineConfig resolve(const Common& c) {
  gram::PipelineConfig cfg = c.config.empty() ? gram::PipelineConfig{} : gram::load_pipeline_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
  }
  if (c.out) {
    cfg.out_dir = *c.out;
  }
  cfg.validate();
  return cfg;
}

std::vector<std::string> parse_stages(const std::string& spec) {
  if (spec == "all") {
    return gram::pipeline_stages();
  }
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto comma = spec.find(',', start);
    const auto part = spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!part.empty()) {
      out.push_back(part);
    }
    if (comma == std::string::npos) {
      break;
    }
    start = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative retrieval with co-trained and co-aligned code generators"};
  app.require_subcommand(1);
  Common common;

  std::string stages = "all";
  auto* run = app.add_subcommand("run", "run a list of pipeline stages in order");
  add_common(run, common);
  run->add_option("--stages", stages, "comma-separated stages, or 'all'");

  for (const auto& s : gram::pipeline_stages()) {
    add_common(app.add_subcommand(s, "run the " + s + " stage"), common);
  }

  std::string query;
  std::optional<std::size_t> k;
  auto* retrieve = app.add_subcommand("retrieve", "retrieve products for one query");
  add_common(retrieve, common);
  retrieve->add_option("--query", query, "query text")->required();
  retrieve->add_option("--k", k, "number of products to return");

  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "serve the HTTP retrieval API");
  add_common(serve, common);
  serve->add_option("--host", host);
  serve->add_option("--port", port)->envname("GRAM_PORT");

  std::size_t probes = 20;
  auto* grad = app.add_subcommand("check-grad", "finite-difference checks of every objective");
  add_common(grad, common);
  grad->add_option("--probes", probes, "coordinates per objective");

  CLI11_PARSE(app, argc, argv);
  gram::set_log_level(common.verbosity);

  try {
    auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    if (name == "check-grad") {
      bool ok = true;
      for (const auto& r : gram::run_gradient_suite(common.seed.value_or(1), probes)) {
        std::printf("%-18s probes=%zu max_rel_err=%.3e tol=%.0e %s\n", r.objective.c_str(), r.probes,
                    r.max_rel_error, r.tolerance, r.passed ? "ok" : "FAIL");
        ok = ok && r.passed;
      }
      return ok ? 0 : 1;
    }
    const auto cfg = resolve(common);
    gram::Pipeline pipeline(cfg);
    if (name == "run") {
      pipeline.run(parse_stages(stages));
      if (pipeline.completed("bench")) {
        std::cout << gram::read_json_file(pipeline.path("report.json")).dump(2) << '\n';
      }
    } else if (name == "retrieve" || name == "serve") {
      pipeline.require("train-weights");
      gram::RetrievalService service(gram::load_service_assets(pipeline.dir()), cfg.retrieval,
                                     gram::load_index(pipeline.path("index.bin")));
      if (name == "serve") {
        gram::HttpServer server(service);
        const int bound = server.bind(host, port);
        gram::log_info("listening on " + host + ":" + std::to_string(bound));
        server.listen();
      } else {
        gram::Json req = {{"query", query}};
        if (k) {
          req["k"] = *k;
        }
        const auto reply = service.retrieve(req.dump());
        std::cout << reply.body.dump(2) << '\n';
        return reply.status == 200 ? 0 : 1;
      }
    } else {
      pipeline.run_stage(name);
      if (name == "eval" || name == "bench") {
        std::ifstream in(pipeline.path(name == "eval" ? "eval.csv" : "report.csv"));
        std::cout << in.rdbuf();
      }
    }
  } catch (const gram::DependencyError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const gram::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
