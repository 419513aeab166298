#include "gram/service.hpp"

#include "gram/pipeline.hpp"

#include <httplib.h>

namespace gram {

namespace {

Reply error_reply(int status, const std::string& message) { return {status, {{"error", message}}}; }

}  // namespace

RetrievalService::RetrievalService(ServiceAssets assets, RetrievalConfig config, std::optional<IndexSnapshot> initial)
    : assets_(std::move(assets)),
      config_(config),
      index_(),
      retriever_(assets_.model, assets_.vocab, assets_.lexicon, assets_.weights, index_, config_) {
  if (initial) {
    load(std::move(*initial));
  }
  worker_ = std::thread([this] { worker_loop(); });
}

RetrievalService::~RetrievalService() {
  {
    std::lock_guard lock(jobs_mu_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  worker_.join();
}

void RetrievalService::load(IndexSnapshot snapshot) {
  index_.replace(std::move(snapshot));
  ready_ = true;
}

std::future<std::uint64_t> RetrievalService::submit(ProductRecord product) {
  Job job{std::move(product), {}};
  auto fut = job.done.get_future();
  {
    std::lock_guard lock(jobs_mu_);
    jobs_.push_back(std::move(job));
  }
  jobs_cv_.notify_one();
  return fut;
}

void RetrievalService::worker_loop() {
  for (;;) {
    Job job;
    {
      std::unique_lock lock(jobs_mu_);
      jobs_cv_.wait(lock, [this] { return stopping_ || !jobs_.empty(); });
      if (jobs_.empty()) {
        return;
      }
      job = std::move(jobs_.front());
      jobs_.pop_front();
    }
    try {
      auto codes =
          generate_product_codes(*assets_.model, *assets_.vocab, *assets_.lexicon, job.product, config_.generation);
      job.done.set_value(index_.upsert(job.product.product_id, std::move(codes)));
    } catch (...) {
      job.done.set_exception(std::current_exception());
    }
  }
}

Reply RetrievalService::retrieve(const std::string& body) const {
  Json req;
  try {
    req = Json::parse(body);
  } catch (const Json::exception&) {
    return error_reply(400, "body is not valid JSON");
  }
  if (!req.is_object() || !req.contains("query") || !req["query"].is_string()) {
    return error_reply(400, "field 'query' (string) is required");
  }
  const auto query = req["query"].get<std::string>();
  if (query.find_first_not_of(" \t\n\r") == std::string::npos) {
    return error_reply(400, "query is empty");
  }
  std::optional<std::size_t> k;
  if (req.contains("k")) {
    if (!req["k"].is_number_integer() || req["k"].get<long long>() <= 0) {
      return error_reply(400, "k must be a positive integer");
    }
    k = static_cast<std::size_t>(req["k"].get<long long>());
  }
  if (!ready()) {
    return error_reply(503, "index is not initialized");
  }
  try {
    const auto res = retriever_.retrieve(query, k);
    Json products = Json::array();
    for (const auto& item : res.items) {
      products.push_back({{"id", format_product_id(item.product)}, {"score", item.score}, {"codes", item.codes}});
    }
    return {200, {{"products", products}, {"index_version", res.index_version}}};
  } catch (const DataError& e) {
    return error_reply(400, e.what());
  }
}

Reply RetrievalService::upsert(const std::string& body) {
  ProductRecord product;
  try {
    const Json req = Json::parse(body);
    if (!req.is_object() || !req.contains("product")) {
      return error_reply(400, "field 'product' is required");
    }
    product = product_from_json(req["product"], assets_.lexicon.get());
  } catch (const Json::exception&) {
    return error_reply(400, "body is not valid JSON");
  } catch (const Error& e) {
    return error_reply(400, e.what());
  }
  if (!ready()) {
    return error_reply(503, "index is not initialized");
  }
  try {
    return {200, {{"new_version", submit(std::move(product)).get()}}};
  } catch (const Error& e) {
    return error_reply(500, e.what());
  }
}

Reply RetrievalService::health() const {
  const auto snap = index_.snapshot();
  return {200,
          {{"status", ready() ? "ok" : "uninitialized"},
           {"index_version", snap->version},
           {"products", snap->size()},
           {"cache_entries", retriever_.cache().size()}}};
}

ServiceAssets load_service_assets(const std::filesystem::path& run_dir) {
  const RunData d = load_run_data(run_dir);
  ServiceAssets a;
  a.model = std::make_shared<const Model>(load_checkpoint<double>(run_dir / "aligned.ckpt"));
  a.vocab = std::make_shared<const Vocabulary>(d.vocab);
  a.lexicon = std::make_shared<const AttributeLexicon>(d.lexicon);
  a.weights = std::make_shared<const CodeWeights>(read_code_weights(run_dir / "code_weights.json"));
  return a;
}

HttpServer::HttpServer(RetrievalService& service) : server_(std::make_unique<httplib::Server>()) {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server_->Post("/retrieve", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.retrieve(req.body));
  });
  server_->Post("/upsert", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.upsert(req.body));
  });
  server_->Get("/health",
               [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    throw Error("cannot bind " + host + ":" + std::to_string(port));
  }
  return bound;
}

void HttpServer::listen() { server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_->is_running()) {
    server_->stop();
  }
}

}  // namespace gram
