#pragma once

#include "gram/index.hpp"
#include "gram/json_io.hpp"

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <future>
#include <thread>

namespace httplib {
class Server;
}

namespace gram {

struct Reply {
  int status = 200;
  Json body;
};

struct ServiceAssets {
  std::shared_ptr<const Model> model;
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const AttributeLexicon> lexicon;
  std::shared_ptr<const CodeWeights> weights;
};

// Online retrieval over a CodeIndex plus a single nearline worker that
// generates codes for upserted products and publishes new index versions.
class RetrievalService {
 public:
  // Without an initial snapshot the service answers 503 until one is loaded.
  RetrievalService(ServiceAssets assets, RetrievalConfig config, std::optional<IndexSnapshot> initial);
  ~RetrievalService();
  RetrievalService(const RetrievalService&) = delete;
  RetrievalService& operator=(const RetrievalService&) = delete;

  Reply retrieve(const std::string& body) const;
  Reply upsert(const std::string& body);
  Reply health() const;

  void load(IndexSnapshot snapshot);
  bool ready() const { return ready_.load(); }
  std::future<std::uint64_t> submit(ProductRecord product);
  const CodeIndex& index() const { return index_; }
  const Retriever& retriever() const { return retriever_; }

 private:
  struct Job {
    ProductRecord product;
    std::promise<std::uint64_t> done;
  };
  void worker_loop();

  ServiceAssets assets_;
  RetrievalConfig config_;
  CodeIndex index_;
  Retriever retriever_;
  std::atomic<bool> ready_{false};

  std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::deque<Job> jobs_;
  bool stopping_ = false;
  std::thread worker_;
};

ServiceAssets load_service_assets(const std::filesystem::path& run_dir);

// HTTP front end: POST /retrieve, POST /upsert, GET /health.
class HttpServer {
 public:
  explicit HttpServer(RetrievalService& service);
  ~HttpServer();

  // Port 0 binds any free port; returns the bound port.
  int bind(const std::string& host, int port);
  void listen();  // blocks until stop()
  void stop();

 private:
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace gram
