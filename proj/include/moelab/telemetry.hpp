#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace moelab {

enum class MetricAgg { SUM, MEAN, MAX, MIN, LAST };

std::string agg_name(MetricAgg a);
std::optional<MetricAgg> agg_from_name(const std::string& s);

/// One wire unit: either a metric sample or an end-of-iteration signal.
/// Serialized as one JSON object per line over a TCP stream.
struct MetricMessage {
  enum class Kind { METRIC, EOI };
  Kind kind = Kind::METRIC;
  int rank = 0;
  long iteration = 0;
  std::string key;     // metric only
  double value = 0.0;  // metric only
  MetricAgg agg = MetricAgg::LAST;

  static MetricMessage metric(int rank, long iteration, std::string key,
                              double value, MetricAgg agg);
  static MetricMessage eoi(int rank, long iteration);
};

std::string serialize_message(const MetricMessage& m);
/// Returns the parsed message or an error description.
std::optional<MetricMessage> parse_message(const std::string& line,
                                           std::string* error = nullptr);

struct ReducedRecord {
  long iteration = 0;
  std::string key;
  MetricAgg agg = MetricAgg::LAST;
  double value = 0.0;
  long count = 0;
  bool partial = false;  // barrier timed out before all ranks signalled
};

std::string serialize_record(const ReducedRecord& r);
std::optional<ReducedRecord> parse_record(const std::string& line);

/// A buffered sample tagged with its deterministic order key.
struct TaggedValue {
  int rank = 0;
  std::uint64_t seq = 0;  // per-connection arrival sequence
  double value = 0.0;
};

/// sum/mean reduce left-to-right over (rank, seq) order; "last" picks the
/// highest (rank, seq).
std::pair<double, long> reduce(std::vector<TaggedValue> values, MetricAgg agg);

struct ServerOptions {
  int n_ranks = 1;
  std::string output_path;          // empty = in-memory only
  double barrier_timeout_s = 0.0;   // 0 = never time out
};

struct IngestStatus {
  bool ok = true;
  std::string error;
};

/// Metrics server: non-blocking ingestion into per-iteration buffers, a
/// dedicated reducer thread triggered by the end-of-iteration barrier, and
/// ordered JSONL persistence.
class MetricsServer {
 public:
  explicit MetricsServer(ServerOptions opts);
  ~MetricsServer();

  MetricsServer(const MetricsServer&) = delete;
  MetricsServer& operator=(const MetricsServer&) = delete;

  /// Direct ingestion (bypasses TCP); assigns per-rank arrival sequence.
  IngestStatus ingest(const MetricMessage& msg);
  IngestStatus ingest(const MetricMessage& msg, std::uint64_t seq);
  void signal_eoi(int rank, long iteration);

  bool start_tcp(const std::string& host, int port);
  int tcp_port() const { return tcp_port_; }
  void stop();

  /// Blocks until every buffered completed iteration has been persisted.
  void drain();

  std::vector<ReducedRecord> persisted() const;
  std::uint64_t ingested_count() const { return ingested_.load(); }
  std::uint64_t rejected_count() const { return rejected_.load(); }

 private:
  struct IterationBuffer {
    std::map<std::pair<std::string, MetricAgg>, std::vector<TaggedValue>> data;
    std::set<int> eoi_ranks;
    std::chrono::steady_clock::time_point first_seen;
    bool queued = false;
  };

  void reducer_loop();
  void timeout_loop();
  void accept_loop();
  void connection_loop(int fd);
  void queue_completed(long iteration, bool partial);
  void persist_iteration(long iteration, IterationBuffer buf, bool partial);

  ServerOptions opts_;
  mutable std::mutex mu_;
  std::map<long, IterationBuffer> buffers_;
  std::set<long> completed_;
  std::map<int, std::uint64_t> direct_seq_;

  std::condition_variable reduce_cv_;
  std::deque<std::tuple<long, IterationBuffer, bool>> reduce_queue_;
  std::thread reducer_;
  std::thread timeouter_;
  bool stopping_ = false;

  mutable std::mutex persist_mu_;
  std::vector<ReducedRecord> records_;
  std::ofstream out_;
  std::atomic<std::uint64_t> ingested_{0};
  std::atomic<std::uint64_t> rejected_{0};
  std::atomic<long> inflight_reductions_{0};

  int listen_fd_ = -1;
  int tcp_port_ = 0;
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<std::thread> connections_;
  std::vector<int> conn_fds_;
};

/// Client side: emission enqueues locally and returns; a background flusher
/// drains the queue into the TCP stream. The queue is unbounded with a
/// high-water warning.
class MetricsClient {
 public:
  MetricsClient(const std::string& host, int port, int rank,
                std::size_t high_water = 1u << 20);
  ~MetricsClient();

  bool connected() const { return fd_ >= 0; }
  void emit(long iteration, const std::string& key, double value, MetricAgg agg);
  void signal_eoi(long iteration);
  /// Blocks until the queue is drained and written to the socket.
  void flush();
  void close();

 private:
  void flusher_loop();

  int fd_ = -1;
  int rank_;
  std::size_t high_water_;
  bool warned_ = false;
  std::mutex mu_;
  std::condition_variable cv_, drained_;
  std::deque<std::string> queue_;
  bool stopping_ = false;
  bool writing_ = false;
  std::thread flusher_;
};

/// Training-loop facing sink.
class MetricEmitter {
 public:
  virtual ~MetricEmitter() = default;
  virtual void emit(const std::string& key, double value, MetricAgg agg) = 0;
  virtual void eoi(long iteration) = 0;
};

class NullEmitter : public MetricEmitter {
 public:
  void emit(const std::string&, double, MetricAgg) override {}
  void eoi(long) override {}
};

/// Rank-0 emitter over an in-process server (no sockets).
class ServerEmitter : public MetricEmitter {
 public:
  explicit ServerEmitter(MetricsServer& server) : server_(server) {}
  void emit(const std::string& key, double value, MetricAgg agg) override;
  void eoi(long iteration) override;

 private:
  MetricsServer& server_;
  long current_ = 0;
};

/// Rank-0 emitter over a TCP client.
class ClientEmitter : public MetricEmitter {
 public:
  explicit ClientEmitter(MetricsClient& client) : client_(client) {}
  void emit(const std::string& key, double value, MetricAgg agg) override;
  void eoi(long iteration) override;

 private:
  MetricsClient& client_;
  long current_ = 0;
};

}  // namespace moelab
