#pragma once

// The untrusted broker runtime. It accepts framed TCP connections, routes
// PROVISION frames to the provisioner, forwards sealed SUBSCRIBE / PUBLISH /
// UNSUBSCRIBE payloads into the enclave, and fans resealed DELIVER frames
// out to subscribers. It never holds plaintext content or symmetric keys:
// everything it touches is an envelope or public metadata.
//
// Concurrency: one thread per connection, one serialized command stream
// into the enclave, concurrent delivery fan-out. Per-connection errors
// never take the service down. Lock order: enclave, then sessions, then a
// connection's write lock; no path holds an outer lock while taking an
// earlier one.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ecbr/enclave.hpp"
#include "ecbr/frame.hpp"
#include "ecbr/log.hpp"
#include "ecbr/provisioning.hpp"

namespace ecbr {

struct BrokerConfig {
  std::string bind_host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks an ephemeral port
  CostModel model;
  SigningIdentity enclave_identity;
  SigningIdentity provisioner_identity;
  std::map<Id16, Key32> authorized;  // client identities allowed to connect
  ProvisionerTable scf_table;
};

class Broker {
 public:
  explicit Broker(BrokerConfig config)
      : config_(std::move(config)),
        enclave_(config_.model, config_.enclave_identity) {}

  ~Broker() { stop(); }

  // Provisions the enclave from the SCF table (the enclave's measurement
  // must be registered), then binds and starts accepting.
  Result<void> start() {
    crypto_init();
    for (const auto& [id, key] : config_.authorized) enclave_.authorize_peer(id, key);
    enclave_.authorize_peer(config_.provisioner_identity.id,
                            config_.provisioner_identity.verify_key);

    InMemoryChannelPair startup_channel;
    auto scf = handshake(enclave_.measurement(), config_.scf_table,
                         config_.enclave_identity, config_.provisioner_identity,
                         startup_channel);
    if (!scf)
      return make_error(scf.error().code,
                        "enclave provisioning failed: " + scf.error().to_string());
    enclave_.set_startup_config(std::move(scf).value());

    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) return make_error(errc::channel_error, "socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(config_.port);
    if (::inet_pton(AF_INET, config_.bind_host.c_str(), &addr.sin_addr) != 1)
      return make_error(errc::channel_error, "bad bind address " + config_.bind_host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      return make_error(errc::channel_error, "bind failed");
    if (::listen(listen_fd_, 64) != 0)
      return make_error(errc::channel_error, "listen failed");

    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);

    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    log::info("broker listening on " + config_.bind_host + ":" + std::to_string(port_));
    return {};
  }

  void stop() {
    bool was_running = running_.exchange(false);
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::shared_ptr<Conn>> conns;
    {
      std::lock_guard lock(sessions_mu_);
      for (auto& [id, conn] : conns_) conns.push_back(conn);
    }
    for (auto& conn : conns) conn->socket.shutdown();
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(sessions_mu_);
      for (auto& [id, t] : conn_threads_) threads.push_back(std::move(t));
      conn_threads_.clear();
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
    if (was_running) log::info("broker stopped");
  }

  void join() {
    // runs until stop() is called from another thread (e.g. a signal handler)
    while (running_.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }

  std::uint16_t port() const { return port_; }
  const EnclaveState& enclave() const { return enclave_; }

 private:
  struct Conn {
    FrameSocket socket;
    std::mutex write_mu;
    bool has_session = false;
    bool subscriber = false;
    Id16 sender_id{};
    Id16 key_id{};
    std::set<Id16> filters;

    explicit Conn(int fd) : socket(fd) {}

    Result<void> send(FrameType type, ByteSpan payload) {
      std::lock_guard lock(write_mu);
      return socket.send(type, payload);
    }
  };

  void accept_loop() {
    while (running_) {
      sockaddr_in peer{};
      socklen_t len = sizeof(peer);
      int fd = ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&peer), &len);
      if (fd < 0) {
        if (running_) continue;
        break;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      auto conn = std::make_shared<Conn>(fd);
      std::uint64_t id = next_conn_id_++;
      std::lock_guard lock(sessions_mu_);
      conns_[id] = conn;
      conn_threads_[id] = std::thread([this, id, conn] { handle_connection(id, conn); });
    }
  }

  void handle_connection(std::uint64_t conn_id, std::shared_ptr<Conn> conn) {
    for (;;) {
      auto frame = conn->socket.recv();
      if (!frame) {
        if (frame.error().code == errc::frame_too_large) {
          auto sent = conn->send(FrameType::error,
                                 encode_error_payload(errc::frame_too_large,
                                                      frame.error().message));
          (void)sent;
        }
        break;
      }
      if (!dispatch(conn, frame.value())) break;
    }
    cleanup_connection(conn_id, conn);
  }

  // Returns false when the connection should close.
  bool dispatch(const std::shared_ptr<Conn>& conn, const Frame& frame) {
    switch (frame.type) {
      case FrameType::hello:
        return on_hello(conn, frame.payload);
      case FrameType::provision:
        return on_provision(*conn, frame.payload);
      case FrameType::subscribe:
        return on_subscribe(*conn, frame.payload);
      case FrameType::unsubscribe:
        return on_unsubscribe(*conn, frame.payload);
      case FrameType::publish:
        return on_publish(*conn, frame.payload);
      default: {
        auto sent = conn->send(FrameType::error,
                               encode_error_payload(errc::malformed_frame,
                                                    "unexpected frame type"));
        (void)sent;
        return false;
      }
    }
  }

  bool on_hello(const std::shared_ptr<Conn>& conn_ptr, const Bytes& payload) {
    Conn& conn = *conn_ptr;
    HelloResult r;
    {
      std::lock_guard lock(enclave_mu_);
      r = enclave_.ecall_session_hello(payload);
    }
    if (!r.status.accepted) {
      auto sent = conn.send(FrameType::error,
                            encode_error_payload(r.status.reason.code,
                                                 r.status.reason.message));
      (void)sent;
      return false;
    }
    conn.has_session = true;
    conn.sender_id = r.peer_id;
    conn.key_id = r.session_key_id;
    {
      std::lock_guard lock(sessions_mu_);
      by_subscriber_[r.peer_id].insert(conn_ptr);
    }
    return conn.send(FrameType::hello, r.server_hello).ok();
  }

  bool on_provision(Conn& conn, const Bytes& first_msg) {
    FrameChannel channel(conn.socket);
    channel.push_pending(first_msg);
    std::map<Id16, Key32> authorized = config_.authorized;
    authorized.emplace(config_.provisioner_identity.id,
                       config_.provisioner_identity.verify_key);
    auto served = serve_provision_once(channel, config_.provisioner_identity, authorized,
                                       config_.scf_table);
    if (!served) {
      log::debug("provision handshake failed: " + served.error().to_string());
      return false;
    }
    return true;
  }

  bool require_session(Conn& conn) {
    if (conn.has_session) return true;
    auto sent = conn.send(FrameType::error,
                          encode_error_payload(errc::not_provisioned,
                                               "HELLO required before this frame"));
    (void)sent;
    return false;
  }

  bool on_subscribe(Conn& conn, const Bytes& payload) {
    if (!require_session(conn)) return false;
    SubmitResult r;
    {
      std::lock_guard lock(enclave_mu_);
      r = enclave_.ecall_submit_subscription(payload);
    }
    AckPayload ack;
    ack.op = FrameType::subscribe;
    ack.accepted = r.status.accepted;
    ack.reason = r.status.accepted ? 0 : static_cast<std::uint8_t>(r.status.reason.code);
    ack.ref_id = r.filter_id;
    if (r.status.accepted) {
      conn.subscriber = true;
      conn.filters.insert(r.filter_id);
    }
    return conn.send(FrameType::ack, ack.encode()).ok();
  }

  bool on_unsubscribe(Conn& conn, const Bytes& payload) {
    if (!require_session(conn)) return false;
    SubmitResult r;
    {
      std::lock_guard lock(enclave_mu_);
      r = enclave_.ecall_unsubscribe(payload);
    }
    AckPayload ack;
    ack.op = FrameType::unsubscribe;
    ack.accepted = r.status.accepted;
    ack.reason = r.status.accepted ? 0 : static_cast<std::uint8_t>(r.status.reason.code);
    ack.ref_id = r.filter_id;
    if (r.status.accepted) conn.filters.erase(r.filter_id);
    return conn.send(FrameType::ack, ack.encode()).ok();
  }

  bool on_publish(Conn& conn, const Bytes& payload) {
    if (!require_session(conn)) return false;
    PublishResult r;
    {
      std::lock_guard lock(enclave_mu_);
      r = enclave_.ecall_publish(payload);
    }
    AckPayload ack;
    ack.op = FrameType::publish;
    ack.accepted = r.status.accepted;
    ack.reason = r.status.accepted ? 0 : static_cast<std::uint8_t>(r.status.reason.code);
    ack.matched = static_cast<std::uint32_t>(r.deliveries.size());
    ack.ref_id = r.pub_id;
    bool alive = conn.send(FrameType::ack, ack.encode()).ok();

    for (const Delivery& d : r.deliveries) {
      std::vector<std::shared_ptr<Conn>> targets;
      {
        std::lock_guard lock(sessions_mu_);
        auto it = by_subscriber_.find(d.subscriber_id);
        if (it == by_subscriber_.end()) continue;
        targets.assign(it->second.begin(), it->second.end());
      }
      for (const auto& target : targets) {
        auto sent = target->send(FrameType::deliver, d.envelope);
        (void)sent;  // a dead subscriber is cleaned up by its own thread
      }
    }
    return alive;
  }

  void cleanup_connection(std::uint64_t conn_id, const std::shared_ptr<Conn>& conn) {
    {
      std::lock_guard lock(enclave_mu_);
      for (const Id16& filter_id : conn->filters) {
        auto removed = enclave_.ecall_remove_subscription(filter_id);
        (void)removed;
      }
    }
    bool last_session_of_sender = false;
    {
      std::lock_guard lock(sessions_mu_);
      auto it = by_subscriber_.find(conn->sender_id);
      if (it != by_subscriber_.end()) {
        it->second.erase(conn);
        if (it->second.empty()) {
          by_subscriber_.erase(it);
          last_session_of_sender = conn->has_session;
        }
      }
      conns_.erase(conn_id);
      auto tit = conn_threads_.find(conn_id);
      if (tit != conn_threads_.end()) {
        tit->second.detach();
        conn_threads_.erase(tit);
      }
    }
    if (last_session_of_sender) {
      std::lock_guard lock(enclave_mu_);
      enclave_.drop_session(conn->sender_id);
    }
    conn->socket.close();
  }

  BrokerConfig config_;
  EnclaveState enclave_;
  std::mutex enclave_mu_;

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;

  std::mutex sessions_mu_;
  std::uint64_t next_conn_id_ = 1;
  std::map<std::uint64_t, std::shared_ptr<Conn>> conns_;
  std::map<std::uint64_t, std::thread> conn_threads_;
  std::map<Id16, std::set<std::shared_ptr<Conn>>> by_subscriber_;
};

}  // namespace ecbr
