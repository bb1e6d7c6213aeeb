#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <sys/types.h>
#include <vector>

namespace evop {

/// Bidirectional newline-delimited text channel.
class LineChannel {
public:
    virtual ~LineChannel() = default;

    /// Writes `line` plus '\n'. Throws TransportError when the peer is gone.
    virtual void send_line(const std::string& line) = 0;

    /// Next complete line (without '\n'). Throws TimeoutError after `timeout`
    /// and TransportError on EOF or I/O failure.
    virtual std::string receive_line(std::chrono::milliseconds timeout) = 0;

    /// True when a complete line is buffered or the descriptor is readable.
    virtual bool readable_now() = 0;

    virtual std::string describe() const = 0;
};

/// Channel over a pair of file descriptors (pipes or a socket).
class FdChannel : public LineChannel {
public:
    FdChannel(int read_fd, int write_fd, bool owns, std::string label);
    ~FdChannel() override;
    FdChannel(const FdChannel&) = delete;
    FdChannel& operator=(const FdChannel&) = delete;

    void send_line(const std::string& line) override;
    std::string receive_line(std::chrono::milliseconds timeout) override;
    bool readable_now() override;
    std::string describe() const override { return label_; }

    void close();

private:
    bool take_buffered_line(std::string& line);

    int read_fd_;
    int write_fd_;
    bool owns_;
    std::string label_;
    std::string buffer_;
    bool eof_ = false;
};

/// Child process with stdin/stdout connected to a channel. Launched through
/// /bin/sh -c "exec <command>" so the shell is replaced by the server.
/// The destructor closes the pipes, then kills and reaps the child.
class ChildProcessChannel : public LineChannel {
public:
    explicit ChildProcessChannel(const std::string& command);
    ~ChildProcessChannel() override;

    void send_line(const std::string& line) override { channel_->send_line(line); }
    std::string receive_line(std::chrono::milliseconds timeout) override {
        return channel_->receive_line(timeout);
    }
    bool readable_now() override { return channel_->readable_now(); }
    std::string describe() const override { return "exec:" + command_; }

    pid_t pid() const { return pid_; }
    /// Sends SIGKILL (test hook for the dead-server path).
    void kill_child();

private:
    std::string command_;
    pid_t pid_ = -1;
    std::unique_ptr<FdChannel> channel_;
};

/// Connects to host:port over TCP.
std::unique_ptr<FdChannel> connect_tcp(const std::string& host, std::uint16_t port,
                                       std::chrono::milliseconds timeout);

/// Listening TCP socket; port 0 picks an ephemeral port.
class TcpListener {
public:
    TcpListener(const std::string& host, std::uint16_t port);
    ~TcpListener();
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;

    std::uint16_t port() const { return port_; }
    std::unique_ptr<FdChannel> accept();

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

/// Ignore SIGPIPE process-wide so a dead peer shows up as EPIPE.
void ignore_sigpipe();

}  // namespace evop
