#include "evop/transport.h"

#include <arpa/inet.h>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include "evop/error.h"

namespace evop {

namespace {

std::string errno_text() { return std::strerror(errno); }

void close_fd(int& fd) {
    if (fd >= 0) ::close(fd);
    fd = -1;
}

}  // namespace

void ignore_sigpipe() { std::signal(SIGPIPE, SIG_IGN); }

FdChannel::FdChannel(int read_fd, int write_fd, bool owns, std::string label)
    : read_fd_(read_fd), write_fd_(write_fd), owns_(owns), label_(std::move(label)) {}

FdChannel::~FdChannel() { close(); }

void FdChannel::close() {
    if (!owns_) return;
    if (write_fd_ == read_fd_) {
        close_fd(read_fd_);
        write_fd_ = -1;
    } else {
        close_fd(read_fd_);
        close_fd(write_fd_);
    }
}

void FdChannel::send_line(const std::string& line) {
    if (write_fd_ < 0) throw TransportError(label_ + ": channel closed");
    std::string data = line;
    data.push_back('\n');
    std::size_t sent = 0;
    while (sent < data.size()) {
        const ssize_t n = ::write(write_fd_, data.data() + sent, data.size() - sent);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(label_ + ": write failed: " + errno_text());
        }
        sent += static_cast<std::size_t>(n);
    }
}

bool FdChannel::take_buffered_line(std::string& line) {
    const auto pos = buffer_.find('\n');
    if (pos == std::string::npos) return false;
    line.assign(buffer_, 0, pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    buffer_.erase(0, pos + 1);
    return true;
}

std::string FdChannel::receive_line(std::chrono::milliseconds timeout) {
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + timeout;
    std::string line;
    while (!take_buffered_line(line)) {
        if (eof_ || read_fd_ < 0) throw TransportError(label_ + ": connection closed by peer");
        const auto left = deadline - clock::now();
        if (left <= clock::duration::zero()) {
            throw TimeoutError(label_ + ": no response within " + std::to_string(timeout.count()) +
                               " ms");
        }
        const auto remaining = std::chrono::ceil<std::chrono::milliseconds>(left);
        pollfd pfd{read_fd_, POLLIN, 0};
        const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(remaining.count(), 1 << 30)));
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw TransportError(label_ + ": poll failed: " + errno_text());
        }
        if (rc == 0) continue;
        char chunk[65536];
        const ssize_t n = ::read(read_fd_, chunk, sizeof(chunk));
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw TransportError(label_ + ": read failed: " + errno_text());
        }
        if (n == 0) {
            eof_ = true;
            continue;
        }
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
    return line;
}

bool FdChannel::readable_now() {
    if (buffer_.find('\n') != std::string::npos) return true;
    if (read_fd_ < 0 || eof_) return false;
    pollfd pfd{read_fd_, POLLIN, 0};
    return ::poll(&pfd, 1, 0) > 0;
}

ChildProcessChannel::ChildProcessChannel(const std::string& command) : command_(command) {
    ignore_sigpipe();
    int to_child[2];
    int from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0) throw TransportError("pipe failed: " + errno_text());
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw TransportError("pipe failed: " + errno_text());
    }
    const std::string shell_command = "exec " + command;
    pid_ = ::fork();
    if (pid_ < 0) throw TransportError("fork failed: " + errno_text());
    if (pid_ == 0) {
        ::dup2(to_child[0], STDIN_FILENO);
        ::dup2(from_child[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", shell_command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    channel_ = std::make_unique<FdChannel>(from_child[0], to_child[1], true, "exec:" + command);
}

ChildProcessChannel::~ChildProcessChannel() {
    channel_.reset();  // EOF on the child's stdin asks it to exit
    if (pid_ > 0) {
        int status = 0;
        for (int i = 0; i < 50; ++i) {
            if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
            ::usleep(10'000);
        }
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &status, 0);
    }
}

void ChildProcessChannel::kill_child() {
    if (pid_ > 0) {
        ::kill(pid_, SIGKILL);
        int status = 0;
        ::waitpid(pid_, &status, 0);
        pid_ = -1;
    }
}

std::unique_ptr<FdChannel> connect_tcp(const std::string& host, std::uint16_t port,
                                       std::chrono::milliseconds timeout) {
    ignore_sigpipe();
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port_text = std::to_string(port);
    if (const int rc = ::getaddrinfo(host.c_str(), port_text.c_str(), &hints, &res); rc != 0) {
        throw TransportError("cannot resolve " + host + ": " + ::gai_strerror(rc));
    }
    std::string last_error = "no addresses";
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC | SOCK_NONBLOCK, ai->ai_protocol);
        if (fd < 0) continue;
        int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
        if (rc != 0 && errno == EINPROGRESS) {
            pollfd pfd{fd, POLLOUT, 0};
            rc = ::poll(&pfd, 1, static_cast<int>(timeout.count())) == 1 ? 0 : -1;
            int err = 0;
            socklen_t len = sizeof(err);
            if (rc == 0 && (::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0)) {
                errno = err;
                rc = -1;
            }
        }
        if (rc == 0) {
            const int flags = ::fcntl(fd, F_GETFL);
            ::fcntl(fd, F_SETFL, flags & ~O_NONBLOCK);
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            ::freeaddrinfo(res);
            return std::make_unique<FdChannel>(fd, fd, true, "tcp:" + host + ":" + port_text);
        }
        last_error = errno_text();
        ::close(fd);
    }
    ::freeaddrinfo(res);
    throw TransportError("cannot connect to " + host + ":" + port_text + ": " + last_error);
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
    ignore_sigpipe();
    fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw TransportError("socket failed: " + errno_text());
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        close_fd(fd_);
        throw TransportError("listen address must be an IPv4 literal: " + host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 4) != 0) {
        const auto msg = errno_text();
        close_fd(fd_);
        throw TransportError("cannot listen on " + host + ":" + std::to_string(port) + ": " + msg);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { close_fd(fd_); }

std::unique_ptr<FdChannel> TcpListener::accept() {
    for (;;) {
        const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
        if (fd >= 0) {
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            return std::make_unique<FdChannel>(fd, fd, true, "tcp-peer");
        }
        if (errno != EINTR) throw TransportError("accept failed: " + errno_text());
    }
}

}  // namespace evop
