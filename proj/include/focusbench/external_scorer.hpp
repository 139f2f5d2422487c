#pragma once

// Scorer backend that delegates to a subprocess over a line protocol on its
// stdin/stdout:
//
//   -> HELLO focusbench 1          <- READY <name>
//   -> SCORE <w> <h>
//   -> <base64 of w*h little-endian float32, row-major>
//                                  <- SCORE <float>  |  ERR <message>
//   -> BYE                         (child exits 0)

#include <openssl/evp.h>
#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "focusbench/scorer.hpp"

namespace focusbench {

inline constexpr int external_protocol_version = 1;
inline constexpr int external_timeout_ms = 10000;

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes)
{
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text)
{
    if (text.size() % 4 != 0)
        throw Error("base64: length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0)
        throw Error("base64: invalid input");
    // EVP_DecodeBlock keeps the bytes that padding stands for.
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=')
        pad = (text.size() >= 2 && text[text.size() - 2] == '=') ? 2 : 1;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

/// Patch pixels as little-endian float32, row-major, base64 encoded.
inline std::string encode_patch(const Image& patch)
{
    std::vector<std::uint8_t> bytes(patch.size() * 4);
    for (std::size_t i = 0; i < patch.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(patch.pixels[i]));
        for (int b = 0; b < 4; ++b)
            bytes[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return base64_encode(bytes);
}

inline Image decode_patch(int width, int height, const std::string& text)
{
    const auto bytes = base64_decode(text);
    Image img(width, height);
    if (bytes.size() != img.size() * 4)
        throw Error("patch payload has " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(img.size() * 4));
    for (std::size_t i = 0; i < img.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
        img.pixels[i] = std::bit_cast<float>(bits);
    }
    return img;
}

/// Patch rounded through float32, i.e. exactly what an external scorer receives.
inline Image float32_view(const Image& patch)
{
    Image out = patch;
    for (double& v : out.pixels)
        v = static_cast<float>(v);
    return out;
}

/// Runs `/bin/sh -c command` and talks the scorer protocol to it.
class ExternalScorer final : public Scorer {
public:
    explicit ExternalScorer(std::string command, int timeout_ms = external_timeout_ms)
        : command_(std::move(command)), timeout_ms_(timeout_ms)
    {
        if (command_.empty())
            throw Error("external scorer: empty command");
        spawn();
        try {
            send_line("HELLO focusbench " + std::to_string(external_protocol_version));
            const auto reply = read_line();
            if (reply.rfind("READY", 0) != 0)
                throw Error("external scorer: expected READY, got '" + reply + "'");
            name_ = reply.size() > 6 ? reply.substr(6) : "EXTERNAL";
        } catch (...) {
            terminate();
            throw;
        }
    }

    ExternalScorer(const ExternalScorer&) = delete;
    ExternalScorer& operator=(const ExternalScorer&) = delete;

    ~ExternalScorer() override { shutdown(); }

    ScorerKind kind() const override { return ScorerKind::External; }
    std::string name() const override { return name_; }
    const std::string& command() const { return command_; }

    double score_patch(const Image& patch) override
    {
        send_line("SCORE " + std::to_string(patch.width) + " " + std::to_string(patch.height));
        send_line(encode_patch(patch));
        const auto reply = read_line();
        if (reply.rfind("ERR", 0) == 0)
            throw Error("external scorer '" + name_ + "': " + (reply.size() > 4 ? reply.substr(4) : reply));
        if (reply.rfind("SCORE ", 0) != 0)
            throw Error("external scorer: unexpected reply '" + reply + "'");
        double v = 0.0;
        try {
            v = std::stod(reply.substr(6));
        } catch (const std::exception&) {
            throw Error("external scorer: unparsable score '" + reply + "'");
        }
        if (!(v >= 0.0 && v <= 1.0))
            throw Error("external scorer: score " + reply.substr(6) + " outside [0,1]");
        return v;
    }

    /// Sends BYE and reaps the child; returns its exit status (or -1).
    int shutdown()
    {
        if (pid_ <= 0)
            return exit_status_;
        try {
            send_line("BYE");
        } catch (const Error&) {
        }
        close_fd(to_child_);
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
        int status = 0;
        while (true) {
            const pid_t r = ::waitpid(pid_, &status, WNOHANG);
            if (r == pid_)
                break;
            if (r < 0 || std::chrono::steady_clock::now() > deadline) {
                ::kill(pid_, SIGKILL);
                ::waitpid(pid_, &status, 0);
                break;
            }
            ::usleep(1000);
        }
        close_fd(from_child_);
        pid_ = -1;
        exit_status_ = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        return exit_status_;
    }

private:
    static void close_fd(int& fd)
    {
        if (fd >= 0)
            ::close(fd);
        fd = -1;
    }

    void spawn()
    {
        int in[2], out[2];
        if (::pipe(in) != 0)
            throw Error(std::string("external scorer: pipe: ") + std::strerror(errno));
        if (::pipe(out) != 0) {
            ::close(in[0]);
            ::close(in[1]);
            throw Error(std::string("external scorer: pipe: ") + std::strerror(errno));
        }
        pid_ = ::fork();
        if (pid_ < 0) {
            for (int fd : {in[0], in[1], out[0], out[1]})
                ::close(fd);
            throw Error(std::string("external scorer: fork: ") + std::strerror(errno));
        }
        if (pid_ == 0) {
            ::dup2(in[0], STDIN_FILENO);
            ::dup2(out[1], STDOUT_FILENO);
            for (int fd : {in[0], in[1], out[0], out[1]})
                ::close(fd);
            ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
            ::_exit(127);
        }
        ::close(in[0]);
        ::close(out[1]);
        // Keep later children from inheriting this channel.
        ::fcntl(in[1], F_SETFD, FD_CLOEXEC);
        ::fcntl(out[0], F_SETFD, FD_CLOEXEC);
        to_child_ = in[1];
        from_child_ = out[0];
        // A dead child must surface as an error, not kill us with SIGPIPE.
        ::signal(SIGPIPE, SIG_IGN);
    }

    void terminate()
    {
        close_fd(to_child_);
        close_fd(from_child_);
        if (pid_ > 0) {
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, nullptr, 0);
        }
        pid_ = -1;
    }

    void send_line(const std::string& line)
    {
        if (to_child_ < 0)
            throw Error("external scorer: channel closed");
        std::string buf = line + "\n";
        std::size_t off = 0;
        while (off < buf.size()) {
            const ssize_t n = ::write(to_child_, buf.data() + off, buf.size() - off);
            if (n < 0) {
                if (errno == EINTR)
                    continue;
                throw Error(std::string("external scorer: write failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line()
    {
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
        while (true) {
            const auto nl = pending_.find('\n');
            if (nl != std::string::npos) {
                std::string line = pending_.substr(0, nl);
                pending_.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r')
                    line.pop_back();
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            if (left.count() <= 0)
                throw Error("external scorer: no reply within " + std::to_string(timeout_ms_) + " ms");
            pollfd p{from_child_, POLLIN, 0};
            const int r = ::poll(&p, 1, static_cast<int>(left.count()));
            if (r < 0 && errno == EINTR)
                continue;
            if (r < 0)
                throw Error(std::string("external scorer: poll: ") + std::strerror(errno));
            if (r == 0)
                continue;
            char chunk[4096];
            const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
            if (n < 0 && errno == EINTR)
                continue;
            if (n <= 0)
                throw Error("external scorer: process closed its output");
            pending_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    std::string command_;
    int timeout_ms_;
    std::string name_;
    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    int exit_status_ = -1;
    std::string pending_;
};

}  // namespace focusbench
