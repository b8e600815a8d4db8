#include "cyclematch/decoder.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>
#ifdef __linux__
#include <sys/prctl.h>
#endif

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <thread>

#include "cyclematch/error.hpp"
#include "json.hpp"

namespace cyclematch {

namespace {

bool inside(const BinaryMask& m, const PromptPoint& p) {
    return p.x >= 0 && p.y >= 0 && p.x < m.width && p.y < m.height &&
           m.cells[static_cast<std::size_t>(p.y) * m.width + p.x] != 0;
}

LogitGrid to_logits(const BinaryMask& m) {
    LogitGrid g(m.height, m.width);
    std::transform(m.cells.begin(), m.cells.end(), g.values.begin(),
                   [](std::uint8_t c) { return c ? kOracleLogit : -kOracleLogit; });
    return g;
}

}  // namespace

BinaryMask dilate4(const BinaryMask& m) {
    BinaryMask out = m;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            auto on = [&](int yy, int xx) {
                return yy >= 0 && xx >= 0 && yy < m.height && xx < m.width &&
                       m.cells[static_cast<std::size_t>(yy) * m.width + xx];
            };
            if (on(y - 1, x) || on(y + 1, x) || on(y, x - 1) || on(y, x + 1))
                out.cells[static_cast<std::size_t>(y) * m.width + x] = 1;
        }
    }
    return out;
}

BinaryMask erode4(const BinaryMask& m) {
    BinaryMask out = m;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            // cells beyond the border count as background
            auto off = [&](int yy, int xx) {
                return yy < 0 || xx < 0 || yy >= m.height || xx >= m.width ||
                       !m.cells[static_cast<std::size_t>(yy) * m.width + xx];
            };
            if (off(y - 1, x) || off(y + 1, x) || off(y, x - 1) || off(y, x + 1))
                out.cells[static_cast<std::size_t>(y) * m.width + x] = 0;
        }
    }
    return out;
}

DecodeResponse oracle_decode(const BinaryMask& gt, const PromptSet& prompts) {
    if (prompts.image.width != gt.width || prompts.image.height != gt.height)
        throw ArgumentError("oracle_decode: prompt image extent differs from ground truth");

    const bool pos_in = std::any_of(prompts.positives.begin(), prompts.positives.end(),
                                    [&](const PromptPoint& p) { return inside(gt, p); });
    const bool pos_out = std::any_of(prompts.positives.begin(), prompts.positives.end(),
                                     [&](const PromptPoint& p) { return !inside(gt, p); });
    const bool neg_in = std::any_of(prompts.negatives.begin(), prompts.negatives.end(),
                                    [&](const PromptPoint& p) { return inside(gt, p); });
    const bool neg_out = std::any_of(prompts.negatives.begin(), prompts.negatives.end(),
                                     [&](const PromptPoint& p) { return !inside(gt, p); });

    const BinaryMask dilated = dilate4(gt);
    const BinaryMask eroded = erode4(gt);
    BinaryMask first(gt.height, gt.width);
    if (pos_in) {
        if (neg_in)
            first = eroded;
        else if (pos_out || !neg_out)
            first = dilated;
        else
            first = gt;
    }
    return {{to_logits(first), to_logits(dilated), to_logits(eroded)}};
}

void OracleDecoder::add_image(std::string id, ClassMask ground_truth) {
    images_[std::move(id)] = std::move(ground_truth);
}

DecodeResponse OracleDecoder::decode(const DecodeRequest& req) {
    const auto it = images_.find(req.image);
    if (it == images_.end()) throw BridgeError("oracle decoder: unknown image '" + req.image + "'");
    return oracle_decode(binarize_mask(it->second, req.prompts.class_id), req.prompts);
}

DecodeResponse read_decoder_masks(const std::string& path, ImageExtent image) {
    Tensor t;
    try {
        t = read_tensor(path);
    } catch (const FormatError& e) {
        throw BridgeError(std::string("decoder mask file: ") + e.what());
    }
    if (t.dtype() != DType::f32 || t.dims.size() != 3 || t.dims[0] != 3 ||
        t.dims[1] != static_cast<std::size_t>(image.height) || t.dims[2] != static_cast<std::size_t>(image.width))
        throw BridgeError("decoder mask file " + path + " is not a 3 x " + std::to_string(image.height) + " x " +
                          std::to_string(image.width) + " f32 tensor");
    DecodeResponse r;
    const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
    for (std::size_t k = 0; k < 3; ++k) {
        r.masks[k] = LogitGrid(image.height, image.width);
        std::copy_n(t.f32().begin() + static_cast<std::ptrdiff_t>(k * plane), plane, r.masks[k].values.begin());
    }
    return r;
}

ExternalDecoder::ExternalDecoder(const std::string& command, std::chrono::milliseconds timeout)
    : timeout_(timeout) {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
        throw BridgeError(std::string("socketpair: ") + std::strerror(errno));
    const pid_t parent = ::getpid();
    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(sv[0]);
        ::close(sv[1]);
        throw BridgeError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
#ifdef __linux__
        ::prctl(PR_SET_PDEATHSIG, SIGKILL);
        if (::getppid() != parent) ::_exit(127);
#endif
        ::setpgid(0, 0);
        ::dup2(sv[1], STDIN_FILENO);
        ::dup2(sv[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(sv[1]);
    pid_ = pid;
    fd_ = sv[0];

    std::string hello;
    try {
        hello = read_line();
    } catch (const BridgeError& e) {
        shutdown();
        throw BridgeError(std::string("decoder handshake failed: ") + e.what());
    }
    nlohmann::json j = nlohmann::json::parse(hello, nullptr, false);
    if (j.is_discarded() || !j.is_object() || j.value("protocol", "") != "cyclesam-decode" || j.value("version", 0) != 1) {
        shutdown();
        throw BridgeError("decoder handshake: unexpected line '" + hello + "'");
    }
}

ExternalDecoder::~ExternalDecoder() { shutdown(); }

void ExternalDecoder::shutdown() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
    if (pid_ <= 0) return;
    // give the worker a moment to exit on EOF, then take down its process group
    int status = 0;
    for (int i = 0; i < 20; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) {
            ::kill(-pid_, SIGKILL);
            pid_ = -1;
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    ::kill(-pid_, SIGKILL);
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
}

void ExternalDecoder::fail(const std::string& what) {
    shutdown();
    throw BridgeError(what);
}

void ExternalDecoder::send_line(const std::string& line) {
    if (fd_ < 0) throw BridgeError("decoder bridge is closed");
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail(std::string("decoder write failed: ") + std::strerror(errno));
        }
        off += static_cast<std::size_t>(n);
    }
}

std::string ExternalDecoder::read_line() {
    if (fd_ < 0) throw BridgeError("decoder bridge is closed");
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
        const auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        const auto left =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) fail("decoder timed out after " + std::to_string(timeout_.count()) + " ms");
        pollfd pfd{fd_, POLLIN, 0};
        const int r = ::poll(&pfd, 1, static_cast<int>(left.count()));
        if (r < 0) {
            if (errno == EINTR) continue;
            fail(std::string("poll: ") + std::strerror(errno));
        }
        if (r == 0) continue;
        char chunk[4096];
        const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail(std::string("decoder read failed: ") + std::strerror(errno));
        }
        if (n == 0) {
            int status = 0;
            std::string why = "decoder worker closed its output";
            for (int i = 0; i < 200 && pid_ > 0; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) == pid_) {
                    if (WIFEXITED(status)) why += " (exit status " + std::to_string(WEXITSTATUS(status)) + ")";
                    else if (WIFSIGNALED(status)) why += " (signal " + std::to_string(WTERMSIG(status)) + ")";
                    ::kill(-pid_, SIGKILL);
                    pid_ = -1;
                    break;
                }
                std::this_thread::sleep_for(std::chrono::milliseconds(5));
            }
            fail(why);
        }
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

DecodeResponse ExternalDecoder::decode(const DecodeRequest& req) {
    const long long id = next_id_++;
    nlohmann::json line{{"id", id}, {"image", req.image}, {"prompts", prompts_to_json(req.prompts)}};
    send_line(line.dump());
    const std::string reply = read_line();
    const nlohmann::json j = nlohmann::json::parse(reply, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j["id"].is_number_integer())
        fail("malformed decoder response: '" + reply + "'");
    if (j["id"].get<long long>() != id) fail("decoder response id mismatch: '" + reply + "'");
    if (j.contains("error")) throw BridgeError("decoder error: " + j["error"].dump());
    if (!j.contains("masks") || !j["masks"].is_string()) fail("decoder response lacks a masks path: '" + reply + "'");
    return read_decoder_masks(j["masks"].get<std::string>(), req.prompts.image);
}

}  // namespace cyclematch
