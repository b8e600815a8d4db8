#pragma once

#include <array>
#include <chrono>
#include <map>
#include <memory>
#include <string>

#include "cyclematch/cycleselect.hpp"
#include "cyclematch/prompts.hpp"
#include "cyclematch/tensor.hpp"

namespace cyclematch {

struct DecodeRequest {
    std::string image;  ///< path or identifier of the test image
    PromptSet prompts;
};

/// Three candidate mask logit grids at the image extent.
struct DecodeResponse {
    std::array<LogitGrid, 3> masks;
};

class MaskDecoder {
public:
    virtual ~MaskDecoder() = default;
    virtual DecodeResponse decode(const DecodeRequest& req) = 0;
};

/// Logit magnitude used for the oracle's binary candidates.
inline constexpr float kOracleLogit = 10.0f;

BinaryMask dilate4(const BinaryMask& m);
BinaryMask erode4(const BinaryMask& m);

/// Deterministic stand-in for a promptable decoder, derived from the ground truth G:
///   M1 = empty     if no positive prompt lies inside G
///        erode(G)  else if a negative prompt lies inside G
///        dilate(G) else if a positive lies outside G or no negative lies outside G
///        G         otherwise
///   M2 = dilate(G), M3 = erode(G), all emitted as +/-kOracleLogit.
DecodeResponse oracle_decode(const BinaryMask& gt, const PromptSet& prompts);

/// Oracle decoder over a set of known test images.
class OracleDecoder : public MaskDecoder {
public:
    void add_image(std::string id, ClassMask ground_truth);
    DecodeResponse decode(const DecodeRequest& req) override;

private:
    std::map<std::string, ClassMask> images_;
};

/// Talks to a worker process over its standard streams: the worker announces
/// {"protocol":"cyclesam-decode","version":1}, then answers each JSON request
/// line with {"id":n,"masks":path} naming a 3 x H x W CSTF-1 f32 file, or with
/// {"id":n,"error":msg}. The worker is terminated when the bridge is destroyed.
class ExternalDecoder : public MaskDecoder {
public:
    explicit ExternalDecoder(const std::string& command,
                             std::chrono::milliseconds timeout = std::chrono::seconds(60));
    ~ExternalDecoder() override;

    ExternalDecoder(const ExternalDecoder&) = delete;
    ExternalDecoder& operator=(const ExternalDecoder&) = delete;

    DecodeResponse decode(const DecodeRequest& req) override;

    int pid() const { return pid_; }

private:
    std::string read_line();
    void send_line(const std::string& line);
    [[noreturn]] void fail(const std::string& what);
    void shutdown();

    int pid_ = -1;
    int fd_ = -1;
    std::chrono::milliseconds timeout_;
    std::string buffer_;
    long long next_id_ = 0;
};

/// Validates a decoder mask file against the expected image extent.
DecodeResponse read_decoder_masks(const std::string& path, ImageExtent image);

}  // namespace cyclematch
