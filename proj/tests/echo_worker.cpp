// Test worker for the decoder bridge.
// usage: echo_worker <mode> <out_dir>
//   echo          constant 0.5 logits for every candidate
//   prompts       candidate k holds +1 at positive prompts, -1 at negatives, k elsewhere
//   wrong-shape   masks one row short
//   error         error line for every request
//   crash         exits with status 3 on the first request
//   hang          reads requests and never answers
//   bad-handshake wrong protocol name
//   silent        exits before the handshake
//   wrong-id      answers with id + 1
//   garbage       answers with a non-JSON line
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>

#include "cyclematch/prompts.hpp"
#include "cyclematch/tensor.hpp"
#include "json.hpp"

using namespace cyclematch;

int main(int argc, char** argv) {
    if (argc != 3) return 2;
    const std::string mode = argv[1];
    const std::filesystem::path out = argv[2];
    if (mode == "silent") return 0;
    std::cout << (mode == "bad-handshake" ? R"({"protocol":"other","version":1})"
                                          : R"({"protocol":"cyclesam-decode","version":1})")
              << std::endl;

    std::string line;
    while (std::getline(std::cin, line)) {
        const auto req = nlohmann::json::parse(line);
        const long long id = req.at("id").get<long long>();
        const PromptSet p = prompts_from_json(req.at("prompts"));
        if (mode == "crash") return 3;
        if (mode == "hang") {
            std::this_thread::sleep_for(std::chrono::hours(1));
            continue;
        }
        if (mode == "error") {
            std::cout << nlohmann::json{{"id", id}, {"error", "no model loaded"}}.dump() << std::endl;
            continue;
        }
        if (mode == "garbage") {
            std::cout << "not json" << std::endl;
            continue;
        }
        const std::size_t h = static_cast<std::size_t>(p.image.height) - (mode == "wrong-shape" ? 1 : 0);
        const std::size_t w = static_cast<std::size_t>(p.image.width);
        std::vector<float> v(3 * h * w, 0.5f);
        if (mode == "prompts") {
            for (std::size_t k = 0; k < 3; ++k) {
                float* plane = v.data() + k * h * w;
                std::fill(plane, plane + h * w, static_cast<float>(k));
                for (const auto& q : p.positives) plane[q.y * w + q.x] = 1.0f;
                for (const auto& q : p.negatives) plane[q.y * w + q.x] = -1.0f;
            }
        }
        const auto path = out / ("masks_" + std::to_string(id) + ".cstf");
        write_tensor(path, Tensor::make_f32({3, h, w}, std::move(v)));
        std::cout << nlohmann::json{{"id", mode == "wrong-id" ? id + 1 : id}, {"masks", path.string()}}.dump()
                  << std::endl;
    }
    return 0;
}
