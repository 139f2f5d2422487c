// Stand-alone scorer process for the external scorer protocol. Applies the
// in-process SPECTRAL rule to each received patch.
//
//   spectral_scorer_stub [--sigma-half PX] [--fail-after N]

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <sstream>
#include <string>

#include "focusbench/external_scorer.hpp"

int main(int argc, char** argv)
{
    focusbench::ResponseMap map;
    long fail_after = -1;  // test hook: answer ERR from the Nth request on
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--sigma-half") == 0 && i + 1 < argc)
            map.sigma_half_px = std::atof(argv[++i]);
        else if (std::strcmp(argv[i], "--fail-after") == 0 && i + 1 < argc)
            fail_after = std::atol(argv[++i]);
        else {
            std::fprintf(stderr, "usage: %s [--sigma-half PX] [--fail-after N]\n", argv[0]);
            return 2;
        }
    }
    focusbench::SpectralScorer scorer(map);
    std::string line;
    long served = 0;
    while (std::getline(std::cin, line)) {
        std::istringstream in(line);
        std::string verb;
        in >> verb;
        if (verb == "HELLO") {
            std::cout << "READY SPECTRAL-STUB" << std::endl;
        } else if (verb == "SCORE") {
            int w = 0, h = 0;
            in >> w >> h;
            std::string payload;
            std::getline(std::cin, payload);
            try {
                if (fail_after >= 0 && served >= fail_after)
                    throw focusbench::Error("refusing request " + std::to_string(served));
                const auto patch = focusbench::decode_patch(w, h, payload);
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.17g", scorer.score_patch(patch));
                std::cout << "SCORE " << buf << std::endl;
            } catch (const std::exception& e) {
                std::cout << "ERR " << e.what() << std::endl;
            }
            ++served;
        } else if (verb == "BYE") {
            return 0;
        } else {
            std::cout << "ERR unknown request '" << verb << "'" << std::endl;
        }
    }
    return 0;
}
