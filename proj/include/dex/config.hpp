#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dex/model.hpp"
#include "dex/synth.hpp"
#include "dex/train.hpp"

namespace dex {

// One merged run configuration: network + train + data + output directory,
// loaded from a JSON file with flat dotted-key overrides. Unknown keys are
// rejected so typos fail loudly.
struct RunConfig {
    NetworkConfig network;
    TrainConfig train;
    ModalityMixture data;
    std::string out_dir = "runs/out";

    static RunConfig defaults();
    void validate() const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json &j);

    // Reads the file, applies "a.b.c=value" overrides (value parsed as JSON
    // when possible, else taken as a string), validates.
    static RunConfig load(const std::string &path, const std::vector<std::string> &overrides = {});
};

// Apply one dotted-key override to a JSON document.
void apply_override(nlohmann::json &j, const std::string &assignment);

}  // namespace dex
