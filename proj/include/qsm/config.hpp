#pragma once

#include <json.hpp>

#include "qsm/pipeline.hpp"
#include "qsm/synth.hpp"
#include "qsm/trainer.hpp"

// JSON forms of the configuration structs. Unknown keys are rejected; absent
// keys keep their defaults.

namespace qsm {

using Json = nlohmann::json;

void to_json(Json &j, const Dims &d);
void from_json(const Json &j, Dims &d);
void to_json(Json &j, const VoxelSize &v);
void from_json(const Json &j, VoxelSize &v);
void to_json(Json &j, const UNetConfig &c);
void from_json(const Json &j, UNetConfig &c);
void to_json(Json &j, const BgNetConfig &c);
void from_json(const Json &j, BgNetConfig &c);
void to_json(Json &j, const VarNetConfig &c);
void from_json(const Json &j, VarNetConfig &c);
void to_json(Json &j, const ModelConfig &c);
void from_json(const Json &j, ModelConfig &c);
void to_json(Json &j, const GmmPrior &c);
void from_json(const Json &j, GmmPrior &c);
void to_json(Json &j, const AffineRanges &c);
void from_json(const Json &j, AffineRanges &c);
void to_json(Json &j, const BackgroundSourceSpec &c);
void from_json(const Json &j, BackgroundSourceSpec &c);
void to_json(Json &j, const SynthConfig &c);
void from_json(const Json &j, SynthConfig &c);
void to_json(Json &j, const TrainConfig &c);
void from_json(const Json &j, TrainConfig &c);
void to_json(Json &j, const EpochRecord &r);

// Converts with json errors rethrown as ErrorCode::Config.
template <class T> T config_from_json(const Json &j) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::Config, std::string("invalid configuration: ") + e.what());
    }
}

Json load_json_file(const std::string &path);

} // namespace qsm
