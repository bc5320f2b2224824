#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "icdyn/model.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/train.hpp"

namespace icdyn {

// Throws InvalidArgument naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& context);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

nlohmann::json quantizer_to_json(const QuantizerSpec& q);
QuantizerSpec quantizer_from_json(const nlohmann::json& j);

}  // namespace icdyn
