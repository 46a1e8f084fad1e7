#pragma once

#include <filesystem>

#include "tslora/data.hpp"
#include "tslora/lora.hpp"
#include "tslora/model.hpp"

namespace tslora {

// All three containers share one layout: a text header terminated by a
// line reading "end", followed by raw little-endian 64-bit floats in
// header order. Round trips are bit-exact. Formats are documented in the
// README.

// Header line "tslora-ckpt v1", config fields, then one
// "param <name> <rows> <cols>" line per parameter.
void save_model(const Forecaster& model, const std::filesystem::path& path);
Forecaster load_model(const std::filesystem::path& path);

// Header line "tslora-adapters v1"; one
// "adapter <target> <rank> <alpha> <d> <k>" line per adapter, each
// followed in the payload by A (rank x k) then B (d x rank).
void save_adapters(const AdapterMap& adapters,
                   const std::filesystem::path& path);
// Validates every target against the base model's shapes.
AdapterMap load_adapters(const std::filesystem::path& path,
                         const Forecaster& base);

// Header line "tslora-dataset v1" with vital, scaling, window geometry and
// one "window <split> <patient_id> <series_id>" line per sample; payload is
// context_length + horizon doubles per window in header order.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace tslora
