#pragma once

#include <map>
#include <string>

#include "crossvlt/attention.hpp"
#include "crossvlt/core.hpp"

namespace crossvlt {

/// Everything a forward pass needs besides its inputs.
template <class T>
struct ForwardContext {
  Scope<T> scope;
  const ModelConfig* config = nullptr;
  int batch = 1;
  /// Training mode: batch norm uses batch statistics and records them.
  bool training = false;
  /// Batch statistics keyed by batch-norm prefix; filled in training mode.
  std::map<std::string, ops::BatchStats<T>>* batch_stats = nullptr;

  Tape<T>& tape() const { return *scope.tape; }
  const ModelConfig& cfg() const { return *config; }
};

}  // namespace crossvlt
