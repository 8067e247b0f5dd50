#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "dms/network.hpp"

namespace dms {

// Adam moments carried inside a search-state checkpoint so a restored run
// continues bit-identically.
struct OptimizerState {
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;  // parallel to Network::params()
};

struct SearchState {
  int epoch = 0;
  double r_t = 0.0;
  std::string rng;  // serialized mt19937_64 stream
  OptimizerState opt;
};

// Versioned binary blobs with an embedded schema tag.
inline constexpr const char* kWeightsTag = "dms-weights/1";
inline constexpr const char* kSearchStateTag = "dms-search-state/1";

void save_weights(const Network& net, const std::string& path);
void load_weights(Network& net, const std::string& path);

void save_search_state(const Network& net, const SearchState& state, const std::string& path);
SearchState load_search_state(Network& net, const std::string& path);

// Serialized weight bytes (names, shapes, values) hashed with FNV-1a 64.
std::string weights_digest(const Network& net);

// How many checkpoints this process has read; pipelines that must never read
// one are checked against it.
uint64_t checkpoint_load_count();

}  // namespace dms
