#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "tempofit/tensor.hpp"

namespace tempofit {

// One past timestep's prefix-time K/V projections, cached pre-RoPE.
struct PrefixKV {
    Tensor4 keys;   // [B,H,S,d]
    Tensor4 values; // [B,H,S,d]
    int64_t timestep = 0;
};

// All buffered history of one layer, concatenated oldest-first along the
// token axis. token_timesteps holds the source timestep of every token.
struct MemorySnapshot {
    Tensor4 k_hist; // [B,H,C'*S,d]
    Tensor4 v_hist; // [B,H,C'*S,d]
    std::vector<int64_t> token_timesteps;
};

// Bounded FIFO of PrefixKV entries for one layer. Writes must carry strictly
// increasing timesteps; overflowing the capacity evicts the single oldest
// entry. Entry content is never mutated after a write.
class LayerMemory {
public:
    LayerMemory(int layer_index, int64_t capacity);

    void write(PrefixKV entry);
    std::optional<MemorySnapshot> snapshot() const;
    void reset();

    int64_t size() const { return static_cast<int64_t>(entries_.size()); }
    int64_t capacity() const { return capacity_; }
    int layer_index() const { return layer_index_; }
    bool empty() const { return entries_.empty(); }
    int64_t latest_timestep() const { return entries_.empty() ? -1 : entries_.back().timestep; }
    int64_t stored_scalars() const;
    const std::deque<PrefixKV>& entries() const { return entries_; }

private:
    int layer_index_ = 0;
    int64_t capacity_ = 0;
    std::deque<PrefixKV> entries_;
};

// Per-layer LayerMemory map for one episode stream, plus the stream's step
// ordering state. One MemoryBank per concurrent episode; never shared.
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(const std::set<int>& mem_layers, int64_t capacity);

    bool has_layer(int layer) const { return layers_.count(layer) != 0; }
    LayerMemory& layer(int index);
    const LayerMemory& layer(int index) const;
    const std::map<int, LayerMemory>& layers() const { return layers_; }

    // Registers a forward step at timestep t; throws OrderingError if t does
    // not advance past the previous step of this stream.
    void begin_step(int64_t t);

    // Episode boundary: empties every buffer and rewinds the step counter.
    void reset();

    int64_t last_step() const { return last_step_; }
    int64_t stored_scalars() const;

private:
    std::map<int, LayerMemory> layers_;
    int64_t last_step_ = -1;
};

} // namespace tempofit
