#include "tempofit/kv_memory.hpp"

#include <cstring>
#include <string>
#include <utility>

namespace tempofit {

LayerMemory::LayerMemory(int layer_index, int64_t capacity)
    : layer_index_(layer_index), capacity_(capacity) {
    if (capacity < 1) {
        throw ConfigError("LayerMemory: capacity must be >= 1, got " + std::to_string(capacity));
    }
}

void LayerMemory::write(PrefixKV entry) {
    require_same_shape(entry.keys, entry.values, "LayerMemory::write keys/values");
    if (!entries_.empty()) {
        if (entry.timestep <= entries_.back().timestep) {
            throw OrderingError("LayerMemory::write: timestep " + std::to_string(entry.timestep) +
                                " not greater than stored " + std::to_string(entries_.back().timestep));
        }
        require_same_shape(entry.keys, entries_.back().keys, "LayerMemory::write entry shape");
    }
    entries_.push_back(std::move(entry));
    if (static_cast<int64_t>(entries_.size()) > capacity_) {
        entries_.pop_front();
    }
}

std::optional<MemorySnapshot> LayerMemory::snapshot() const {
    if (entries_.empty()) return std::nullopt;

    const Tensor4& first = entries_.front().keys;
    const int64_t B = first.batch, H = first.heads, S = first.tokens, d = first.dim;
    const int64_t count = static_cast<int64_t>(entries_.size());

    MemorySnapshot snap;
    snap.token_timesteps.reserve(static_cast<size_t>(count * S));
    for (int64_t e = 0; e < count; ++e) {
        for (int64_t s = 0; s < S; ++s) {
            snap.token_timesteps.push_back(entries_[static_cast<size_t>(e)].timestep);
        }
    }

    // oldest-first along the token axis
    if (B == 1) {
        // append-only build: per (head, entry) the source rows are one
        // contiguous block, so the tensors assemble without a zero fill
        snap.k_hist.batch = snap.v_hist.batch = 1;
        snap.k_hist.heads = snap.v_hist.heads = H;
        snap.k_hist.tokens = snap.v_hist.tokens = count * S;
        snap.k_hist.dim = snap.v_hist.dim = d;
        snap.k_hist.data.reserve(static_cast<size_t>(H * count * S * d));
        snap.v_hist.data.reserve(static_cast<size_t>(H * count * S * d));
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t e = 0; e < count; ++e) {
                const PrefixKV& entry = entries_[static_cast<size_t>(e)];
                const double* k = entry.keys.row(0, h, 0);
                const double* v = entry.values.row(0, h, 0);
                snap.k_hist.data.insert(snap.k_hist.data.end(), k, k + S * d);
                snap.v_hist.data.insert(snap.v_hist.data.end(), v, v + S * d);
            }
        }
        return snap;
    }

    snap.k_hist = Tensor4(B, H, count * S, d);
    snap.v_hist = Tensor4(B, H, count * S, d);
    for (int64_t e = 0; e < count; ++e) {
        const PrefixKV& entry = entries_[static_cast<size_t>(e)];
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                std::memcpy(snap.k_hist.row(b, h, e * S), entry.keys.row(b, h, 0),
                            static_cast<size_t>(S * d) * sizeof(double));
                std::memcpy(snap.v_hist.row(b, h, e * S), entry.values.row(b, h, 0),
                            static_cast<size_t>(S * d) * sizeof(double));
            }
        }
    }
    return snap;
}

void LayerMemory::reset() { entries_.clear(); }

int64_t LayerMemory::stored_scalars() const {
    int64_t total = 0;
    for (const PrefixKV& e : entries_) total += e.keys.numel() + e.values.numel();
    return total;
}

MemoryBank::MemoryBank(const std::set<int>& mem_layers, int64_t capacity) {
    for (int l : mem_layers) {
        layers_.emplace(l, LayerMemory(l, capacity));
    }
}

LayerMemory& MemoryBank::layer(int index) {
    auto it = layers_.find(index);
    if (it == layers_.end()) {
        throw ConfigError("MemoryBank: no buffer for layer " + std::to_string(index));
    }
    return it->second;
}

const LayerMemory& MemoryBank::layer(int index) const {
    auto it = layers_.find(index);
    if (it == layers_.end()) {
        throw ConfigError("MemoryBank: no buffer for layer " + std::to_string(index));
    }
    return it->second;
}

void MemoryBank::begin_step(int64_t t) {
    if (t <= last_step_) {
        throw OrderingError("MemoryBank: step timestep " + std::to_string(t) +
                            " does not advance past " + std::to_string(last_step_));
    }
    last_step_ = t;
}

void MemoryBank::reset() {
    for (auto& [_, mem] : layers_) mem.reset();
    last_step_ = -1;
}

int64_t MemoryBank::stored_scalars() const {
    int64_t total = 0;
    for (const auto& [_, mem] : layers_) total += mem.stored_scalars();
    return total;
}

} // namespace tempofit
