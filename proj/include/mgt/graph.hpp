#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mgt/rng.hpp"
#include "mgt/sketch.hpp"

namespace mgt {

// S x S binary attention mask. Padding positions are isolated: their rows and
// columns are zero except the diagonal (when self-loops are on).
struct AdjacencyMatrix {
    int64_t s = 0;
    int64_t true_len = 0;
    std::vector<uint8_t> data;  // s*s, row-major, entries 0/1
    std::string kind;

    AdjacencyMatrix() = default;
    AdjacencyMatrix(int64_t size, int64_t tlen, std::string k)
        : s(size), true_len(tlen), data(static_cast<size_t>(size * size), 0), kind(std::move(k)) {}

    uint8_t at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * s + j)]; }
    void set(int64_t i, int64_t j, uint8_t v) { data[static_cast<size_t>(i * s + j)] = v; }

    // One row of 0/1 characters per line, for oracle diffing.
    std::string debug_text() const;
};

// Ordered graph-construction spec; token grammar:
//   khop:K | global | full | intra_full | random:p | knn:k | union(a,b,...)
struct GraphSpec {
    enum class Kind { kKhop, kGlobal, kFull, kIntraFull, kRandom, kKnn, kUnion };
    Kind kind = Kind::kKhop;
    int64_t k = 1;           // khop / knn parameter
    double density = 0.1;    // random parameter
    std::vector<GraphSpec> parts;  // union members

    static GraphSpec parse(const std::string& token);
    std::string str() const;
    bool needs_rng() const;
};

std::vector<GraphSpec> parse_graph_list(const std::string& comma_separated);
std::string graph_list_str(std::span<const GraphSpec> specs);

// Intra-stroke K-hop graph: i ~ j iff same stroke and |i - j| <= K.
AdjacencyMatrix build_khop(const SketchTensor& sketch, int64_t k, bool self_loops = true);

// Extra-stroke graph: i ~ j iff |i - j| = 1 and the strokes differ.
AdjacencyMatrix build_global(const SketchTensor& sketch, bool self_loops = true);

AdjacencyMatrix build_full(const SketchTensor& sketch, bool self_loops = true);
AdjacencyMatrix build_intra_full(const SketchTensor& sketch, bool self_loops = true);

// Each unordered non-padding pair is connected independently with the given
// probability, then symmetrized.
AdjacencyMatrix build_random(const SketchTensor& sketch, double density, Rng& rng, bool self_loops = true);

// Directed Euclidean k-NN over non-padding points (ties to the lower index),
// symmetrized by OR.
AdjacencyMatrix build_euclidean_knn(const SketchTensor& sketch, int64_t k, bool self_loops = true);

// Elementwise logical OR; all inputs must share S.
AdjacencyMatrix graph_union(std::span<const AdjacencyMatrix> adjs);

// Dispatch on a spec. rng is required only for random graphs.
AdjacencyMatrix build_graph(const SketchTensor& sketch, const GraphSpec& spec, bool self_loops = true,
                            Rng* rng = nullptr);

}  // namespace mgt
