#include "mgt/graph.hpp"

#include <algorithm>
#include <cmath>

#include "mgt/error.hpp"

namespace mgt {

namespace {

void add_self_loops(AdjacencyMatrix& a) {
    for (int64_t i = 0; i < a.s; ++i) a.set(i, i, 1);
}

AdjacencyMatrix make_base(const SketchTensor& sketch, std::string kind) {
    return AdjacencyMatrix(sketch.seq_len, sketch.true_len, std::move(kind));
}

}  // namespace

std::string AdjacencyMatrix::debug_text() const {
    std::string out;
    out.reserve(static_cast<size_t>(s * (s + 1)));
    for (int64_t i = 0; i < s; ++i) {
        for (int64_t j = 0; j < s; ++j) out += at(i, j) ? '1' : '0';
        out += '\n';
    }
    return out;
}

AdjacencyMatrix build_khop(const SketchTensor& sketch, int64_t k, bool self_loops) {
    check_arg(k >= 1, "build_khop: K must be >= 1");
    AdjacencyMatrix a = make_base(sketch, "khop:" + std::to_string(k));
    int64_t t = sketch.true_len;
    for (int64_t i = 0; i < t; ++i) {
        int64_t lo = std::max<int64_t>(0, i - k);
        int64_t hi = std::min<int64_t>(t - 1, i + k);
        for (int64_t j = lo; j <= hi; ++j)
            if (i != j && sketch.stroke_ids[static_cast<size_t>(i)] == sketch.stroke_ids[static_cast<size_t>(j)])
                a.set(i, j, 1);
    }
    if (self_loops) add_self_loops(a);
    return a;
}

AdjacencyMatrix build_global(const SketchTensor& sketch, bool self_loops) {
    AdjacencyMatrix a = make_base(sketch, "global");
    int64_t t = sketch.true_len;
    for (int64_t i = 0; i + 1 < t; ++i) {
        if (sketch.stroke_ids[static_cast<size_t>(i)] != sketch.stroke_ids[static_cast<size_t>(i + 1)]) {
            a.set(i, i + 1, 1);
            a.set(i + 1, i, 1);
        }
    }
    if (self_loops) add_self_loops(a);
    return a;
}

AdjacencyMatrix build_full(const SketchTensor& sketch, bool self_loops) {
    AdjacencyMatrix a = make_base(sketch, "full");
    int64_t t = sketch.true_len;
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j)
            if (i != j) a.set(i, j, 1);
    if (self_loops) add_self_loops(a);
    return a;
}

AdjacencyMatrix build_intra_full(const SketchTensor& sketch, bool self_loops) {
    AdjacencyMatrix a = make_base(sketch, "intra_full");
    int64_t t = sketch.true_len;
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j)
            if (i != j && sketch.stroke_ids[static_cast<size_t>(i)] == sketch.stroke_ids[static_cast<size_t>(j)])
                a.set(i, j, 1);
    if (self_loops) add_self_loops(a);
    return a;
}

AdjacencyMatrix build_random(const SketchTensor& sketch, double density, Rng& rng, bool self_loops) {
    check_arg(density > 0.0 && density <= 1.0, "build_random: density must be in (0, 1]");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "random:%g", density);
    AdjacencyMatrix a = make_base(sketch, buf);
    int64_t t = sketch.true_len;
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = i + 1; j < t; ++j)
            if (rng.uniform() < density) {
                a.set(i, j, 1);
                a.set(j, i, 1);
            }
    if (self_loops) add_self_loops(a);
    return a;
}

AdjacencyMatrix build_euclidean_knn(const SketchTensor& sketch, int64_t k, bool self_loops) {
    check_arg(k >= 1, "build_euclidean_knn: k must be >= 1");
    AdjacencyMatrix a = make_base(sketch, "knn:" + std::to_string(k));
    int64_t t = sketch.true_len;
    for (int64_t i = 0; i < t; ++i) {
        // Neighbours of i sorted by (distance, index); lower index wins ties.
        std::vector<std::pair<double, int64_t>> cand;
        cand.reserve(static_cast<size_t>(t - 1));
        for (int64_t j = 0; j < t; ++j) {
            if (j == i) continue;
            double dx = sketch.x(i) - sketch.x(j);
            double dy = sketch.y(i) - sketch.y(j);
            cand.emplace_back(dx * dx + dy * dy, j);
        }
        std::sort(cand.begin(), cand.end());
        int64_t take = std::min<int64_t>(k, static_cast<int64_t>(cand.size()));
        for (int64_t n = 0; n < take; ++n) {
            int64_t j = cand[static_cast<size_t>(n)].second;
            a.set(i, j, 1);
            a.set(j, i, 1);  // symmetrize by OR
        }
    }
    if (self_loops) add_self_loops(a);
    return a;
}

AdjacencyMatrix graph_union(std::span<const AdjacencyMatrix> adjs) {
    check_arg(!adjs.empty(), "graph_union: no inputs");
    AdjacencyMatrix out = adjs[0];
    out.kind = "union";
    for (size_t i = 1; i < adjs.size(); ++i) {
        check_arg(adjs[i].s == out.s, "graph_union: mismatched S " + std::to_string(adjs[i].s) +
                                          " vs " + std::to_string(out.s));
        for (size_t p = 0; p < out.data.size(); ++p) out.data[p] |= adjs[i].data[p];
    }
    return out;
}

AdjacencyMatrix build_graph(const SketchTensor& sketch, const GraphSpec& spec, bool self_loops, Rng* rng) {
    switch (spec.kind) {
        case GraphSpec::Kind::kKhop:
            return build_khop(sketch, spec.k, self_loops);
        case GraphSpec::Kind::kGlobal:
            return build_global(sketch, self_loops);
        case GraphSpec::Kind::kFull:
            return build_full(sketch, self_loops);
        case GraphSpec::Kind::kIntraFull:
            return build_intra_full(sketch, self_loops);
        case GraphSpec::Kind::kRandom:
            check_arg(rng != nullptr, "build_graph: random graph needs an rng");
            return build_random(sketch, spec.density, *rng, self_loops);
        case GraphSpec::Kind::kKnn:
            return build_euclidean_knn(sketch, spec.k, self_loops);
        case GraphSpec::Kind::kUnion: {
            std::vector<AdjacencyMatrix> parts;
            parts.reserve(spec.parts.size());
            for (const GraphSpec& p : spec.parts) parts.push_back(build_graph(sketch, p, self_loops, rng));
            return graph_union(parts);
        }
    }
    throw std::logic_error("build_graph: unreachable");
}

bool GraphSpec::needs_rng() const {
    if (kind == Kind::kRandom) return true;
    for (const GraphSpec& p : parts)
        if (p.needs_rng()) return true;
    return false;
}

namespace {

// Splits on top-level commas only (union(...) may contain nested commas).
std::vector<std::string> split_top_level(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    int depth = 0;
    for (char c : s) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == ',' && depth == 0) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

}  // namespace

GraphSpec GraphSpec::parse(const std::string& raw) {
    std::string token = trimmed(raw);
    check_arg(!token.empty(), "GraphSpec: empty token");
    GraphSpec g;
    if (token == "global") {
        g.kind = Kind::kGlobal;
    } else if (token == "full") {
        g.kind = Kind::kFull;
    } else if (token == "intra_full") {
        g.kind = Kind::kIntraFull;
    } else if (token.rfind("khop:", 0) == 0) {
        g.kind = Kind::kKhop;
        g.k = std::stoll(token.substr(5));
        check_arg(g.k >= 1, "GraphSpec: khop K must be >= 1 in `" + token + "`");
    } else if (token.rfind("knn:", 0) == 0) {
        g.kind = Kind::kKnn;
        g.k = std::stoll(token.substr(4));
        check_arg(g.k >= 1, "GraphSpec: knn k must be >= 1 in `" + token + "`");
    } else if (token.rfind("random:", 0) == 0) {
        g.kind = Kind::kRandom;
        g.density = std::stod(token.substr(7));
        check_arg(g.density > 0.0 && g.density <= 1.0, "GraphSpec: random density must be in (0,1] in `" + token + "`");
    } else if (token.rfind("union(", 0) == 0 && token.back() == ')') {
        g.kind = Kind::kUnion;
        std::string inner = token.substr(6, token.size() - 7);
        for (const std::string& part : split_top_level(inner)) g.parts.push_back(parse(part));
        check_arg(!g.parts.empty(), "GraphSpec: empty union in `" + token + "`");
    } else {
        throw UsageError("GraphSpec: unknown graph token `" + token + "`");
    }
    return g;
}

std::string GraphSpec::str() const {
    switch (kind) {
        case Kind::kKhop:
            return "khop:" + std::to_string(k);
        case Kind::kGlobal:
            return "global";
        case Kind::kFull:
            return "full";
        case Kind::kIntraFull:
            return "intra_full";
        case Kind::kRandom: {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "random:%g", density);
            return buf;
        }
        case Kind::kKnn:
            return "knn:" + std::to_string(k);
        case Kind::kUnion: {
            std::string out = "union(";
            for (size_t i = 0; i < parts.size(); ++i) {
                if (i) out += ",";
                out += parts[i].str();
            }
            return out + ")";
        }
    }
    return "?";
}

std::vector<GraphSpec> parse_graph_list(const std::string& comma_separated) {
    std::vector<GraphSpec> out;
    for (const std::string& tok : split_top_level(comma_separated)) {
        std::string t = trimmed(tok);
        if (t.empty()) continue;
        out.push_back(GraphSpec::parse(t));
    }
    check_arg(!out.empty(), "parse_graph_list: no graphs in `" + comma_separated + "`");
    return out;
}

std::string graph_list_str(std::span<const GraphSpec> specs) {
    std::string out;
    for (size_t i = 0; i < specs.size(); ++i) {
        if (i) out += ",";
        out += specs[i].str();
    }
    return out;
}

}  // namespace mgt
