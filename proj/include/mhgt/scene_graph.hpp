#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "mhgt/errors.hpp"

namespace mhgt {

enum class Role { Subject, Object };

inline const char* role_name(Role r) { return r == Role::Subject ? "SUBJECT" : "OBJECT"; }

using BBox = std::array<double, 4>;  // x1, y1, x2, y2; normalized to [0,1]

inline bool bbox_contains(const BBox& outer, const BBox& inner) {
    return outer[0] <= inner[0] && outer[1] <= inner[1] && outer[2] >= inner[2] &&
           outer[3] >= inner[3];
}

inline BBox bbox_union(const BBox& a, const BBox& b) {
    return {std::min(a[0], b[0]), std::min(a[1], b[1]), std::max(a[2], b[2]),
            std::max(a[3], b[3])};
}

struct EntityNode {
    int class_id = -1;
    BBox bbox{0, 0, 0, 0};
    std::vector<double> feature;
    std::string label;  // optional; pseudo-graphs carry labels instead of class ids
};

struct PredicateNode {
    int class_id = -1;
    BBox union_bbox{0, 0, 0, 0};
    std::vector<double> feature;
    std::string label;
};

struct Triplet {
    std::size_t subject = 0;  // entity id
    std::size_t predicate = 0;
    std::size_t object = 0;  // entity id
};

struct RoleEdge {
    std::size_t predicate = 0;
    std::size_t entity = 0;
    Role role = Role::Subject;
};

// Bipartite scene graph: entity and predicate nodes joined by role edges.
// Triplets are (subject, predicate, object); each induces two edges. Role
// edges beyond the triplet set are allowed (e.g. an attribute attached as a
// second OBJECT edge, or a subject-only predicate).
struct SceneGraph {
    std::vector<EntityNode> entities;
    std::vector<PredicateNode> predicates;
    std::vector<Triplet> triplets;
    std::vector<RoleEdge> edges;

    std::size_t entity_count() const { return entities.size(); }
    std::size_t predicate_count() const { return predicates.size(); }
    std::size_t visual_node_count() const { return entities.size() + predicates.size(); }

    bool has_edge(std::size_t p, std::size_t e, Role r) const {
        for (const auto& edge : edges) {
            if (edge.predicate == p && edge.entity == e && edge.role == r) return true;
        }
        return false;
    }

    void validate() const {
        for (const auto& e : entities) {
            if (e.bbox[0] > e.bbox[2] || e.bbox[1] > e.bbox[3]) {
                throw ValidationError("entity bbox has x1 > x2 or y1 > y2");
            }
            if (!entities.empty() && e.feature.size() != entities.front().feature.size()) {
                throw ValidationError("inconsistent entity feature dimensions");
            }
        }
        for (const auto& p : predicates) {
            if (!predicates.empty() && p.feature.size() != predicates.front().feature.size()) {
                throw ValidationError("inconsistent predicate feature dimensions");
            }
        }
        for (const auto& edge : edges) {
            if (edge.predicate >= predicates.size() || edge.entity >= entities.size()) {
                throw ValidationError("role edge references a missing node");
            }
        }
        for (const auto& t : triplets) {
            if (t.subject >= entities.size() || t.object >= entities.size() ||
                t.predicate >= predicates.size()) {
                throw ValidationError("triplet references a missing node");
            }
            if (!has_edge(t.predicate, t.subject, Role::Subject) ||
                !has_edge(t.predicate, t.object, Role::Object)) {
                throw ValidationError("triplet lacks its induced role edges");
            }
        }
    }

    // Strict geometric check; optional because label-only pseudo-graphs have
    // no boxes.
    void validate_union_boxes() const {
        for (const auto& t : triplets) {
            const auto& u = predicates[t.predicate].union_bbox;
            if (!bbox_contains(u, entities[t.subject].bbox) ||
                !bbox_contains(u, entities[t.object].bbox)) {
                throw ValidationError("union_bbox does not contain a triplet endpoint box");
            }
        }
    }
};

// Scene graph plus a clique of skip edges over entities. The base graph is
// shared, not copied.
struct EnhancedGraph {
    const SceneGraph* base = nullptr;
    std::vector<std::pair<std::size_t, std::size_t>> skip_edges;  // unordered entity pairs, i < j
};

inline EnhancedGraph add_skip_edges(const SceneGraph& g) {
    EnhancedGraph out;
    out.base = &g;
    const std::size_t n = g.entity_count();
    out.skip_edges.reserve(n > 1 ? n * (n - 1) / 2 : 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            out.skip_edges.emplace_back(i, j);
        }
    }
    return out;
}

enum class Modality { Text, Entity, Predicate, Special };

enum class SpecialKind { None, Cls, Sep, Mask };

struct TokenDescriptor {
    Modality modality = Modality::Text;
    std::optional<std::size_t> node_id;   // set for Entity/Predicate tokens
    std::optional<std::size_t> vocab_id;  // set for Text tokens
    SpecialKind special = SpecialKind::None;

    static TokenDescriptor text(std::size_t vocab_id) {
        TokenDescriptor t;
        t.modality = Modality::Text;
        t.vocab_id = vocab_id;
        return t;
    }
    static TokenDescriptor entity(std::size_t node_id) {
        TokenDescriptor t;
        t.modality = Modality::Entity;
        t.node_id = node_id;
        return t;
    }
    static TokenDescriptor predicate(std::size_t node_id) {
        TokenDescriptor t;
        t.modality = Modality::Predicate;
        t.node_id = node_id;
        return t;
    }
    static TokenDescriptor special(SpecialKind kind) {
        TokenDescriptor t;
        t.modality = Modality::Special;
        t.special = kind;
        return t;
    }

    bool is_visual() const {
        return modality == Modality::Entity || modality == Modality::Predicate;
    }
};

struct TokenSequence {
    std::vector<TokenDescriptor> tokens;

    std::size_t size() const { return tokens.size(); }

    void validate() const {
        for (const auto& t : tokens) {
            switch (t.modality) {
                case Modality::Text:
                    if (!t.vocab_id || t.node_id) throw ValidationError("bad TEXT token");
                    break;
                case Modality::Entity:
                case Modality::Predicate:
                    if (!t.node_id || t.vocab_id) throw ValidationError("bad visual token");
                    break;
                case Modality::Special:
                    if (t.node_id || t.vocab_id || t.special == SpecialKind::None) {
                        throw ValidationError("bad SPECIAL token");
                    }
                    break;
            }
        }
    }
};

// Pairwise hop distances driving attention masking and kernel rescaling.
// Convention: d[i][i] = 1 so the kernel peak F(1) = 1 never penalizes
// self-attention; cross-modality and text/special pairs are 1.
struct DistanceMatrix {
    std::size_t n = 0;
    std::vector<int> d;  // row-major n x n

    int at(std::size_t i, std::size_t j) const { return d[i * n + j]; }
    int& at(std::size_t i, std::size_t j) { return d[i * n + j]; }
};

namespace detail {

// Adjacency over visual nodes: entities are 0..E-1, predicates E..E+P-1.
inline std::vector<std::vector<std::size_t>> visual_adjacency(const EnhancedGraph& g) {
    const SceneGraph& base = *g.base;
    const std::size_t e_count = base.entity_count();
    std::vector<std::vector<std::size_t>> adj(base.visual_node_count());
    for (const auto& edge : base.edges) {
        const std::size_t p = e_count + edge.predicate;
        adj[p].push_back(edge.entity);
        adj[edge.entity].push_back(p);
    }
    for (const auto& [a, b] : g.skip_edges) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    return adj;
}

inline std::vector<int> bfs_hops(const std::vector<std::vector<std::size_t>>& adj,
                                 std::size_t src) {
    std::vector<int> dist(adj.size(), -1);
    std::queue<std::size_t> q;
    dist[src] = 0;
    q.push(src);
    while (!q.empty()) {
        const std::size_t u = q.front();
        q.pop();
        for (std::size_t v : adj[u]) {
            if (dist[v] < 0) {
                dist[v] = dist[u] + 1;
                q.push(v);
            }
        }
    }
    return dist;
}

}  // namespace detail

// Hop distances between all token pairs. Visual-visual entries are BFS
// shortest paths over the enhanced graph; everything else is 1 (the two
// modalities stay fully connected and text never loses pre-trained attention
// patterns). Unreachable visual pairs get `unreachable_sentinel`, which any
// hop limit h <= n masks out.
inline DistanceMatrix compute_distance_matrix(const TokenSequence& seq, const EnhancedGraph& g,
                                              int unreachable_sentinel) {
    const SceneGraph& base = *g.base;
    const std::size_t n = seq.size();
    const std::size_t e_count = base.entity_count();

    std::vector<std::size_t> visual_node(n, 0);
    std::vector<bool> is_visual(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& tok = seq.tokens[i];
        if (!tok.is_visual()) continue;
        const std::size_t limit =
            tok.modality == Modality::Entity ? e_count : base.predicate_count();
        if (!tok.node_id || *tok.node_id >= limit) {
            throw ValidationError("token references a missing graph node");
        }
        is_visual[i] = true;
        visual_node[i] =
            tok.modality == Modality::Entity ? *tok.node_id : e_count + *tok.node_id;
    }

    const auto adj = detail::visual_adjacency(g);
    std::vector<std::vector<int>> hops(base.visual_node_count());
    for (std::size_t i = 0; i < n; ++i) {
        if (is_visual[i] && hops[visual_node[i]].empty()) {
            hops[visual_node[i]] = detail::bfs_hops(adj, visual_node[i]);
        }
    }

    DistanceMatrix dm;
    dm.n = n;
    dm.d.assign(n * n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_visual[i]) continue;
        const auto& row = hops[visual_node[i]];
        for (std::size_t j = 0; j < n; ++j) {
            if (!is_visual[j] || i == j) continue;
            const int h = row[visual_node[j]];
            dm.at(i, j) = h < 0 ? unreachable_sentinel : std::max(h, 1);
        }
    }
    return dm;
}

inline DistanceMatrix compute_distance_matrix(const TokenSequence& seq, const EnhancedGraph& g) {
    return compute_distance_matrix(seq, g, static_cast<int>(seq.size()) + 1);
}

// Largest finite visual-visual hop distance; unreachable pairs are ignored.
// Zero for graphs with fewer than two visual nodes.
inline int graph_diameter_visual(const EnhancedGraph& g) {
    const auto adj = detail::visual_adjacency(g);
    int diameter = 0;
    for (std::size_t s = 0; s < adj.size(); ++s) {
        const auto dist = detail::bfs_hops(adj, s);
        for (std::size_t t = 0; t < adj.size(); ++t) {
            if (t != s && dist[t] > diameter) diameter = dist[t];
        }
    }
    return diameter;
}

}  // namespace mhgt
