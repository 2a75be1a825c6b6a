#pragma once

// Loop closing: bag-of-words place recognition over binary descriptors,
// geometric + photometric verification of revisit candidates, and pose-graph
// optimization that redistributes accumulated drift over the keyframe chain.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "rgbdo/common.hpp"
#include "rgbdo/features.hpp"
#include "rgbdo/geometry.hpp"
#include "rgbdo/lie.hpp"
#include "rgbdo/mapping.hpp"
#include "rgbdo/optim.hpp"
#include "rgbdo/tracking.hpp"

namespace rgbdo::loop {

// ---------------------------------------------------------------------------
// Vocabulary: a quantization tree over 256-bit descriptors. Internal nodes
// hold cluster representatives; descending to a leaf maps a descriptor to a
// discrete visual word. Words = branching^depth.

struct VocabularyNode {
  features::Descriptor centroid{};
  std::vector<int> children;  // empty for leaves
  int word = -1;              // leaf word id, -1 on internal nodes
};

struct Vocabulary {
  int branching = 0;
  int depth = 0;
  std::vector<VocabularyNode> nodes;  // nodes[0] is the root; its centroid is unused
  std::vector<double> idf;            // per-word inverse document frequency

  bool empty() const { return nodes.empty(); }
  int word_count() const { return static_cast<int>(idf.size()); }

  // Descends the tree choosing the nearest child by Hamming distance (ties
  // to the lowest child index). Optionally reports the distance between the
  // descriptor and the leaf representative it landed on.
  int quantize(const features::Descriptor& d, int* leaf_distance = nullptr) const {
    if (empty()) throw InvalidArgument("Vocabulary::quantize: vocabulary is empty");
    int node = 0;
    int dist = 0;
    while (!nodes[node].children.empty()) {
      int best = -1;
      int best_dist = std::numeric_limits<int>::max();
      for (int child : nodes[node].children) {
        const int hd = features::hamming_distance(d, nodes[child].centroid);
        if (hd < best_dist) {
          best_dist = hd;
          best = child;
        }
      }
      node = best;
      dist = best_dist;
    }
    if (leaf_distance != nullptr) *leaf_distance = dist;
    return nodes[node].word;
  }
};

struct TrainOptions {
  int refine_iterations = 10;            // reassignment rounds per tree node
  int restarts = 4;                      // seedings per node; the cheapest wins
  std::uint64_t seed = 0x726776736c616d;  // fixed so retraining reproduces the tree
};

namespace detail {

// Deterministic uniform double in [0, 1) built from the raw generator output,
// avoiding the implementation-defined std::uniform_real_distribution.
inline double unit_double(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Bitwise majority vote over the member descriptors. A tied bit keeps the
// previous representative's value so refinement cannot oscillate.
inline features::Descriptor majority_centroid(const std::vector<features::Descriptor>& corpus,
                                              const std::vector<int>& members,
                                              const features::Descriptor& previous) {
  if (members.empty()) return previous;
  std::array<int, 256> ones{};
  for (int m : members) {
    const features::Descriptor& d = corpus[m];
    for (int w = 0; w < 4; ++w)
      for (int b = 0; b < 64; ++b)
        if ((d.bits[w] >> b) & 1ull) ++ones[w * 64 + b];
  }
  const int n = static_cast<int>(members.size());
  features::Descriptor out{};
  for (int w = 0; w < 4; ++w) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 64; ++b) {
      const int count = ones[w * 64 + b];
      bool bit;
      if (2 * count > n)
        bit = true;
      else if (2 * count < n)
        bit = false;
      else
        bit = (previous.bits[w] >> b) & 1ull;
      if (bit) bits |= (1ull << b);
    }
    out.bits[w] = bits;
  }
  return out;
}

// Seeding in the k-means++ style: the first seed is drawn uniformly from the
// members, each further seed proportionally to its squared Hamming distance
// from the nearest seed chosen so far. When every remaining distance is zero
// (fewer distinct descriptors than seats) the lowest-index unchosen members
// fill in, and as a last resort seeds repeat.
inline std::vector<features::Descriptor> seed_centroids(
    const std::vector<features::Descriptor>& corpus, const std::vector<int>& members, int k,
    std::mt19937_64& rng) {
  std::vector<features::Descriptor> seeds;
  seeds.reserve(k);
  if (members.empty()) return std::vector<features::Descriptor>(k);

  const int n = static_cast<int>(members.size());
  std::vector<double> dist_sq(n, 0.0);
  std::vector<char> chosen(n, 0);

  const int first = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
  seeds.push_back(corpus[members[first]]);
  chosen[first] = 1;
  for (int m = 0; m < n; ++m) {
    const int d = features::hamming_distance(corpus[members[m]], seeds.back());
    dist_sq[m] = static_cast<double>(d) * d;
  }

  while (static_cast<int>(seeds.size()) < k) {
    double total = 0.0;
    for (int m = 0; m < n; ++m)
      if (!chosen[m]) total += dist_sq[m];
    int pick = -1;
    if (total > 0.0) {
      double target = unit_double(rng) * total;
      for (int m = 0; m < n; ++m) {
        if (chosen[m] || dist_sq[m] <= 0.0) continue;
        target -= dist_sq[m];
        if (target <= 0.0) {
          pick = m;
          break;
        }
      }
      if (pick < 0) {  // numeric tail: fall back to the last weighted member
        for (int m = n - 1; m >= 0; --m)
          if (!chosen[m] && dist_sq[m] > 0.0) {
            pick = m;
            break;
          }
      }
    }
    if (pick < 0) {
      for (int m = 0; m < n; ++m)
        if (!chosen[m]) {
          pick = m;
          break;
        }
    }
    if (pick < 0) {
      seeds.push_back(seeds.back());  // more seats than members: repeat
      continue;
    }
    chosen[pick] = 1;
    seeds.push_back(corpus[members[pick]]);
    for (int m = 0; m < n; ++m) {
      if (chosen[m]) continue;
      const int d = features::hamming_distance(corpus[members[m]], seeds.back());
      const double dsq = static_cast<double>(d) * d;
      dist_sq[m] = std::min(dist_sq[m], dsq);
    }
  }
  return seeds;
}

// One seeded k-medoids run over `members`, scored by total within-cluster
// Hamming distance so callers can keep the best of several restarts.
struct Clustering {
  std::vector<features::Descriptor> centroids;
  std::vector<int> assign;
  long long cost = std::numeric_limits<long long>::max();
};

inline Clustering cluster_members(const std::vector<features::Descriptor>& corpus,
                                  const std::vector<int>& members, int branching,
                                  int refine_iterations, std::mt19937_64& rng) {
  Clustering out;
  out.centroids = seed_centroids(corpus, members, branching, rng);
  out.assign.assign(members.size(), -1);
  for (int round = 0;; ++round) {
    bool changed = false;
    for (std::size_t m = 0; m < members.size(); ++m) {
      int best = 0;
      int best_dist = std::numeric_limits<int>::max();
      for (int c = 0; c < branching; ++c) {
        const int d = features::hamming_distance(corpus[members[m]], out.centroids[c]);
        if (d < best_dist) {
          best_dist = d;
          best = c;
        }
      }
      if (out.assign[m] != best) {
        out.assign[m] = best;
        changed = true;
      }
    }
    if (!changed || round >= refine_iterations) break;
    for (int c = 0; c < branching; ++c) {
      std::vector<int> cluster;
      for (std::size_t m = 0; m < members.size(); ++m)
        if (out.assign[m] == c) cluster.push_back(members[m]);
      out.centroids[c] = majority_centroid(corpus, cluster, out.centroids[c]);
    }
  }
  out.cost = 0;
  for (std::size_t m = 0; m < members.size(); ++m)
    out.cost += features::hamming_distance(corpus[members[m]], out.centroids[out.assign[m]]);
  return out;
}

}  // namespace detail

inline Vocabulary train_vocabulary(const std::vector<features::Descriptor>& corpus, int branching,
                                   int depth, const TrainOptions& options = {}) {
  if (branching < 2) throw InvalidArgument("train_vocabulary: branching must be at least 2");
  if (depth < 1) throw InvalidArgument("train_vocabulary: depth must be at least 1");
  std::uint64_t words = 1;
  for (int l = 0; l < depth; ++l) {
    words *= static_cast<std::uint64_t>(branching);
    if (words > (1ull << 22))
      throw InvalidArgument("train_vocabulary: branching^depth is too large");
  }
  if (corpus.size() < words) {
    std::ostringstream msg;
    msg << "train_vocabulary: corpus has " << corpus.size() << " descriptors but " << words
        << " words were requested";
    throw InvalidArgument(msg.str());
  }

  Vocabulary vocab;
  vocab.branching = branching;
  vocab.depth = depth;
  vocab.nodes.emplace_back();  // root

  std::mt19937_64 rng(options.seed);
  int next_word = 0;

  // Depth-first expansion; children are created and recursed in cluster order
  // so the word numbering and the generator stream are reproducible. Each node
  // keeps the lowest-cost of several seeded clusterings, which guards against
  // an unlucky seeding splitting a natural cluster across subtrees.
  auto expand = [&](auto&& self, int node, std::vector<int> members, int level) -> void {
    detail::Clustering best;
    for (int r = 0; r < std::max(1, options.restarts); ++r) {
      detail::Clustering candidate =
          detail::cluster_members(corpus, members, branching, options.refine_iterations, rng);
      if (candidate.cost < best.cost) best = std::move(candidate);
    }

    for (int c = 0; c < branching; ++c) {
      std::vector<int> cluster;
      for (std::size_t m = 0; m < members.size(); ++m)
        if (best.assign[m] == c) cluster.push_back(members[m]);

      const int child = static_cast<int>(vocab.nodes.size());
      vocab.nodes.emplace_back();
      vocab.nodes[child].centroid = best.centroids[c];
      vocab.nodes[node].children.push_back(child);
      if (level + 1 == depth)
        vocab.nodes[child].word = next_word++;
      else
        self(self, child, std::move(cluster), level + 1);
    }
  };

  std::vector<int> all(corpus.size());
  std::iota(all.begin(), all.end(), 0);
  expand(expand, 0, std::move(all), 0);

  // Inverse frequencies over the training set, smoothed so every word keeps a
  // positive weight (a word matched by every descriptor still scores 1).
  std::vector<int> df(static_cast<std::size_t>(words), 0);
  for (const features::Descriptor& d : corpus) ++df[vocab.quantize(d)];
  vocab.idf.resize(static_cast<std::size_t>(words));
  const double n = static_cast<double>(corpus.size());
  for (std::size_t w = 0; w < vocab.idf.size(); ++w)
    vocab.idf[w] = std::log((n + 1.0) / (static_cast<double>(df[w]) + 1.0)) + 1.0;
  return vocab;
}

// ---------------------------------------------------------------------------
// Bag-of-words frame signatures

struct BowVector {
  std::vector<std::pair<int, double>> weights;  // (word, weight), sorted by word, weights > 0

  bool empty() const { return weights.empty(); }
  std::size_t size() const { return weights.size(); }
  double l1_norm() const {
    double sum = 0.0;
    for (const auto& [word, weight] : weights) sum += std::abs(weight);
    return sum;
  }
};

inline BowVector bow_encode(const std::vector<features::Descriptor>& descriptors,
                            const Vocabulary& vocab) {
  BowVector out;
  if (descriptors.empty()) return out;
  if (vocab.empty()) throw InvalidArgument("bow_encode: vocabulary is empty");
  std::map<int, double> tf;
  for (const features::Descriptor& d : descriptors) tf[vocab.quantize(d)] += 1.0;
  double total = 0.0;
  for (auto& [word, weight] : tf) {
    weight *= vocab.idf[word];
    total += weight;
  }
  out.weights.reserve(tf.size());
  for (const auto& [word, weight] : tf) out.weights.emplace_back(word, weight / total);
  return out;
}

// L1 score: 1 - 0.5 * sum_w |a_w - b_w|, which is 1 for identical signatures
// and 0 for disjoint word supports. Empty signatures carry no appearance
// evidence and score 0 against everything.
inline double bow_similarity(const BowVector& a, const BowVector& b) {
  if (a.empty() || b.empty()) return 0.0;
  double l1 = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.weights.size() && j < b.weights.size()) {
    const auto& [wa, va] = a.weights[i];
    const auto& [wb, vb] = b.weights[j];
    if (wa == wb) {
      l1 += std::abs(va - vb);
      ++i;
      ++j;
    } else if (wa < wb) {
      l1 += std::abs(va);
      ++i;
    } else {
      l1 += std::abs(vb);
      ++j;
    }
  }
  for (; i < a.weights.size(); ++i) l1 += std::abs(a.weights[i].second);
  for (; j < b.weights.size(); ++j) l1 += std::abs(b.weights[j].second);
  return std::clamp(1.0 - 0.5 * l1, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Loop detection: an inverse-indexed signature database with a temporal gate,
// a relative score gate against the query's covisible neighborhood, and a
// sequential-consistency streak before a candidate is emitted.

struct DetectorOptions {
  int temporal_window = 10;    // most recent database entries are never candidates
  double relative_gate = 0.75; // candidate must beat this fraction of the best neighbor score
  int consistency_count = 3;   // consecutive agreeing queries before emitting
};

class LoopDetector {
 public:
  explicit LoopDetector(const mapping::KeyframeMap& map, const DetectorOptions& options = {})
      : map_(&map), options_(options) {}

  // Call after the keyframe landed in the map; query() the keyframe first if
  // it should not match against itself.
  void add_keyframe(int keyframe_id, BowVector bow) {
    if (bows_.count(keyframe_id))
      throw InvalidArgument("LoopDetector: keyframe added twice");
    for (const auto& [word, weight] : bow.weights) inverse_index_[word].push_back(keyframe_id);
    order_.push_back(keyframe_id);
    bows_.emplace(keyframe_id, std::move(bow));
  }

  const BowVector* bow(int keyframe_id) const {
    auto it = bows_.find(keyframe_id);
    return it == bows_.end() ? nullptr : &it->second;
  }

  int size() const { return static_cast<int>(order_.size()); }

  // Returns a loop candidate once the same place (or its covisible
  // neighborhood) has won the scoring on `consistency_count` consecutive
  // queries; otherwise none. A query that produces no admissible winner
  // breaks the streak.
  std::optional<int> detect(int query_id, const BowVector& query_bow) {
    const std::optional<int> winner = best_candidate(query_id, query_bow);
    if (!winner.has_value()) {
      streak_id_ = -1;
      streak_ = 0;
      return std::nullopt;
    }
    const bool extends =
        streak_ > 0 && (*winner == streak_id_ || covisible(*winner, streak_id_));
    streak_ = extends ? streak_ + 1 : 1;
    streak_id_ = *winner;
    if (streak_ >= options_.consistency_count) {
      streak_ = 0;
      streak_id_ = -1;
      return winner;
    }
    return std::nullopt;
  }

 private:
  bool covisible(int a, int b) const {
    return map_->has_keyframe(a) && map_->has_keyframe(b) && map_->covisibility(a, b) > 0;
  }

  std::optional<int> best_candidate(int query_id, const BowVector& query_bow) const {
    if (query_bow.empty() || order_.empty()) return std::nullopt;

    std::unordered_set<int> excluded;
    excluded.insert(query_id);
    const int recent = std::min<int>(options_.temporal_window, static_cast<int>(order_.size()));
    for (int r = 0; r < recent; ++r) excluded.insert(order_[order_.size() - 1 - r]);

    // The query's covisible keyframes set the score baseline; they are not
    // candidates themselves (they would trivially win).
    double baseline = 0.0;
    if (map_->has_keyframe(query_id)) {
      for (const auto& entry : map_->covisible_neighbors(query_id)) {
        const int neighbor = entry.first;
        excluded.insert(neighbor);
        if (const BowVector* nb = bow(neighbor))
          baseline = std::max(baseline, bow_similarity(query_bow, *nb));
      }
    }

    std::unordered_set<int> shortlist;
    for (const auto& [word, weight] : query_bow.weights) {
      auto it = inverse_index_.find(word);
      if (it == inverse_index_.end()) continue;
      for (int kf : it->second)
        if (!excluded.count(kf)) shortlist.insert(kf);
    }

    int best = -1;
    double best_score = 0.0;
    for (int kf : shortlist) {
      const double score = bow_similarity(query_bow, bows_.at(kf));
      if (score > best_score || (score == best_score && best >= 0 && kf < best)) {
        best_score = score;
        best = kf;
      }
    }
    if (best < 0) return std::nullopt;
    if (best_score <= options_.relative_gate * baseline) return std::nullopt;
    return best;
  }

  const mapping::KeyframeMap* map_;
  DetectorOptions options_;
  std::unordered_map<int, std::vector<int>> inverse_index_;
  std::unordered_map<int, BowVector> bows_;
  std::vector<int> order_;  // insertion order, newest last
  int streak_id_ = -1;
  int streak_ = 0;
};

// ---------------------------------------------------------------------------
// Candidate verification: descriptor matches -> closed-form 3D alignment with
// iterative reweighting -> inlier gate -> photometric refinement. The edge
// information comes from the final alignment's Gauss-Newton hessian.

struct VerifyOptions {
  features::MatchOptions matcher{};
  track::AlignmentOptions alignment{};
  int min_inliers = 20;
  bool photometric_refine = true;
  track::PhotometricOptions photometric{};
};

struct LoopConstraint {
  int query = -1;
  int candidate = -1;
  bool accepted = false;
  std::string reason;  // populated on rejection
  lie::Pose relative;  // maps candidate-frame coordinates into the query frame
  lie::Mat6 information = lie::Mat6::Identity();
  int inliers = 0;
  int matches = 0;
  std::vector<std::string> notes;
};

namespace detail {

// Symmetrize and ridge a hessian until it is positive definite, so it can be
// used as edge information. The ridge starts far below the dominant scale.
inline lie::Mat6 make_spd(const lie::Mat6& h) {
  lie::Mat6 sym = 0.5 * (h + h.transpose());
  double ridge = std::max(1e-9, 1e-9 * sym.diagonal().cwiseAbs().maxCoeff());
  for (int attempt = 0; attempt < 40; ++attempt) {
    Eigen::LLT<lie::Mat6> llt(sym + ridge * lie::Mat6::Identity());
    if (llt.info() == Eigen::Success) return sym + ridge * lie::Mat6::Identity();
    ridge *= 10.0;
  }
  return lie::Mat6::Identity();  // hessian was unusable; fall back to a unit prior
}

}  // namespace detail

inline LoopConstraint verify_and_constrain(const mapping::KeyframeMap& map, int query_id,
                                           int candidate_id, const VerifyOptions& options = {}) {
  LoopConstraint out;
  out.query = query_id;
  out.candidate = candidate_id;
  const mapping::Keyframe& query = map.keyframe(query_id);
  const mapping::Keyframe& cand = map.keyframe(candidate_id);

  std::vector<features::Descriptor> cand_desc, query_desc;
  std::vector<int> cand_idx, query_idx;
  for (std::size_t i = 0; i < cand.features.size(); ++i)
    if (cand.features[i].has_descriptor && cand.features[i].depth > 0.f) {
      cand_desc.push_back(cand.features[i].descriptor);
      cand_idx.push_back(static_cast<int>(i));
    }
  for (std::size_t i = 0; i < query.features.size(); ++i)
    if (query.features[i].has_descriptor && query.features[i].depth > 0.f) {
      query_desc.push_back(query.features[i].descriptor);
      query_idx.push_back(static_cast<int>(i));
    }

  const auto matches = features::match(cand_desc, query_desc, options.matcher);
  out.matches = static_cast<int>(matches.size());

  std::vector<geom::Point3> src, dst;  // candidate-frame and query-frame points
  src.reserve(matches.size());
  dst.reserve(matches.size());
  for (const auto& [ci, qi] : matches) {
    const features::FeaturePoint& fc = cand.features[cand_idx[ci]];
    const features::FeaturePoint& fq = query.features[query_idx[qi]];
    src.push_back(
        geom::backproject(fc.pixel, fc.depth, cand.frame.intrinsics, cand.frame.convention));
    dst.push_back(
        geom::backproject(fq.pixel, fq.depth, query.frame.intrinsics, query.frame.convention));
  }

  if (static_cast<int>(src.size()) < std::max(3, options.min_inliers)) {
    std::ostringstream msg;
    msg << "insufficient inliers: only " << src.size() << " descriptor matches with depth ("
        << options.min_inliers << " required)";
    out.reason = msg.str();
    return out;
  }

  lie::Pose seed;
  try {
    seed = track::align_3d_closed_form(src, dst);
  } catch (const Error& e) {
    out.reason = std::string("alignment divergence: ") + e.what();
    return out;
  }
  const track::TrackResult aligned =
      track::refine_3d_alignment(src, dst, seed, options.alignment);
  if (aligned.degenerate) {
    out.reason = "alignment divergence: " + aligned.failure_reason;
    return out;
  }
  if (aligned.inliers < options.min_inliers) {
    std::ostringstream msg;
    msg << "insufficient inliers: " << aligned.inliers << " of " << src.size() << " pairs within "
        << options.alignment.inlier_threshold << " m (" << options.min_inliers << " required)";
    out.reason = msg.str();
    return out;
  }

  out.relative = aligned.pose;
  out.inliers = aligned.inliers;
  lie::Mat6 hessian = aligned.final_hessian;

  if (options.photometric_refine && query.pyramid.level_count() > 0 &&
      cand.pyramid.level_count() > 0) {
    const track::TrackResult photo =
        track::track_photometric(cand.pyramid, query.pyramid, aligned.pose, options.photometric);
    if (photo.ok()) {
      out.relative = photo.pose;
      hessian = photo.final_hessian;
      out.notes.push_back("photometric refinement applied");
    } else {
      out.notes.push_back("photometric refinement skipped: " + photo.failure_reason);
    }
  }

  out.information = detail::make_spd(hessian);
  out.accepted = true;
  return out;
}

// ---------------------------------------------------------------------------
// Pose graph over keyframe poses expressed in the anchor keyframe's camera
// frame. The first node added becomes the anchor and never moves. An edge
// (from=i, to=j) stores the target value of the relative pose mapping
// j-frame coordinates into the i frame; its residual vanishes when
// constraint = T_ia * T_ja^-1.

struct PoseGraphEdge {
  int from = -1;
  int to = -1;
  lie::Pose constraint;  // target i-from-j relative pose
  lie::Mat6 information = lie::Mat6::Identity();
};

inline lie::Vec6 pose_graph_error(const PoseGraphEdge& edge, const lie::Pose& t_from_anchor,
                                  const lie::Pose& t_to_anchor) {
  return lie::log_se3(
             lie::compose(edge.constraint,
                          lie::compose(t_to_anchor, lie::inverse(t_from_anchor))))
      .vector();
}

struct EdgeResidual {
  lie::Vec6 r = lie::Vec6::Zero();
  lie::Mat6 j_from = lie::Mat6::Zero();  // w.r.t. a left-increment on the `from` pose
  lie::Mat6 j_to = lie::Mat6::Zero();    // w.r.t. a left-increment on the `to` pose
};

// Residual plus Jacobians by tangent-space central differences. The residual
// is smooth, so numeric differentiation at h = 1e-6 is accurate to ~1e-9 and
// keeps the linearization auditable against check_jacobian.
inline EdgeResidual pose_graph_residual(const PoseGraphEdge& edge, const lie::Pose& t_from_anchor,
                                        const lie::Pose& t_to_anchor) {
  EdgeResidual out;
  out.r = pose_graph_error(edge, t_from_anchor, t_to_anchor);
  const double h = 1e-6;
  for (int k = 0; k < 6; ++k) {
    lie::Vec6 delta = lie::Vec6::Zero();
    delta(k) = h;
    const lie::Pose from_plus = lie::update_left(t_from_anchor, delta);
    const lie::Pose to_plus = lie::update_left(t_to_anchor, delta);
    delta(k) = -h;
    const lie::Pose from_minus = lie::update_left(t_from_anchor, delta);
    const lie::Pose to_minus = lie::update_left(t_to_anchor, delta);
    out.j_from.col(k) =
        (pose_graph_error(edge, from_plus, t_to_anchor) -
         pose_graph_error(edge, from_minus, t_to_anchor)) /
        (2.0 * h);
    out.j_to.col(k) = (pose_graph_error(edge, t_from_anchor, to_plus) -
                       pose_graph_error(edge, t_from_anchor, to_minus)) /
                      (2.0 * h);
  }
  return out;
}

class PoseGraph {
 public:
  void add_node(int id, const lie::Pose& pose_in_anchor) {
    if (nodes_.count(id)) {
      std::ostringstream msg;
      msg << "PoseGraph: node " << id << " added twice";
      throw InvalidArgument(msg.str());
    }
    if (anchor_ < 0) anchor_ = id;
    order_.push_back(id);
    nodes_.emplace(id, pose_in_anchor);
  }

  void add_edge(PoseGraphEdge edge) {
    if (!nodes_.count(edge.from) || !nodes_.count(edge.to))
      throw InvalidArgument("PoseGraph: edge references a missing node");
    if (edge.from == edge.to) throw InvalidArgument("PoseGraph: self edges are not allowed");
    const double scale = std::max(1.0, edge.information.norm());
    if ((edge.information - edge.information.transpose()).norm() > 1e-9 * scale)
      throw InvalidArgument("PoseGraph: edge information is not symmetric");
    Eigen::LLT<lie::Mat6> llt(edge.information);
    if (llt.info() != Eigen::Success)
      throw InvalidArgument("PoseGraph: edge information is not positive definite");
    edges_.push_back(std::move(edge));
  }

  bool has_node(int id) const { return nodes_.count(id) != 0; }
  const lie::Pose& node(int id) const { return checked(id); }
  lie::Pose& node(int id) { return const_cast<lie::Pose&>(checked(id)); }
  int anchor() const { return anchor_; }
  const std::vector<int>& node_ids() const { return order_; }
  const std::vector<PoseGraphEdge>& edges() const { return edges_; }

  bool connected() const {
    if (order_.empty()) return false;
    std::unordered_map<int, std::vector<int>> adjacency;
    for (const PoseGraphEdge& e : edges_) {
      adjacency[e.from].push_back(e.to);
      adjacency[e.to].push_back(e.from);
    }
    std::unordered_set<int> visited;
    std::deque<int> frontier{order_.front()};
    visited.insert(order_.front());
    while (!frontier.empty()) {
      const int id = frontier.front();
      frontier.pop_front();
      auto it = adjacency.find(id);
      if (it == adjacency.end()) continue;
      for (int next : it->second)
        if (visited.insert(next).second) frontier.push_back(next);
    }
    return visited.size() == nodes_.size();
  }

  // Total edge objective sum_ij r^T Omega r at the current node poses.
  double cost() const {
    double sum = 0.0;
    for (const PoseGraphEdge& e : edges_) {
      const lie::Vec6 r = pose_graph_error(e, nodes_.at(e.from), nodes_.at(e.to));
      sum += r.dot(e.information * r);
    }
    return sum;
  }

 private:
  const lie::Pose& checked(int id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) {
      std::ostringstream msg;
      msg << "PoseGraph: unknown node " << id;
      throw NotFoundError(msg.str());
    }
    return it->second;
  }

  std::map<int, lie::Pose> nodes_;
  std::vector<PoseGraphEdge> edges_;
  std::vector<int> order_;
  int anchor_ = -1;
};

// Odometry edges get a fixed confidence: rotation measurements are trusted
// two orders of magnitude more than translation (information 1e4 vs 1e2).
inline lie::Mat6 odometry_information() {
  lie::Mat6 info = lie::Mat6::Identity();
  info.topLeftCorner<3, 3>() *= 1e4;
  info.bottomRightCorner<3, 3>() *= 1e2;
  return info;
}

// One node per keyframe (pose re-expressed relative to the first keyframe,
// which becomes the fixed anchor) and one odometry edge per consecutive
// keyframe pair, encoding the current relative pose.
inline PoseGraph build_pose_graph(const mapping::KeyframeMap& map) {
  if (map.keyframes().empty()) throw InvalidArgument("build_pose_graph: map has no keyframes");
  PoseGraph graph;
  const int anchor = map.keyframes().begin()->first;
  const lie::Pose t_world_anchor = lie::inverse(map.keyframe(anchor).pose);
  for (const auto& [id, kf] : map.keyframes())
    graph.add_node(id, lie::compose(kf.pose, t_world_anchor));
  int previous = -1;
  for (const auto& [id, kf] : map.keyframes()) {
    if (previous >= 0) {
      PoseGraphEdge edge;
      edge.from = previous;
      edge.to = id;
      edge.constraint = lie::compose(graph.node(previous), lie::inverse(graph.node(id)));
      edge.information = odometry_information();
      graph.add_edge(std::move(edge));
    }
    previous = id;
  }
  return graph;
}

inline PoseGraphEdge loop_edge(const LoopConstraint& constraint) {
  if (!constraint.accepted)
    throw InvalidArgument("loop_edge: cannot build an edge from a rejected constraint");
  PoseGraphEdge edge;
  edge.from = constraint.query;
  edge.to = constraint.candidate;
  edge.constraint = constraint.relative;
  edge.information = constraint.information;
  return edge;
}

inline optim::SolverOptions pose_graph_solver_defaults() {
  optim::SolverOptions options;
  options.max_iterations = 100;
  options.step_tolerance = 1e-12;
  options.cost_tolerance = 1e-14;
  return options;
}

// Levenberg-Marquardt over all non-anchor node poses. The anchor never moves.
inline optim::SolveReport optimize_pose_graph(
    PoseGraph& graph, const optim::SolverOptions& options = pose_graph_solver_defaults()) {
  if (graph.node_ids().empty()) throw InvalidArgument("optimize_pose_graph: graph is empty");
  if (!graph.connected()) throw InvalidArgument("optimize_pose_graph: graph is disconnected");

  optim::State state;
  std::map<int, int> block_of;
  for (int id : graph.node_ids())
    block_of[id] = state.add_pose(graph.node(id), id == graph.anchor());

  std::vector<optim::ResidualBlock> blocks;
  blocks.reserve(graph.edges().size());
  for (const PoseGraphEdge& edge : graph.edges()) {
    const int bi = block_of.at(edge.from);
    const int bj = block_of.at(edge.to);
    optim::ResidualBlock block;
    block.block_ids = {bi, bj};
    block.evaluate = [&edge, bi, bj](const optim::State& s) {
      const EdgeResidual er = pose_graph_residual(edge, s.pose(bi), s.pose(bj));
      optim::ResidualEval eval;
      eval.r = er.r;
      eval.jacobians = {er.j_from, er.j_to};
      eval.information = edge.information;
      return eval;
    };
    blocks.push_back(std::move(block));
  }

  optim::SolveReport report = optim::levenberg_marquardt(blocks, state, options);
  for (int id : graph.node_ids())
    if (id != graph.anchor()) graph.node(id) = state.pose(block_of.at(id));
  return report;
}

// Pushes optimized node poses back into the map. Every keyframe pose becomes
// node-pose composed with the anchor's (unchanged) world pose, and each map
// point rides rigidly with its reference keyframe: the point keeps its
// coordinates in that camera's frame, so P_new = T_new^-1 * T_old * P_old.
inline void apply_pose_graph(const PoseGraph& graph, mapping::KeyframeMap& map) {
  if (graph.node_ids().empty()) return;
  const int anchor = graph.anchor();
  if (!map.has_keyframe(anchor))
    throw InvalidArgument("apply_pose_graph: anchor keyframe is not in the map");
  const lie::Pose t_anchor_world = map.keyframe(anchor).pose;

  std::map<int, lie::Pose> world_correction;
  for (int id : graph.node_ids()) {
    if (id == anchor) continue;  // fixed: bit-identical by construction
    if (!map.has_keyframe(id)) {
      std::ostringstream msg;
      msg << "apply_pose_graph: node " << id << " is not in the map";
      throw InvalidArgument(msg.str());
    }
    const lie::Pose old_pose = map.keyframe(id).pose;
    const lie::Pose new_pose = lie::compose(graph.node(id), t_anchor_world);
    world_correction.emplace(id, lie::compose(lie::inverse(new_pose), old_pose));
    map.keyframe(id).pose = new_pose;
  }

  std::vector<int> point_ids;
  point_ids.reserve(map.points().size());
  for (const auto& entry : map.points()) point_ids.push_back(entry.first);
  for (int pid : point_ids) {
    mapping::MapPoint& point = map.point(pid);
    auto it = world_correction.find(point.ref_keyframe);
    if (it == world_correction.end()) continue;
    point.position = lie::act(it->second, point.position);
  }
}

// ---------------------------------------------------------------------------
// Vocabulary file format: little-endian binary dump with a magic header.
// Layout: "RVOC0001", u32 branching, u32 depth, u64 node count, u64 word
// count, nodes (4x u64 centroid, i32 word, u32 child count, u32 children...),
// then word-count idf doubles. Round-trips bit-exactly.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ParseError("vocabulary file: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw ParseError("vocabulary file: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr char kVocabularyMagic[8] = {'R', 'V', 'O', 'C', '0', '0', '0', '1'};

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NotFoundError("save_vocabulary: cannot open " + path);
  out.write(kVocabularyMagic, 8);
  detail::put_u32(out, static_cast<std::uint32_t>(vocab.branching));
  detail::put_u32(out, static_cast<std::uint32_t>(vocab.depth));
  detail::put_u64(out, vocab.nodes.size());
  detail::put_u64(out, vocab.idf.size());
  for (const VocabularyNode& node : vocab.nodes) {
    for (int w = 0; w < 4; ++w) detail::put_u64(out, node.centroid.bits[w]);
    detail::put_u32(out, static_cast<std::uint32_t>(node.word));
    detail::put_u32(out, static_cast<std::uint32_t>(node.children.size()));
    for (int child : node.children) detail::put_u32(out, static_cast<std::uint32_t>(child));
  }
  for (double idf : vocab.idf) detail::put_u64(out, std::bit_cast<std::uint64_t>(idf));
  out.flush();
  if (!out) throw Error("save_vocabulary: write failed for " + path);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("load_vocabulary: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kVocabularyMagic, 8) != 0)
    throw ParseError("vocabulary file: bad magic header");

  Vocabulary vocab;
  vocab.branching = static_cast<int>(detail::get_u32(in));
  vocab.depth = static_cast<int>(detail::get_u32(in));
  const std::uint64_t node_count = detail::get_u64(in);
  const std::uint64_t word_count = detail::get_u64(in);
  if (node_count > (1ull << 28) || word_count > (1ull << 24))
    throw ParseError("vocabulary file: implausible table sizes");

  vocab.nodes.resize(node_count);
  for (VocabularyNode& node : vocab.nodes) {
    for (int w = 0; w < 4; ++w) node.centroid.bits[w] = detail::get_u64(in);
    node.word = static_cast<std::int32_t>(detail::get_u32(in));
    const std::uint32_t n_children = detail::get_u32(in);
    if (n_children > node_count) throw ParseError("vocabulary file: corrupt child count");
    node.children.resize(n_children);
    for (std::uint32_t c = 0; c < n_children; ++c) {
      const std::uint32_t child = detail::get_u32(in);
      if (child >= node_count) throw ParseError("vocabulary file: child index out of range");
      node.children[c] = static_cast<int>(child);
    }
  }
  vocab.idf.resize(word_count);
  for (double& idf : vocab.idf) idf = std::bit_cast<double>(detail::get_u64(in));
  return vocab;
}

}  // namespace rgbdo::loop
