#pragma once

// End-to-end RGB-D odometry / SLAM runs: frame-to-keyframe tracking with
// constant-velocity prediction, keyframe insertion with windowed bundle
// adjustment, and optional appearance-based loop closing with pose-graph
// correction, all configured through a plain-text key-value file.
//
// Two execution modes share the per-frame logic:
//  * deterministic: everything runs sequentially on the caller's thread and
//    two runs with the same inputs produce bit-identical outputs;
//  * threaded (default): a prefetch thread decodes frames ahead of tracking,
//    and a mapping worker consumes keyframes and loop-closure work through a
//    bounded queue. Tracking reads immutable snapshots of its reference
//    keyframe, the mapping worker is the map's only writer.
//
// The final trajectory stores each frame relative to its reference keyframe
// and is materialized against the keyframe poses after the run, so bundle
// adjustment and loop corrections retroactively move every frame they affect.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/dataset.hpp"
#include "rgbdo/features.hpp"
#include "rgbdo/geometry.hpp"
#include "rgbdo/lie.hpp"
#include "rgbdo/loop.hpp"
#include "rgbdo/mapping.hpp"
#include "rgbdo/tracking.hpp"
#include "rgbdo/trajectory.hpp"

namespace rgbdo::pipeline {

// Configuration problems: unknown keys, bad values, missing required fields.
struct ConfigError : Error {
  using Error::Error;
};

enum class Tracker { kPhotometric, kFeatureBa, kIcp, kSeededPhotometric };
enum class BaKind { kGeometric, kPhotometric, kNone };

inline const char* tracker_name(Tracker t) {
  switch (t) {
    case Tracker::kPhotometric: return "photometric";
    case Tracker::kFeatureBa: return "feature_ba";
    case Tracker::kIcp: return "icp";
    case Tracker::kSeededPhotometric: return "seeded_photometric";
  }
  return "?";
}

inline Tracker parse_tracker(const std::string& name) {
  if (name == "photometric") return Tracker::kPhotometric;
  if (name == "feature_ba") return Tracker::kFeatureBa;
  if (name == "icp") return Tracker::kIcp;
  if (name == "seeded_photometric") return Tracker::kSeededPhotometric;
  throw ConfigError("config: unknown tracker '" + name +
                    "' (expected photometric, feature_ba, icp, or seeded_photometric)");
}

inline const char* ba_kind_name(BaKind k) {
  switch (k) {
    case BaKind::kGeometric: return "geometric";
    case BaKind::kPhotometric: return "photometric";
    case BaKind::kNone: return "none";
  }
  return "?";
}

inline BaKind parse_ba_kind(const std::string& name) {
  if (name == "geometric") return BaKind::kGeometric;
  if (name == "photometric") return BaKind::kPhotometric;
  if (name == "none") return BaKind::kNone;
  throw ConfigError("config: unknown ba kind '" + name +
                    "' (expected geometric, photometric, or none)");
}

// Every tunable of the pipeline with its module default. The camera
// intrinsics have no default: a run without them is a configuration error.
struct PipelineConfig {
  std::optional<geom::CameraIntrinsics> intrinsics;
  geom::DepthConvention convention = geom::DepthConvention::kZDepth;
  double depth_scale = io::kDepthScale;
  double max_association_dt = 0.02;

  Tracker tracker = Tracker::kPhotometric;
  int pyramid_levels = 3;
  track::PhotometricOptions photometric;
  track::AlignmentOptions alignment;
  track::MotionOnlyOptions motion;
  track::IcpOptions icp;
  features::DetectorOptions detector;
  features::MatchOptions matcher;

  mapping::KeyframePolicy keyframe;
  BaKind ba = BaKind::kGeometric;
  int ba_window = 5;
  mapping::BaOptions ba_options;

  bool loop_closing = true;
  std::string vocabulary_path;
  loop::DetectorOptions loop_detector;
  loop::VerifyOptions loop_verify;
  int loop_cooldown = 30;  // frames without loop queries after a verification

  bool deterministic = false;
  std::uint64_t seed = 0;
  int queue_capacity = 4;
  int max_frames = -1;  // -1: the whole sequence
  int max_consecutive_failures = 10;

  void validate() const {
    if (!intrinsics) throw ConfigError("config: camera intrinsics are missing");
    try {
      intrinsics->validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    if (pyramid_levels < 1) throw ConfigError("config: pyramid_levels must be at least 1");
    if (ba_window < 1) throw ConfigError("config: ba_window must be at least 1");
    if (queue_capacity < 1) throw ConfigError("config: queue_capacity must be at least 1");
    if (loop_cooldown < 0) throw ConfigError("config: loop_cooldown must be non-negative");
    if (max_consecutive_failures < 1)
      throw ConfigError("config: max_consecutive_failures must be at least 1");
    if (!(depth_scale > 0.0)) throw ConfigError("config: depth_scale must be positive");
    if (!(max_association_dt > 0.0))
      throw ConfigError("config: max_association_dt must be positive");
    if (!vocabulary_path.empty() && !std::filesystem::exists(vocabulary_path))
      throw ConfigError("config: vocabulary file does not exist: " + vocabulary_path);
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& value, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    std::ostringstream msg;
    msg << "config: bad numeric value '" << value << "' for key '" << key << "'";
    if (line > 0) msg << " (line " << line << ")";
    throw ConfigError(msg.str());
  }
}

inline int parse_int(const std::string& key, const std::string& value, int line) {
  const double v = parse_double(key, value, line);
  const int i = static_cast<int>(v);
  if (static_cast<double>(i) != v) {
    std::ostringstream msg;
    msg << "config: key '" << key << "' needs an integer, got '" << value << "'";
    if (line > 0) msg << " (line " << line << ")";
    throw ConfigError(msg.str());
  }
  return i;
}

inline bool parse_bool(const std::string& key, const std::string& value, int line) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  std::ostringstream msg;
  msg << "config: key '" << key << "' needs a boolean (1/0/true/false/on/off), got '" << value
      << "'";
  if (line > 0) msg << " (line " << line << ")";
  throw ConfigError(msg.str());
}

}  // namespace detail

// Applies one "key value" setting; used by both the config file loader and
// command-line overrides. Throws ConfigError on unknown keys or bad values.
inline void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                               const std::string& value, int line = 0) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;

  auto k = [&]() -> geom::CameraIntrinsics& {
    if (!cfg.intrinsics) cfg.intrinsics.emplace();
    return *cfg.intrinsics;
  };

  if (key == "fx") k().fx = parse_double(key, value, line);
  else if (key == "fy") k().fy = parse_double(key, value, line);
  else if (key == "u0") k().u0 = parse_double(key, value, line);
  else if (key == "v0") k().v0 = parse_double(key, value, line);
  else if (key == "width") k().width = parse_int(key, value, line);
  else if (key == "height") k().height = parse_int(key, value, line);
  else if (key == "depth_convention") {
    if (value == "z") cfg.convention = geom::DepthConvention::kZDepth;
    else if (value == "ray") cfg.convention = geom::DepthConvention::kRayLength;
    else {
      std::ostringstream msg;
      msg << "config: depth_convention must be 'z' or 'ray', got '" << value << "'";
      if (line > 0) msg << " (line " << line << ")";
      throw ConfigError(msg.str());
    }
  } else if (key == "depth_scale") cfg.depth_scale = parse_double(key, value, line);
  else if (key == "max_association_dt") cfg.max_association_dt = parse_double(key, value, line);
  else if (key == "tracker") cfg.tracker = parse_tracker(value);
  else if (key == "pyramid_levels") cfg.pyramid_levels = parse_int(key, value, line);
  else if (key == "photometric_huber") cfg.photometric.huber_delta = parse_double(key, value, line);
  else if (key == "photometric_min_valid_fraction")
    cfg.photometric.min_valid_fraction = parse_double(key, value, line);
  else if (key == "photometric_max_iterations")
    cfg.photometric.max_iterations_per_level = parse_int(key, value, line);
  else if (key == "photometric_keep_fraction")
    cfg.photometric.gradient_keep_fraction = parse_double(key, value, line);
  else if (key == "alignment_huber") cfg.alignment.huber_delta = parse_double(key, value, line);
  else if (key == "alignment_inlier_threshold")
    cfg.alignment.inlier_threshold = parse_double(key, value, line);
  else if (key == "motion_huber") cfg.motion.huber_delta = parse_double(key, value, line);
  else if (key == "motion_min_inliers") cfg.motion.min_inliers = parse_int(key, value, line);
  else if (key == "icp_huber") cfg.icp.huber_delta = parse_double(key, value, line);
  else if (key == "icp_max_pair_distance")
    cfg.icp.max_pair_distance = parse_double(key, value, line);
  else if (key == "icp_max_points") cfg.icp.max_points = parse_int(key, value, line);
  else if (key == "detector_threshold") cfg.detector.threshold = parse_double(key, value, line);
  else if (key == "detector_target_count")
    cfg.detector.target_count = parse_int(key, value, line);
  else if (key == "matcher_max_distance") cfg.matcher.max_distance = parse_int(key, value, line);
  else if (key == "matcher_ratio") cfg.matcher.ratio = parse_double(key, value, line);
  else if (key == "keyframe_min_translation")
    cfg.keyframe.min_translation = parse_double(key, value, line);
  else if (key == "keyframe_min_rotation_deg")
    cfg.keyframe.min_rotation = parse_double(key, value, line) * std::numbers::pi / 180.0;
  else if (key == "keyframe_min_tracked_ratio")
    cfg.keyframe.min_tracked_ratio = parse_double(key, value, line);
  else if (key == "ba") cfg.ba = parse_ba_kind(value);
  else if (key == "ba_window") cfg.ba_window = parse_int(key, value, line);
  else if (key == "ba_iterations") cfg.ba_options.max_iterations = parse_int(key, value, line);
  else if (key == "ba_huber") cfg.ba_options.huber_delta = parse_double(key, value, line);
  else if (key == "loop_closing") cfg.loop_closing = parse_bool(key, value, line);
  else if (key == "vocabulary") cfg.vocabulary_path = value;
  else if (key == "loop_temporal_window")
    cfg.loop_detector.temporal_window = parse_int(key, value, line);
  else if (key == "loop_relative_gate")
    cfg.loop_detector.relative_gate = parse_double(key, value, line);
  else if (key == "loop_consistency")
    cfg.loop_detector.consistency_count = parse_int(key, value, line);
  else if (key == "loop_min_inliers") cfg.loop_verify.min_inliers = parse_int(key, value, line);
  else if (key == "loop_photometric_refine")
    cfg.loop_verify.photometric_refine = parse_bool(key, value, line);
  else if (key == "loop_cooldown") cfg.loop_cooldown = parse_int(key, value, line);
  else if (key == "deterministic") cfg.deterministic = parse_bool(key, value, line);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_double(key, value, line));
  else if (key == "queue_capacity") cfg.queue_capacity = parse_int(key, value, line);
  else if (key == "max_frames") cfg.max_frames = parse_int(key, value, line);
  else if (key == "max_consecutive_failures")
    cfg.max_consecutive_failures = parse_int(key, value, line);
  else {
    std::ostringstream msg;
    msg << "config: unknown key '" << key << "'";
    if (line > 0) msg << " (line " << line << ")";
    throw ConfigError(msg.str());
  }
}

// Plain-text configuration: one "key value" pair per line, '#' comments.
inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("load_config: cannot open " + path);
  PipelineConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    std::string key, value;
    ss >> key;
    std::getline(ss, value);
    const std::size_t start = value.find_first_not_of(" \t");
    const std::size_t end = value.find_last_not_of(" \t\r");
    value = start == std::string::npos ? std::string() : value.substr(start, end - start + 1);
    if (value.empty()) {
      std::ostringstream msg;
      msg << "config: key '" << key << "' has no value (line " << line_no << ")";
      throw ConfigError(msg.str());
    }
    apply_config_entry(cfg, key, value, line_no);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Run reports: a machine-readable audit of everything the run did, including
// initial/final cost and iteration count for every solver invocation.

struct SolverEvent {
  std::string label;  // e.g. "track:f12:s0", "ba:kf5", "posegraph:q41:c0"
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::string termination;
};

struct FrameEvent {
  int index = 0;
  double timestamp = 0.0;
  bool tracked = true;
  bool fallback = false;  // constant-velocity propagation was used
  double valid_fraction = 0.0;
  int inliers = 0;
  int keyframe_id = -1;  // >= 0 when this frame became a keyframe
  std::string note;
};

struct LoopEvent {
  int query = -1;
  int candidate = -1;
  bool accepted = false;
  int inliers = 0;
  int matches = 0;
  std::string detail;
};

struct RunReport {
  std::string mode;  // "odometry" when loop closing is inactive, else "slam"
  bool deterministic = false;
  std::uint64_t seed = 0;
  int frames_total = 0;
  int frames_processed = 0;
  int keyframes = 0;
  int points = 0;
  int loop_attempts = 0;
  int loop_closures = 0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<FrameEvent> frames;
  std::vector<SolverEvent> solvers;
  std::vector<LoopEvent> loops;
};

namespace detail {

inline void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

inline std::string single_line(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c == '\n' || c == '\r') c = ' ';
  return out;
}

}  // namespace detail

inline void write_report(const std::string& path, const RunReport& r) {
  std::string out;
  out += "mode " + r.mode + "\n";
  out += "deterministic " + std::to_string(r.deterministic ? 1 : 0) + "\n";
  out += "seed " + std::to_string(r.seed) + "\n";
  out += "frames_total " + std::to_string(r.frames_total) + "\n";
  out += "frames_processed " + std::to_string(r.frames_processed) + "\n";
  out += "keyframes " + std::to_string(r.keyframes) + "\n";
  out += "points " + std::to_string(r.points) + "\n";
  out += "loop_attempts " + std::to_string(r.loop_attempts) + "\n";
  out += "loop_closures " + std::to_string(r.loop_closures) + "\n";
  out += "aborted " + std::to_string(r.aborted ? 1 : 0) + "\n";
  out += "abort_reason " + (r.abort_reason.empty() ? "none" : detail::single_line(r.abort_reason)) +
         "\n";
  for (const FrameEvent& f : r.frames) {
    out += "frame index=" + std::to_string(f.index) + " timestamp=";
    detail::append_number(out, f.timestamp);
    out += " tracked=" + std::to_string(f.tracked ? 1 : 0);
    out += " fallback=" + std::to_string(f.fallback ? 1 : 0);
    out += " valid_fraction=";
    detail::append_number(out, f.valid_fraction);
    out += " inliers=" + std::to_string(f.inliers);
    out += " keyframe=" + std::to_string(f.keyframe_id);
    out += " note=" + (f.note.empty() ? "-" : detail::single_line(f.note)) + "\n";
  }
  for (const SolverEvent& s : r.solvers) {
    out += "solver label=" + s.label + " initial_cost=";
    detail::append_number(out, s.initial_cost);
    out += " final_cost=";
    detail::append_number(out, s.final_cost);
    out += " iterations=" + std::to_string(s.iterations);
    out += " termination=" + detail::single_line(s.termination) + "\n";
  }
  for (const LoopEvent& l : r.loops) {
    out += "loop query=" + std::to_string(l.query) + " candidate=" + std::to_string(l.candidate);
    out += " accepted=" + std::to_string(l.accepted ? 1 : 0);
    out += " inliers=" + std::to_string(l.inliers);
    out += " matches=" + std::to_string(l.matches);
    out += " detail=" + (l.detail.empty() ? "-" : detail::single_line(l.detail)) + "\n";
  }
  std::ofstream file(path);
  if (!file) throw Error("write_report: cannot open " + path);
  file << out;
  if (!file) throw Error("write_report: write failed for " + path);
}

struct RunResult {
  io::Trajectory trajectory;  // camera-to-world, one entry per processed frame
  RunReport report;
  mapping::KeyframeMap map;
};

// ---------------------------------------------------------------------------
// Internals shared by the sequential and threaded modes.

namespace detail {

// A frame's pose relative to its reference keyframe (current-from-reference).
// World poses are materialized at the end against the final keyframe poses.
struct FramePose {
  double timestamp = 0.0;
  int ref_seq = -1;
  lie::Pose rel;
};

inline void record_track_stages(std::vector<SolverEvent>& events, int frame_index,
                                const track::TrackResult& result) {
  for (std::size_t s = 0; s < result.reports.size(); ++s) {
    const optim::SolveReport& rep = result.reports[s];
    SolverEvent ev;
    ev.label = "track:f" + std::to_string(frame_index) + ":s" + std::to_string(s);
    ev.initial_cost = rep.initial_cost;
    ev.final_cost = rep.final_cost;
    ev.iterations = rep.iterations;
    ev.termination = optim::to_string(rep.termination);
    events.push_back(std::move(ev));
  }
}

inline std::string join_notes(const std::vector<std::string>& notes) {
  std::string out;
  for (const std::string& n : notes) {
    if (!out.empty()) out += "; ";
    out += n;
  }
  return out;
}

inline track::TrackResult run_tracker(const PipelineConfig& cfg, const mapping::Keyframe& ref,
                                      const geom::RgbdFrame& frame, const geom::Pyramid& pyramid,
                                      const lie::Pose& initial) {
  try {
    switch (cfg.tracker) {
      case Tracker::kPhotometric:
        return track::track_photometric(ref.pyramid, pyramid, initial, cfg.photometric);
      case Tracker::kFeatureBa: {
        track::FeatureTrackOptions o;
        o.detector = cfg.detector;
        o.matcher = cfg.matcher;
        o.motion = cfg.motion;
        return track::track_features(ref.pyramid, pyramid, initial, o).track;
      }
      case Tracker::kIcp:
        return track::icp_point_to_plane(ref.frame, frame, initial, cfg.icp);
      case Tracker::kSeededPhotometric: {
        track::SeededOptions o;
        o.feature.detector = cfg.detector;
        o.feature.matcher = cfg.matcher;
        o.feature.motion = cfg.motion;
        o.alignment = cfg.alignment;
        o.photometric = cfg.photometric;
        return track::track_seeded_photometric(ref.pyramid, pyramid, initial, o);
      }
    }
  } catch (const Error& e) {
    track::TrackResult failed;
    failed.pose = initial;
    failed.degenerate = true;
    failed.failure_reason = std::string("tracker threw: ") + e.what();
    return failed;
  }
  throw InvalidArgument("run_tracker: unhandled tracker kind");
}

inline mapping::Keyframe make_keyframe(const geom::RgbdFrame& frame, geom::Pyramid pyramid,
                                       const lie::Pose& pose_cw,
                                       std::vector<features::FeaturePoint> feats) {
  mapping::Keyframe kf;
  kf.timestamp = frame.timestamp;
  kf.pose = pose_cw;
  kf.frame = frame;
  kf.pyramid = std::move(pyramid);
  kf.features = std::move(feats);
  return kf;
}

// Owns the map, runs insertion + local bundle adjustment, maintains the loop
// database, and performs loop verification and pose-graph correction. The
// single writer of the map in both execution modes.
class Mapper {
 public:
  explicit Mapper(const PipelineConfig& cfg) : cfg_(cfg), detector_(map_, cfg.loop_detector) {}

  mapping::KeyframeMap& map() { return map_; }
  const std::vector<int>& seq_to_id() const { return seq_to_id_; }
  std::vector<SolverEvent>& solver_events() { return solvers_; }
  std::vector<LoopEvent>& loop_events() { return loops_; }
  int closures() const { return closures_; }

  // Inserts a keyframe built by the tracker, spawns/extends map points, runs
  // the windowed bundle adjustment, and (when a loop candidate came with the
  // keyframe) verifies it and corrects the pose graph. Returns the id.
  int insert(mapping::Keyframe kf, std::optional<loop::BowVector> bow, int loop_candidate) {
    const int id = map_.add_keyframe(std::move(kf));
    seq_to_id_.push_back(id);
    mapping::triangulate_or_anchor(map_, id);

    if (cfg_.ba != BaKind::kNone && map_.keyframes().size() >= 2 && !map_.points().empty()) {
      const std::vector<int> window = mapping::local_window(map_, id, cfg_.ba_window);
      const std::vector<int> fixed{window.front()};  // oldest window keyframe is the gauge
      SolverEvent ev;
      ev.label = "ba:kf" + std::to_string(id);
      try {
        const optim::SolveReport rep =
            cfg_.ba == BaKind::kGeometric
                ? mapping::geometric_ba(map_, window, fixed, cfg_.ba_options)
                : mapping::photometric_ba(map_, window, fixed, cfg_.ba_options);
        ev.initial_cost = rep.initial_cost;
        ev.final_cost = rep.final_cost;
        ev.iterations = rep.iterations;
        ev.termination = optim::to_string(rep.termination);
      } catch (const Error& e) {
        ev.termination = std::string("ERROR: ") + e.what();
      }
      solvers_.push_back(std::move(ev));
    }

    if (bow) detector_.add_keyframe(id, std::move(*bow));
    if (loop_candidate >= 0 && map_.has_keyframe(loop_candidate)) close_loop(id, loop_candidate);
    return id;
  }

  // Per-frame place-recognition query. `ref_seq` names the tracking reference
  // keyframe whose covisible neighborhood sets the score baseline. Returns a
  // candidate keyframe id once the detector's consistency streak completes.
  std::optional<int> query(int ref_seq, const loop::BowVector& bow) {
    if (cooldown_ > 0) {
      --cooldown_;
      return std::nullopt;
    }
    if (ref_seq < 0 || ref_seq >= static_cast<int>(seq_to_id_.size())) return std::nullopt;
    return detector_.detect(seq_to_id_[ref_seq], bow);
  }

 private:
  void close_loop(int query_id, int candidate_id) {
    cooldown_ = cfg_.loop_cooldown;
    const loop::LoopConstraint c =
        loop::verify_and_constrain(map_, query_id, candidate_id, cfg_.loop_verify);
    LoopEvent ev;
    ev.query = query_id;
    ev.candidate = candidate_id;
    ev.accepted = c.accepted;
    ev.inliers = c.inliers;
    ev.matches = c.matches;
    ev.detail = c.accepted ? join_notes(c.notes) : c.reason;
    loops_.push_back(std::move(ev));
    if (!c.accepted) return;

    loop::PoseGraph graph = loop::build_pose_graph(map_);
    graph.add_edge(loop::loop_edge(c));
    SolverEvent sev;
    sev.label = "posegraph:q" + std::to_string(query_id) + ":c" + std::to_string(candidate_id);
    try {
      const optim::SolveReport rep = loop::optimize_pose_graph(graph);
      sev.initial_cost = rep.initial_cost;
      sev.final_cost = rep.final_cost;
      sev.iterations = rep.iterations;
      sev.termination = optim::to_string(rep.termination);
      solvers_.push_back(std::move(sev));
      loop::apply_pose_graph(graph, map_);
      ++closures_;
    } catch (const Error& e) {
      sev.termination = std::string("ERROR: ") + e.what();
      solvers_.push_back(std::move(sev));
    }
  }

  const PipelineConfig& cfg_;
  mapping::KeyframeMap map_;
  loop::LoopDetector detector_;
  std::vector<int> seq_to_id_;
  std::vector<SolverEvent> solvers_;
  std::vector<LoopEvent> loops_;
  int cooldown_ = 0;
  int closures_ = 0;
};

// Tracking-side per-frame state: the reference keyframe snapshot and the
// constant-velocity motion model (frame-to-frame camera motion).
struct TrackerState {
  int ref_seq = -1;
  mapping::Keyframe ref;      // snapshot: pose at creation time + image data
  lie::Pose last_rel;         // previous frame, current-from-reference
  lie::Pose velocity;         // previous frame-to-frame motion
  int consecutive_failures = 0;
  std::vector<lie::Pose> kf_poses;  // keyframe poses at creation (threaded policy)
};

struct FrameStep {
  FrameEvent event;
  FramePose record;
  bool make_kf = false;
  lie::Pose kf_pose;  // world-to-camera for the new keyframe
  track::TrackResult result;
};

// Tracks one frame against the reference snapshot and decides (policy only;
// loop-forced insertions are the caller's business) whether it should become
// a keyframe. Shared verbatim by the sequential and threaded drivers.
inline FrameStep track_one_frame(const PipelineConfig& cfg, TrackerState& state, int index,
                                 const geom::RgbdFrame& frame, const geom::Pyramid& pyramid,
                                 std::span<const lie::Pose> kf_poses) {
  FrameStep step;
  step.event.index = index;
  step.event.timestamp = frame.timestamp;

  const lie::Pose initial = lie::compose(state.velocity, state.last_rel);
  step.result = run_tracker(cfg, state.ref, frame, pyramid, initial);

  lie::Pose rel;
  if (step.result.ok()) {
    rel = step.result.pose;
    state.consecutive_failures = 0;
    step.event.tracked = true;
    step.event.valid_fraction = step.result.valid_fraction;
    step.event.inliers = step.result.inliers;
    step.event.note = join_notes(step.result.notes);
  } else {
    rel = initial;  // constant-velocity fallback
    ++state.consecutive_failures;
    step.event.tracked = false;
    step.event.fallback = true;
    step.event.note = step.result.failure_reason;
  }

  step.record.timestamp = frame.timestamp;
  step.record.ref_seq = state.ref_seq;
  step.record.rel = rel;

  state.velocity = lie::compose(rel, lie::inverse(state.last_rel));
  state.last_rel = rel;

  const lie::Pose pose_cw = lie::compose(rel, state.ref.pose);
  step.kf_pose = pose_cw;
  step.make_kf = step.result.ok() &&
                 mapping::should_insert_keyframe(kf_poses, pose_cw,
                                                 step.result.valid_fraction, cfg.keyframe);
  return step;
}

// Updates the tracking state after the current frame became a keyframe.
inline void adopt_keyframe(TrackerState& state, int seq, mapping::Keyframe snapshot) {
  state.ref_seq = seq;
  state.ref = std::move(snapshot);
  state.last_rel = lie::Pose::Identity();
  state.kf_poses.push_back(state.ref.pose);
}

inline io::Trajectory materialize(const std::vector<FramePose>& records,
                                  const std::vector<int>& seq_to_id,
                                  const mapping::KeyframeMap& map) {
  io::Trajectory out;
  out.reserve(records.size());
  for (const FramePose& r : records) {
    const lie::Pose& ref_pose = map.keyframe(seq_to_id.at(r.ref_seq)).pose;
    const lie::Pose pose_cw = lie::compose(r.rel, ref_pose);
    out.push_back({r.timestamp, lie::inverse(pose_cw)});
  }
  return out;
}

inline std::vector<features::FeaturePoint> detect_features(const geom::Pyramid& pyramid,
                                                           const PipelineConfig& cfg) {
  return features::detect(pyramid, cfg.detector);
}

// ---------------------------------------------------------------------------
// Sequential driver: tracking, mapping, and loop closing interleave on the
// caller's thread; per-frame loop queries force a keyframe the moment the
// detector emits a candidate. Bit-identical across runs.

inline RunResult run_sequential(const PipelineConfig& cfg, const io::FrameSource& source,
                                int n_frames, const loop::Vocabulary* vocab, bool loop_on) {
  Mapper mapper(cfg);
  TrackerState state;
  std::vector<FramePose> records;
  RunReport report;

  for (int i = 0; i < n_frames; ++i) {
    const geom::RgbdFrame frame = source.frame(i);
    geom::Pyramid pyramid = geom::build_pyramid(frame, cfg.pyramid_levels);

    if (i == 0) {
      std::vector<features::FeaturePoint> feats = detect_features(pyramid, cfg);
      std::optional<loop::BowVector> bow;
      if (loop_on) {
        std::vector<features::Descriptor> desc;
        for (const features::FeaturePoint& f : feats)
          if (f.has_descriptor) desc.push_back(f.descriptor);
        bow = loop::bow_encode(desc, *vocab);
      }
      mapping::Keyframe kf =
          make_keyframe(frame, std::move(pyramid), lie::Pose::Identity(), std::move(feats));
      mapping::Keyframe snapshot = kf;
      const int id = mapper.insert(std::move(kf), std::move(bow), -1);
      adopt_keyframe(state, 0, std::move(snapshot));
      records.push_back({frame.timestamp, 0, lie::Pose::Identity()});
      FrameEvent ev;
      ev.index = 0;
      ev.timestamp = frame.timestamp;
      ev.valid_fraction = 1.0;
      ev.keyframe_id = id;
      ev.note = "bootstrap keyframe";
      report.frames.push_back(std::move(ev));
      ++report.frames_processed;
      continue;
    }

    // Policy check reads the live map so bundle-adjusted poses count.
    std::vector<lie::Pose> live_poses;
    live_poses.reserve(mapper.map().keyframes().size());
    for (const auto& [id, kf] : mapper.map().keyframes()) {
      (void)id;
      live_poses.push_back(kf.pose);
    }
    // Frames track against the reference's live (possibly corrected) pose.
    state.ref.pose = mapper.map().keyframe(mapper.seq_to_id()[state.ref_seq]).pose;

    FrameStep step = track_one_frame(cfg, state, i, frame, pyramid, live_poses);
    record_track_stages(report.solvers, i, step.result);

    // Per-frame loop query; a completed streak forces this frame to become a
    // keyframe so the constraint can anchor to a real map node.
    std::optional<loop::BowVector> bow;
    std::optional<std::vector<features::FeaturePoint>> feats;
    int loop_candidate = -1;
    if (loop_on && step.result.ok()) {
      feats = detect_features(pyramid, cfg);
      std::vector<features::Descriptor> desc;
      for (const features::FeaturePoint& f : *feats)
        if (f.has_descriptor) desc.push_back(f.descriptor);
      bow = loop::bow_encode(desc, *vocab);
      if (const std::optional<int> cand = mapper.query(state.ref_seq, *bow)) {
        loop_candidate = *cand;
        step.make_kf = true;
      }
    }

    if (step.make_kf) {
      if (!feats) feats = detect_features(pyramid, cfg);
      mapping::Keyframe kf =
          make_keyframe(frame, std::move(pyramid), step.kf_pose, std::move(*feats));
      mapping::Keyframe snapshot = kf;
      const int seq = static_cast<int>(mapper.seq_to_id().size());
      const int id = mapper.insert(std::move(kf), std::move(bow), loop_candidate);
      adopt_keyframe(state, seq, std::move(snapshot));
      step.record.ref_seq = seq;
      step.record.rel = lie::Pose::Identity();
      step.event.keyframe_id = id;
    }

    records.push_back(step.record);
    report.frames.push_back(std::move(step.event));
    ++report.frames_processed;

    if (state.consecutive_failures >= cfg.max_consecutive_failures) {
      report.aborted = true;
      std::ostringstream msg;
      msg << "tracking failed on " << state.consecutive_failures
          << " consecutive frames (last: " << step.result.failure_reason << ")";
      report.abort_reason = msg.str();
      break;
    }
  }

  RunResult out;
  out.trajectory = materialize(records, mapper.seq_to_id(), mapper.map());
  report.keyframes = static_cast<int>(mapper.map().keyframes().size());
  report.points = static_cast<int>(mapper.map().points().size());
  report.loop_attempts = static_cast<int>(mapper.loop_events().size());
  report.loop_closures = mapper.closures();
  report.solvers.insert(report.solvers.end(), mapper.solver_events().begin(),
                        mapper.solver_events().end());
  report.loops = std::move(mapper.loop_events());
  out.report = std::move(report);
  out.map = std::move(mapper.map());
  return out;
}

// ---------------------------------------------------------------------------
// Threaded driver: a prefetch thread decodes frames, tracking runs on the
// caller's thread, and a mapping worker owns the map. Keyframes and loop
// queries travel through one bounded queue; a detector emission comes back as
// a pending candidate that tracking turns into a forced keyframe on the next
// frame.

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(1, capacity)) {}

  void push(T item) {
    std::unique_lock lock(mu_);
    space_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return;  // shutdown: the consumer is gone
    items_.push_back(std::move(item));
    available_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    available_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T out = std::move(items_.front());
    items_.pop_front();
    space_.notify_one();
    return out;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    available_.notify_all();
    space_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable available_, space_;
  std::deque<T> items_;
  std::size_t capacity_;
  bool closed_ = false;
};

struct MapJob {
  bool is_keyframe = false;
  // Keyframe payload.
  mapping::Keyframe keyframe;
  std::optional<loop::BowVector> bow;
  int loop_candidate = -1;
  // Query payload.
  int query_ref_seq = -1;
  loop::BowVector query_bow;
};

inline RunResult run_threaded(const PipelineConfig& cfg, const io::FrameSource& source,
                              int n_frames, const loop::Vocabulary* vocab, bool loop_on) {
  BoundedQueue<geom::RgbdFrame> prefetched(cfg.queue_capacity);
  BoundedQueue<MapJob> jobs(cfg.queue_capacity);
  Mapper mapper(cfg);
  std::atomic<int> pending_candidate{-1};
  std::exception_ptr prefetch_error, mapping_error;

  std::thread prefetcher([&] {
    try {
      for (int i = 0; i < n_frames; ++i) prefetched.push(source.frame(i));
    } catch (...) {
      prefetch_error = std::current_exception();
    }
    prefetched.close();
  });

  std::thread mapping_worker([&] {
    try {
      while (std::optional<MapJob> job = jobs.pop()) {
        if (job->is_keyframe) {
          mapper.insert(std::move(job->keyframe), std::move(job->bow), job->loop_candidate);
        } else if (const std::optional<int> cand =
                       mapper.query(job->query_ref_seq, job->query_bow)) {
          pending_candidate.store(*cand, std::memory_order_relaxed);
        }
      }
    } catch (...) {
      mapping_error = std::current_exception();
      jobs.close();  // unblock the producer
    }
  });

  TrackerState state;
  std::vector<FramePose> records;
  RunReport report;

  auto shutdown = [&] {
    prefetched.close();
    jobs.close();
    prefetcher.join();
    mapping_worker.join();
  };

  try {
    for (int i = 0; i < n_frames; ++i) {
      std::optional<geom::RgbdFrame> frame = prefetched.pop();
      if (!frame) break;  // prefetch failed; its exception is rethrown below
      geom::Pyramid pyramid = geom::build_pyramid(*frame, cfg.pyramid_levels);

      if (i == 0) {
        std::vector<features::FeaturePoint> feats = detect_features(pyramid, cfg);
        std::optional<loop::BowVector> bow;
        if (loop_on) {
          std::vector<features::Descriptor> desc;
          for (const features::FeaturePoint& f : feats)
            if (f.has_descriptor) desc.push_back(f.descriptor);
          bow = loop::bow_encode(desc, *vocab);
        }
        mapping::Keyframe kf =
            make_keyframe(*frame, std::move(pyramid), lie::Pose::Identity(), std::move(feats));
        MapJob job;
        job.is_keyframe = true;
        job.keyframe = kf;  // worker gets its own copy; the snapshot stays here
        job.bow = bow;
        jobs.push(std::move(job));
        adopt_keyframe(state, 0, std::move(kf));
        records.push_back({frame->timestamp, 0, lie::Pose::Identity()});
        FrameEvent ev;
        ev.index = 0;
        ev.timestamp = frame->timestamp;
        ev.valid_fraction = 1.0;
        ev.keyframe_id = 0;
        ev.note = "bootstrap keyframe";
        report.frames.push_back(std::move(ev));
        ++report.frames_processed;
        continue;
      }

      FrameStep step = track_one_frame(cfg, state, i, *frame, pyramid, state.kf_poses);
      record_track_stages(report.solvers, i, step.result);

      std::optional<loop::BowVector> bow;
      std::optional<std::vector<features::FeaturePoint>> feats;
      int loop_candidate = -1;
      if (loop_on && step.result.ok()) {
        feats = detect_features(pyramid, cfg);
        std::vector<features::Descriptor> desc;
        for (const features::FeaturePoint& f : *feats)
          if (f.has_descriptor) desc.push_back(f.descriptor);
        bow = loop::bow_encode(desc, *vocab);
        loop_candidate = pending_candidate.exchange(-1, std::memory_order_relaxed);
        if (loop_candidate >= 0) step.make_kf = true;
      }

      if (step.make_kf) {
        if (!feats) feats = detect_features(pyramid, cfg);
        mapping::Keyframe kf =
            make_keyframe(*frame, std::move(pyramid), step.kf_pose, std::move(*feats));
        const int seq = static_cast<int>(state.kf_poses.size());
        MapJob job;
        job.is_keyframe = true;
        job.keyframe = kf;
        job.bow = std::move(bow);
        job.loop_candidate = loop_candidate;
        jobs.push(std::move(job));
        adopt_keyframe(state, seq, std::move(kf));
        step.record.ref_seq = seq;
        step.record.rel = lie::Pose::Identity();
        step.event.keyframe_id = seq;  // ids are assigned in queue order
      } else if (loop_on && step.result.ok()) {
        MapJob job;
        job.query_ref_seq = state.ref_seq;
        job.query_bow = std::move(*bow);
        jobs.push(std::move(job));
      }

      records.push_back(step.record);
      report.frames.push_back(std::move(step.event));
      ++report.frames_processed;

      if (state.consecutive_failures >= cfg.max_consecutive_failures) {
        report.aborted = true;
        std::ostringstream msg;
        msg << "tracking failed on " << state.consecutive_failures
            << " consecutive frames (last: " << step.result.failure_reason << ")";
        report.abort_reason = msg.str();
        break;
      }
    }
  } catch (...) {
    shutdown();
    throw;
  }
  shutdown();
  if (prefetch_error) std::rethrow_exception(prefetch_error);
  if (mapping_error) std::rethrow_exception(mapping_error);

  RunResult out;
  out.trajectory = materialize(records, mapper.seq_to_id(), mapper.map());
  report.keyframes = static_cast<int>(mapper.map().keyframes().size());
  report.points = static_cast<int>(mapper.map().points().size());
  report.loop_attempts = static_cast<int>(mapper.loop_events().size());
  report.loop_closures = mapper.closures();
  report.solvers.insert(report.solvers.end(), mapper.solver_events().begin(),
                        mapper.solver_events().end());
  report.loops = std::move(mapper.loop_events());
  out.report = std::move(report);
  out.map = std::move(mapper.map());
  return out;
}

inline RunResult run(const PipelineConfig& cfg, const io::FrameSource& source,
                     const loop::Vocabulary* vocab) {
  cfg.validate();
  const bool loop_on = cfg.loop_closing && vocab != nullptr && !vocab->empty();
  int n_frames = source.size();
  if (cfg.max_frames >= 0) n_frames = std::min(n_frames, cfg.max_frames);
  if (n_frames <= 0) throw EmptySequenceError("run: the sequence has no frames");

  RunResult out = cfg.deterministic ? run_sequential(cfg, source, n_frames, vocab, loop_on)
                                    : run_threaded(cfg, source, n_frames, vocab, loop_on);
  out.report.mode = loop_on ? "slam" : "odometry";
  out.report.deterministic = cfg.deterministic;
  out.report.seed = cfg.seed;
  out.report.frames_total = n_frames;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry points

// Tracking + mapping only; loop closing stays off regardless of the config.
inline RunResult run_odometry(const PipelineConfig& cfg, const io::FrameSource& source) {
  return detail::run(cfg, source, nullptr);
}

// Full pipeline. The vocabulary comes from `vocabulary` when given, otherwise
// from cfg.vocabulary_path; with loop closing enabled one of the two must be
// available. With loop closing disabled this is exactly run_odometry.
inline RunResult run_slam(const PipelineConfig& cfg, const io::FrameSource& source,
                          const loop::Vocabulary* vocabulary = nullptr) {
  cfg.validate();
  loop::Vocabulary loaded;
  const loop::Vocabulary* vocab = vocabulary;
  if (cfg.loop_closing && vocab == nullptr) {
    if (cfg.vocabulary_path.empty())
      throw ConfigError(
          "config: loop closing needs a vocabulary (set 'vocabulary' or disable loop_closing)");
    loaded = loop::load_vocabulary(cfg.vocabulary_path);
    vocab = &loaded;
  }
  return detail::run(cfg, source, vocab);
}

}  // namespace rgbdo::pipeline
