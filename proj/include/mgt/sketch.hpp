#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mgt/rng.hpp"

namespace mgt {

// Pen-state flag per key point.
enum Flag : int32_t {
    kFlagOngoing = 0,    // f1: starting or ongoing point of a stroke
    kFlagStrokeEnd = 1,  // f2: last point of a stroke
    kFlagPadding = 2,    // f3: padding
};

// One QuickDraw-style drawing: ordered strokes of integer key points on a
// 0..255 canvas.
struct RawDrawing {
    std::vector<std::vector<std::array<int, 2>>> strokes;
    std::string label;

    void validate() const;
    int64_t total_points() const;
};

struct FlaggedPoint {
    double x = 0;
    double y = 0;
    int32_t flag = kFlagOngoing;
    int32_t stroke_id = 0;
};

// Fixed-length (S) padded key-point sequence. Padding positions carry the
// (-1, -1) sentinel, flag f3 and stroke id -1.
struct SketchTensor {
    int64_t seq_len = 0;              // S
    std::vector<double> coords;       // S*2, row-major (x, y)
    std::vector<int32_t> flags;       // S
    std::vector<int32_t> positions;   // S, always 0..S-1
    std::vector<int32_t> stroke_ids;  // S, -1 at padding
    int64_t true_len = 0;
    int64_t orig_len = 0;  // length before truncation; == true_len unless truncated
    int32_t label = -1;

    double x(int64_t s) const { return coords[static_cast<size_t>(2 * s)]; }
    double y(int64_t s) const { return coords[static_cast<size_t>(2 * s + 1)]; }
    bool truncated() const { return orig_len > seq_len; }
};

// Parses one line of the QuickDraw simplified-drawings NDJSON format
// (fields `word` and `drawing`). line_no is used in error messages.
RawDrawing parse_drawing_line(const std::string& line, int64_t line_no);

// Concatenates strokes in temporal order; f2 at every stroke-final point,
// f1 otherwise.
std::vector<FlaggedPoint> flatten(const RawDrawing& drawing);

// Keeps the first S points when longer (the kept final point retains its
// original flag), pads with (-1,-1)/f3/-1 when shorter.
SketchTensor pad_truncate(std::span<const FlaggedPoint> seq, int64_t s);

// Deterministic random-walk test drawing; coordinates stay in [0, 255].
RawDrawing synthesize_sketch(Rng& rng, int64_t n_strokes, int64_t points_min, int64_t points_max);

// Bidirectional class-name <-> dense index map, stable under save/load.
class LabelVocabulary {
public:
    LabelVocabulary() = default;
    explicit LabelVocabulary(std::vector<std::string> sorted_names);

    int32_t index_of(const std::string& name) const;  // throws on unknown
    const std::string& name_of(int32_t idx) const;
    bool contains(const std::string& name) const;
    int64_t size() const { return static_cast<int64_t>(names_.size()); }
    const std::vector<std::string>& names() const { return names_; }

    void save(const std::string& path) const;
    static LabelVocabulary load(const std::string& path);

private:
    std::vector<std::string> names_;
    std::map<std::string, int32_t> index_;
};

struct DatasetSplit {
    std::vector<SketchTensor> train;
    std::vector<SketchTensor> val;
    std::vector<SketchTensor> test;
    uint64_t seed = 0;
};

struct PerClassCounts {
    int64_t train = 0;
    int64_t val = 0;
    int64_t test = 0;
};

// Deterministic per-class split; every class must supply at least
// train+val+test samples or the offending class is named in the error.
DatasetSplit split_dataset(std::span<const SketchTensor> samples, const LabelVocabulary& vocab,
                           PerClassCounts counts, uint64_t seed);

struct SetStats {
    int64_t count = 0;
    int64_t truncated = 0;
    double truncated_ratio = 0;
    int64_t max_len = 0;
    int64_t min_len = 0;
    double mean_len = 0;
    double std_len = 0;  // population standard deviation
};

// Key-point statistics over true lengths (before padding); "truncated" means
// the original length exceeded S.
SetStats dataset_stats(std::span<const SketchTensor> set);

std::string format_stats_table(const SetStats& train, const SetStats& val, const SetStats& test);

// Internal dataset file: newline-delimited JSON, one record per sketch with
// fields label_idx, true_len, coords, flags, stroke_ids (+ orig_len).
void write_dataset(const std::string& path, std::span<const SketchTensor> set);
std::vector<SketchTensor> read_dataset(const std::string& path);

struct QuickdrawLoadReport {
    int64_t parsed = 0;
    int64_t malformed = 0;
    std::vector<std::string> first_errors;  // up to a few, for diagnostics
};

// Reads a QuickDraw simplified-drawings NDJSON file, collecting drawings and
// counting malformed lines.
std::vector<RawDrawing> load_quickdraw_file(const std::string& path, QuickdrawLoadReport& report);

}  // namespace mgt
