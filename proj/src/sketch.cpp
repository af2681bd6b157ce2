#include "mgt/sketch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "mgt/error.hpp"

namespace mgt {

using nlohmann::json;

void RawDrawing::validate() const {
    check_arg(!strokes.empty(), "RawDrawing: drawing has no strokes");
    for (size_t si = 0; si < strokes.size(); ++si) {
        check_arg(!strokes[si].empty(), "RawDrawing: stroke " + std::to_string(si) + " has no points");
        for (const auto& p : strokes[si])
            check_arg(p[0] >= 0 && p[0] <= 255 && p[1] >= 0 && p[1] <= 255,
                      "RawDrawing: coordinate (" + std::to_string(p[0]) + "," + std::to_string(p[1]) +
                          ") outside [0,255] in stroke " + std::to_string(si));
    }
}

int64_t RawDrawing::total_points() const {
    int64_t n = 0;
    for (const auto& s : strokes) n += static_cast<int64_t>(s.size());
    return n;
}

RawDrawing parse_drawing_line(const std::string& line, int64_t line_no) {
    const std::string where = "line " + std::to_string(line_no);
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw std::runtime_error("parse error at " + where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("word") || !j.contains("drawing"))
        throw std::runtime_error("parse error at " + where + ": record missing `word` or `drawing` field");

    RawDrawing out;
    try {
        out.label = j.at("word").get<std::string>();
        const json& drawing = j.at("drawing");
        if (!drawing.is_array()) throw std::runtime_error("`drawing` is not an array");
        for (const json& stroke : drawing) {
            if (!stroke.is_array() || stroke.size() != 2)
                throw std::runtime_error("stroke is not a pair of coordinate lists");
            const json& xs = stroke[0];
            const json& ys = stroke[1];
            if (!xs.is_array() || !ys.is_array() || xs.size() != ys.size())
                throw std::runtime_error("stroke x/y lists have different lengths");
            std::vector<std::array<int, 2>> pts;
            pts.reserve(xs.size());
            for (size_t i = 0; i < xs.size(); ++i)
                pts.push_back({xs[i].get<int>(), ys[i].get<int>()});
            out.strokes.push_back(std::move(pts));
        }
    } catch (const std::exception& e) {
        throw std::runtime_error("parse error at " + where + ": " + e.what());
    }
    if (out.strokes.empty()) throw std::runtime_error("parse error at " + where + ": empty drawing");
    out.validate();
    return out;
}

std::vector<FlaggedPoint> flatten(const RawDrawing& drawing) {
    drawing.validate();
    std::vector<FlaggedPoint> out;
    out.reserve(static_cast<size_t>(drawing.total_points()));
    for (size_t si = 0; si < drawing.strokes.size(); ++si) {
        const auto& stroke = drawing.strokes[si];
        for (size_t pi = 0; pi < stroke.size(); ++pi) {
            FlaggedPoint p;
            p.x = stroke[pi][0];
            p.y = stroke[pi][1];
            p.flag = (pi + 1 == stroke.size()) ? kFlagStrokeEnd : kFlagOngoing;
            p.stroke_id = static_cast<int32_t>(si);
            out.push_back(p);
        }
    }
    return out;
}

SketchTensor pad_truncate(std::span<const FlaggedPoint> seq, int64_t s) {
    check_arg(!seq.empty(), "pad_truncate: empty sequence");
    check_arg(s >= 1, "pad_truncate: S must be >= 1");
    SketchTensor t;
    t.seq_len = s;
    t.orig_len = static_cast<int64_t>(seq.size());
    t.true_len = std::min<int64_t>(t.orig_len, s);
    t.coords.assign(static_cast<size_t>(2 * s), -1.0);
    t.flags.assign(static_cast<size_t>(s), kFlagPadding);
    t.positions.resize(static_cast<size_t>(s));
    std::iota(t.positions.begin(), t.positions.end(), 0);
    t.stroke_ids.assign(static_cast<size_t>(s), -1);
    for (int64_t i = 0; i < t.true_len; ++i) {
        t.coords[static_cast<size_t>(2 * i)] = seq[static_cast<size_t>(i)].x;
        t.coords[static_cast<size_t>(2 * i + 1)] = seq[static_cast<size_t>(i)].y;
        t.flags[static_cast<size_t>(i)] = seq[static_cast<size_t>(i)].flag;
        t.stroke_ids[static_cast<size_t>(i)] = seq[static_cast<size_t>(i)].stroke_id;
    }
    return t;
}

RawDrawing synthesize_sketch(Rng& rng, int64_t n_strokes, int64_t points_min, int64_t points_max) {
    check_arg(n_strokes >= 1, "synthesize_sketch: need at least one stroke");
    check_arg(points_min >= 1 && points_min <= points_max, "synthesize_sketch: bad points range");
    RawDrawing d;
    d.label = "synthetic";
    for (int64_t si = 0; si < n_strokes; ++si) {
        int64_t n = rng.uniform_int(points_min, points_max);
        std::vector<std::array<int, 2>> stroke;
        int x = static_cast<int>(rng.uniform_int(0, 255));
        int y = static_cast<int>(rng.uniform_int(0, 255));
        for (int64_t pi = 0; pi < n; ++pi) {
            stroke.push_back({x, y});
            x = std::clamp<int>(x + static_cast<int>(rng.uniform_int(-32, 32)), 0, 255);
            y = std::clamp<int>(y + static_cast<int>(rng.uniform_int(-32, 32)), 0, 255);
        }
        d.strokes.push_back(std::move(stroke));
    }
    return d;
}

LabelVocabulary::LabelVocabulary(std::vector<std::string> sorted_names) : names_(std::move(sorted_names)) {
    for (size_t i = 0; i < names_.size(); ++i) {
        auto [it, inserted] = index_.emplace(names_[i], static_cast<int32_t>(i));
        check_arg(inserted, "LabelVocabulary: duplicate class name `" + names_[i] + "`");
    }
}

int32_t LabelVocabulary::index_of(const std::string& name) const {
    auto it = index_.find(name);
    check_arg(it != index_.end(), "LabelVocabulary: unknown class `" + name + "`");
    return it->second;
}

const std::string& LabelVocabulary::name_of(int32_t idx) const {
    check_arg(idx >= 0 && idx < size(), "LabelVocabulary: index " + std::to_string(idx) + " out of range");
    return names_[static_cast<size_t>(idx)];
}

bool LabelVocabulary::contains(const std::string& name) const { return index_.count(name) > 0; }

void LabelVocabulary::save(const std::string& path) const {
    std::ofstream f(path);
    check(f.good(), "LabelVocabulary: cannot write " + path);
    json j;
    j["classes"] = names_;
    f << j.dump(2) << "\n";
}

LabelVocabulary LabelVocabulary::load(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "LabelVocabulary: cannot read " + path);
    json j;
    f >> j;
    return LabelVocabulary(j.at("classes").get<std::vector<std::string>>());
}

DatasetSplit split_dataset(std::span<const SketchTensor> samples, const LabelVocabulary& vocab,
                           PerClassCounts counts, uint64_t seed) {
    check_arg(counts.train >= 0 && counts.val >= 0 && counts.test >= 0, "split_dataset: negative counts");
    int64_t need = counts.train + counts.val + counts.test;

    std::vector<std::vector<size_t>> by_class(static_cast<size_t>(vocab.size()));
    for (size_t i = 0; i < samples.size(); ++i) {
        int32_t lbl = samples[i].label;
        check_arg(lbl >= 0 && lbl < vocab.size(),
                  "split_dataset: sample " + std::to_string(i) + " has label index outside the vocabulary");
        by_class[static_cast<size_t>(lbl)].push_back(i);
    }

    DatasetSplit split;
    split.seed = seed;
    Rng base(seed);
    for (int64_t c = 0; c < vocab.size(); ++c) {
        auto& idx = by_class[static_cast<size_t>(c)];
        check_arg(static_cast<int64_t>(idx.size()) >= need,
                  "split_dataset: class `" + vocab.name_of(static_cast<int32_t>(c)) + "` has " +
                      std::to_string(idx.size()) + " samples, needs " + std::to_string(need));
        Rng class_rng = base.split(static_cast<uint64_t>(c));
        class_rng.shuffle(idx);
        int64_t p = 0;
        for (int64_t i = 0; i < counts.train; ++i) split.train.push_back(samples[idx[static_cast<size_t>(p++)]]);
        for (int64_t i = 0; i < counts.val; ++i) split.val.push_back(samples[idx[static_cast<size_t>(p++)]]);
        for (int64_t i = 0; i < counts.test; ++i) split.test.push_back(samples[idx[static_cast<size_t>(p++)]]);
    }
    return split;
}

SetStats dataset_stats(std::span<const SketchTensor> set) {
    check_arg(!set.empty(), "dataset_stats: empty set");
    SetStats st;
    st.count = static_cast<int64_t>(set.size());
    st.max_len = set[0].true_len;
    st.min_len = set[0].true_len;
    double sum = 0;
    for (const SketchTensor& t : set) {
        st.max_len = std::max(st.max_len, t.true_len);
        st.min_len = std::min(st.min_len, t.true_len);
        sum += static_cast<double>(t.true_len);
        if (t.truncated()) ++st.truncated;
    }
    st.mean_len = sum / static_cast<double>(st.count);
    double sq = 0;
    for (const SketchTensor& t : set) {
        double d = static_cast<double>(t.true_len) - st.mean_len;
        sq += d * d;
    }
    st.std_len = std::sqrt(sq / static_cast<double>(st.count));
    st.truncated_ratio = static_cast<double>(st.truncated) / static_cast<double>(st.count);
    return st;
}

std::string format_stats_table(const SetStats& train, const SetStats& val, const SetStats& test) {
    auto row = [](const char* name, const SetStats& s) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-10s | %9lld | %8lld (%.2f%%) | %4lld | %4lld | %7.2f | %7.2f\n", name,
                      static_cast<long long>(s.count), static_cast<long long>(s.truncated),
                      100.0 * s.truncated_ratio, static_cast<long long>(s.max_len),
                      static_cast<long long>(s.min_len), s.mean_len, s.std_len);
        return std::string(buf);
    };
    std::string out = "Set        | # Samples | # Truncated (ratio) |  max |  min |    mean |     std\n";
    out += row("Training", train);
    out += row("Validation", val);
    out += row("Test", test);
    return out;
}

void write_dataset(const std::string& path, std::span<const SketchTensor> set) {
    std::ofstream f(path);
    check(f.good(), "write_dataset: cannot write " + path);
    for (const SketchTensor& t : set) {
        json j;
        j["label_idx"] = t.label;
        j["true_len"] = t.true_len;
        j["orig_len"] = t.orig_len;
        std::vector<std::array<double, 2>> coords(static_cast<size_t>(t.seq_len));
        for (int64_t s = 0; s < t.seq_len; ++s) coords[static_cast<size_t>(s)] = {t.x(s), t.y(s)};
        j["coords"] = coords;
        j["flags"] = t.flags;
        j["stroke_ids"] = t.stroke_ids;
        f << j.dump() << "\n";
    }
    check(f.good(), "write_dataset: write failed for " + path);
}

std::vector<SketchTensor> read_dataset(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_dataset: cannot read " + path);
    std::vector<SketchTensor> out;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            SketchTensor t;
            t.label = j.at("label_idx").get<int32_t>();
            t.true_len = j.at("true_len").get<int64_t>();
            auto coords = j.at("coords").get<std::vector<std::array<double, 2>>>();
            t.seq_len = static_cast<int64_t>(coords.size());
            t.coords.resize(static_cast<size_t>(2 * t.seq_len));
            for (int64_t s = 0; s < t.seq_len; ++s) {
                t.coords[static_cast<size_t>(2 * s)] = coords[static_cast<size_t>(s)][0];
                t.coords[static_cast<size_t>(2 * s + 1)] = coords[static_cast<size_t>(s)][1];
            }
            t.flags = j.at("flags").get<std::vector<int32_t>>();
            t.stroke_ids = j.at("stroke_ids").get<std::vector<int32_t>>();
            t.orig_len = j.value("orig_len", t.true_len);
            t.positions.resize(static_cast<size_t>(t.seq_len));
            std::iota(t.positions.begin(), t.positions.end(), 0);
            check(static_cast<int64_t>(t.flags.size()) == t.seq_len &&
                      static_cast<int64_t>(t.stroke_ids.size()) == t.seq_len,
                  "field lengths disagree");
            check(t.true_len >= 1 && t.true_len <= t.seq_len, "true_len out of range");
            out.push_back(std::move(t));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_dataset: " + path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<RawDrawing> load_quickdraw_file(const std::string& path, QuickdrawLoadReport& report) {
    std::ifstream f(path);
    check(f.good(), "load_quickdraw_file: cannot read " + path);
    std::vector<RawDrawing> out;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(parse_drawing_line(line, line_no));
            ++report.parsed;
        } catch (const std::exception& e) {
            ++report.malformed;
            if (report.first_errors.size() < 5) report.first_errors.push_back(e.what());
        }
    }
    return out;
}

}  // namespace mgt
