#pragma once

// Event geometry and label vocabulary.
//
// Events live on a normalized clip timeline: a boundary is (center, duration)
// with both expressed as fractions of the clip length. Conversion to seconds
// clamps to the clip; internal boundaries may cross the clip edges.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sedt {

/// Raised when an argument violates a documented precondition.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an on-disk document cannot be parsed.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Normalized event boundary: center and duration as fractions of the clip.
struct Boundary {
    double center = 0.5;
    double duration = 0.5;

    double start() const { return center - 0.5 * duration; }
    double end() const { return center + 0.5 * duration; }

    friend bool operator==(const Boundary&, const Boundary&) = default;
};

/// One sound event: class id in [0, K) plus its normalized boundary.
struct EventInstance {
    int class_id = 0;
    Boundary boundary;
};

/// A time span in seconds.
struct Segment {
    double onset_s = 0.0;
    double offset_s = 0.0;

    double length() const { return offset_s - onset_s; }
    friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered class names plus the reserved "empty" index K.
class LabelVocabulary {
public:
    LabelVocabulary() = default;
    explicit LabelVocabulary(std::vector<std::string> classes);

    std::size_t size() const { return classes_.size(); }
    int empty_index() const { return static_cast<int>(classes_.size()); }
    const std::vector<std::string>& classes() const { return classes_; }
    const std::string& name(int class_id) const;

    /// Throws ValidationError for names outside the vocabulary.
    int index_of(std::string_view name) const;
    bool contains(std::string_view name) const;

    friend bool operator==(const LabelVocabulary& a, const LabelVocabulary& b) {
        return a.classes_ == b.classes_;
    }

private:
    std::vector<std::string> classes_;
    std::unordered_map<std::string, int> index_;
};

/// Throws ValidationError unless 0 <= center <= 1 and 0 < duration <= 1.
void validate_boundary(const Boundary& b);

Segment boundary_to_segment(const Boundary& b, double clip_len_s);
Boundary segment_to_boundary(const Segment& seg, double clip_len_s);

/// Intersection over union of two normalized intervals.
double interval_iou(const Boundary& a, const Boundary& b);

/// IoU minus the fraction of the enclosing interval covered by neither input.
double interval_giou(const Boundary& a, const Boundary& b);

/// Partial derivatives of GIoU(a, b) with respect to b's center and duration.
struct GiouGradient {
    double value = 0.0;
    double d_center = 0.0;
    double d_duration = 0.0;
};

/// GIoU(target, pred) and its gradient with respect to pred. Unlike
/// interval_giou this does not validate ranges, so it can be used on raw
/// model outputs during training.
GiouGradient interval_giou_grad(const Boundary& target, const Boundary& pred);

}  // namespace sedt
