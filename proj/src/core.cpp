#include "sedt/core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sedt {

LabelVocabulary::LabelVocabulary(std::vector<std::string> classes) : classes_(std::move(classes)) {
    if (classes_.empty()) {
        throw ValidationError("label vocabulary needs at least one class");
    }
    for (std::size_t i = 0; i < classes_.size(); ++i) {
        if (classes_[i].empty()) {
            throw ValidationError("class names must be non-empty");
        }
        auto [it, inserted] = index_.emplace(classes_[i], static_cast<int>(i));
        if (!inserted) {
            throw ValidationError("duplicate class name '" + classes_[i] + "'");
        }
    }
}

const std::string& LabelVocabulary::name(int class_id) const {
    if (class_id < 0 || class_id >= empty_index()) {
        throw ValidationError("class id " + std::to_string(class_id) + " outside vocabulary");
    }
    return classes_[static_cast<std::size_t>(class_id)];
}

int LabelVocabulary::index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
        throw ValidationError("unknown class name '" + std::string(name) + "'");
    }
    return it->second;
}

bool LabelVocabulary::contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
}

void validate_boundary(const Boundary& b) {
    if (!std::isfinite(b.center) || !std::isfinite(b.duration) || b.center < 0.0 || b.center > 1.0 ||
        !(b.duration > 0.0) || b.duration > 1.0) {
        std::ostringstream msg;
        msg << "invalid boundary (center=" << b.center << ", duration=" << b.duration << ")";
        throw ValidationError(msg.str());
    }
}

Segment boundary_to_segment(const Boundary& b, double clip_len_s) {
    validate_boundary(b);
    if (!(clip_len_s > 0.0) || !std::isfinite(clip_len_s)) {
        throw ValidationError("clip length must be positive");
    }
    const double on = std::clamp(b.start(), 0.0, 1.0);
    const double off = std::clamp(b.end(), 0.0, 1.0);
    return {on * clip_len_s, off * clip_len_s};
}

Boundary segment_to_boundary(const Segment& seg, double clip_len_s) {
    if (!(clip_len_s > 0.0) || !std::isfinite(clip_len_s)) {
        throw ValidationError("clip length must be positive");
    }
    if (!(seg.onset_s >= 0.0) || !(seg.offset_s <= clip_len_s) || seg.offset_s < seg.onset_s) {
        throw ValidationError("segment outside clip");
    }
    Boundary b{0.5 * (seg.onset_s + seg.offset_s) / clip_len_s, (seg.offset_s - seg.onset_s) / clip_len_s};
    validate_boundary(b);
    return b;
}

namespace {

struct IntervalTerms {
    double inter;
    double uni;
    double encl;
};

IntervalTerms interval_terms(const Boundary& a, const Boundary& b) {
    const double a1 = a.start(), a2 = a.end();
    const double b1 = b.start(), b2 = b.end();
    const double inter = std::max(0.0, std::min(a2, b2) - std::max(a1, b1));
    const double uni = (a2 - a1) + (b2 - b1) - inter;
    const double encl = std::max(a2, b2) - std::min(a1, b1);
    return {inter, uni, encl};
}

}  // namespace

double interval_iou(const Boundary& a, const Boundary& b) {
    validate_boundary(a);
    validate_boundary(b);
    const auto t = interval_terms(a, b);
    return t.inter / t.uni;
}

double interval_giou(const Boundary& a, const Boundary& b) {
    validate_boundary(a);
    validate_boundary(b);
    const auto t = interval_terms(a, b);
    return t.inter / t.uni - (t.encl - t.uni) / t.encl;
}

GiouGradient interval_giou_grad(const Boundary& target, const Boundary& pred) {
    const double a1 = target.start(), a2 = target.end();
    const double b1 = pred.start(), b2 = pred.end();
    const auto t = interval_terms(target, pred);
    if (!(t.uni > 0.0) || !(t.encl > 0.0)) {
        throw ValidationError("GIoU undefined for zero-length intervals");
    }

    const bool overlap = t.inter > 0.0;
    // d/d(b1), d/d(b2) of each term; ties take the one-sided derivative from the pred side.
    const double di_b1 = overlap && b1 > a1 ? -1.0 : 0.0;
    const double di_b2 = overlap && b2 < a2 ? 1.0 : 0.0;
    const double du_b1 = -1.0 - di_b1;
    const double du_b2 = 1.0 - di_b2;
    const double de_b1 = b1 < a1 ? -1.0 : 0.0;
    const double de_b2 = b2 > a2 ? 1.0 : 0.0;

    auto dgiou = [&](double di, double du, double de) {
        return (di * t.uni - t.inter * du) / (t.uni * t.uni) + (du * t.encl - t.uni * de) / (t.encl * t.encl);
    };
    const double g1 = dgiou(di_b1, du_b1, de_b1);
    const double g2 = dgiou(di_b2, du_b2, de_b2);

    GiouGradient out;
    out.value = t.inter / t.uni - (t.encl - t.uni) / t.encl;
    out.d_center = g1 + g2;
    out.d_duration = 0.5 * (g2 - g1);
    return out;
}

}  // namespace sedt
