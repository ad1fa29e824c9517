#include "sedt/features.hpp"

#include "sedt/core.hpp"

#include <fftw3.h>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <numbers>

namespace sedt {

namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

std::size_t reflect_index(long long p, long long len) {
    if (len == 1) return 0;
    const long long period = 2 * (len - 1);
    p %= period;
    if (p < 0) p += period;
    if (p >= len) p = period - p;
    return static_cast<std::size_t>(p);
}

}  // namespace

void FeatureConfig::validate() const {
    if (sample_rate <= 0) throw ValidationError("sample rate must be positive");
    if (hop <= 0 || win_len < hop) throw ValidationError("need win_len >= hop > 0");
    if (n_mels < 1) throw ValidationError("n_mels must be >= 1");
    if (!(log_floor > 0.0)) throw ValidationError("log floor must be positive");
    const double hi = resolved_fmax();
    if (fmin < 0.0 || !(fmin < hi) || hi > 0.5 * sample_rate) {
        throw ValidationError("need 0 <= fmin < fmax <= Nyquist");
    }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix stft_magnitude(const Waveform& w, int win_len, int hop) {
    if (w.samples.empty()) throw ValidationError("stft of an empty waveform");
    if (hop <= 0 || win_len < hop) throw ValidationError("need win_len >= hop > 0");
    for (double s : w.samples) {
        if (!std::isfinite(s)) throw ValidationError("waveform contains non-finite samples");
    }

    const auto len = static_cast<long long>(w.samples.size());
    const long long frames = (len + hop - 1) / hop;
    const int bins = win_len / 2 + 1;

    std::vector<double> window(static_cast<std::size_t>(win_len));
    for (int n = 0; n < win_len; ++n) {
        window[static_cast<std::size_t>(n)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / win_len);
    }

    auto* in = static_cast<double*>(fftw_malloc(sizeof(double) * static_cast<std::size_t>(win_len)));
    auto* out = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * static_cast<std::size_t>(bins)));
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(win_len, in, out, FFTW_ESTIMATE);
    }

    Matrix mag(frames, bins);
    const long long half = win_len / 2;
    for (long long k = 0; k < frames; ++k) {
        const long long start = k * hop - half;
        for (int n = 0; n < win_len; ++n) {
            in[n] = window[static_cast<std::size_t>(n)] * w.samples[reflect_index(start + n, len)];
        }
        fftw_execute(plan);
        for (int b = 0; b < bins; ++b) {
            mag(k, b) = std::hypot(out[b][0], out[b][1]);
        }
    }

    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    return mag;
}

std::vector<double> mel_band_edges(int n_mels, double fmin, double fmax) {
    if (n_mels < 1) throw ValidationError("n_mels must be >= 1");
    if (fmin < 0.0 || !(fmin < fmax)) throw ValidationError("degenerate mel frequency range");
    const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
    std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    }
    edges.front() = fmin;
    edges.back() = fmax;
    return edges;
}

Matrix mel_filterbank(int n_mels, double fmin, double fmax, int n_fft_bins, int sample_rate) {
    if (n_fft_bins < 2 || sample_rate <= 0) throw ValidationError("invalid FFT geometry for mel filterbank");
    if (fmax > 0.5 * sample_rate) throw ValidationError("fmax above Nyquist");
    const auto edges = mel_band_edges(n_mels, fmin, fmax);
    const int n_fft = 2 * (n_fft_bins - 1);

    Matrix fb = Matrix::Zero(n_mels, n_fft_bins);
    for (int m = 0; m < n_mels; ++m) {
        const double lower = edges[static_cast<std::size_t>(m)];
        const double center = edges[static_cast<std::size_t>(m) + 1];
        const double upper = edges[static_cast<std::size_t>(m) + 2];
        for (int k = 0; k < n_fft_bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / n_fft;
            const double rise = (f - lower) / (center - lower);
            const double fall = (upper - f) / (upper - center);
            fb(m, k) = std::max(0.0, std::min(rise, fall));
        }
    }
    return fb;
}

LogMelSpectrogram log_mel(const Waveform& w, const FeatureConfig& cfg) {
    cfg.validate();
    if (w.sample_rate != cfg.sample_rate) {
        throw ValidationError("waveform sample rate " + std::to_string(w.sample_rate) + " does not match config " +
                              std::to_string(cfg.sample_rate));
    }
    const Matrix mag = stft_magnitude(w, cfg.win_len, cfg.hop);
    const Matrix fb = mel_filterbank(cfg.n_mels, cfg.fmin, cfg.resolved_fmax(), static_cast<int>(mag.cols()),
                                     cfg.sample_rate);
    const Matrix power = mag.array().square().matrix();
    Matrix mel = power * fb.transpose();

    LogMelSpectrogram out;
    out.values = (mel.array() + cfg.log_floor).log().matrix();
    out.hop_s = cfg.hop_s();
    out.clip_len_s = w.duration_s();
    return out;
}

NormStats NormStats::compute(const std::vector<const LogMelSpectrogram*>& specs) {
    if (specs.empty()) throw ValidationError("normalization stats need at least one spectrogram");
    const Eigen::Index bins = specs.front()->bins();
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(bins), sq = Eigen::ArrayXd::Zero(bins);
    double count = 0.0;
    for (const auto* s : specs) {
        if (s->bins() != bins) throw ValidationError("spectrograms disagree on bin count");
        sum += s->values.colwise().sum().transpose().array();
        count += static_cast<double>(s->frames());
    }
    const Eigen::ArrayXd mean = sum / count;
    for (const auto* s : specs) {
        sq += (s->values.array().rowwise() - mean.transpose()).square().colwise().sum().transpose();
    }
    NormStats stats;
    stats.mean.assign(mean.begin(), mean.end());
    stats.stddev.resize(static_cast<std::size_t>(bins));
    for (Eigen::Index b = 0; b < bins; ++b) {
        stats.stddev[static_cast<std::size_t>(b)] = std::sqrt(sq(b) / count);
    }
    return stats;
}

LogMelSpectrogram normalize(const LogMelSpectrogram& spec, const NormStats& stats) {
    if (static_cast<Eigen::Index>(stats.mean.size()) != spec.bins() ||
        stats.stddev.size() != stats.mean.size()) {
        throw ValidationError("normalization stats do not match spectrogram bins");
    }
    LogMelSpectrogram out = spec;
    for (Eigen::Index b = 0; b < spec.bins(); ++b) {
        const double sd = std::max(stats.stddev[static_cast<std::size_t>(b)], NormStats::kStdFloor);
        out.values.col(b) = (spec.values.col(b).array() - stats.mean[static_cast<std::size_t>(b)]) / sd;
    }
    return out;
}

void save_features(const std::filesystem::path& bin_path, const std::string& clip_id, const LogMelSpectrogram& spec) {
    std::ofstream os(bin_path, std::ios::binary);
    if (!os) throw ParseError("cannot write " + bin_path.string());
    const std::uint32_t header[3] = {0x46444553u, static_cast<std::uint32_t>(spec.frames()),
                                     static_cast<std::uint32_t>(spec.bins())};
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    os.write(reinterpret_cast<const char*>(spec.values.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(spec.values.size())));

    nlohmann::json side = {{"clip_id", clip_id},
                           {"hop_s", spec.hop_s},
                           {"clip_len_s", spec.clip_len_s},
                           {"n_mels", spec.bins()}};
    auto json_path = bin_path;
    json_path.replace_extension(".json");
    std::ofstream js(json_path);
    js << side.dump(2) << "\n";
}

LogMelSpectrogram load_features(const std::filesystem::path& bin_path) {
    std::ifstream is(bin_path, std::ios::binary);
    if (!is) throw ParseError("cannot open feature file " + bin_path.string());
    std::uint32_t header[3] = {};
    is.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!is || header[0] != 0x46444553u) throw ParseError("bad feature file header in " + bin_path.string());

    LogMelSpectrogram spec;
    spec.values.resize(header[1], header[2]);
    is.read(reinterpret_cast<char*>(spec.values.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(spec.values.size())));
    if (!is) throw ParseError("truncated feature file " + bin_path.string());

    auto json_path = bin_path;
    json_path.replace_extension(".json");
    std::ifstream js(json_path);
    if (!js) throw ParseError("missing feature sidecar " + json_path.string());
    try {
        const auto side = nlohmann::json::parse(js);
        spec.hop_s = side.at("hop_s").get<double>();
        spec.clip_len_s = side.at("clip_len_s").get<double>();
        if (side.at("n_mels").get<Eigen::Index>() != spec.bins()) {
            throw ParseError("sidecar n_mels disagrees with " + bin_path.string());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad feature sidecar " + json_path.string() + ": " + e.what());
    }
    return spec;
}

}  // namespace sedt
