#pragma once

// Log-mel front end: STFT magnitude, HTK-style mel filterbank, log power and
// per-bin standardization.

#include "sedt/autograd.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace sedt {

using ag::Matrix;

struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;

    double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct FeatureConfig {
    int sample_rate = 16000;
    int win_len = 1024;
    int hop = 160;
    int n_mels = 64;
    double fmin = 0.0;
    double fmax = 0.0;  // <= 0 means Nyquist
    double log_floor = 1e-10;

    double hop_s() const { return static_cast<double>(hop) / sample_rate; }
    double resolved_fmax() const { return fmax > 0.0 ? fmax : 0.5 * sample_rate; }
    void validate() const;
};

/// T0 x F0 log-mel matrix; row t is the frame centered at t * hop_s.
struct LogMelSpectrogram {
    Matrix values;
    double hop_s = 0.01;
    double clip_len_s = 0.0;

    Eigen::Index frames() const { return values.rows(); }
    Eigen::Index bins() const { return values.cols(); }
};

/// Hz -> mel, 2595 * log10(1 + f / 700).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Hann-windowed STFT magnitudes, frames x (win_len/2 + 1). Frame k is
/// centered on sample k*hop with reflection padding; ceil(len/hop) frames.
Matrix stft_magnitude(const Waveform& w, int win_len, int hop);

/// The n_mels + 2 band edges in Hz, equally spaced on the mel scale. Filter k
/// rises from edge k, peaks at edge k+1 and falls to zero at edge k+2.
std::vector<double> mel_band_edges(int n_mels, double fmin, double fmax);

/// n_mels x n_fft_bins triangular filters on the mel scale.
Matrix mel_filterbank(int n_mels, double fmin, double fmax, int n_fft_bins, int sample_rate);

LogMelSpectrogram log_mel(const Waveform& w, const FeatureConfig& cfg);

/// Per-bin mean and standard deviation over every frame of a set of spectrograms.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    static constexpr double kStdFloor = 1e-5;
    static NormStats compute(const std::vector<const LogMelSpectrogram*>& specs);
};

LogMelSpectrogram normalize(const LogMelSpectrogram& spec, const NormStats& stats);

// ---- on-disk feature cache -------------------------------------------------
//
// <stem>.bin: little-endian header {u32 magic "SEDF", u32 rows, u32 cols}
// followed by rows*cols float64 values, row-major.
// <stem>.json: {"clip_id", "hop_s", "clip_len_s", "n_mels"}.

void save_features(const std::filesystem::path& bin_path, const std::string& clip_id, const LogMelSpectrogram& spec);
LogMelSpectrogram load_features(const std::filesystem::path& bin_path);

}  // namespace sedt
