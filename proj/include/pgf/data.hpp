#pragma once

// Synthetic multimodal regression data with a planted cross-modal signal,
// plus the line-delimited JSON ingestion format.
//
// label = clamp(w_t * u(tokens) + s_a * mean(audio[:,0]) + s_v * mean(visual[:,1])
//               + noise, -3, 3)
//
// where u averages a fixed seeded per-token score (U(-1,1) per vocabulary
// entry) over the sequence. Audio/visual frames are i.i.d. standard normal;
// channels 0 (audio) and 1 (visual) are the ones the label reads, so a model
// has to route exactly those through the fusion path. With the default
// weights the pre-clamp label is approximately N(0, 0.72^2), so clamping
// touches well under 1% of samples.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pgf/config.hpp"
#include "pgf/model.hpp"

namespace pgf {

struct Sample {
    std::vector<int> tokens;
    std::vector<double> audio;   // [audio_len * d_a]
    std::vector<double> visual;  // [visual_len * d_v]
    double label = 0.0;
};

struct DatasetSplit {
    std::vector<Sample> train, val, test;
    std::size_t text_len = 0, audio_len = 0, audio_dim = 0, visual_len = 0, visual_dim = 0;

    std::size_t total() const { return train.size() + val.size() + test.size(); }
};

inline DatasetSplit generate(const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::vector<double> token_score(spec.vocab_size);
    for (auto& s : token_score) s = uni(rng);

    std::uniform_int_distribution<int> tok(0, int(spec.vocab_size) - 1);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<Sample> all(spec.n_samples);
    for (auto& s : all) {
        s.tokens.resize(spec.text_len);
        double u = 0.0;
        for (auto& t : s.tokens) {
            t = tok(rng);
            u += token_score[std::size_t(t)];
        }
        u /= double(spec.text_len);
        s.audio.resize(spec.audio_len * spec.audio_dim);
        for (auto& v : s.audio) v = gauss(rng);
        s.visual.resize(spec.visual_len * spec.visual_dim);
        for (auto& v : s.visual) v = gauss(rng);
        double a_mean = 0.0;
        for (std::size_t t = 0; t < spec.audio_len; ++t) a_mean += s.audio[t * spec.audio_dim + 0];
        a_mean /= double(spec.audio_len);
        double v_mean = 0.0;
        for (std::size_t t = 0; t < spec.visual_len; ++t)
            v_mean += s.visual[t * spec.visual_dim + 1];
        v_mean /= double(spec.visual_len);
        double noise = spec.noise_std > 0.0 ? gauss(rng) * spec.noise_std : 0.0;
        double y = spec.text_weight * u + spec.audio_weight * a_mean + spec.visual_weight * v_mean +
                   noise;
        s.label = std::min(3.0, std::max(-3.0, y));
    }

    DatasetSplit split;
    split.text_len = spec.text_len;
    split.audio_len = spec.audio_len;
    split.audio_dim = spec.audio_dim;
    split.visual_len = spec.visual_len;
    split.visual_dim = spec.visual_dim;
    std::size_t n_train = std::size_t(double(spec.n_samples) * 0.7);
    std::size_t n_val = std::size_t(double(spec.n_samples) * 0.15);
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (i < n_train)
            split.train.push_back(std::move(all[i]));
        else if (i < n_train + n_val)
            split.val.push_back(std::move(all[i]));
        else
            split.test.push_back(std::move(all[i]));
    }
    return split;
}

struct FloorEstimate {
    double mae = 0.0;
    double std_error = 0.0;
};

// Monte-Carlo estimate of E|s_a*mean(audio ch0) + s_v*mean(visual ch1) + noise|,
// the MAE any text-only predictor is bounded below by on this generator.
inline FloorEstimate text_only_floor(const SynthSpec& spec, std::size_t draws = 1'000'000,
                                     std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    // mean of k i.i.d. standard normals ~ N(0, 1/k)
    double sd_a = spec.audio_weight / std::sqrt(double(spec.audio_len));
    double sd_v = spec.visual_weight / std::sqrt(double(spec.visual_len));
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
        double z = sd_a * gauss(rng) + sd_v * gauss(rng) + spec.noise_std * gauss(rng);
        double a = std::fabs(z);
        sum += a;
        sum2 += a * a;
    }
    FloorEstimate e;
    e.mae = sum / double(draws);
    double var = std::max(0.0, sum2 / double(draws) - e.mae * e.mae);
    e.std_error = std::sqrt(var / double(draws));
    return e;
}

// --------------------------------------------------------------------------
// JSONL persistence. First line is a header carrying dims and version; each
// following line is one sample tagged with its split.
// --------------------------------------------------------------------------

inline void save_jsonl(const DatasetSplit& split, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw io_error("dataset: cannot open " + path + " for writing");
    json header{{"format", "pgf-dataset"},
                {"version", 1},
                {"text_len", split.text_len},
                {"audio_len", split.audio_len},
                {"audio_dim", split.audio_dim},
                {"visual_len", split.visual_len},
                {"visual_dim", split.visual_dim}};
    os << header.dump() << "\n";
    auto dump_part = [&os](const std::vector<Sample>& part, const char* name) {
        for (const auto& s : part) {
            json j{{"split", name}, {"tokens", s.tokens}, {"label", s.label}};
            j["audio"] = json::array();
            j["visual"] = json::array();
            // rows restored from the header dims on load
            for (double v : s.audio) j["audio"].push_back(v);
            for (double v : s.visual) j["visual"].push_back(v);
            os << j.dump() << "\n";
        }
    };
    dump_part(split.train, "train");
    dump_part(split.val, "val");
    dump_part(split.test, "test");
    if (!os) throw io_error("dataset: write failed for " + path);
}

inline DatasetSplit load_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("dataset: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw io_error("dataset: " + path + " is empty (no header)");
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.is_object() || header.value("format", "") != "pgf-dataset")
        throw io_error("dataset: line 1: not a pgf-dataset header");
    DatasetSplit split;
    split.text_len = header.at("text_len").get<std::size_t>();
    split.audio_len = header.at("audio_len").get<std::size_t>();
    split.audio_dim = header.at("audio_dim").get<std::size_t>();
    split.visual_len = header.at("visual_len").get<std::size_t>();
    split.visual_dim = header.at("visual_dim").get<std::size_t>();

    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw io_error("dataset: line " + std::to_string(line_no) + ": malformed JSON");
        Sample s;
        try {
            s.tokens = j.at("tokens").get<std::vector<int>>();
            s.audio = j.at("audio").get<std::vector<double>>();
            s.visual = j.at("visual").get<std::vector<double>>();
            s.label = j.at("label").get<double>();
        } catch (const json::exception&) {
            throw io_error("dataset: line " + std::to_string(line_no) + ": missing or mistyped field");
        }
        if (s.tokens.size() != split.text_len)
            throw io_error("dataset: line " + std::to_string(line_no) + ": expected " +
                           std::to_string(split.text_len) + " tokens, got " +
                           std::to_string(s.tokens.size()));
        if (s.audio.size() != split.audio_len * split.audio_dim)
            throw io_error("dataset: line " + std::to_string(line_no) +
                           ": audio block does not match header dims");
        if (s.visual.size() != split.visual_len * split.visual_dim)
            throw io_error("dataset: line " + std::to_string(line_no) +
                           ": visual block does not match header dims");
        std::string part = j.value("split", "train");
        if (part == "train")
            split.train.push_back(std::move(s));
        else if (part == "val")
            split.val.push_back(std::move(s));
        else if (part == "test")
            split.test.push_back(std::move(s));
        else
            throw io_error("dataset: line " + std::to_string(line_no) + ": unknown split '" + part +
                           "'");
    }
    return split;
}

// Collates samples[first, first+count) into a batch with all-true masks.
inline MultimodalBatch make_batch(const std::vector<Sample>& samples,
                                  const std::vector<std::size_t>& order, std::size_t first,
                                  std::size_t count, const DatasetSplit& dims) {
    MultimodalBatch b;
    const std::size_t B = count, Tt = dims.text_len, Ta = dims.audio_len, Tv = dims.visual_len;
    b.token_ids.resize(B * Tt);
    b.labels.resize(B);
    b.text_mask = Mask::ones({B, Tt});
    b.audio_mask = Mask::ones({B, Ta});
    b.visual_mask = Mask::ones({B, Tv});
    b.audio = Tensor::zeros({B, Ta, dims.audio_dim});
    b.visual = Tensor::zeros({B, Tv, dims.visual_dim});
    for (std::size_t i = 0; i < B; ++i) {
        const Sample& s = samples[order[first + i]];
        std::copy(s.tokens.begin(), s.tokens.end(), b.token_ids.begin() + i * Tt);
        std::copy(s.audio.begin(), s.audio.end(), b.audio.data() + i * Ta * dims.audio_dim);
        std::copy(s.visual.begin(), s.visual.end(), b.visual.data() + i * Tv * dims.visual_dim);
        b.labels[i] = s.label;
    }
    return b;
}

inline std::vector<std::size_t> identity_order(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace pgf
