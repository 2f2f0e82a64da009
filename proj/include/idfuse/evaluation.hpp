#pragma once
// Identity and prompt-consistency metrics over (generated, reference, prompt)
// records, and z-score fusion across methods.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idfuse/encoders.hpp"

namespace idfuse {

/// u.v / (|u| |v|); throws DegenerateError for a zero vector, ShapeError on length mismatch.
double cosine(std::span<const float> u, std::span<const float> v);
double cosine(std::span<const double> u, std::span<const double> v);

/// Mean over tokens, [1 x d] -> d values.
std::vector<float> pool_tokens(const Matrix<float>& tokens);

/// Maps a prompt into the clip embedding space.
class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;
    virtual std::vector<float> embed(const std::string& prompt) const = 0;
};

/// Bag of hashed tokens projected to the clip width (stand-in for a paired text tower).
class HashTextEmbedder : public TextEmbedder {
public:
    explicit HashTextEmbedder(const HashTextEncoder& enc) : enc_(enc) {}
    std::vector<float> embed(const std::string& prompt) const override { return enc_.pooled(prompt); }

private:
    HashTextEncoder enc_;
};

/// A prompt's embedding is the pooled clip embedding of a canonical rendering.
class CanonicalTextEmbedder : public TextEmbedder {
public:
    explicit CanonicalTextEmbedder(const EncoderBackend& clip) : clip_(clip) {}
    void add(const std::string& prompt, Image canonical);
    std::vector<float> embed(const std::string& prompt) const override;

private:
    const EncoderBackend& clip_;
    std::map<std::string, Image> canon_;
};

struct EvalRecord {
    Image generated;
    Image reference;
    std::string prompt;
    std::string method = "default";
    std::string load_error;  // set when the images could not be read; the record is reported unscored
};

double metric_m_facenet(const EvalRecord& rec, const EncoderBackend& face, std::size_t align_size);
double metric_clip_i(const EvalRecord& rec, const EncoderBackend& clip, std::size_t align_size);
double metric_clip_t(const EvalRecord& rec, const EncoderBackend& clip, const TextEmbedder& text);

struct RecordMetrics {
    std::string method;
    std::optional<double> m_facenet, clip_i, clip_t;
    std::string error;  // non-empty when the record could not be scored
};

struct MethodSummary {
    std::string method;
    std::size_t records = 0;  // scored records
    double clip_t = 0, clip_i = 0, m_facenet = 0;
    std::optional<double> fused_identity;  // present with two or more methods
};

struct MetricReport {
    std::vector<RecordMetrics> records;
    std::vector<MethodSummary> methods;  // first-appearance order
    std::string config_digest;
};

/// Population z-scores; a constant vector maps to zeros. Needs >= 2 entries.
std::vector<double> z_score(const std::vector<double>& x);
/// mean(z(m_facenet), z(clip_i)) per method.
std::vector<double> z_score_fuse(const std::vector<double>& m_facenet, const std::vector<double>& clip_i);

struct EvalEncoders {
    const EncoderBackend& clip;
    const EncoderBackend& face;
    const TextEmbedder& text;
    std::size_t align_size = 32;
};

/// Scores every record; a failure is recorded on the record and the record is
/// left out of the aggregates.
MetricReport evaluate(const std::vector<EvalRecord>& records, const EvalEncoders& enc);

std::string report_json(const MetricReport& r);
/// method,CLIP-T,CLIP-I,M_FaceNet
std::string report_csv(const MetricReport& r);

struct ManifestEntry {
    std::filesystem::path generated, reference;
    std::string prompt;
    std::string method = "default";
};

/// JSON lines; relative paths resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace idfuse
