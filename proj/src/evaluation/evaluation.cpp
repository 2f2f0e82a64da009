#include "idfuse/evaluation.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "idfuse/io.hpp"

namespace idfuse {

using nlohmann::json;

namespace {

template <class T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size()) throw ShapeError("cosine: length mismatch");
    double d = 0, nu = 0, nv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        d += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    if (nu == 0 || nv == 0) throw DegenerateError("cosine of a zero vector");
    return std::clamp(d / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

}  // namespace

double cosine(std::span<const float> u, std::span<const float> v) { return cosine_impl(u, v); }
double cosine(std::span<const double> u, std::span<const double> v) { return cosine_impl(u, v); }

std::vector<float> pool_tokens(const Matrix<float>& tokens) {
    if (tokens.rows() == 0) throw DegenerateError("cannot pool zero tokens");
    std::vector<double> acc(tokens.cols(), 0.0);
    for (std::size_t r = 0; r < tokens.rows(); ++r)
        for (std::size_t c = 0; c < tokens.cols(); ++c) acc[c] += tokens(r, c);
    std::vector<float> out(acc.size());
    for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c] / tokens.rows());
    return out;
}

void CanonicalTextEmbedder::add(const std::string& prompt, Image canonical) {
    validate(canonical);
    canon_[prompt] = std::move(canonical);
}

std::vector<float> CanonicalTextEmbedder::embed(const std::string& prompt) const {
    const auto it = canon_.find(prompt);
    if (it == canon_.end()) throw InputError("no canonical rendering for prompt '" + prompt + "'");
    return pool_tokens(clip_.encode(it->second));
}

double metric_m_facenet(const EvalRecord& rec, const EncoderBackend& face, std::size_t align_size) {
    if (face.kind() != EncoderKind::face_like) throw InputError("M_FaceNet needs a face_like backend");
    const auto g = face.encode(align_face(rec.generated, align_size));
    const auto r = face.encode(align_face(rec.reference, align_size));
    return cosine(g.row(0), r.row(0));
}

double metric_clip_i(const EvalRecord& rec, const EncoderBackend& clip, std::size_t align_size) {
    if (clip.kind() != EncoderKind::clip_like) throw InputError("CLIP-I needs a clip_like backend");
    const auto g = pool_tokens(clip.encode(align_face(rec.generated, align_size)));
    const auto r = pool_tokens(clip.encode(align_face(rec.reference, align_size)));
    return cosine(g, r);
}

double metric_clip_t(const EvalRecord& rec, const EncoderBackend& clip, const TextEmbedder& text) {
    if (clip.kind() != EncoderKind::clip_like) throw InputError("CLIP-T needs a clip_like backend");
    const auto img = pool_tokens(clip.encode(rec.generated));
    const auto txt = text.embed(rec.prompt);
    return cosine(img, txt);
}

std::vector<double> z_score(const std::vector<double>& x) {
    if (x.size() < 2) throw InputError("z-score needs at least two methods");
    const double n = static_cast<double>(x.size());
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    const double sigma = std::sqrt(var / n);
    std::vector<double> z(x.size(), 0.0);
    if (sigma == 0) return z;
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - mu) / sigma;
    return z;
}

std::vector<double> z_score_fuse(const std::vector<double>& m_facenet, const std::vector<double>& clip_i) {
    if (m_facenet.size() != clip_i.size()) throw ShapeError("z_score_fuse: metric vectors differ in length");
    const auto a = z_score(m_facenet), b = z_score(clip_i);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (a[i] + b[i]);
    return out;
}

MetricReport evaluate(const std::vector<EvalRecord>& records, const EvalEncoders& enc) {
    if (records.empty()) throw InputError("no records to evaluate");
    MetricReport rep;
    std::map<std::string, std::size_t> index;
    for (const auto& rec : records) {
        if (!index.count(rec.method)) {
            index[rec.method] = rep.methods.size();
            MethodSummary s;
            s.method = rec.method;
            rep.methods.push_back(std::move(s));
        }
        RecordMetrics m;
        m.method = rec.method;
        if (!rec.load_error.empty()) {
            m.error = rec.load_error;
        } else {
            try {
                m.m_facenet = metric_m_facenet(rec, enc.face, enc.align_size);
                m.clip_i = metric_clip_i(rec, enc.clip, enc.align_size);
                m.clip_t = metric_clip_t(rec, enc.clip, enc.text);
            } catch (const Error& e) {
                m.m_facenet.reset();
                m.clip_i.reset();
                m.clip_t.reset();
                m.error = e.what();
            }
        }
        rep.records.push_back(std::move(m));
    }
    // Index-ordered sums keep the aggregate independent of scheduling.
    for (const auto& m : rep.records) {
        if (!m.error.empty()) continue;
        auto& s = rep.methods[index[m.method]];
        ++s.records;
        s.clip_t += *m.clip_t;
        s.clip_i += *m.clip_i;
        s.m_facenet += *m.m_facenet;
    }
    std::vector<double> face, clip;
    for (auto& s : rep.methods) {
        if (s.records == 0) continue;
        const double n = static_cast<double>(s.records);
        s.clip_t /= n;
        s.clip_i /= n;
        s.m_facenet /= n;
        face.push_back(s.m_facenet);
        clip.push_back(s.clip_i);
    }
    if (face.size() >= 2) {
        const auto fused = z_score_fuse(face, clip);
        std::size_t k = 0;
        for (auto& s : rep.methods)
            if (s.records) s.fused_identity = fused[k++];
    }
    return rep;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string report_json(const MetricReport& r) {
    json recs = json::array();
    for (const auto& m : r.records) {
        json j{{"method", m.method}, {"m_facenet", opt(m.m_facenet)}, {"clip_i", opt(m.clip_i)}, {"clip_t", opt(m.clip_t)}};
        if (!m.error.empty()) j["error"] = m.error;
        recs.push_back(std::move(j));
    }
    json methods = json::array();
    for (const auto& s : r.methods)
        methods.push_back({{"method", s.method},
                           {"records", s.records},
                           {"clip_t", s.records ? json(s.clip_t) : json(nullptr)},
                           {"clip_i", s.records ? json(s.clip_i) : json(nullptr)},
                           {"m_facenet", s.records ? json(s.m_facenet) : json(nullptr)},
                           {"fused_identity", opt(s.fused_identity)}});
    return json{{"config_digest", r.config_digest}, {"records", std::move(recs)}, {"methods", std::move(methods)}}
               .dump(2) +
           "\n";
}

std::string report_csv(const MetricReport& r) {
    std::ostringstream os;
    os << "method,CLIP-T,CLIP-I,M_FaceNet\n" << std::fixed << std::setprecision(6);
    for (const auto& s : r.methods) {
        if (s.records == 0) continue;
        os << s.method << ',' << s.clip_t << ',' << s.clip_i << ',' << s.m_facenet << '\n';
    }
    return os.str();
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    const std::string text = read_file_text(path);
    const auto base = path.parent_path();
    std::vector<ManifestEntry> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            for (const auto& [key, _] : j.items())
                if (key != "generated" && key != "reference" && key != "prompt" && key != "method")
                    throw InputError("unknown key '" + key + "'");
            ManifestEntry e;
            e.generated = j.at("generated").get<std::string>();
            e.reference = j.at("reference").get<std::string>();
            e.prompt = j.at("prompt").get<std::string>();
            if (j.contains("method")) e.method = j.at("method").get<std::string>();
            if (e.generated.is_relative()) e.generated = base / e.generated;
            if (e.reference.is_relative()) e.reference = base / e.reference;
            out.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw InputError("manifest line " + std::to_string(lineno) + ": " + ex.what());
        } catch (const InputError& ex) {
            throw InputError("manifest line " + std::to_string(lineno) + ": " + ex.what());
        }
    }
    if (out.empty()) throw InputError("manifest has no records");
    return out;
}

}  // namespace idfuse
