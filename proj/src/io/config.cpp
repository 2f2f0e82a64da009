#include "idfuse/config.hpp"

#include <set>

#include <nlohmann/json.hpp>

#include "idfuse/io.hpp"

namespace idfuse {

using nlohmann::json;

namespace {

// Reads the fields of one JSON object; finish() rejects any key nobody asked for.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
    }
    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) fail(sub(key), "unknown key");
    }

    void field(const char* key, std::size_t& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_unsigned()) fail(sub(key), "expected a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void field(const char* key, int& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) fail(sub(key), "expected an integer");
            out = v->get<int>();
        }
    }
    void field(const char* key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) fail(sub(key), "expected a number");
            out = v->get<double>();
        }
    }
    void field(const char* key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) fail(sub(key), "expected true or false");
            out = v->get<bool>();
        }
    }
    void field(const char* key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) fail(sub(key), "expected a string");
            out = v->get<std::string>();
        }
    }
    void field(const char* key, std::vector<std::size_t>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) fail(sub(key), "expected an array");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number_unsigned()) fail(sub(key), "expected non-negative integers");
                out.push_back(e.get<std::size_t>());
            }
        }
    }
    template <class E, class Parse>
    void enumeration(const char* key, E& out, Parse parse) {
        std::string s;
        field(key, s);
        if (!j_.contains(key)) return;
        try {
            out = parse(s);
        } catch (const InputError& e) {
            fail(sub(key), e.what());
        }
    }
    template <class F>
    void object(const char* key, F read) {
        if (const json* v = find(key)) {
            Reader r(*v, sub(key));
            read(r);
            r.finish();
        }
    }

    [[noreturn]] static void fail(const std::string& key, const std::string& why) {
        throw InputError("config: " + key + ": " + why);
    }

private:
    const json* find(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read(Reader& r, UNetConfig& c) {
    r.field("latent_size", c.latent_size);
    r.field("latent_channels", c.latent_channels);
    r.field("base_channels", c.base_channels);
    r.field("channel_multipliers", c.channel_multipliers);
    r.field("attention_resolutions", c.attention_resolutions);
    r.field("d_model", c.d_model);
    r.field("heads", c.heads);
    r.field("groups", c.groups);
    r.field("prior_std", c.prior_std);
}

void read(Reader& r, TrainConfig& c) {
    r.field("learning_rate", c.learning_rate);
    r.field("weight_decay", c.weight_decay);
    r.field("beta1", c.beta1);
    r.field("beta2", c.beta2);
    r.field("epsilon", c.epsilon);
    r.field("batch_size", c.batch_size);
    r.field("steps", c.steps);
    r.field("seed", c.seed);
    r.enumeration("mode", c.mode, train_mode_from_string);
}

void read(Reader& r, ScheduleConfig& c) {
    r.field("steps", c.steps);
    r.field("beta_start", c.beta_start);
    r.field("beta_end", c.beta_end);
}

void read(Reader& r, EncoderConfig& c) {
    r.field("backend", c.backend);
    r.field("clip_tokens", c.clip_tokens);
    r.field("clip_dim", c.clip_dim);
    r.field("face_dim", c.face_dim);
    r.field("align_size", c.align_size);
    r.field("clip_seed", c.clip_seed);
    r.field("face_seed", c.face_seed);
    r.field("text_seed", c.text_seed);
}

void read(Reader& r, DatasetConfig& c) {
    r.field("n_identities", c.n_identities);
    r.field("variants", c.variants);
    r.field("seed", c.seed);
    r.field("image_size", c.image_size);
    r.field("max_cross_cosine", c.max_cross_cosine);
    r.field("max_retries", c.max_retries);
}

void read(Reader& r, InferenceConfig& c) {
    r.field("steps", c.steps);
    r.field("guidance_scale", c.guidance_scale);
    r.enumeration("variant", c.variant, generation_variant_from_string);
    r.field("merge_cross_attention", c.merge_cross_attention);
    r.enumeration("style", c.style, style_align_from_string);
}

RunConfig from_json(const json& j) {
    RunConfig c;
    Reader r(j, "");
    r.field("model_seed", c.model_seed);
    r.field("latent_factor", c.latent_factor);
    r.object("unet", [&](Reader& s) { read(s, c.unet); });
    r.object("train", [&](Reader& s) { read(s, c.train); });
    r.object("schedule", [&](Reader& s) { read(s, c.schedule); });
    r.object("encoders", [&](Reader& s) { read(s, c.encoders); });
    r.object("dataset", [&](Reader& s) { read(s, c.dataset); });
    r.object("inference", [&](Reader& s) { read(s, c.inference); });
    r.finish();
    return c;
}

json to_json(const RunConfig& c) {
    const auto& u = c.unet;
    const auto& t = c.train;
    const auto& e = c.encoders;
    const auto& d = c.dataset;
    const auto& i = c.inference;
    return {
        {"model_seed", c.model_seed},
        {"latent_factor", c.latent_factor},
        {"unet",
         {{"latent_size", u.latent_size},
          {"latent_channels", u.latent_channels},
          {"base_channels", u.base_channels},
          {"channel_multipliers", u.channel_multipliers},
          {"attention_resolutions", u.attention_resolutions},
          {"d_model", u.d_model},
          {"heads", u.heads},
          {"groups", u.groups},
          {"prior_std", u.prior_std}}},
        {"train",
         {{"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"seed", t.seed},
          {"mode", to_string(t.mode)}}},
        {"schedule", {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
        {"encoders",
         {{"backend", e.backend},
          {"clip_tokens", e.clip_tokens},
          {"clip_dim", e.clip_dim},
          {"face_dim", e.face_dim},
          {"align_size", e.align_size},
          {"clip_seed", e.clip_seed},
          {"face_seed", e.face_seed},
          {"text_seed", e.text_seed}}},
        {"dataset",
         {{"n_identities", d.n_identities},
          {"variants", d.variants},
          {"seed", d.seed},
          {"image_size", d.image_size},
          {"max_cross_cosine", d.max_cross_cosine},
          {"max_retries", d.max_retries}}},
        {"inference",
         {{"steps", i.steps},
          {"guidance_scale", i.guidance_scale},
          {"variant", to_string(i.variant)},
          {"merge_cross_attention", i.merge_cross_attention},
          {"style", to_string(i.style)}}},
    };
}

}  // namespace

void validate(const RunConfig& c) {
    validate(c.unet);
    validate(c.train);
    if (c.latent_factor == 0) Reader::fail("latent_factor", "must be positive");
    if (c.schedule.steps < 1) Reader::fail("schedule.steps", "must be positive");
    if (!(c.schedule.beta_start > 0 && c.schedule.beta_start <= c.schedule.beta_end && c.schedule.beta_end < 1))
        Reader::fail("schedule", "need 0 < beta_start <= beta_end < 1");
    if (c.dataset.n_identities < 2) Reader::fail("dataset.n_identities", "must be at least 2");
    if (c.dataset.variants < 2) Reader::fail("dataset.variants", "must be at least 2");
    if (c.dataset.image_size != c.unet.latent_size * c.latent_factor)
        Reader::fail("dataset.image_size", "must equal unet.latent_size * latent_factor");
    if (c.encoders.clip_tokens == 0 || c.encoders.clip_dim == 0 || c.encoders.face_dim == 0)
        Reader::fail("encoders", "token count and widths must be positive");
    if (c.encoders.align_size < 8) Reader::fail("encoders.align_size", "must be at least 8");
    if (c.inference.steps < 1) Reader::fail("inference.steps", "must be positive");
    if (!(c.inference.guidance_scale >= 0)) Reader::fail("inference.guidance_scale", "must be non-negative");
}

RunConfig parse_config(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("config: not valid JSON: ") + e.what());
    }
    RunConfig c = from_json(j);
    validate(c);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file_text(path)); }

std::string config_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string config_digest(const RunConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

void apply_override(RunConfig& cfg, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw InputError("override must look like key=value");
    const std::string key(assignment.substr(0, eq));
    const std::string raw(assignment.substr(eq + 1));
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    json j = to_json(cfg);
    std::string pointer = "/" + key;
    for (auto& ch : pointer)
        if (ch == '.') ch = '/';
    const json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) Reader::fail(key, "unknown key");
    j[ptr] = value;
    RunConfig next = from_json(j);
    validate(next);
    cfg = std::move(next);
}

DatasetOptions dataset_options(const RunConfig& c) {
    DatasetOptions o;
    o.n_identities = c.dataset.n_identities;
    o.variants = c.dataset.variants;
    o.seed = c.dataset.seed;
    o.image_size = c.dataset.image_size;
    o.align_size = c.encoders.align_size;
    o.max_cross_cosine = c.dataset.max_cross_cosine;
    o.max_retries = c.dataset.max_retries;
    return o;
}

NoiseSchedule make_schedule(const RunConfig& c) {
    return make_noise_schedule(c.schedule.steps, c.schedule.beta_start, c.schedule.beta_end);
}

}  // namespace idfuse
