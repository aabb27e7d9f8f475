#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "recsys/binio.hpp"
#include "recsys/nn.hpp"
#include "recsys/towers.hpp"

namespace recsys {

// Checkpoint file: magic "ETTW1", key=value header terminated by a blank
// line, then each named tensor as a name line, a space-separated shape line,
// and raw little-endian f32 values. Round-trips bit-exactly in 32-bit builds.

inline void save_checkpoint(const ModelParams& params, UserTower tower, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_checkpoint: cannot open " + path);
    out << "ETTW1\n";
    const HyperParams& hp = params.hp;
    out << "d=" << hp.d << "\n";
    out << "d_text=" << hp.d_text << "\n";
    out << "d_category=" << hp.d_category << "\n";
    out << "mlp_layers=" << hp.mlp_layers << "\n";
    out << "mlp_hidden=" << hp.mlp_hidden << "\n";
    out << "tau=" << format_double(hp.tau) << "\n";
    out << "learning_rate=" << format_double(hp.learning_rate) << "\n";
    out << "grad_clip=" << format_double(hp.grad_clip) << "\n";
    out << "negatives_per_positive=" << hp.negatives_per_positive << "\n";
    out << "batch_size=" << hp.batch_size << "\n";
    out << "epochs=" << hp.epochs << "\n";
    out << "event_type_dim=" << hp.event_type_dim << "\n";
    out << "rng_seed=" << hp.rng_seed << "\n";
    out << "user_tower=" << user_tower_name(tower) << "\n";
    out << "title_vocab=" << params.title_vocab << "\n";
    out << "aspect_vocab=" << params.aspect_vocab << "\n";
    out << "category_vocab=" << params.category_vocab << "\n";
    out << "\n";
    for (auto& [name, t] : named_tensors(const_cast<ModelParams&>(params))) {
        out << name << "\n";
        for (std::size_t i = 0; i < t->shape.size(); ++i) out << (i ? " " : "") << t->shape[i];
        out << "\n";
        write_f32_array(out, t->v.data(), t->v.size());
    }
    if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

struct Checkpoint {
    ModelParams params;
    UserTower tower = UserTower::Recurrent;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open " + path);
    std::string magic = read_header_line(in, "magic");
    if (magic != "ETTW1") throw DataError("load_checkpoint: bad magic '" + magic + "' in " + path);

    std::unordered_map<std::string, std::string> fields;
    for (auto& [k, v] : read_header_fields(in)) fields[k] = v;
    auto get = [&](const char* key) -> const std::string& {
        auto it = fields.find(key);
        if (it == fields.end()) throw DataError(std::string("load_checkpoint: missing header field ") + key);
        return it->second;
    };
    auto get_u = [&](const char* key) { return static_cast<std::size_t>(std::stoull(get(key))); };
    auto get_d = [&](const char* key) { return std::stod(get(key)); };

    HyperParams hp;
    hp.d = get_u("d");
    hp.d_text = get_u("d_text");
    hp.d_category = get_u("d_category");
    hp.mlp_layers = get_u("mlp_layers");
    hp.mlp_hidden = get_u("mlp_hidden");
    hp.tau = get_d("tau");
    hp.learning_rate = get_d("learning_rate");
    hp.grad_clip = get_d("grad_clip");
    hp.negatives_per_positive = get_u("negatives_per_positive");
    hp.batch_size = get_u("batch_size");
    hp.epochs = get_u("epochs");
    hp.event_type_dim = get_u("event_type_dim");
    hp.rng_seed = std::stoull(get("rng_seed"));

    Checkpoint ck;
    ck.tower = user_tower_from_name(get("user_tower"));
    ck.params = init_model(hp, get_u("title_vocab"), get_u("aspect_vocab"), get_u("category_vocab"));

    for (auto& [name, t] : named_tensors(ck.params)) {
        const std::string got = read_header_line(in, "tensor name");
        if (got != name)
            throw IntegrityError("load_checkpoint: expected tensor '" + name + "', got '" + got + "'",
                                 static_cast<std::uint64_t>(in.tellg()));
        const std::string shape_line = read_header_line(in, "tensor shape");
        std::istringstream ss(shape_line);
        std::vector<std::size_t> shape;
        std::size_t dim;
        while (ss >> dim) shape.push_back(dim);
        if (shape != t->shape)
            throw IntegrityError("load_checkpoint: shape mismatch for '" + name + "'",
                                 static_cast<std::uint64_t>(in.tellg()));
        read_f32_array(in, t->v.data(), t->v.size());
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Embedding files: magic "EEMB1", key=value header (dim, count), blank line,
// then per record an id line followed by dim raw f32 values.
// ---------------------------------------------------------------------------

struct EmbeddingRecord {
    std::string id;
    std::vector<Real> values;
};

inline void save_embeddings(const std::vector<EmbeddingRecord>& records, std::size_t dim,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_embeddings: cannot open " + path);
    out << "EEMB1\n";
    out << "dim=" << dim << "\n";
    out << "count=" << records.size() << "\n";
    out << "\n";
    for (const auto& rec : records) {
        if (rec.values.size() != dim) throw ShapeError("save_embeddings: record dim mismatch for " + rec.id);
        out << rec.id << "\n";
        write_f32_array(out, rec.values.data(), dim);
    }
    if (!out) throw DataError("save_embeddings: write failed for " + path);
}

inline std::vector<EmbeddingRecord> load_embeddings(const std::string& path, std::size_t* dim_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_embeddings: cannot open " + path);
    std::string magic = read_header_line(in, "magic");
    if (magic != "EEMB1") throw DataError("load_embeddings: bad magic '" + magic + "' in " + path);
    std::size_t dim = 0, count = 0;
    for (auto& [k, v] : read_header_fields(in)) {
        if (k == "dim") dim = std::stoull(v);
        if (k == "count") count = std::stoull(v);
    }
    if (dim == 0) throw DataError("load_embeddings: missing dim in " + path);
    if (dim_out) *dim_out = dim;
    std::vector<EmbeddingRecord> records;
    records.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        EmbeddingRecord rec;
        rec.id = read_header_line(in, "record id");
        rec.values.resize(dim);
        read_f32_array(in, rec.values.data(), dim);
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace recsys
