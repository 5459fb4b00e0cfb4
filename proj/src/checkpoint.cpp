#include "ofa/checkpoint.h"

#include <cstring>
#include <fstream>

namespace ofa {

namespace {

template <typename T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void put_string(std::ofstream& os, const std::string& s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& is) {
    const auto len = get<uint32_t>(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    return s;
}

struct TableEntry {
    std::string name;
    std::vector<int> dims;
    uint64_t offset = 0;  // bytes into the payload

    int64_t numel() const {
        int64_t n = 1;
        for (int d : dims) n *= d;
        return n;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const TrainState& train, Adam* adam) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open checkpoint for writing: " + path);

    nlohmann::json meta;
    meta["spec"] = model.spec.to_json();
    meta["arch"] = model.arch ? nlohmann::json(model.arch->str()) : nlohmann::json(nullptr);
    const std::string meta_str = meta.dump();

    os.write("OFAC", 4);
    put<uint32_t>(os, 1u);
    put<uint32_t>(os, static_cast<uint32_t>(model.kind));
    put_string(os, meta_str);
    put<uint64_t>(os, static_cast<uint64_t>(train.iteration));
    put<uint8_t>(os, train.has_adam || adam ? 1 : 0);
    const AdamConfig acfg = adam ? adam->config() : train.adam_config;
    put(os, acfg.learning_rate);
    put(os, acfg.beta1);
    put(os, acfg.beta2);
    put(os, acfg.eps);
    put<uint64_t>(os, static_cast<uint64_t>(adam ? adam->step_count() : train.adam_step));
    put_string(os, train.rng_state);

    // table: model tensors in declaration order, then optimizer moments in
    // trainable order
    struct Row {
        std::string name;
        const std::vector<int>* dims;
        const float* data;
        int64_t numel;
    };
    std::vector<Row> rows;
    for (const auto& name : model.names()) {
        const auto& t = model.at(name);
        rows.push_back({name, &t->shape, t->data.data(), t->numel()});
    }
    const auto tnames = model.trainable_names();
    const auto tparams = model.trainable();
    if (adam) {
        if (adam->num_params() != tparams.size())
            throw StateError("optimizer holds " + std::to_string(adam->num_params()) +
                             " parameters, model has " + std::to_string(tparams.size()));
        for (size_t i = 0; i < tnames.size(); ++i) {
            rows.push_back({"adam.m." + tnames[i], &tparams[i]->shape, adam->moment1(i).data(),
                            tparams[i]->numel()});
            rows.push_back({"adam.v." + tnames[i], &tparams[i]->shape, adam->moment2(i).data(),
                            tparams[i]->numel()});
        }
    }

    put<uint32_t>(os, static_cast<uint32_t>(rows.size()));
    uint64_t offset = 0;
    for (const auto& r : rows) {
        put_string(os, r.name);
        put<uint32_t>(os, static_cast<uint32_t>(r.dims->size()));
        for (int d : *r.dims) put<int32_t>(os, d);
        put<uint64_t>(os, offset);
        offset += static_cast<uint64_t>(r.numel) * sizeof(float);
    }
    for (const auto& r : rows)
        os.write(reinterpret_cast<const char*>(r.data),
                 static_cast<std::streamsize>(r.numel * static_cast<int64_t>(sizeof(float))));
    if (!os) throw InputError("short write on checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "OFAC", 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    const auto version = get<uint32_t>(is);
    if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto kind = static_cast<ModelKind>(get<uint32_t>(is));
    const std::string meta_str = get_string(is);

    LoadedCheckpoint out;
    out.train.iteration = static_cast<int64_t>(get<uint64_t>(is));
    out.train.has_adam = get<uint8_t>(is) != 0;
    out.train.adam_config.learning_rate = get<float>(is);
    out.train.adam_config.beta1 = get<float>(is);
    out.train.adam_config.beta2 = get<float>(is);
    out.train.adam_config.eps = get<float>(is);
    out.train.adam_step = static_cast<int64_t>(get<uint64_t>(is));
    out.train.rng_state = get_string(is);
    if (!is) throw FormatError("truncated checkpoint header in " + path);

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint metadata in " + path + ": " + e.what());
    }
    out.model.spec = SupernetSpec::from_json(meta.at("spec"));
    if (!meta.at("arch").is_null()) out.model.arch = ArchConfig::parse(meta.at("arch").get<std::string>());
    out.model.kind = kind;

    const auto count = get<uint32_t>(is);
    std::vector<TableEntry> table(count);
    for (auto& e : table) {
        e.name = get_string(is);
        const auto ndim = get<uint32_t>(is);
        e.dims.resize(ndim);
        for (auto& d : e.dims) d = get<int32_t>(is);
        e.offset = get<uint64_t>(is);
    }
    if (!is) throw FormatError("truncated checkpoint table in " + path);
    const auto payload_start = is.tellg();

    std::unordered_map<std::string, std::vector<float>> moments;
    for (const auto& e : table) {
        is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        std::vector<float> data(static_cast<size_t>(e.numel()));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!is) throw CorruptionError("truncated payload for tensor '" + e.name + "' in " + path);
        if (e.name.starts_with("adam.")) {
            moments.emplace(e.name, std::move(data));
        } else {
            out.model.add(e.name, Tensor::from_data(e.dims, std::move(data), !Model::is_buffer(e.name)));
        }
    }

    if (out.train.has_adam) {
        for (const auto& name : out.model.trainable_names()) {
            auto mi = moments.find("adam.m." + name);
            auto vi = moments.find("adam.v." + name);
            if (mi == moments.end() || vi == moments.end())
                throw CorruptionError("checkpoint missing optimizer moments for '" + name + "'");
            out.m.push_back(std::move(mi->second));
            out.v.push_back(std::move(vi->second));
        }
    }
    return out;
}

Adam restore_adam(const LoadedCheckpoint& ckpt) {
    Adam adam(ckpt.model.trainable(), ckpt.train.adam_config);
    if (ckpt.train.has_adam) {
        for (size_t i = 0; i < ckpt.m.size(); ++i) {
            adam.moment1(i) = ckpt.m[i];
            adam.moment2(i) = ckpt.v[i];
        }
        adam.restore(ckpt.train.adam_step);
    }
    return adam;
}

}  // namespace ofa
