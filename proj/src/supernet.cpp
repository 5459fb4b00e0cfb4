#include "ofa/supernet.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ofa {

namespace {

constexpr float kRatioTol = 1e-6f;

bool ratio_in_set(float r, const std::vector<float>& set) {
    for (float s : set)
        if (std::abs(r - s) <= kRatioTol) return true;
    return false;
}

// Shortest fixed-point form that round-trips: "1.0", "0.8", "0.45", ...
std::string fmt_ratio(float r) {
    char buf[32];
    for (int digits = 1; digits <= 6; ++digits) {
        std::snprintf(buf, sizeof(buf), "%.*f", digits, static_cast<double>(r));
        if (std::abs(std::strtod(buf, nullptr) - static_cast<double>(r)) < 1e-7) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.8g", static_cast<double>(r));
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    return parts;
}

}  // namespace

int SupernetSpec::num_dynamic() const {
    int n = 0;
    for (const auto& b : blocks)
        if (b.dynamic) ++n;
    return n;
}

void SupernetSpec::validate() const {
    if (blocks.empty()) throw ConfigError("supernet spec has no blocks");
    for (const auto& b : blocks) {
        if (b.full_channels <= 0) throw ConfigError("block channels must be positive");
        if (b.layers != 2) throw ConfigError("blocks carry exactly 2 conv layers");
    }
    if (input_channels <= 0 || mel_bins <= 0) throw ConfigError("bad input dims in supernet spec");
    if (head.embed_dim <= 0 || head.num_classes <= 0) throw ConfigError("bad head dims in supernet spec");
    if (width_ratios.empty()) throw ConfigError("width_ratios must be non-empty");
    bool has_one = false;
    for (float r : width_ratios) {
        if (!(r > 0.0f && r <= 1.0f + kRatioTol)) throw ConfigError("width ratios must lie in (0,1]");
        if (std::abs(r - 1.0f) <= kRatioTol) has_one = true;
    }
    if (!has_one) throw ConfigError("width_ratios must contain 1.0");
    if (elastic_depth_mask.size() != static_cast<size_t>(num_dynamic()))
        throw ConfigError("elastic_depth_mask must have one entry per dynamic block");
}

SupernetSpec SupernetSpec::default_full(int num_classes) {
    SupernetSpec spec;
    spec.blocks = {{false, 64, 2}, {true, 128, 2}, {true, 256, 2}, {true, 512, 2}};
    spec.head = {512, num_classes};
    spec.elastic_depth_mask = {false, false, true};
    return spec;
}

nlohmann::json SupernetSpec::to_json() const {
    nlohmann::json jb = nlohmann::json::array();
    for (const auto& b : blocks)
        jb.push_back({{"kind", b.dynamic ? "dynamic" : "static"}, {"channels", b.full_channels}});
    return {{"blocks", jb},
            {"input_channels", input_channels},
            {"mel_bins", mel_bins},
            {"head", {{"embed_dim", head.embed_dim}, {"num_classes", head.num_classes}}},
            {"width_ratios", width_ratios},
            {"elastic_depth_mask", depth_mask_str(elastic_depth_mask)}};
}

SupernetSpec SupernetSpec::from_json(const nlohmann::json& j) {
    SupernetSpec spec;
    spec.blocks.clear();
    for (const auto& b : j.at("blocks")) {
        const std::string kind = b.at("kind").get<std::string>();
        if (kind != "static" && kind != "dynamic") throw ConfigError("block kind must be static|dynamic");
        spec.blocks.push_back({kind == "dynamic", b.at("channels").get<int>(), 2});
    }
    spec.input_channels = j.value("input_channels", 1);
    spec.mel_bins = j.value("mel_bins", 64);
    spec.head.embed_dim = j.at("head").at("embed_dim").get<int>();
    spec.head.num_classes = j.at("head").at("num_classes").get<int>();
    if (j.contains("width_ratios")) spec.width_ratios = j.at("width_ratios").get<std::vector<float>>();
    if (j.contains("elastic_depth_mask")) {
        const auto& m = j.at("elastic_depth_mask");
        if (m.is_string())
            spec.elastic_depth_mask = parse_depth_mask(m.get<std::string>());
        else
            spec.elastic_depth_mask = m.get<std::vector<bool>>();
    } else {
        spec.elastic_depth_mask.assign(static_cast<size_t>(spec.num_dynamic()), true);
    }
    spec.validate();
    return spec;
}

std::vector<bool> parse_depth_mask(const std::string& text) {
    std::vector<bool> mask;
    for (const auto& part : split(text, ',')) {
        std::string t;
        for (char c : part)
            if (!isspace(static_cast<unsigned char>(c)) && c != '[' && c != ']') t.push_back(c);
        if (t == "2")
            mask.push_back(false);
        else if (t == "X" || t == "x")
            mask.push_back(true);
        else
            throw ConfigError("depth mask entries must be 2 or X, got '" + part + "'");
    }
    return mask;
}

std::string depth_mask_str(const std::vector<bool>& mask) {
    std::string s;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (i) s += ",";
        s += mask[i] ? "X" : "2";
    }
    return s;
}

std::string ArchConfig::str() const {
    std::string s;
    for (size_t i = 0; i < choices.size(); ++i) {
        if (i) s += "|";
        s += "d" + std::to_string(choices[i].depth) + ":";
        for (size_t l = 0; l < choices[i].ratios.size(); ++l) {
            if (l) s += ",";
            s += fmt_ratio(choices[i].ratios[l]);
        }
    }
    return s;
}

ArchConfig ArchConfig::parse(const std::string& text) {
    ArchConfig arch;
    if (text.empty()) throw InvalidArchError("empty arch string");
    for (const auto& seg : split(text, '|')) {
        const auto colon = seg.find(':');
        if (colon == std::string::npos || seg.size() < 2 || seg[0] != 'd')
            throw InvalidArchError("bad arch segment '" + seg + "'");
        BlockChoice choice;
        choice.depth = std::stoi(seg.substr(1, colon - 1));
        for (const auto& r : split(seg.substr(colon + 1), ',')) {
            if (r.empty()) throw InvalidArchError("empty ratio in segment '" + seg + "'");
            choice.ratios.push_back(std::strtof(r.c_str(), nullptr));
        }
        arch.choices.push_back(std::move(choice));
    }
    return arch;
}

int scaled_channels(float ratio, int full) {
    // tiny bias keeps exact products (e.g. 0.6*5) from flooring one short
    return static_cast<int>(std::floor(static_cast<double>(ratio) * full + 1e-9));
}

void validate_arch(const SupernetSpec& spec, const ArchConfig& arch) {
    if (arch.choices.size() != static_cast<size_t>(spec.num_dynamic()))
        throw InvalidArchError("arch has " + std::to_string(arch.choices.size()) + " choices, spec has " +
                               std::to_string(spec.num_dynamic()) + " dynamic blocks");
    for (size_t i = 0; i < arch.choices.size(); ++i) {
        const auto& c = arch.choices[i];
        if (c.depth != 1 && c.depth != 2) throw InvalidArchError("depth must be 1 or 2");
        if (c.depth == 1 && !spec.elastic_depth_mask[i])
            throw InvalidArchError("depth 1 not allowed in dynamic block " + std::to_string(i));
        if (c.ratios.size() != static_cast<size_t>(c.depth))
            throw InvalidArchError("ratio count must equal depth in block " + std::to_string(i));
        for (float r : c.ratios)
            if (!ratio_in_set(r, spec.width_ratios))
                throw InvalidArchError("ratio " + fmt_ratio(r) + " not in the allowed set");
    }
}

ForwardPlan plan_subnet(const SupernetSpec& spec, const ArchConfig& arch) {
    spec.validate();
    validate_arch(spec, arch);
    ForwardPlan plan;
    int prev = spec.input_channels;
    int dyn = 0;
    for (size_t bi = 0; bi < spec.blocks.size(); ++bi) {
        const auto& blk = spec.blocks[bi];
        const int depth = blk.dynamic ? arch.choices[dyn].depth : blk.layers;
        std::vector<ConvLayerPlan> layers;
        for (int l = 0; l < depth; ++l) {
            ConvLayerPlan lp;
            lp.conv = "b" + std::to_string(bi) + ".conv" + std::to_string(l);
            lp.bn = "b" + std::to_string(bi) + ".bn" + std::to_string(l);
            lp.in_used = prev;
            lp.out_used =
                blk.dynamic ? scaled_channels(arch.choices[dyn].ratios[l], blk.full_channels) : blk.full_channels;
            if (lp.out_used < 1) throw InvalidArchError("ratio floors block " + std::to_string(bi) + " to zero");
            prev = lp.out_used;
            layers.push_back(std::move(lp));
        }
        plan.blocks.push_back(std::move(layers));
        if (blk.dynamic) ++dyn;
    }
    plan.head_in = prev;
    plan.embed = spec.head.embed_dim;
    plan.classes = spec.head.num_classes;
    return plan;
}

const TensorPtr& Model::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw StateError("model has no tensor named '" + name + "'");
    return it->second;
}

void Model::add(const std::string& name, TensorPtr t) {
    if (map_.count(name)) throw StateError("duplicate tensor name '" + name + "'");
    order_.push_back(name);
    map_.emplace(name, std::move(t));
}

bool Model::is_buffer(const std::string& name) {
    return name.ends_with(".rmean") || name.ends_with(".rvar");
}

std::vector<TensorPtr> Model::trainable() const {
    std::vector<TensorPtr> out;
    for (const auto& n : order_)
        if (!is_buffer(n)) out.push_back(map_.at(n));
    return out;
}

std::vector<std::string> Model::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& n : order_)
        if (!is_buffer(n)) out.push_back(n);
    return out;
}

Model Model::clone() const {
    Model m;
    m.spec = spec;
    m.arch = arch;
    m.kind = kind;
    for (const auto& n : order_) {
        const auto& src = map_.at(n);
        auto t = Tensor::from_data(src->shape, src->data, src->requires_grad);
        m.add(n, t);
    }
    return m;
}

namespace {

void add_conv_bn(Model& m, const ConvLayerPlan& lp, int out_ch, int in_ch, Rng& rng) {
    const float std_w = std::sqrt(2.0f / (static_cast<float>(in_ch) * 9.0f));
    m.add(lp.conv + ".w", Tensor::randn({out_ch, in_ch, 3, 3}, rng, std_w, true));
    m.add(lp.bn + ".gamma", Tensor::full({out_ch}, 1.0f, true));
    m.add(lp.bn + ".beta", Tensor::zeros({out_ch}, true));
    m.add(lp.bn + ".rmean", Tensor::zeros({out_ch}));
    m.add(lp.bn + ".rvar", Tensor::full({out_ch}, 1.0f));
}

void add_head(Model& m, int head_in, int embed, int classes, Rng& rng) {
    m.add("head.fc.w", Tensor::randn({embed, head_in}, rng, std::sqrt(1.0f / static_cast<float>(head_in)), true));
    m.add("head.fc.b", Tensor::zeros({embed}, true));
    m.add("head.out.w", Tensor::randn({classes, embed}, rng, std::sqrt(1.0f / static_cast<float>(embed)), true));
    m.add("head.out.b", Tensor::zeros({classes}, true));
}

}  // namespace

Model Model::init_supernet(const SupernetSpec& spec, Rng& rng) {
    spec.validate();
    Model m;
    m.spec = spec;
    m.kind = ModelKind::kSupernet;
    const auto plan = plan_subnet(spec, largest_arch(spec));
    for (const auto& layers : plan.blocks)
        for (const auto& lp : layers) add_conv_bn(m, lp, lp.out_used, lp.in_used, rng);
    add_head(m, plan.head_in, plan.embed, plan.classes, rng);
    return m;
}

Model Model::init_standalone(const SupernetSpec& spec, const ArchConfig& arch, Rng& rng, ModelKind kind) {
    const auto plan = plan_subnet(spec, arch);
    Model m;
    m.spec = spec;
    m.arch = arch;
    m.kind = kind;
    for (const auto& layers : plan.blocks)
        for (const auto& lp : layers) add_conv_bn(m, lp, lp.out_used, lp.in_used, rng);
    add_head(m, plan.head_in, plan.embed, plan.classes, rng);
    return m;
}

SubnetView make_view(const Model& model, const ArchConfig& arch) {
    if (model.arch && !(*model.arch == arch))
        throw InvalidArchError("standalone model built for arch " + model.arch->str() +
                               " cannot serve arch " + arch.str());
    return {&model, plan_subnet(model.spec, arch)};
}

TensorPtr subnet_forward(const SubnetView& view, const TensorPtr& input, BnMode mode,
                         const BnOverride* bn_override) {
    const Model& m = *view.model;
    if (input->ndim() != 4 || input->dim(1) != m.spec.input_channels || input->dim(2) != m.spec.mel_bins)
        throw DimError("subnet input must be [B," + std::to_string(m.spec.input_channels) + "," +
                       std::to_string(m.spec.mel_bins) + ",T], got " + shape_str(input->shape));
    const auto stat = [&](const std::string& name) -> const TensorPtr& {
        if (bn_override) {
            auto it = bn_override->find(name);
            if (it != bn_override->end()) return it->second;
        }
        return m.at(name);
    };

    TensorPtr h = input;
    for (size_t bi = 0; bi < view.plan.blocks.size(); ++bi) {
        for (const auto& lp : view.plan.blocks[bi]) {
            h = conv2d(h, m.at(lp.conv + ".w"), lp.out_used, lp.in_used);
            h = batch_norm2d(h, m.at(lp.bn + ".gamma"), m.at(lp.bn + ".beta"), stat(lp.bn + ".rmean"),
                             stat(lp.bn + ".rvar"), mode, lp.out_used);
            h = relu(h);
        }
        if (bi + 1 < view.plan.blocks.size()) h = avg_pool_2x2(h);
    }
    h = global_avg_pool(h);
    h = linear(h, m.at("head.fc.w"), m.at("head.fc.b"), view.plan.embed, view.plan.head_in);
    h = relu(h);
    h = linear(h, m.at("head.out.w"), m.at("head.out.b"), view.plan.classes, view.plan.embed);
    return sigmoid(h);
}

BnOverride clone_bn_stats(const Model& model) {
    BnOverride clones;
    for (const auto& name : model.names())
        if (Model::is_buffer(name)) {
            const auto& src = model.at(name);
            clones.emplace(name, Tensor::from_data(src->shape, src->data));
        }
    return clones;
}

Model extract_standalone(const Model& supernet, const ArchConfig& arch, ModelKind kind) {
    const auto plan = plan_subnet(supernet.spec, arch);
    Model m;
    m.spec = supernet.spec;
    m.arch = arch;
    m.kind = kind;
    for (const auto& layers : plan.blocks)
        for (const auto& lp : layers) {
            const auto& w = supernet.at(lp.conv + ".w");
            auto wc = Tensor::zeros({lp.out_used, lp.in_used, 3, 3}, true);
            const int cin_full = w->dim(1);
            for (int co = 0; co < lp.out_used; ++co)
                std::copy_n(w->data.begin() + static_cast<size_t>(co) * cin_full * 9,
                            static_cast<size_t>(lp.in_used) * 9,
                            wc->data.begin() + static_cast<size_t>(co) * lp.in_used * 9);
            m.add(lp.conv + ".w", wc);
            for (const char* part : {".gamma", ".beta", ".rmean", ".rvar"}) {
                const auto& src = supernet.at(lp.bn + part);
                std::vector<float> v(src->data.begin(), src->data.begin() + lp.out_used);
                m.add(lp.bn + part, Tensor::from_data({lp.out_used}, std::move(v), !Model::is_buffer(part)));
            }
        }
    const auto& fw = supernet.at("head.fc.w");
    auto fwc = Tensor::zeros({plan.embed, plan.head_in}, true);
    const int din_full = fw->dim(1);
    for (int o = 0; o < plan.embed; ++o)
        std::copy_n(fw->data.begin() + static_cast<size_t>(o) * din_full, static_cast<size_t>(plan.head_in),
                    fwc->data.begin() + static_cast<size_t>(o) * plan.head_in);
    m.add("head.fc.w", fwc);
    for (const char* name : {"head.fc.b", "head.out.w", "head.out.b"}) {
        const auto& src = supernet.at(name);
        m.add(name, Tensor::from_data(src->shape, src->data, true));
    }
    return m;
}

int64_t count_params(const SupernetSpec& spec, const ArchConfig& arch) {
    const auto plan = plan_subnet(spec, arch);
    int64_t total = 0;
    for (const auto& layers : plan.blocks)
        for (const auto& lp : layers)
            total += static_cast<int64_t>(lp.out_used) * lp.in_used * 9 + 2LL * lp.out_used;
    total += static_cast<int64_t>(plan.embed) * plan.head_in + plan.embed;
    total += static_cast<int64_t>(plan.classes) * plan.embed + plan.classes;
    return total;
}

ArchConfig sample_arch(Rng& rng, const SupernetSpec& spec) {
    ArchConfig arch;
    int dyn = 0;
    for (const auto& blk : spec.blocks) {
        if (!blk.dynamic) continue;
        BlockChoice c;
        c.depth = spec.elastic_depth_mask[dyn] ? rng.uniform_int(1, 2) : 2;
        for (int l = 0; l < c.depth; ++l)
            c.ratios.push_back(spec.width_ratios[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(spec.width_ratios.size()) - 1))]);
        arch.choices.push_back(std::move(c));
        ++dyn;
    }
    return arch;
}

ArchConfig largest_arch(const SupernetSpec& spec) {
    ArchConfig arch;
    for (const auto& blk : spec.blocks)
        if (blk.dynamic) arch.choices.push_back({2, {1.0f, 1.0f}});
    return arch;
}

ArchConfig smallest_arch(const SupernetSpec& spec) {
    const float rmin = *std::min_element(spec.width_ratios.begin(), spec.width_ratios.end());
    ArchConfig arch;
    int dyn = 0;
    for (const auto& blk : spec.blocks) {
        if (!blk.dynamic) continue;
        const int depth = spec.elastic_depth_mask[dyn] ? 1 : 2;
        arch.choices.push_back({depth, std::vector<float>(static_cast<size_t>(depth), rmin)});
        ++dyn;
    }
    return arch;
}

uint64_t space_size(const SupernetSpec& spec) {
    const uint64_t r = spec.width_ratios.size();
    uint64_t total = 1;
    int dyn = 0;
    for (const auto& blk : spec.blocks) {
        if (!blk.dynamic) continue;
        total *= spec.elastic_depth_mask[dyn] ? (r + r * r) : (r * r);
        ++dyn;
    }
    return total;
}

uint64_t weight_hash(const Model& model) {
    uint64_t h = kFnvBasis;
    for (const auto& name : model.names()) {
        h = fnv1a(name.data(), name.size(), h);
        const auto& t = model.at(name);
        h = fnv1a(t->data.data(), t->data.size() * sizeof(float), h);
    }
    return h;
}

}  // namespace ofa
