#include "afnet/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "afnet/rng.hpp"
#include "afnet/tensor_io.hpp"

namespace afnet {

namespace {

std::string layer_tag(int k) { return "layer" + std::to_string(k); }

bool contains(const std::vector<int>& v, int x) {
    return std::find(v.begin(), v.end(), x) != v.end();
}

// Channel-replicates a [1,H,W] or [N,1,H,W] mask into a [N,C,H,W] constant.
Tensor replicate_mask(const Tensor& mask, std::int64_t n, std::int64_t c, std::int64_t h,
                      std::int64_t w) {
    const auto& s = mask.shape();
    bool per_sample;
    if (s.size() == 3 && s[0] == 1 && s[1] == h && s[2] == w) per_sample = false;
    else if (s.size() == 4 && s[0] == n && s[1] == 1 && s[2] == h && s[3] == w) per_sample = true;
    else
        throw ShapeError("ma_forward: mask " + shape_str(s) + " does not match feature plane " +
                         std::to_string(h) + "x" + std::to_string(w));
    Tensor out = Tensor::zeros({n, c, h, w});
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < n; ++i) {
        const double* src = mask.data().data() + (per_sample ? i * plane : 0);
        for (std::int64_t ch = 0; ch < c; ++ch)
            std::copy(src, src + plane, out.data().data() + ((i * c + ch) * plane));
    }
    return out;
}

Tensor pool_flat(Tape* tape, const Tensor& x) {
    Tensor p = global_pool(tape, x, PoolMode::Avg);
    return reshape(tape, p, {x.dim(0), x.dim(1)});
}

std::string strategy_name(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::DataLevel: return "data";
        case FusionStrategy::DecisionLevel: return "decision";
        case FusionStrategy::FcConcat: return "fc";
        case FusionStrategy::ConvSum: return "convsum";
        case FusionStrategy::ConvAdaptive: return "adaptive";
    }
    return "?";
}

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::Texture: return "2d";
        case Modality::Depth: return "3d";
        case Modality::Both: return "both";
    }
    return "?";
}

std::string join_ints(const std::vector<int>& v, const char* prefix) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += prefix + std::to_string(v[i]);
    }
    return s;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void ModelConfig::validate() const {
    if (input_size < 16 || input_size % 8 != 0)
        throw ConfigError("input_size must be >= 16 and divisible by 8 (stem and mask scales)");
    if (widths.size() != 4) throw ConfigError("widths must list four layer widths");
    for (auto w : widths)
        if (w <= 0) throw ConfigError("widths must be positive");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        if (widths[i + 1] != 2 * widths[i])
            throw ConfigError("widths must double per layer so mask scales align");
    if (widths[3] < 4) throw ConfigError("final width must be at least 4 for the head");
    if (blocks_per_layer < 1) throw ConfigError("blocks_per_layer must be >= 1");
    for (int p : ma_positions)
        if (p != 1 && p != 2)
            throw ConfigError("ma_positions must lie in {layer1, layer2}");
    for (int p : fusion_positions)
        if (p < 1 || p > 4)
            throw ConfigError("fusion_positions must lie in {layer1..layer4}");
    if (modality == Modality::Both && conv_level_fusion() && fusion_positions.empty())
        throw ConfigError("conv-level fusion needs at least one fusion position");
    if (fusion_strategy == FusionStrategy::ConvAdaptive && !iwc_enabled)
        throw ConfigError("adaptive fusion requires iwc_enabled=true");
    if (fusion_strategy == FusionStrategy::ConvSum && iwc_enabled)
        throw ConfigError("convsum fusion is the iwc-free baseline; set iwc_enabled=false");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (convsum_scale <= 0) throw ConfigError("convsum_scale must be positive");
}

Tensor ParamSet::create(const std::string& name, const Shape& shape, Init init) {
    if (find(name)) throw ContractError("ParamSet: duplicate parameter " + name);
    const std::uint64_t s = mix_seed(seed_, hash_name(name));
    Tensor t;
    switch (init) {
        case Init::Zero: t = Tensor::zeros(shape, true); break;
        case Init::One: t = Tensor::full(shape, 1.0, true); break;
        case Init::Normal002: t = init_normal(shape, 0.0, 0.02, s, true); break;
        case Init::HeConv: {
            const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
            t = init_normal(shape, 0.0, std::sqrt(2.0 / fan_in), s, true);
            break;
        }
        case Init::HeFc: {
            const double fan_in = static_cast<double>(shape[0]);
            t = init_normal(shape, 0.0, std::sqrt(2.0 / fan_in), s, true);
            break;
        }
    }
    params_.emplace_back(name, t);
    return t;
}

Tensor ParamSet::create_buffer(const std::string& name, Tensor value) {
    if (find_buffer(name)) throw ContractError("ParamSet: duplicate buffer " + name);
    buffers_.emplace_back(name, value);
    return value;
}

Tensor* ParamSet::find(const std::string& name) {
    for (auto& [n, t] : params_)
        if (n == name) return &t;
    return nullptr;
}

Tensor* ParamSet::find_buffer(const std::string& name) {
    for (auto& [n, t] : buffers_)
        if (n == name) return &t;
    return nullptr;
}

std::vector<Tensor> ParamSet::all() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [n, t] : params_) out.push_back(t);
    return out;
}

// ---------------------------------------------------------------------------
// module construction

namespace {

BnModule make_bn(ParamSet& ps, const std::string& name, std::int64_t c) {
    BnModule bn;
    bn.scale = ps.create(name + ".scale", {c}, ParamSet::Init::One);
    bn.shift = ps.create(name + ".shift", {c}, ParamSet::Init::Zero);
    bn.state.running_mean = ps.create_buffer(name + ".running_mean", Tensor::zeros({c}));
    bn.state.running_var = ps.create_buffer(name + ".running_var", Tensor::full({c}, 1.0));
    return bn;
}

ConvBn make_conv_bn(ParamSet& ps, const std::string& name, std::int64_t cout, std::int64_t cin,
                    std::int64_t k, std::int64_t stride, std::int64_t pad) {
    ConvBn cb;
    cb.conv.w = ps.create(name + ".w", {cout, cin, k, k}, ParamSet::Init::HeConv);
    cb.conv.b = ps.create(name + ".b", {cout}, ParamSet::Init::Zero);
    cb.bn = make_bn(ps, name + ".bn", cout);
    cb.stride = stride;
    cb.pad = pad;
    return cb;
}

ConvUnit make_conv1x1(ParamSet& ps, const std::string& name, std::int64_t c) {
    ConvUnit u;
    u.w = ps.create(name + ".w", {c, c, 1, 1}, ParamSet::Init::Normal002);
    u.b = ps.create(name + ".b", {c}, ParamSet::Init::Zero);
    return u;
}

Branch build_branch(ParamSet& ps, const std::string& tag, std::int64_t in_ch,
                    const ModelConfig& cfg) {
    Branch br;
    br.stem = make_conv_bn(ps, tag + ".stem.conv", cfg.widths[0], in_ch, 7, 2, 3);
    std::int64_t prev = cfg.widths[0];
    for (int k = 1; k <= 4; ++k) {
        const std::int64_t w = cfg.widths[static_cast<std::size_t>(k - 1)];
        const std::int64_t stride = k == 1 ? 1 : 2;
        std::vector<ResidualBlock> blocks;
        for (std::int64_t j = 0; j < cfg.blocks_per_layer; ++j) {
            const std::string base = tag + "." + layer_tag(k) + ".block" + std::to_string(j);
            ResidualBlock blk;
            const std::int64_t cin = j == 0 ? prev : w;
            const std::int64_t s = j == 0 ? stride : 1;
            blk.c1 = make_conv_bn(ps, base + ".conv1", w, cin, 3, s, 1);
            blk.c2 = make_conv_bn(ps, base + ".conv2", w, w, 3, 1, 1);
            if (cin != w || s != 1)
                blk.down = make_conv_bn(ps, base + ".down", w, cin, 1, s, 0);
            blocks.push_back(std::move(blk));
        }
        br.layers.push_back(std::move(blocks));
        prev = w;
    }
    return br;
}

MaModule build_ma(ParamSet& ps, const std::string& key, std::int64_t c) {
    MaModule ma;
    ma.g1 = make_conv1x1(ps, "ma." + key + ".gamma1", c);
    ma.g2 = make_conv1x1(ps, "ma." + key + ".gamma2", c);
    ma.b1 = make_conv1x1(ps, "ma." + key + ".beta1", c);
    ma.b2 = make_conv1x1(ps, "ma." + key + ".beta2", c);
    ma.channels = c;
    return ma;
}

IwcModule build_iwc(ParamSet& ps, const std::string& key, std::int64_t c) {
    IwcModule iwc;
    iwc.conv = make_conv1x1(ps, "iwc." + key + ".conv", c);
    iwc.channels = c;
    return iwc;
}

HeadModule build_head(ParamSet& ps, const std::string& tag, std::int64_t in_dim,
                      const ModelConfig& cfg) {
    const std::int64_t h1 = cfg.widths[3] / 2;
    const std::int64_t h2 = cfg.widths[3] / 4;
    HeadModule h;
    h.w1 = ps.create("head." + tag + ".fc1.w", {in_dim, h1}, ParamSet::Init::HeFc);
    h.b1 = ps.create("head." + tag + ".fc1.b", {h1}, ParamSet::Init::Zero);
    h.w2 = ps.create("head." + tag + ".fc2.w", {h1, h2}, ParamSet::Init::HeFc);
    h.b2 = ps.create("head." + tag + ".fc2.b", {h2}, ParamSet::Init::Zero);
    h.w3 = ps.create("head." + tag + ".fc3.w", {h2, cfg.num_classes}, ParamSet::Init::HeFc);
    h.b3 = ps.create("head." + tag + ".fc3.b", {cfg.num_classes}, ParamSet::Init::Zero);
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// module forward passes

Tensor stem_forward(Tape* tape, ConvBn& stem, const Tensor& x, bool training) {
    if (x.rank() != 4) throw ShapeError("stem_forward: expected [N,C,S,S]");
    if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
        throw ConfigError("stem_forward: spatial size must be divisible by 4");
    Tensor y = conv2d(tape, x, stem.conv.w, stem.conv.b, 2, 3);
    y = batchnorm2d(tape, y, stem.bn.scale, stem.bn.shift, stem.bn.state, training);
    y = relu(tape, y);
    return pool2d(tape, y, PoolMode::Max, 3, 3, 2, 1);
}

Tensor residual_block_forward(Tape* tape, ResidualBlock& block, const Tensor& x, bool training) {
    Tensor y = conv2d(tape, x, block.c1.conv.w, block.c1.conv.b, block.c1.stride, block.c1.pad);
    y = batchnorm2d(tape, y, block.c1.bn.scale, block.c1.bn.shift, block.c1.bn.state, training);
    y = relu(tape, y);
    y = conv2d(tape, y, block.c2.conv.w, block.c2.conv.b, 1, 1);
    y = batchnorm2d(tape, y, block.c2.bn.scale, block.c2.bn.shift, block.c2.bn.state, training);
    Tensor shortcut = x;
    if (block.down) {
        shortcut = conv2d(tape, x, block.down->conv.w, block.down->conv.b, block.down->stride,
                          block.down->pad);
        shortcut = batchnorm2d(tape, shortcut, block.down->bn.scale, block.down->bn.shift,
                               block.down->bn.state, training);
    } else if (y.shape() != x.shape()) {
        throw ConfigError("residual_block_forward: shape change without a projection shortcut");
    }
    return relu(tape, add(tape, y, shortcut));
}

Tensor ma_forward(Tape* tape, const MaModule& ma, const Tensor& x, const Tensor& mask) {
    if (x.rank() != 4) throw ShapeError("ma_forward: expected [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c != ma.channels)
        throw ShapeError("ma_forward: module built for " + std::to_string(ma.channels) +
                         " channels, feature map has " + std::to_string(c));
    Tensor repl = replicate_mask(mask, n, c, h, w);
    Tensor gamma = conv2d(tape, repl, ma.g1.w, ma.g1.b, 1, 0);
    gamma = relu(tape, gamma);
    gamma = conv2d(tape, gamma, ma.g2.w, ma.g2.b, 1, 0);
    Tensor beta = conv2d(tape, repl, ma.b1.w, ma.b1.b, 1, 0);
    beta = relu(tape, beta);
    beta = conv2d(tape, beta, ma.b2.w, ma.b2.b, 1, 0);
    return add(tape, mul(tape, gamma, x), beta);
}

Tensor iwc_weights(Tape* tape, const IwcModule& iwc, const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("iwc_weights: expected [N,C,H,W]");
    if (x.dim(1) != iwc.channels)
        throw ShapeError("iwc_weights: module built for " + std::to_string(iwc.channels) +
                         " channels, feature map has " + std::to_string(x.dim(1)));
    Tensor avg = global_pool(tape, x, PoolMode::Avg);
    Tensor mx = global_pool(tape, x, PoolMode::Max);
    Tensor s = add(tape, conv2d(tape, avg, iwc.conv.w, iwc.conv.b, 1, 0),
                   conv2d(tape, mx, iwc.conv.w, iwc.conv.b, 1, 0));
    return sigmoid(tape, s);
}

Tensor adaptive_fuse(Tape* tape, const Tensor& x_t, const Tensor& x_d, const Tensor& t_iw,
                     const Tensor& d_iw) {
    if (x_t.shape() != x_d.shape())
        throw ShapeError("adaptive_fuse: branch feature maps differ " + shape_str(x_t.shape()) +
                         " vs " + shape_str(x_d.shape()));
    Shape want{x_t.dim(0), x_t.dim(1), 1, 1};
    if (t_iw.shape() != want || d_iw.shape() != want)
        throw ShapeError("adaptive_fuse: importance weights must be [N,C,1,1]");
    return add(tape, mul(tape, x_t, t_iw), mul(tape, x_d, d_iw));
}

// ---------------------------------------------------------------------------
// AfnetModel

AfnetModel::AfnetModel(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.seed) {
    cfg_.validate();
    std::sort(cfg_.ma_positions.begin(), cfg_.ma_positions.end());
    std::sort(cfg_.fusion_positions.begin(), cfg_.fusion_positions.end());

    std::vector<std::string> branch_tags;
    if (cfg_.modality == Modality::Texture) branch_tags = {"tex"};
    else if (cfg_.modality == Modality::Depth) branch_tags = {"dep"};
    else if (cfg_.fusion_strategy == FusionStrategy::DataLevel) branch_tags = {"joint"};
    else branch_tags = {"tex", "dep"};

    for (const auto& tag : branch_tags) {
        const std::int64_t in_ch = tag == "joint" ? 6 : 3;
        Branch br = build_branch(params_, tag, in_ch, cfg_);
        if (tag == "tex") tex_ = std::move(br);
        else if (tag == "dep") dep_ = std::move(br);
        else joint_ = std::move(br);
    }

    if (cfg_.ma_enabled)
        for (int k : cfg_.ma_positions)
            for (const auto& tag : branch_tags) {
                const std::string key = layer_tag(k) + "." + tag;
                ma_.emplace_back(key,
                                 build_ma(params_, key, cfg_.widths[static_cast<std::size_t>(k - 1)]));
            }

    if (cfg_.modality == Modality::Both && cfg_.fusion_strategy == FusionStrategy::ConvAdaptive)
        for (int k : cfg_.fusion_positions)
            for (const auto& tag : branch_tags) {
                const std::string key = layer_tag(k) + "." + tag;
                iwc_.emplace_back(
                    key, build_iwc(params_, key, cfg_.widths[static_cast<std::size_t>(k - 1)]));
            }

    const std::int64_t w = cfg_.widths[3];
    if (cfg_.modality == Modality::Texture)
        heads_.emplace_back("tex", build_head(params_, "tex", w, cfg_));
    else if (cfg_.modality == Modality::Depth)
        heads_.emplace_back("dep", build_head(params_, "dep", w, cfg_));
    else
        switch (cfg_.fusion_strategy) {
            case FusionStrategy::DataLevel:
                heads_.emplace_back("joint", build_head(params_, "joint", w, cfg_));
                break;
            case FusionStrategy::DecisionLevel:
                heads_.emplace_back("tex", build_head(params_, "tex", w, cfg_));
                heads_.emplace_back("dep", build_head(params_, "dep", w, cfg_));
                break;
            case FusionStrategy::FcConcat:
                heads_.emplace_back("cat", build_head(params_, "cat", 2 * w, cfg_));
                break;
            default:
                heads_.emplace_back("tex", build_head(params_, "tex", w, cfg_));
        }
}

MaModule* AfnetModel::find_ma(const std::string& key) {
    for (auto& [k, m] : ma_)
        if (k == key) return &m;
    return nullptr;
}
IwcModule* AfnetModel::find_iwc(const std::string& key) {
    for (auto& [k, m] : iwc_)
        if (k == key) return &m;
    return nullptr;
}
HeadModule* AfnetModel::find_head(const std::string& key) {
    for (auto& [k, m] : heads_)
        if (k == key) return &m;
    return nullptr;
}

const Tensor& AfnetModel::mask_for_layer(const Batch& batch, int layer_idx) const {
    const Tensor& m = layer_idx == 1 ? batch.mask1 : batch.mask2;
    if (!m.defined())
        throw InputError("forward: mask attention at " + layer_tag(layer_idx) + " needs mask" +
                         std::to_string(layer_idx) + " in the batch");
    return m;
}

Tensor AfnetModel::branch_layer_forward(Tape* tape, Branch& branch, int layer_idx, Tensor x,
                                        const Batch& batch, const char* branch_tag, bool training,
                                        ActivationMap* activations) {
    auto& blocks = branch.layers[static_cast<std::size_t>(layer_idx - 1)];
    // mask attention sits after the layer's first block, at the layer's
    // operating resolution (the first block of layers 2..4 downsamples)
    x = residual_block_forward(tape, blocks[0], x, training);
    if (cfg_.ma_enabled && contains(cfg_.ma_positions, layer_idx)) {
        MaModule* ma = find_ma(layer_tag(layer_idx) + "." + branch_tag);
        if (ma) x = ma_forward(tape, *ma, x, mask_for_layer(batch, layer_idx));
    }
    for (std::size_t j = 1; j < blocks.size(); ++j)
        x = residual_block_forward(tape, blocks[j], x, training);
    if (activations)
        activations->emplace_back(std::string(branch_tag) + "." + layer_tag(layer_idx), x);
    return x;
}

Tensor AfnetModel::head_forward(Tape* tape, HeadModule& head, const Tensor& v) {
    Tensor y = linear(tape, v, head.w1, head.b1);
    y = relu(tape, y);
    y = linear(tape, y, head.w2, head.b2);
    y = relu(tape, y);
    return linear(tape, y, head.w3, head.b3);
}

Tensor AfnetModel::pooled_vector(Tape* tape, const Tensor& feature_map) {
    return pool_flat(tape, feature_map);
}

Tensor AfnetModel::forward(Tape* tape, const Batch& batch, bool training,
                           ActivationMap* activations) {
    const bool needs_tex = cfg_.modality != Modality::Depth;
    const bool needs_dep = cfg_.modality != Modality::Texture;
    if (needs_tex && !batch.texture.defined())
        throw InputError("forward: configuration reads the texture modality but none was given");
    if (needs_dep && !batch.depth.defined())
        throw InputError("forward: configuration reads the depth modality but none was given");

    auto check_image = [&](const Tensor& t, const char* what) {
        if (t.rank() != 4 || t.dim(1) != 3 || t.dim(2) != cfg_.input_size ||
            t.dim(3) != cfg_.input_size)
            throw ShapeError(std::string("forward: ") + what + " must be [N,3," +
                             std::to_string(cfg_.input_size) + "," +
                             std::to_string(cfg_.input_size) + "], got " + shape_str(t.shape()));
    };
    if (needs_tex) check_image(batch.texture, "texture");
    if (needs_dep) check_image(batch.depth, "depth");
    if (needs_tex && needs_dep && batch.texture.dim(0) != batch.depth.dim(0))
        throw ShapeError("forward: texture and depth batch sizes differ");

    Tensor logits;
    if (cfg_.modality == Modality::Texture || cfg_.modality == Modality::Depth) {
        const bool is_tex = cfg_.modality == Modality::Texture;
        Branch& br = is_tex ? *tex_ : *dep_;
        const char* tag = is_tex ? "tex" : "dep";
        Tensor x = stem_forward(tape, br.stem, is_tex ? batch.texture : batch.depth, training);
        if (activations) activations->emplace_back(std::string(tag) + ".stem", x);
        for (int k = 1; k <= 4; ++k)
            x = branch_layer_forward(tape, br, k, x, batch, tag, training, activations);
        logits = head_forward(tape, *find_head(tag), pooled_vector(tape, x));
    } else if (cfg_.fusion_strategy == FusionStrategy::DataLevel) {
        const std::int64_t n = batch.texture.dim(0), s = cfg_.input_size;
        Tensor x6 = Tensor::zeros({n, 6, s, s});
        const std::int64_t half = 3 * s * s;
        for (std::int64_t i = 0; i < n; ++i) {
            std::copy(batch.texture.data().begin() + i * half,
                      batch.texture.data().begin() + (i + 1) * half,
                      x6.data().begin() + i * 2 * half);
            std::copy(batch.depth.data().begin() + i * half,
                      batch.depth.data().begin() + (i + 1) * half,
                      x6.data().begin() + i * 2 * half + half);
        }
        Tensor x = stem_forward(tape, joint_->stem, x6, training);
        if (activations) activations->emplace_back("joint.stem", x);
        for (int k = 1; k <= 4; ++k)
            x = branch_layer_forward(tape, *joint_, k, x, batch, "joint", training, activations);
        logits = head_forward(tape, *find_head("joint"), pooled_vector(tape, x));
    } else {
        Tensor x_t = stem_forward(tape, tex_->stem, batch.texture, training);
        Tensor x_d = stem_forward(tape, dep_->stem, batch.depth, training);
        if (activations) {
            activations->emplace_back("tex.stem", x_t);
            activations->emplace_back("dep.stem", x_d);
        }
        const bool conv_fuse = cfg_.conv_level_fusion();
        for (int k = 1; k <= 4; ++k) {
            x_t = branch_layer_forward(tape, *tex_, k, x_t, batch, "tex", training, activations);
            x_d = branch_layer_forward(tape, *dep_, k, x_d, batch, "dep", training, activations);
            if (conv_fuse && contains(cfg_.fusion_positions, k)) {
                Tensor fusedmap;
                if (cfg_.fusion_strategy == FusionStrategy::ConvAdaptive) {
                    Tensor t_iw = iwc_weights(tape, *find_iwc(layer_tag(k) + ".tex"), x_t);
                    Tensor d_iw = iwc_weights(tape, *find_iwc(layer_tag(k) + ".dep"), x_d);
                    fusedmap = adaptive_fuse(tape, x_t, x_d, t_iw, d_iw);
                } else {
                    fusedmap = add(tape, scale(tape, x_t, cfg_.convsum_scale),
                                   scale(tape, x_d, cfg_.convsum_scale));
                }
                if (activations) activations->emplace_back("fused." + layer_tag(k), fusedmap);
                // the fused map feeds the texture pathway; the depth branch
                // continues on its own features
                x_t = fusedmap;
            }
        }
        if (cfg_.fusion_strategy == FusionStrategy::DecisionLevel) {
            Tensor lt = head_forward(tape, *find_head("tex"), pooled_vector(tape, x_t));
            Tensor ld = head_forward(tape, *find_head("dep"), pooled_vector(tape, x_d));
            Tensor p = add(tape, scale(tape, softmax_rows(tape, lt), 0.5),
                           scale(tape, softmax_rows(tape, ld), 0.5));
            logits = log_elem(tape, p);
        } else if (cfg_.fusion_strategy == FusionStrategy::FcConcat) {
            Tensor v = concat_cols(tape, pooled_vector(tape, x_t), pooled_vector(tape, x_d));
            logits = head_forward(tape, *find_head("cat"), v);
        } else {
            logits = head_forward(tape, *find_head("tex"), pooled_vector(tape, x_t));
        }
    }
    if (activations) activations->emplace_back("logits", logits);
    return logits;
}

std::vector<std::string> AfnetModel::activation_names() const {
    std::vector<std::string> names;
    auto add_branch = [&](const char* tag) {
        names.push_back(std::string(tag) + ".stem");
        for (int k = 1; k <= 4; ++k) names.push_back(std::string(tag) + "." + layer_tag(k));
    };
    if (cfg_.modality == Modality::Texture) add_branch("tex");
    else if (cfg_.modality == Modality::Depth) add_branch("dep");
    else if (cfg_.fusion_strategy == FusionStrategy::DataLevel) add_branch("joint");
    else {
        add_branch("tex");
        add_branch("dep");
        if (cfg_.conv_level_fusion())
            for (int k : cfg_.fusion_positions) names.push_back("fused." + layer_tag(k));
    }
    names.emplace_back("logits");
    return names;
}

namespace {

// Bilinear with corners pinned to corners; degenerate source axes broadcast.
Tensor upsample_bilinear(const std::vector<double>& src, std::int64_t h, std::int64_t w,
                         std::int64_t out) {
    Tensor res = Tensor::zeros({out, out});
    for (std::int64_t i = 0; i < out; ++i) {
        const double fy = (h == 1 || out == 1)
                              ? 0.0
                              : static_cast<double>(i) * static_cast<double>(h - 1) /
                                    static_cast<double>(out - 1);
        const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), h - 1);
        const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::int64_t j = 0; j < out; ++j) {
            const double fx = (w == 1 || out == 1)
                                  ? 0.0
                                  : static_cast<double>(j) * static_cast<double>(w - 1) /
                                        static_cast<double>(out - 1);
            const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), w - 1);
            const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
            const double tx = fx - static_cast<double>(x0);
            const double v00 = src[static_cast<std::size_t>(y0 * w + x0)];
            const double v01 = src[static_cast<std::size_t>(y0 * w + x1)];
            const double v10 = src[static_cast<std::size_t>(y1 * w + x0)];
            const double v11 = src[static_cast<std::size_t>(y1 * w + x1)];
            res.data()[static_cast<std::size_t>(i * out + j)] =
                (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        }
    }
    return res;
}

void minmax_normalize(Tensor& t) {
    double lo = t.data()[0], hi = t.data()[0];
    for (double v : t.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) {
        std::fill(t.data().begin(), t.data().end(), 0.0);
        return;
    }
    for (auto& v : t.data()) v = (v - lo) / (hi - lo);
}

}  // namespace

Tensor AfnetModel::cam_from_activation(const Tensor& activation,
                                       const std::vector<double>& score_grad,
                                       std::int64_t out_size) {
    if (activation.rank() != 4 || activation.dim(0) != 1)
        throw ShapeError("cam_from_activation: expected [1,C,h,w]");
    if (score_grad.size() != activation.data().size())
        throw ShapeError("cam_from_activation: gradient length mismatch");
    const std::int64_t c = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
    const std::int64_t plane = h * w;
    std::vector<double> map(static_cast<std::size_t>(plane), 0.0);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i)
            acc += score_grad[static_cast<std::size_t>(ch * plane + i)];
        const double wv = acc / static_cast<double>(plane);
        for (std::int64_t i = 0; i < plane; ++i)
            map[static_cast<std::size_t>(i)] +=
                wv * activation.data()[static_cast<std::size_t>(ch * plane + i)];
    }
    for (auto& v : map) v = v > 0.0 ? v : 0.0;
    Tensor up = upsample_bilinear(map, h, w, out_size);
    minmax_normalize(up);
    return up;
}

Tensor AfnetModel::grad_cam(const Batch& one, int target_class, const std::string& layer_name) {
    if (target_class < 0 || target_class >= cfg_.num_classes)
        throw ContractError("grad_cam: target class out of range");
    Tape tape;
    ActivationMap acts;
    Tensor logits = forward(&tape, one, /*training=*/false, &acts);
    if (logits.dim(0) != 1) throw ContractError("grad_cam: expects a single-sample batch");
    const Tensor* act = nullptr;
    for (auto& [name, t] : acts)
        if (name == layer_name) act = &t;
    if (!act) throw InputError("grad_cam: unknown layer name '" + layer_name + "'");
    if (act->rank() != 4)
        throw InputError("grad_cam: layer '" + layer_name + "' is not a spatial feature map");

    backward(tape, select_scalar(&tape, logits, target_class));

    std::vector<double> g(act->data().size(), 0.0);
    if (act->has_grad()) g = act->grad();
    return cam_from_activation(*act, g, cfg_.input_size);
}

// ---------------------------------------------------------------------------
// parameter accounting (closed-form, independent of the registry walk)

namespace {

std::int64_t conv_count(std::int64_t cout, std::int64_t cin, std::int64_t k) {
    return cout * cin * k * k + cout;
}
std::int64_t bn_count(std::int64_t c) { return 2 * c; }

}  // namespace

ParamReport count_params(const ModelConfig& cfg) {
    cfg.validate();
    ParamReport rep;
    int branches;
    std::int64_t stem_in;
    if (cfg.modality != Modality::Both) {
        branches = 1;
        stem_in = 3;
    } else if (cfg.fusion_strategy == FusionStrategy::DataLevel) {
        branches = 1;
        stem_in = 6;
    } else {
        branches = 2;
        stem_in = 3;
    }

    auto push = [&](const std::string& name, std::int64_t n) {
        rep.components.push_back({name, n});
        rep.total += n;
    };

    push("stem", branches * (conv_count(cfg.widths[0], stem_in, 7) + bn_count(cfg.widths[0])));

    std::int64_t prev = cfg.widths[0];
    for (int k = 1; k <= 4; ++k) {
        const std::int64_t w = cfg.widths[static_cast<std::size_t>(k - 1)];
        std::int64_t n = 0;
        for (std::int64_t j = 0; j < cfg.blocks_per_layer; ++j) {
            const std::int64_t cin = j == 0 ? prev : w;
            const bool down = j == 0 && (cin != w || k != 1);
            n += conv_count(w, cin, 3) + bn_count(w);
            n += conv_count(w, w, 3) + bn_count(w);
            if (down) n += conv_count(w, cin, 1) + bn_count(w);
        }
        push(layer_tag(k), branches * n);
        prev = w;
    }

    std::int64_t ma_n = 0;
    if (cfg.ma_enabled)
        for (int k : cfg.ma_positions) {
            const std::int64_t c = cfg.widths[static_cast<std::size_t>(k - 1)];
            ma_n += branches * 4 * conv_count(c, c, 1);
        }
    push("ma", ma_n);

    std::int64_t iwc_n = 0;
    if (cfg.modality == Modality::Both && cfg.fusion_strategy == FusionStrategy::ConvAdaptive)
        for (int k : cfg.fusion_positions) {
            const std::int64_t c = cfg.widths[static_cast<std::size_t>(k - 1)];
            iwc_n += 2 * conv_count(c, c, 1);
        }
    push("iwc", iwc_n);

    const std::int64_t w4 = cfg.widths[3];
    auto head_count = [&](std::int64_t in_dim) {
        const std::int64_t h1 = w4 / 2, h2 = w4 / 4;
        return in_dim * h1 + h1 + h1 * h2 + h2 + h2 * cfg.num_classes + cfg.num_classes;
    };
    std::int64_t head_n;
    if (cfg.modality != Modality::Both) head_n = head_count(w4);
    else
        switch (cfg.fusion_strategy) {
            case FusionStrategy::DecisionLevel: head_n = 2 * head_count(w4); break;
            case FusionStrategy::FcConcat: head_n = head_count(2 * w4); break;
            default: head_n = head_count(w4);
        }
    push("head", head_n);
    return rep;
}

// ---------------------------------------------------------------------------
// config echo and checkpointing

std::vector<std::pair<std::string, std::string>> config_echo(const ModelConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("input_size", std::to_string(cfg.input_size));
    std::string widths;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i)
        widths += (i ? "," : "") + std::to_string(cfg.widths[i]);
    kv.emplace_back("widths", widths);
    kv.emplace_back("blocks_per_layer", std::to_string(cfg.blocks_per_layer));
    kv.emplace_back("modality", modality_name(cfg.modality));
    kv.emplace_back("ma_enabled", cfg.ma_enabled ? "true" : "false");
    kv.emplace_back("ma_positions", join_ints(cfg.ma_positions, "layer"));
    kv.emplace_back("iwc_enabled", cfg.iwc_enabled ? "true" : "false");
    kv.emplace_back("fusion_strategy", strategy_name(cfg.fusion_strategy));
    kv.emplace_back("fusion_positions", join_ints(cfg.fusion_positions, "layer"));
    kv.emplace_back("num_classes", std::to_string(cfg.num_classes));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    kv.emplace_back("convsum_scale", fmt_double(cfg.convsum_scale));
    return kv;
}

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

int parse_layer_token(const std::string& tok, const std::string& key) {
    std::string t = tok;
    if (t.rfind("layer", 0) == 0) t = t.substr(5);
    try {
        return std::stoi(t);
    } catch (...) {
        throw ConfigError(key + ": bad layer token '" + tok + "'");
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

}  // namespace

bool apply_model_config_kv(ModelConfig& cfg, const std::string& key, const std::string& value) {
    auto to_i64 = [&](const std::string& v) {
        try {
            return static_cast<std::int64_t>(std::stoll(v));
        } catch (...) {
            throw ConfigError(key + ": expected an integer, got '" + v + "'");
        }
    };
    if (key == "input_size") cfg.input_size = to_i64(value);
    else if (key == "widths") {
        cfg.widths.clear();
        for (const auto& t : split_csv(value)) cfg.widths.push_back(to_i64(t));
    } else if (key == "blocks_per_layer") cfg.blocks_per_layer = to_i64(value);
    else if (key == "modality") {
        if (value == "2d" || value == "texture") cfg.modality = Modality::Texture;
        else if (value == "3d" || value == "depth") cfg.modality = Modality::Depth;
        else if (value == "both" || value == "2d+3d") cfg.modality = Modality::Both;
        else throw ConfigError("modality: expected 2d/3d/both, got '" + value + "'");
    } else if (key == "ma_enabled") cfg.ma_enabled = parse_bool(value, key);
    else if (key == "ma_positions") {
        cfg.ma_positions.clear();
        for (const auto& t : split_csv(value)) cfg.ma_positions.push_back(parse_layer_token(t, key));
    } else if (key == "iwc_enabled") cfg.iwc_enabled = parse_bool(value, key);
    else if (key == "fusion_strategy") {
        if (value == "data" || value == "s1") cfg.fusion_strategy = FusionStrategy::DataLevel;
        else if (value == "decision" || value == "s2")
            cfg.fusion_strategy = FusionStrategy::DecisionLevel;
        else if (value == "fc" || value == "s3") cfg.fusion_strategy = FusionStrategy::FcConcat;
        else if (value == "convsum" || value == "s4") cfg.fusion_strategy = FusionStrategy::ConvSum;
        else if (value == "adaptive" || value == "ours")
            cfg.fusion_strategy = FusionStrategy::ConvAdaptive;
        else throw ConfigError("fusion_strategy: unknown value '" + value + "'");
    } else if (key == "fusion_positions") {
        cfg.fusion_positions.clear();
        for (const auto& t : split_csv(value))
            cfg.fusion_positions.push_back(parse_layer_token(t, key));
    } else if (key == "num_classes") cfg.num_classes = to_i64(value);
    else if (key == "seed") {
        try {
            cfg.seed = static_cast<std::uint64_t>(std::stoull(value));
        } catch (...) {
            throw ConfigError("seed: bad integer '" + value + "'");
        }
    } else if (key == "convsum_scale") {
        try {
            cfg.convsum_scale = std::stod(value);
        } catch (...) {
            throw ConfigError("convsum_scale: bad number '" + value + "'");
        }
    } else return false;
    return true;
}

namespace {

std::string tensor_filename(const std::string& name) {
    std::string f = name;
    for (auto& c : f)
        if (c == '.') c = '_';
    return f + ".aftn";
}

}  // namespace

void save_checkpoint(const std::string& dir, AfnetModel& model) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "afnet-checkpoint";
    manifest["version"] = 1;
    nlohmann::json cfgj = nlohmann::json::object();
    for (const auto& [k, v] : config_echo(model.config())) cfgj[k] = v;
    manifest["config"] = cfgj;

    auto dump_group = [&](const std::vector<std::pair<std::string, Tensor>>& entries,
                          const char* group) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& [name, t] : entries) {
            const std::string file = tensor_filename(name);
            write_tensor((fs::path(dir) / file).string(), t);
            nlohmann::json e;
            e["name"] = name;
            e["file"] = file;
            e["shape"] = t.shape();
            arr.push_back(e);
        }
        manifest[group] = arr;
    };
    dump_group(model.params().entries(), "params");
    dump_group(model.params().buffer_entries(), "buffers");

    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os) throw InputError("save_checkpoint: cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

AfnetModel load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw InputError("load_checkpoint: no manifest.json in " + dir);
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const std::exception& e) {
        throw InputError(std::string("load_checkpoint: bad manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "afnet-checkpoint")
        throw InputError("load_checkpoint: not an afnet checkpoint");

    ModelConfig cfg;
    for (auto& [k, v] : manifest.at("config").items())
        apply_model_config_kv(cfg, k, v.get<std::string>());
    AfnetModel model(cfg);

    auto load_group = [&](const char* group, bool buffers) {
        for (const auto& e : manifest.at(group)) {
            const std::string name = e.at("name").get<std::string>();
            Tensor* dst = buffers ? model.params().find_buffer(name) : model.params().find(name);
            if (!dst)
                throw InputError("load_checkpoint: manifest names unknown tensor '" + name + "'");
            Tensor t = read_tensor((fs::path(dir) / e.at("file").get<std::string>()).string());
            if (t.shape() != dst->shape())
                throw InputError("load_checkpoint: shape mismatch for '" + name + "'");
            dst->data() = t.data();
        }
    };
    load_group("params", false);
    load_group("buffers", true);
    return model;
}

}  // namespace afnet
