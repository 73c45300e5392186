#pragma once

#include <optional>
#include <string>

#include "afnet/adam.hpp"
#include "afnet/ops.hpp"

namespace afnet {

// S1..S4 baselines plus the adaptive conv-level strategy. ConvSum and
// ConvAdaptive fuse feature maps at the configured layer positions; the
// other three fuse at the input, the classifier or the decision.
enum class FusionStrategy { DataLevel, DecisionLevel, FcConcat, ConvSum, ConvAdaptive };

enum class Modality { Texture, Depth, Both };

struct ModelConfig {
    std::int64_t input_size = 224;
    std::vector<std::int64_t> widths = {64, 128, 256, 512};  // layer1..layer4; stem = widths[0]
    std::int64_t blocks_per_layer = 2;
    Modality modality = Modality::Both;
    bool ma_enabled = false;
    std::vector<int> ma_positions = {1, 2};       // subset of {1,2}
    bool iwc_enabled = true;
    FusionStrategy fusion_strategy = FusionStrategy::ConvAdaptive;
    std::vector<int> fusion_positions = {3, 4};   // subset of {1,2,3,4}
    std::int64_t num_classes = 6;
    std::uint64_t seed = 0;
    // ConvSum fuses with constant weights: M = s*x_t + s*x_d. The plain
    // baseline is s = 1; s = 0.5 is the fixed point ConvAdaptive reaches
    // when its importance convolutions are zero.
    double convsum_scale = 1.0;

    bool conv_level_fusion() const {
        return fusion_strategy == FusionStrategy::ConvSum ||
               fusion_strategy == FusionStrategy::ConvAdaptive;
    }
    void validate() const;  // throws ConfigError
};

// One forward batch. Masks are per-sample, stacked [N,1,h,w]; texture/depth
// stay undefined when the configured modality does not read them.
struct Batch {
    Tensor texture;
    Tensor depth;
    Tensor mask1;
    Tensor mask2;
    std::vector<int> labels;
};

// Named parameter registry. Every tensor is initialized from a seed derived
// from (run seed, name), so the presence of one module never shifts the
// initialization of another.
class ParamSet {
public:
    enum class Init { HeConv, HeFc, Normal002, Zero, One };

    explicit ParamSet(std::uint64_t seed) : seed_(seed) {}

    Tensor create(const std::string& name, const Shape& shape, Init init);
    Tensor create_buffer(const std::string& name, Tensor value);

    Tensor* find(const std::string& name);
    Tensor* find_buffer(const std::string& name);
    std::vector<Tensor> all() const;

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& buffer_entries() const { return buffers_; }

private:
    std::uint64_t seed_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
};

struct ConvUnit {
    Tensor w, b;
};
struct BnModule {
    Tensor scale, shift;
    BatchNormState state;
};
struct ConvBn {
    ConvUnit conv;
    BnModule bn;
    std::int64_t stride = 1;
    std::int64_t pad = 0;
};
struct ResidualBlock {
    ConvBn c1, c2;
    std::optional<ConvBn> down;  // 1x1 projection shortcut when shape changes
};
// Two independent convolution groups, four 1x1 convolutions total; each
// group maps the channel-replicated mask to a full-shape modulation map.
struct MaModule {
    ConvUnit g1, g2;  // gamma group
    ConvUnit b1, b2;  // beta group
    std::int64_t channels = 0;
};
// One shared 1x1 convolution applied to the avg- and max-pooled vectors of
// its own branch.
struct IwcModule {
    ConvUnit conv;
    std::int64_t channels = 0;
};
struct HeadModule {
    Tensor w1, b1, w2, b2, w3, b3;
};
struct Branch {
    ConvBn stem;
    std::vector<std::vector<ResidualBlock>> layers;  // [4][blocks_per_layer]
};

// conv7x7/2 -> batchnorm -> relu -> maxpool3x3/2; spatial size shrinks 4x.
Tensor stem_forward(Tape* tape, ConvBn& stem, const Tensor& x, bool training);

// conv3x3-bn-relu-conv3x3-bn plus (projected) shortcut, then relu.
Tensor residual_block_forward(Tape* tape, ResidualBlock& block, const Tensor& x, bool training);

// Modulates x with gamma/beta maps learned from the salient-region mask:
// out = gamma (.) x + beta. mask is [1,H,W] or [N,1,H,W] at x's resolution.
Tensor ma_forward(Tape* tape, const MaModule& ma, const Tensor& x, const Tensor& mask);

// Per-channel importance weights sigmoid(conv(avgpool x) + conv(maxpool x)),
// strictly inside (0,1), shape [N,C,1,1].
Tensor iwc_weights(Tape* tape, const IwcModule& iwc, const Tensor& x);

// M = t_iw (.) x_t + d_iw (.) x_d with per-channel broadcast.
Tensor adaptive_fuse(Tape* tape, const Tensor& x_t, const Tensor& x_d, const Tensor& t_iw,
                     const Tensor& d_iw);

// Forward activations retained by name for inspection and Grad-CAM.
using ActivationMap = std::vector<std::pair<std::string, Tensor>>;

class AfnetModel {
public:
    explicit AfnetModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }

    // Returns logits [N, num_classes]. With DecisionLevel fusion the rows
    // are log of the averaged branch probabilities, so softmax(logits)
    // recovers the ensemble distribution.
    Tensor forward(Tape* tape, const Batch& batch, bool training,
                   ActivationMap* activations = nullptr);

    std::vector<Tensor> parameters() { return params_.all(); }

    // Gradient-weighted class activation map for a single sample, bilinearly
    // upsampled to input size and min-max normalized into [0,1].
    Tensor grad_cam(const Batch& one, int target_class, const std::string& layer_name);

    // The map math behind grad_cam: channel weights are spatial means of the
    // score gradient, the weighted activation sum is rectified, upsampled to
    // out_size and min-max normalized. activation is [1,C,h,w]; score_grad
    // has one entry per activation element.
    static Tensor cam_from_activation(const Tensor& activation,
                                      const std::vector<double>& score_grad,
                                      std::int64_t out_size);

    std::vector<std::string> activation_names() const;

private:
    Tensor branch_layer_forward(Tape* tape, Branch& branch, int layer_idx, Tensor x,
                                const Batch& batch, const char* branch_tag, bool training,
                                ActivationMap* activations);
    Tensor head_forward(Tape* tape, HeadModule& head, const Tensor& pooled_flat);
    Tensor pooled_vector(Tape* tape, const Tensor& feature_map);
    const Tensor& mask_for_layer(const Batch& batch, int layer_idx) const;

    ModelConfig cfg_;
    ParamSet params_;
    std::optional<Branch> tex_, dep_, joint_;
    // ma_[layer][branch-tag] / iwc_[layer][branch-tag]
    std::vector<std::pair<std::string, MaModule>> ma_;
    std::vector<std::pair<std::string, IwcModule>> iwc_;
    std::vector<std::pair<std::string, HeadModule>> heads_;
    MaModule* find_ma(const std::string& key);
    IwcModule* find_iwc(const std::string& key);
    HeadModule* find_head(const std::string& key);
};

// Closed-form parameter accounting per named component; bytes are reported
// at 32-bit width for comparability with single-precision deployments.
struct ComponentCount {
    std::string component;
    std::int64_t count = 0;
};
struct ParamReport {
    std::vector<ComponentCount> components;
    std::int64_t total = 0;
    std::int64_t bytes32() const { return total * 4; }
    double megabytes32() const { return static_cast<double>(bytes32()) / (1024.0 * 1024.0); }
};
ParamReport count_params(const ModelConfig& cfg);

// Checkpoint = manifest + one tensor file per parameter/buffer.
void save_checkpoint(const std::string& dir, AfnetModel& model);
AfnetModel load_checkpoint(const std::string& dir);

// ModelConfig <-> flat key-value echo used by config files, manifests and
// checkpoints.
std::vector<std::pair<std::string, std::string>> config_echo(const ModelConfig& cfg);

// Applies one key=value pair onto a config; false when the key is not a
// model key (the caller decides whether that is an error).
bool apply_model_config_kv(ModelConfig& cfg, const std::string& key, const std::string& value);

}  // namespace afnet
