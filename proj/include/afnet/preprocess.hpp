#pragma once

#include <array>
#include <string>

#include "afnet/tensor.hpp"

namespace afnet {

// The six basic expression classes, in label order.
int expression_from_name(const std::string& name);
const char* expression_name(int label);
inline constexpr int kNumExpressions = 6;

struct Landmark {
    std::string region;  // left-eye | right-eye | nose | mouth
    double u = 0, v = 0;  // normalized image coordinates, v grows downward
};

// Raw 3D capture: point cloud in millimeters with per-point color, plus
// region-tagged 2D landmarks in the projected image frame.
struct Scan {
    std::vector<std::array<double, 3>> points;
    std::vector<std::array<double, 3>> colors;
    std::vector<Landmark> landmarks;
    int subject_id = 0;
    int expression = 0;
    int intensity = 1;

    void validate() const;  // sizes agree, all four regions present
};

struct ModalityPair {
    Tensor texture;  // [3,S,S] in [0,1]
    Tensor depth;    // [3,S,S], one plane replicated
};

struct MaskPyramid {
    Tensor mask1;  // [1,S/4,S/4]
    Tensor mask2;  // [1,S/8,S/8], 2x area-downsample of mask1
};

// Orthographic max-z binning over the face bounding box. Depth is rescaled
// per scan to [0,1]; cells no point falls into are flagged as holes.
struct RawProjection {
    Tensor texture;           // [3,S,S], holes left at 0
    Tensor depth;             // [S,S]
    std::vector<std::uint8_t> holes;  // 1 = no point fell here
};
RawProjection project_to_grid(const Scan& scan, std::int64_t grid_size);

// Outlier knockout (5x5 robust median test), diffusion hole filling, then a
// 3x3 median filter iterated to its fixpoint; output is finite and in [0,1].
Tensor surface_clean(const Tensor& depth, const std::vector<std::uint8_t>& holes);

// Diffusion fill used by surface_clean stage two, exposed for the texture
// planes which share the projection's hole map.
Tensor fill_holes(const Tensor& plane, std::vector<std::uint8_t> holes);

// Filled convex hulls of each region's landmarks, dilated by grid/32 pixels,
// painted onto a zero canvas at grid/4; the second scale is an exact 2x
// area-downsample of the first.
MaskPyramid rasterize_masks(const std::vector<Landmark>& landmarks, std::int64_t grid_size);

// Deterministic parametric face scan: subject-seeded ellipsoid base with an
// expression- and intensity-dependent displacement field and color blobs at
// the eye/nose/mouth regions. grid_n controls point density.
Scan synth_scan(int expression, std::uint64_t subject_seed, int intensity, int grid_n = 120);

struct Preprocessed {
    ModalityPair pair;
    MaskPyramid masks;
};
Preprocessed preprocess_scan(const Scan& scan, std::int64_t grid_size);

// Text scan file: one header line "subject class intensity", then landmark
// lines "tag u v", then point lines "x y z r g b".
void write_scan(const std::string& path, const Scan& scan);
Scan read_scan(const std::string& path);

}  // namespace afnet
