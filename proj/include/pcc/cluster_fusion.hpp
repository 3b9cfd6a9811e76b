#pragma once

#include "pcc/autodiff.hpp"
#include "pcc/cluster_engine.hpp"
#include "pcc/parameters.hpp"
#include "pcc/vit_encoder.hpp"

#include <cstdint>
#include <string>

namespace pcc::fusion {

/// What gets appended to every patch token before refinement.
enum class FusionMode { none, class_token, cluster_token };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& s);

/// Learnable L x H matrix; row i embeds vocabulary[i].
struct ClusterEmbeddingMatrix {
  Mat G;
};

struct ClusterToken {
  Mat values;  // 1 x H
};

/// Patch tokens with the appended token, before (F_in) or after (F_out)
/// refinement. tokens x (e + H).
struct FusedTokens {
  Mat values;
  int grid_side = 0;
};

/// Hidden width of each recurrent direction.
struct RefinerConfig {
  int input_dim = 0;
  int hidden = 0;

  /// hidden = max(1, input_dim / 2).
  static RefinerConfig for_width(int input_dim);
};

inline constexpr const char* kClusterMatrixName = "fusion.G";
inline constexpr const char* kClassTokenName = "fusion.class_token";

/// Parameters of the appended token: G (L x H) for cluster_token, a single
/// 1 x H row for class_token, nothing for none.
ParameterSet init_fusion_params(FusionMode mode, std::size_t clusters, int cluster_dim,
                                std::uint64_t seed);
/// Horizontal and vertical bidirectional passes under "refiner.".
ParameterSet init_refiner_params(const RefinerConfig& cfg, std::uint64_t seed);

/// F_c = u^T G. Throws ShapeError if u does not have one bit per row of G.
ClusterToken embed_clusters(const clusters::ClusterVector& u, const ClusterEmbeddingMatrix& G);
ad::Var embed_clusters(const clusters::ClusterVector& u, ad::Var G);

/// Appends F_c to every row of F_v; an empty F_c leaves F_v unchanged.
FusedTokens fuse(const vit::PatchTokens& patches, const ClusterToken& token);
ad::Var fuse(ad::Var patches, ad::Var token);

/// Horizontal then vertical bidirectional LSTM over the token grid, each pass
/// projected back to the input width. With `residual` each pass adds its input
/// to the projection. Throws ShapeError when the token count is not a perfect
/// square.
FusedTokens refine(const FusedTokens& in, const ParameterSet& params, bool residual = false);
ad::Var refine(ParameterBinder& params, ad::Var in, bool residual = false);

/// Side of the square token grid, or ShapeError.
int grid_side_of(Eigen::Index tokens);

}  // namespace pcc::fusion
