#pragma once

#include <cstddef>

#include "ctxar/image.hpp"

namespace ctxar {

// Pixelwise F1 of two binary maps where a pixel counts as matched if the
// other map has an edge within one pixel (Chebyshev). Two empty maps score 1.
double edge_map_f1(const Image& predicted, const Image& reference);

// Edges derived from `generated` against the edge condition map.
double edge_f1(const Image& generated, const Image& edge_condition);

// Mean squared difference of two single-channel maps.
double map_mse(const Image& a, const Image& b);

// Depth derived from `generated` against the depth condition map.
double depth_mse(const Image& generated, const Image& depth_condition);

// Fraction of pixels whose derived semantic label equals the condition's.
double semantic_accuracy(const Image& generated, const Image& semantic_condition);

// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
double sign_test_p(std::size_t wins, std::size_t losses);

}  // namespace ctxar
