// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>

namespace refprop {

/// Mask-stack channel owned by grid cell (i,j): row-major i*S + j.
inline int channel_index(int i, int j, int S) {
    if (i < 0 || j < 0 || i >= S || j >= S)
        throw std::invalid_argument("channel_index: cell outside grid");
    return i * S + j;
}

/// Grid cell containing a pixel center: floor(row*S/H) clamped to S-1.
inline std::pair<int, int> grid_of_center(int row, int col, int H, int W, int S) {
    if (row < 0 || col < 0 || row >= H || col >= W)
        throw std::invalid_argument("grid_of_center: center outside image");
    int i = static_cast<int>(static_cast<long>(row) * S / H);
    int j = static_cast<int>(static_cast<long>(col) * S / W);
    if (i >= S) i = S - 1;
    if (j >= S) j = S - 1;
    return {i, j};
}

}  // namespace refprop
