"""
Dilated convolution and receptive fields
========================================

A 3x3x3 kernel with dilation D reads 27 input voxels spread over a
(2D + 1)^3 box. Stacking layers grows the field by 2D per layer.
"""
from collections import Counter

import numpy as np

from dualseg import tensor_core as tc
from dualseg.network import PathwaySpec, receptive_field

# one impulse, one all-ones kernel: the output shows where the taps land
x = np.zeros((1, 17, 17, 17))
x[0, 8, 8, 8] = 1.0
w = np.ones((1, 1, 3, 3, 3))
for d in (1, 2, 4):
    y = tc.conv3d(x, w, d)
    print(f"D={d}: output {y.shape[1:]}, impulse reaches {int(y.sum())} outputs")

# dilation adds no arithmetic: 27 taps per output voxel whatever D is
counter = Counter()
tc.conv3d(np.zeros((2, 2, 40, 40, 40)), np.zeros((4, 2, 3, 3, 3)), 8, counter=counter)
print("taps per output voxel at D=8:", counter["taps"])

# the two pathways
local, glob = PathwaySpec.paper_local(), PathwaySpec.paper_global()
print("local field :", local.receptive_field, "from", len(local.widths), "undilated layers")
print("global field:", glob.receptive_field, "with dilations", glob.dilations)
print("field of three D=1 layers:", receptive_field([(3, 1)] * 3))
