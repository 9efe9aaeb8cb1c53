"""
Dice and average symmetric surface distance
===========================================
"""
import numpy as np

from dualseg.metrics import assd, dice, extract_surface, report

auto = np.zeros((20, 20, 20), np.uint8)
manual = np.zeros_like(auto)
auto[5:12, 5:12, 5:12] = 1
manual[6:13, 5:12, 5:12] = 1

print("DSC :", dice(auto, manual, 1))
print("ASSD:", assd(auto, manual, 1), "mm")
print("ASSD at 0.5 mm voxels:", assd(auto, manual, 1, voxel_size=0.5), "mm")

# a 3^3 cube has 26 surface voxels: everything but the centre
cube = np.zeros((5, 5, 5), bool)
cube[1:4, 1:4, 1:4] = True
print("surface voxels of a 3^3 cube:", int(extract_surface(cube).sum()))

# a class missing from both maps is reported as undefined, not as 0 or 1
print(report(auto, manual, num_classes=3).to_text())
