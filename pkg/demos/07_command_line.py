"""
The command line
================

phantom -> train -> infer -> evaluate, run in a scratch directory. The same
calls work from a shell as ``dualseg <command> ...``.
"""
import json
import tempfile
from pathlib import Path

from dualseg.cli import main

work = Path(tempfile.mkdtemp())
main(["phantom", str(work / "ph"), "--dims", "40", "40", "40", "--fraction", "0.01",
      "--set", "2", "1", "1"])

# shrink the network so this runs in seconds
cfg_path = work / "ph_config.json"
cfg = json.loads(cfg_path.read_text())
cfg["network"].update(fusion_width=6, local_widths=[4, 4], global_widths=[4, 4, 4],
                      global_dilations=[1, 2, 1])
cfg["training"].update(max_iterations=20, validation_interval=10)
cfg["inference"].update(mc_samples=5, tile_extent=30)
cfg_path.write_text(json.dumps(cfg, indent=1))

main(["--verify", "train", "--config", str(cfg_path), "--out", str(work / "model.ckpt")])
main(["infer", "--checkpoint", str(work / "model.ckpt"), "--image", str(work / "ph_test_image.vol"),
      "--out", str(work / "pred")])
main(["evaluate", str(work / "pred_labels.vol"), str(work / "ph_test_labels.vol")])
print(sorted(p.name for p in work.iterdir()))
