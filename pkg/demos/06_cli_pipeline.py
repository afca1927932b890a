"""Drive the whole pipeline through the command-line interface.

Run:  python3 demos/06_cli_pipeline.py
"""

import subprocess
import sys
import tempfile
from pathlib import Path

from export_tools import SyntheticSpec, gen_synthetic

root = Path(tempfile.mkdtemp(prefix="camforge_demo_"))
manifest = gen_synthetic(root / "data", SyntheticSpec(seed=0, noise=0.3, num_samples=8))
print(f"dataset at {manifest}\n")

common = ["--manifest", str(manifest), "--seed", "0",
          "--set", "retrieval.centroids_per_class=2",
          "--set", "train.iterations=100", "--set", "train.prompt_count=4"]


def camforge(*argv):
    cmd = [sys.executable, "-m", "camforge.cli", *argv]
    print("$ camforge " + " ".join(argv))
    subprocess.run(cmd, check=True)
    print()


camforge("build-cache", *common, "--cache-dir", str(root / "cache"))
camforge("train", *common, "--cache-dir", str(root / "cache"),
         "--adapter-dir", str(root / "adapter"))
camforge("gen-cam", *common, "--out-dir", str(root / "cams"),
         "--cache-dir", str(root / "cache"), "--adapter-dir", str(root / "adapter"))
camforge("eval", *common, "--cam-dir", str(root / "cams"), "--kind", "med",
         "--out-dir", str(root / "report"))
camforge("heatmap", "--cam-file", str(root / "cams" / "sample_0_med.cft"),
         "--channel", "0", "--out", str(root / "sample_0.pgm"))
camforge("ablate", *common, "--cache-dir", str(root / "cache"),
         "--key", "retrieval.cache_weight", "--values", "0.1,0.5,1.0",
         "--out", str(root / "sweep.csv"))

print("sweep results:")
print((root / "sweep.csv").read_text())
