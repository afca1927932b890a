"""Walk through the binary tensor format and the dataset manifest.

Run:  python3 demos/01_tensor_interchange.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from camforge import errors, load_manifest, load_tensor, write_tensor

root = Path(tempfile.mkdtemp(prefix="camforge_demo_"))
print(f"working in {root}\n")

# --- a tensor round trip ----------------------------------------------------
matrix = np.arange(6, dtype=np.float32).reshape(2, 3)
path = root / "matrix.cft"
write_tensor(matrix, path)
size = path.stat().st_size
print(f"wrote a 2x3 float tensor: {size} bytes "
      f"(10 header + {8 * 2} dims + {4 * 6} payload)")
back = load_tensor(path)
print(f"loaded back, bit-identical: {np.array_equal(back, matrix)}\n")

# --- every corruption is caught ----------------------------------------------
blob = bytearray(path.read_bytes())
blob[0] ^= 0xFF
(root / "bad_magic.cft").write_bytes(blob)
try:
    load_tensor(root / "bad_magic.cft")
except errors.BadMagic as exc:
    print(f"corrupted magic byte rejected: {exc}")

truncated = path.read_bytes()[:-4]
(root / "short.cft").write_bytes(truncated)
try:
    load_tensor(root / "short.cft")
except errors.TruncatedPayload as exc:
    print(f"truncated payload rejected:   {exc}\n")

# --- a minimal manifest -------------------------------------------------------
write_tensor(np.eye(4, 2, dtype=np.float32), root / "text.cft")
write_tensor(np.random.default_rng(0).random((2, 2, 4)).astype(np.float32), root / "feat.cft")
attn = np.full((4, 4), 0.25, dtype=np.float32)
write_tensor(attn, root / "attn.cft")
write_tensor(np.zeros((4, 4), dtype=np.float32), root / "vals.cft")
manifest_doc = {
    "version": 1,
    "num_classes": 2,
    "feature_dim": 4,
    "class_names": ["cat", "dog"],
    "text_embed_path": "text.cft",
    "samples": [
        {
            "id": "demo",
            "feature_path": "feat.cft",
            "clip_attn_paths": ["attn.cft"],
            "clip_value_paths": ["vals.cft"],
            "sd_attn_path": "attn.cft",
            "image_labels": [0],
        }
    ],
}
(root / "manifest.json").write_text(json.dumps(manifest_doc, indent=1))
manifest = load_manifest(root / "manifest.json")
print(f"manifest loaded lazily: {len(manifest.samples)} sample, classes {manifest.class_names}")
tensors = manifest.samples[0].load()
print(f"sample tensors cross-checked on access: grid {tensors.grid}, "
      f"{len(tensors.clip_attn)} attention layer(s)")
