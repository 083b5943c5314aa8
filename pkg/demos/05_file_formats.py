"""
Checkpoints on disk
===================

Models and datasets share one container: a 16-byte prefix, a JSON header
with a tensor manifest, then the raw little-endian payload.
"""

import json
import struct
import tempfile
from pathlib import Path

from glora import persist
from glora.errors import LengthError
from glora.layer import LayerSearchSpace
from glora.supernet import build_model

model = build_model("mini-attention", [4, 3], seed=0, r_max=2)
path = Path(tempfile.mkdtemp()) / "model.glra"
n = persist.save_checkpoint(model, path, [LayerSearchSpace.full((2,))] * len(model.layers))
print(f"wrote {n} bytes")

###############################################################################
# Read the prefix and header by hand.

blob = path.read_bytes()
magic, version, hlen = struct.unpack_from("<4sIQ", blob)
header = json.loads(blob[16 : 16 + hlen])
print(magic, version, hlen)
for entry in header["tensors"][:4]:
    print(entry)

###############################################################################
# Loading validates every manifest entry before touching the payload, so a
# damaged file fails loudly.

try:
    persist.decode_container(blob[:-3])
except LengthError as exc:
    print("truncated:", exc)

loaded, spaces, _ = persist.load_checkpoint(path)
print("round trip is byte-identical:", persist.model_to_bytes(loaded, spaces) == blob)
