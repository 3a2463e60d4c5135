"""Speculative decoding engine for autoregressive triangle-mesh generation.

Core surfaces:
  * codec          mesh <-> canonical coordinate-token sequences, OBJ I/O
  * model          hourglass decoder config, weights, serialization
  * backbone       incremental cached forward pass
  * heads          SP/HF speculation blocks, draft pruning and merging
  * correction     point labeling, nearest-new-point repair, z-y-x resort
  * engine         baseline and predict-correct-verify decoding
  * losses         coordinate/label objectives, micro gradient check
  * metrics        Chamfer/Hausdorff/bbox-IoU, entropy decompositions
"""

from .codec import Mesh, QuantizedMesh, from_tokens, load_obj, quantize, save_obj, to_tokens
from .engine import AcceptStats, decode_baseline, decode_speculative, speedup_report
from .model import HourglassModel, ModelConfig, deserialize, init_random, serialize

__all__ = [
    "Mesh", "QuantizedMesh", "quantize", "to_tokens", "from_tokens",
    "load_obj", "save_obj",
    "ModelConfig", "HourglassModel", "init_random", "serialize", "deserialize",
    "AcceptStats", "decode_baseline", "decode_speculative", "speedup_report",
]

__version__ = "0.1.0"
