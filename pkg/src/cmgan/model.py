"""Two-pathway generator, semantic head and the four discriminators.

Layer names are stable strings (``image.enc1``, ``text.dec2``, ``d_ci.1``,
...) used by checkpoints, gradient checks and the training loop. With
weight sharing on, ``image.enc2`` and ``text.enc2`` are the same
:class:`~cmgan.nn.Dense` object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .nn import SCORE_CLAMP, Dense, LayerParams, sequential_forward, softmax

MODALITIES = ("image", "text")
SHARED_ID = "enc2"

CHECKPOINT_MAGIC = b"CMGC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    d_img: int
    d_txt: int
    n_classes: int
    enc_hidden: int = 1024
    common_dim: int = 1024
    dec_hidden: int = 1024
    inter_hidden: int = 512

    def feature_dim(self, modality: str) -> int:
        _check_modality(modality)
        return self.d_img if modality == "image" else self.d_txt


def _check_modality(modality: str):
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")


class CmGanModel:
    def __init__(self, dims: ModelDims, layers: dict[str, Dense], weight_sharing: bool = True):
        self.dims = dims
        self.layers = layers
        self.weight_sharing = weight_sharing

    @classmethod
    def build(cls, dims: ModelDims, seed: int | np.random.Generator = 0,
              weight_sharing: bool = True, zero_discriminators: bool = False) -> CmGanModel:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        def dense(i, o, act, bn, shared_id=None, zero=False):
            return Dense(LayerParams.init(i, o, rng, batch_norm=bn, shared_id=shared_id, zero=zero), act)

        layers: dict[str, Dense] = {}
        shared = None
        for m in MODALITIES:
            d = dims.feature_dim(m)
            layers[f"{m}.enc1"] = dense(d, dims.enc_hidden, "relu", True)
            if weight_sharing:
                if shared is None:
                    shared = dense(dims.enc_hidden, dims.common_dim, "relu", True, SHARED_ID)
                layers[f"{m}.enc2"] = shared
            else:
                layers[f"{m}.enc2"] = dense(dims.enc_hidden, dims.common_dim, "relu", True)
            layers[f"{m}.dec1"] = dense(dims.common_dim, dims.dec_hidden, "relu", True)
            layers[f"{m}.dec2"] = dense(dims.dec_hidden, d, "identity", False)
        layers["semantic"] = dense(dims.common_dim, dims.n_classes, "identity", False)
        z = zero_discriminators
        layers["d_i"] = dense(dims.d_img, 1, "sigmoid", False, zero=z)
        layers["d_t"] = dense(dims.d_txt, 1, "sigmoid", False, zero=z)
        for name, d in (("d_ci", dims.d_img), ("d_ct", dims.d_txt)):
            layers[f"{name}.1"] = dense(dims.common_dim + d, dims.inter_hidden, "relu", True, zero=z)
            layers[f"{name}.2"] = dense(dims.inter_hidden, 1, "sigmoid", False, zero=z)
        return cls(dims, layers, weight_sharing)

    def encoder(self, modality: str) -> list[Dense]:
        _check_modality(modality)
        return [self.layers[f"{modality}.enc1"], self.layers[f"{modality}.enc2"]]

    def decoder(self, modality: str) -> list[Dense]:
        _check_modality(modality)
        return [self.layers[f"{modality}.dec1"], self.layers[f"{modality}.dec2"]]

    def intra(self, modality: str) -> list[Dense]:
        _check_modality(modality)
        return [self.layers["d_i" if modality == "image" else "d_t"]]

    def inter(self, pathway: str) -> list[Dense]:
        _check_modality(pathway)
        prefix = "d_ci" if pathway == "image" else "d_ct"
        return [self.layers[f"{prefix}.1"], self.layers[f"{prefix}.2"]]

    def generator_layers(self) -> dict[str, Dense]:
        return {k: v for k, v in self.layers.items() if not k.startswith("d_")}

    def discriminator_layers(self) -> dict[str, Dense]:
        return {k: v for k, v in self.layers.items() if k.startswith("d_")}

    def param_snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        """Copies of every array (running statistics included), by layer name."""
        return {k: {n: a.copy() for n, a in v.params.state().items()} for k, v in self.layers.items()}


def _check_cols(x: np.ndarray, expected: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} columns, got shape {x.shape}")
    return x


def encode_trace(model, modality, h, mode="train", update_stats=True):
    h = _check_cols(h, model.dims.feature_dim(modality), f"{modality} features")
    return sequential_forward(h, model.encoder(modality), mode, update_stats)


def decode_trace(model, modality, s, mode="train", update_stats=True):
    s = _check_cols(s, model.dims.common_dim, "common representation")
    return sequential_forward(s, model.decoder(modality), mode, update_stats)


def intra_trace(model, modality, x, mode="train", update_stats=True):
    x = _check_cols(x, model.dims.feature_dim(modality), f"{modality} intra input")
    return sequential_forward(x, model.intra(modality), mode, update_stats)


def inter_trace(model, pathway, s, h, mode="train", update_stats=True):
    s = _check_cols(s, model.dims.common_dim, "common representation")
    h = _check_cols(h, model.dims.feature_dim(pathway), f"{pathway} original representation")
    if s.shape[0] != h.shape[0]:
        raise ShapeError(f"row mismatch: {s.shape[0]} common rows vs {h.shape[0]} original rows")
    return sequential_forward(np.hstack([s, h]), model.inter(pathway), mode, update_stats)


def semantic_trace(model, s, mode="train", update_stats=True):
    s = _check_cols(s, model.dims.common_dim, "common representation")
    return sequential_forward(s, [model.layers["semantic"]], mode, update_stats)


def encode(model: CmGanModel, modality: str, h: np.ndarray, mode: str = "infer") -> np.ndarray:
    return encode_trace(model, modality, h, mode)[0]


def decode(model: CmGanModel, modality: str, s: np.ndarray, mode: str = "infer") -> np.ndarray:
    return decode_trace(model, modality, s, mode)[0]


def discriminate_intra(model: CmGanModel, modality: str, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    return _clamped(intra_trace(model, modality, x, mode)[0])


def discriminate_inter(model: CmGanModel, pathway: str, s: np.ndarray, h: np.ndarray,
                       mode: str = "infer") -> np.ndarray:
    """Score ``[s, h]`` (common part first) with the pathway's inter-modality discriminator."""
    return _clamped(inter_trace(model, pathway, s, h, mode)[0])


def _clamped(p: np.ndarray) -> np.ndarray:
    # same clamp the training losses apply, so reported scores stay inside (0, 1)
    return np.clip(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def classify(model: CmGanModel, s: np.ndarray) -> np.ndarray:
    return softmax(semantic_trace(model, s, "infer")[0])


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(model: CmGanModel, path, meta: dict | None = None):
    """Write every parameter once; shared layers are stored under one key.

    Layout: ``CMGC`` magic, u16 version, u32 header length, UTF-8 JSON
    header, then the float64 little-endian tensor payload.
    """
    key_of: dict[int, str] = {}
    params = []
    blobs = []
    offset = 0
    for name, layer in model.layers.items():
        p = layer.params
        if id(p) in key_of:
            continue
        key_of[id(p)] = name
        tensors = []
        for tname, arr in p.state().items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": tname, "shape": list(arr.shape), "offset": offset})
            blobs.append(data)
            offset += len(data)
        params.append({"key": name, "shared_id": p.shared_id, "tensors": tensors})
    header = {
        "dims": asdict(model.dims),
        "weight_sharing": model.weight_sharing,
        "layers": [{"name": n, "activation": l.activation, "params": key_of[id(l.params)]}
                   for n, l in model.layers.items()],
        "params": params,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def read_checkpoint_header(path) -> dict:
    return _read_checkpoint(Path(path).read_bytes())[0]


def _read_checkpoint(raw: bytes):
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r} at offset 0")
    if len(raw) < 10:
        raise FormatError("truncated checkpoint header at offset 4")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    if len(raw) < 10 + hlen:
        raise FormatError(f"truncated checkpoint header: need {10 + hlen} bytes, file has {len(raw)}")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header at offset 10: {exc}") from exc
    return header, memoryview(raw)[10 + hlen:]


def load_checkpoint(path) -> tuple[CmGanModel, dict]:
    header, payload = _read_checkpoint(Path(path).read_bytes())
    by_key = {}
    for entry in header["params"]:
        arrays = {}
        for t in entry["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            end = t["offset"] + 8 * count
            if end > len(payload):
                raise FormatError(f"truncated tensor {entry['key']}.{t['name']}: payload ends before byte {end}")
            arrays[t["name"]] = np.frombuffer(payload[t["offset"]:end], dtype="<f8").astype(np.float64).reshape(t["shape"])
        by_key[entry["key"]] = LayerParams(shared_id=entry["shared_id"], **arrays)
    layers = {l["name"]: None for l in header["layers"]}
    dense_of_key: dict[str, Dense] = {}
    for l in header["layers"]:
        key = l["params"]
        if key not in dense_of_key:
            dense_of_key[key] = Dense(by_key[key], l["activation"])
        layers[l["name"]] = dense_of_key[key]
    model = CmGanModel(ModelDims(**header["dims"]), layers, header["weight_sharing"])
    return model, header.get("meta", {})
