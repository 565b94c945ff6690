"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7   magic  b"TPDIFFCK"
    bytes 8..11  uint32 format version (currently 1)
    bytes 12..19 uint64 header length in bytes
    header       UTF-8 JSON (sorted keys)
    blobs        raw tensor bytes, concatenated in header order

The JSON header holds the model / schedule / render configuration, free
-form metadata, and a tensor table of ``{name, dtype, shape, offset,
nbytes}`` entries with offsets relative to the end of the header.
Optimizer state uses the ``opt/`` name prefix; model parameters keep
their ``encoder.`` / ``decoder.`` names, so alternate readers can
reconstruct the network from the table alone.  Writing is deterministic:
identical parameters produce identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams, ModelConfig, build_denoiser
from .render import RenderConfig

MAGIC = b"TPDIFFCK"
VERSION = 1


def _tensor_table(named):
    table = []
    offset = 0
    for name, arr in named:
        nbytes = arr.nbytes
        table.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        })
        offset += nbytes
    return table


def save_checkpoint(path, params, schedule_cfg=None, meta=None, opt_state=None):
    """Write params (+ optional optimizer arrays) to ``path``."""
    named = [(name, np.ascontiguousarray(p.data)) for name, p in params.named_params()]
    if opt_state:
        named += [(f"opt/{k}", np.ascontiguousarray(v))
                  for k, v in sorted(opt_state.items())]
    header = {
        "format_version": VERSION,
        "model": params.model.to_dict(),
        "render": {
            "n_coarse": params.render.n_coarse,
            "n_fine": params.render.n_fine,
            "background": list(params.render.background),
            "near": params.render.near,
            "far": params.render.far,
        },
        "schedule": schedule_cfg or {},
        "meta": meta or {},
        "tensors": _tensor_table(named),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in named:
            fh.write(arr.tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data_start = fh.tell()
    return header, data_start


def load_checkpoint(path):
    """Read a checkpoint: (DenoiserParams, header dict, opt_state dict)."""
    path = Path(path)
    header, data_start = read_header(path)
    raw = path.read_bytes()
    tensors = {}
    dtype_seen = None
    for entry in header["tensors"]:
        start = data_start + entry["offset"]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"], dtype=np.int64))
                            if entry["shape"] else 1,
                            offset=start).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
        if not entry["name"].startswith("opt/"):
            dtype_seen = arr.dtype

    model_cfg = ModelConfig.from_dict(header["model"])
    r = header["render"]
    render_cfg = RenderConfig(n_coarse=r["n_coarse"], n_fine=r["n_fine"],
                              background=tuple(r["background"]),
                              near=r["near"], far=r["far"])
    params = build_denoiser(model_cfg, np.random.default_rng(0),
                            dtype=dtype_seen or np.float32, render_cfg=render_cfg)
    expected = dict(params.named_params())
    for name, p in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if tuple(tensors[name].shape) != p.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {p.shape}")
        p.data = tensors[name]
    opt_state = {k[len("opt/"):]: v for k, v in tensors.items()
                 if k.startswith("opt/")}
    return params, header, opt_state
