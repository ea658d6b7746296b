"""Checkpoint container for trained networks.

Binary layout, all integers and floats little-endian::

    magic        8 bytes   b"SPNNCKPT"
    version      u32       1
    num_layers   u32
    in_frac      i8        input Q-format fractional bits, -1 if not quantized
    per layer:   u32 m, u32 n, u32 r (0 without predictor),
                 i8 w_frac, u_frac, v_frac, vres_frac, out_frac (-1 = absent)
    payload:     per layer W (m*n f64), then U (m*r f64) and V (r*n f64)

Float parameters are stored; fixed-point codes are re-derived from them and
the stored Q-formats, so the quantized twin round-trips exactly.

A JSON sidecar ``<path>.json`` holds the network spec and free-form
training metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .model import NetworkParams, NetworkSpec, QuantizedLayer, QuantizedNetwork
from .numerics import QFormat, quantize_array

MAGIC = b"SPNNCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIIb")
_LAYER = struct.Struct("<III5b")


class CheckpointError(ValueError):
    pass


def _frac(fmt: Optional[QFormat]) -> int:
    return -1 if fmt is None else fmt.frac_bits


def _fmt(frac: int) -> Optional[QFormat]:
    return None if frac < 0 else QFormat(frac)


def save_checkpoint(path, params: NetworkParams, qnet: Optional[QuantizedNetwork] = None,
                    metadata: Optional[dict] = None) -> None:
    path = Path(path)
    L = params.spec.num_layers
    chunks = [_HEAD.pack(MAGIC, VERSION, L, _frac(qnet.in_fmt) if qnet else -1)]
    blobs = []
    for l in range(L):
        m, n = params.spec.layer_shape(l)
        r = params.spec.rank if params.spec.has_predictor(l) else 0
        ql = qnet.layers[l] if qnet else None
        fr = [-1] * 5
        if ql is not None:
            fr = [_frac(ql.w_fmt), _frac(ql.u_fmt), _frac(ql.v_fmt), _frac(ql.vres_fmt), _frac(ql.out_fmt)]
        chunks.append(_LAYER.pack(m, n, r, *fr))
        blobs.append(params.W[l].astype("<f8").tobytes())
        if r:
            blobs.append(params.U[l].astype("<f8").tobytes())
            blobs.append(params.V[l].astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks + blobs))
    sidecar = {"spec": params.spec.to_dict(), "metadata": metadata or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Tuple[NetworkParams, Optional[QuantizedNetwork], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, L, in_frac = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    headers = []
    for _ in range(L):
        if off + _LAYER.size > len(raw):
            raise CheckpointError(f"{path}: truncated layer table")
        headers.append(_LAYER.unpack_from(raw, off))
        off += _LAYER.size

    def take(shape):
        nonlocal off
        nbytes = 8 * shape[0] * shape[1]
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(raw, dtype="<f8", count=shape[0] * shape[1], offset=off).reshape(shape)
        off += nbytes
        return arr.astype(np.float64)

    W, U, V = [], [], []
    sizes = [headers[0][1]] if headers else []
    ranks = set()
    for m, n, r, *_ in headers:
        W.append(take((m, n)))
        U.append(take((m, r)) if r else None)
        V.append(take((r, n)) if r else None)
        sizes.append(m)
        if r:
            ranks.add(r)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    if len(ranks) > 1:
        raise CheckpointError(f"{path}: mixed predictor ranks {sorted(ranks)}")

    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    spec = NetworkSpec(tuple(sizes), ranks.pop() if ranks else 0,
                       frozenset(l for l, h in enumerate(headers) if h[2]))
    if "spec" in sidecar and NetworkSpec.from_dict(sidecar["spec"]) != spec:
        raise CheckpointError(f"{path}: sidecar spec does not match binary layout")
    params = NetworkParams(spec, W, U, V)

    qnet = None
    if in_frac >= 0:
        layers = []
        for l, (m, n, r, wf, uf, vf, vrf, of) in enumerate(headers):
            w_fmt = QFormat(wf)
            ql = QuantizedLayer(quantize_array(W[l], w_fmt), w_fmt, QFormat(of), relu=l < L - 1)
            if r:
                ql.u_fmt, ql.v_fmt, ql.vres_fmt = QFormat(uf), QFormat(vf), QFormat(vrf)
                ql.u = quantize_array(U[l], ql.u_fmt)
                ql.v = quantize_array(V[l], ql.v_fmt)
            layers.append(ql)
        qnet = QuantizedNetwork(QFormat(in_frac), layers)
    return params, qnet, sidecar.get("metadata", {})
