"""On-disk format for instances.

A directory holds four files:

``edges.txt``     one ``i j`` line per undirected edge, 0-based, ``i < j``
``features.bin``  16-byte header (``b"CSBMFEAT"``, u32 P, u32 N) followed by
                  the ``P x N`` matrix ``B`` as little-endian row-major float64
``labels.txt``    one group index per line (``+1``/``-1`` for two groups)
``params.json``   model parameters, seed, centroids and dtype
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CSBMError
from .graph import Graph
from .model import Affinity, Instance, ModelParams, MultiParams

MAGIC = b"CSBMFEAT"
_HEADER = struct.Struct("<8sII")


class FormatError(CSBMError):
    """A file does not follow the instance format."""


def _params_to_json(params) -> dict:
    if isinstance(params, ModelParams):
        return {"kind": "binary", **asdict(params)}
    return {
        "kind": "multi",
        "n_nodes": params.n_nodes,
        "feature_dim": params.feature_dim,
        "affinity": params.affinity.matrix.tolist(),
        "group_prior": list(params.group_prior),
        "snr_mu": params.snr_mu,
        "train_fraction": params.train_fraction,
        "label_flip_keep_prob": params.label_flip_keep_prob,
        "centroid_cov": None if params.centroid_cov is None else params.centroid_cov.tolist(),
    }


def _params_from_json(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "binary":
        return ModelParams(**d)
    d["affinity"] = Affinity(np.array(d["affinity"]))
    d["group_prior"] = tuple(d["group_prior"])
    if d.get("centroid_cov") is not None:
        d["centroid_cov"] = np.array(d["centroid_cov"])
    return MultiParams(**d)


def write_features(path, features_nm: np.ndarray) -> None:
    """Write ``B`` (given node-major, shape ``(N, P)``) in the ``P x N`` row-major layout."""
    n, p = features_nm.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, p, n))
        # P x N row-major bytes == N x P column-major bytes
        fh.write(np.asarray(features_nm, dtype="<f8").tobytes(order="F"))


def read_features(path, dtype=np.float64) -> np.ndarray:
    """Read ``features.bin``; returns the node-major ``(N, P)`` array."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, p, n = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        raw = np.fromfile(fh, dtype="<f8")
    if raw.size != n * p:
        raise FormatError(f"{path}: expected {n * p} values, found {raw.size}")
    return np.ascontiguousarray(raw.reshape(p, n).T, dtype=dtype)


def save_instance(instance: Instance, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "edges.txt", instance.graph.edges, fmt="%d")
    write_features(out / "features.bin", instance.features_nm)
    labels = instance.labels if instance.is_binary else instance.groups
    np.savetxt(out / "labels.txt", labels, fmt="%d")
    meta = {
        "params": _params_to_json(instance.params),
        "seed": instance.seed,
        "binary": instance.is_binary,
        "dtype": np.dtype(instance.features_nm.dtype).name,
        "centroids": np.asarray(instance.centroids, dtype=np.float64).tolist(),
    }
    (out / "params.json").write_text(json.dumps(meta, indent=1))
    return out


def load_instance(directory) -> Instance:
    src = Path(directory)
    try:
        meta = json.loads((src / "params.json").read_text())
        params = _params_from_json(meta["params"])
        edges = np.loadtxt(src / "edges.txt", dtype=np.int64, ndmin=2).reshape(-1, 2)
        feats = read_features(src / "features.bin", dtype=np.dtype(meta["dtype"]))
        labels = np.loadtxt(src / "labels.txt", dtype=np.int64, ndmin=1)
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot load instance from {src}: {exc}") from exc
    groups = (1 - labels) // 2 if meta["binary"] else labels
    n = feats.shape[0]
    return Instance(
        Graph.from_edges(n, edges), feats, groups.astype(np.int64),
        np.array(meta["centroids"], dtype=np.float64), params, int(meta["seed"]),
    )
