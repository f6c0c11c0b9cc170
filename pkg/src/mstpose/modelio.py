"""``.mstmodel`` container: a plain-text header followed by a binary payload.

Layout::

    MSTMODEL 1.0
    arrays <n> floats <n> payload <bytes>
    config <key> = <value>        (one line per training-config key)
    layout <json>                 (names, parents, shapes, integer fields)
    meta <json>
    END

then, for every array in layout order, a packed bitmap flagging -inf entries
followed by the values as little-endian float64 (flagged entries stored as 0).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import (MixtureModel, OcclusionParams, PartSpec, PoseModel, SubTreeModel, validate)
from .structure import MixtureStructure

MAGIC = "MSTMODEL"
VERSION = (1, 0)
_END = b"END\n"


class ModelFormatError(ValueError):
    """Malformed or invalid model stream."""


class ModelVersionError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


# ----------------------------------------------------------------------------------------
# model <-> (layout document, array list)


def _part_doc(spec: PartSpec, put) -> dict:
    return {"name": spec.name, "parent": spec.parent, "latent": spec.latent,
            "extent": list(map(int, spec.extent)), "anchors": np.asarray(spec.anchors).astype(int).tolist(),
            "templates": put(spec.templates), "biases": put(spec.biases),
            "deformation": put(spec.deformation), "compat": put(spec.compat)}


def _part_from(doc: dict, get) -> PartSpec:
    return PartSpec(doc["name"], doc["parent"], get(doc["templates"]), get(doc["biases"]),
                    np.array(doc["anchors"], dtype=int).reshape(-1, 2), get(doc["deformation"]),
                    get(doc["compat"]), tuple(doc["extent"]), bool(doc["latent"]))


def _structure_doc(s: MixtureStructure) -> dict:
    return {"sub_tree": s.sub_tree, "mixture_id": s.mixture_id,
            "parent": [[c, p] for c, p in s.parent.items()], "observed": list(s.observed),
            "members": [[k, list(v)] for k, v in s.members.items()]}


def _structure_from(doc: dict) -> MixtureStructure:
    return MixtureStructure(doc["sub_tree"], int(doc["mixture_id"]), {c: p for c, p in doc["parent"]},
                            tuple(doc["observed"]), {k: tuple(v) for k, v in doc["members"]})


def decompose(model: PoseModel) -> tuple[dict, list[np.ndarray]]:
    arrays: list[np.ndarray] = []

    def put(a) -> int:
        arrays.append(np.asarray(a, dtype=np.float64))
        return len(arrays) - 1

    subtrees = []
    for st in model.subtrees.values():
        mixtures = [{"structure": _structure_doc(mx.structure), "gate": bool(mx.gate),
                     "bias": put(mx.bias), "root_deformation": put(mx.root_deformation),
                     "nodes": [_part_doc(s, put) for s in mx.nodes.values()]}
                    for mx in st.mixtures]
        subtrees.append({"name": st.name, "parent": st.parent, "anchor": np.asarray(st.anchor).astype(int).tolist(),
                         "extent": list(map(int, st.extent)), "z_norm": int(st.z_norm), "mixtures": mixtures})
    pairs = sorted(model.occlusion.pairs.items())
    doc = {"upper": [_part_doc(s, put) for s in model.upper.values()],
           "subtrees": subtrees,
           "occlusion": {"pairs": [list(k) for k, _ in pairs],
                         "values": put(np.array([v for _, v in pairs], dtype=float).reshape(-1, 3))}}
    return doc, arrays


def compose(doc: dict, arrays: list[np.ndarray], meta: dict) -> PoseModel:
    def get(i: int) -> np.ndarray:
        return arrays[i]

    upper = {d["name"]: _part_from(d, get) for d in doc["upper"]}
    subtrees = {}
    for sd in doc["subtrees"]:
        mixtures = [MixtureModel(_structure_from(md["structure"]), {n["name"]: _part_from(n, get) for n in md["nodes"]},
                                 get(md["bias"]), get(md["root_deformation"]), bool(md["gate"]))
                    for md in sd["mixtures"]]
        subtrees[sd["name"]] = SubTreeModel(sd["name"], sd["parent"], mixtures, np.array(sd["anchor"], dtype=int),
                                            tuple(sd["extent"]), int(sd["z_norm"]))
    occ = OcclusionParams()
    values = get(doc["occlusion"]["values"])
    for (a, b), (lam, lo, hi) in zip(doc["occlusion"]["pairs"], values):
        occ.set(a, b, lam, lo, hi)
    return PoseModel(upper, subtrees, occ, meta)


# ----------------------------------------------------------------------------------------
# binary form


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _header(model: PoseModel, doc: dict, arrays: list[np.ndarray], payload: int) -> bytes:
    lines = [f"{MAGIC} {VERSION[0]}.{VERSION[1]}",
             f"arrays {len(arrays)} floats {sum(a.size for a in arrays)} payload {payload}"]
    for line in str(model.meta.get("config", "")).splitlines():
        if line.strip():
            lines.append(f"config {line.strip()}")
    lines.append("layout " + _json({"doc": doc, "shapes": [list(a.shape) for a in arrays]}))
    lines.append("meta " + _json(model.meta))
    return ("\n".join(lines) + "\n").encode("ascii") + _END


def _encode_array(a: np.ndarray) -> bytes:
    flat = a.reshape(-1)
    if np.isnan(flat).any() or np.isposinf(flat).any():
        raise ModelFormatError("model arrays may contain -inf sentinels but not nan or +inf")
    neg = np.isneginf(flat)
    vals = np.where(neg, 0.0, flat).astype("<f8")
    return np.packbits(neg, bitorder="little").tobytes() + vals.tobytes()


def _decode_array(buf: memoryview, pos: int, shape) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape)) if len(shape) else 1
    nflag = (n + 7) // 8
    end = pos + nflag + 8 * n
    if end > len(buf):
        raise ModelTruncatedError(f"payload ends after {len(buf)} bytes, array needs {end}")
    flags = np.unpackbits(np.frombuffer(buf[pos:pos + nflag], dtype=np.uint8), count=n, bitorder="little").astype(bool)
    vals = np.frombuffer(buf[pos + nflag:end], dtype="<f8").astype(np.float64)
    vals[flags] = -np.inf
    return vals.reshape(shape), end


def serialize(model: PoseModel) -> bytes:
    doc, arrays = decompose(model)
    payload = b"".join(_encode_array(a) for a in arrays)
    return _header(model, doc, arrays, len(payload)) + payload


def _parse_version(line: str) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ModelFormatError("not an .mstmodel stream (bad magic)")
    try:
        major, minor = (int(x) for x in parts[1].split("."))
    except ValueError:
        raise ModelFormatError(f"unreadable version {parts[1]!r}") from None
    return major, minor


def deserialize(data: bytes, check: bool = True) -> PoseModel:
    end = data.find(b"\n" + _END)
    first = data.split(b"\n", 1)[0].decode("ascii", "replace")
    major, _ = _parse_version(first)
    if major != VERSION[0]:
        raise ModelVersionError(f"model format version {major} not supported (expected {VERSION[0]}.x)")
    if end < 0:
        raise ModelTruncatedError("header is incomplete")
    lines = data[:end].decode("ascii").split("\n")
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key in ("layout", "meta"):
            fields[key] = json.loads(rest)
        elif key == "arrays":
            tok = ("arrays " + rest).split()
            try:
                fields["counts"] = {tok[i]: int(tok[i + 1]) for i in range(0, len(tok) - 1, 2)}
            except ValueError:
                raise ModelFormatError(f"unreadable counts line {line!r}") from None
    if not {"layout", "meta", "counts"} <= fields.keys():
        raise ModelFormatError("header misses layout, meta or counts")
    body = memoryview(data)[end + 1 + len(_END):]
    declared = fields["counts"]["payload"]
    if len(body) < declared:
        raise ModelTruncatedError(f"payload has {len(body)} of {declared} bytes")
    if len(body) > declared:
        raise ModelFormatError(f"{len(body) - declared} trailing bytes after payload")
    shapes = fields["layout"]["shapes"]
    if len(shapes) != fields["counts"]["arrays"]:
        raise ModelFormatError("array count does not match layout")
    arrays, pos = [], 0
    for shape in shapes:
        a, pos = _decode_array(body, pos, tuple(shape))
        arrays.append(a)
    try:
        model = compose(fields["layout"]["doc"], arrays, fields["meta"])
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"layout does not describe a model: {exc}") from None
    if check:
        problems = validate(model)
        if problems:
            raise ModelFormatError("model fails validation: " + "; ".join(problems[:5]))
    return model


def save_model(model: PoseModel, path: str | Path) -> None:
    """Write atomically: the file appears complete or not at all."""
    data = serialize(model)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_model(path: str | Path, check: bool = True) -> PoseModel:
    return deserialize(Path(path).read_bytes(), check)


# ----------------------------------------------------------------------------------------
# text export


def _fmt(v: float) -> str:
    return "-inf" if v == -math.inf else repr(float(v))


def to_text(model: PoseModel) -> str:
    """Lossless, diff-friendly rendering: header lines, then one line per array."""
    doc, arrays = decompose(model)
    head = _header(model, doc, arrays, 0).decode("ascii")
    head = head.replace(" payload 0", "", 1)
    body = [f"array {i} {'x'.join(map(str, a.shape)) or 'scalar'}: " + " ".join(_fmt(v) for v in a.reshape(-1))
            for i, a in enumerate(arrays)]
    return head + "\n".join(body) + "\n"


def from_text(text: str) -> PoseModel:
    lines = text.splitlines()
    major, _ = _parse_version(lines[0])
    if major != VERSION[0]:
        raise ModelVersionError(f"model format version {major} not supported")
    layout = meta = None
    arrays: dict[int, np.ndarray] = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "layout":
            layout = json.loads(rest)
        elif key == "meta":
            meta = json.loads(rest)
        elif key == "array":
            head, _, vals = rest.partition(":")
            idx = int(head.split()[0])
            arrays[idx] = np.array([float(v) for v in vals.split()], dtype=np.float64)
    if layout is None or meta is None:
        raise ModelFormatError("text export misses layout or meta")
    shaped = [arrays[i].reshape(tuple(s)) for i, s in enumerate(layout["shapes"])]
    return compose(layout["doc"], shaped, meta)
