"""
On-disk formats.

* model description: JSON with ``nodes``, ``edges`` and a pointer to a weights
  manifest; formats are strings such as ``"s16.6"``.
* weights bundle: JSON manifest ``{"payload": ..., "blobs": {name: {shape,
  dtype, offset}}}`` plus one little-endian float32 payload file.
* images: binary PPM (P6) or raw uint8 ``.bin`` with a JSON sidecar
  ``{"shape": [C, H, W], "dtype": "uint8"}``; label maps: PGM (P5) or raw.
* tensors written by ``run``: raw little-endian data plus a JSON sidecar.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .fixed_point import FxTensor, format_string, parse_format
from .model_ir import INPUT_FMT, Kind, ModelGraph, Node

RAW_SUFFIXES = (".bin", ".raw")


class FormatError(ValueError):
    pass


# -- weights bundle ---------------------------------------------------------------

def write_weights(manifest_path, blobs: dict[str, np.ndarray]) -> None:
    manifest_path = Path(manifest_path)
    payload = manifest_path.with_suffix(".bin")
    entries = {}
    offset = 0
    with open(payload, "wb") as fh:
        for name, arr in blobs.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries[name] = {"shape": list(data.shape), "dtype": "float32", "offset": offset}
            offset += data.nbytes
    manifest = {"payload": payload.name, "blobs": entries}
    manifest_path.write_text(json.dumps(manifest, indent=1))


def read_weights(manifest_path) -> dict[str, np.ndarray]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    blobs = {}
    spans = []
    for name, e in manifest["blobs"].items():
        if e.get("dtype", "float32") != "float32":
            raise FormatError(f"blob {name}: only float32 weights are supported")
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, end = int(e["offset"]), int(e["offset"]) + 4 * count
        if end > len(payload):
            raise FormatError(f"blob {name} runs past the end of {manifest['payload']}")
        spans.append((start, end, name))
        blobs[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(e["shape"]).astype(np.float64)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"blobs {n0} and {n1} overlap")
    return blobs


# -- model description ------------------------------------------------------------

def model_to_dict(graph: ModelGraph, weights_name: str) -> dict:
    nodes = []
    for n in graph.nodes:
        d = {"id": n.id, "kind": n.kind.value}
        if n.kind in (Kind.CONV, Kind.MAXPOOL, Kind.UPSAMPLE):
            d["kernel"] = n.kernel
        if n.kind == Kind.CONV:
            d["filters"] = n.filters
            d["weights"] = f"{n.id}.w"
            d["bias"] = f"{n.id}.b"
        if n.kind == Kind.SPATIAL_PAD:
            d["pad"] = n.pad
        if n.kind == Kind.CHANNEL_PAD:
            d["channels"] = n.channels
        for key in ("weight_fmt", "bias_fmt", "out_fmt"):
            fmt = getattr(n, key)
            if fmt is not None:
                d[key] = format_string(fmt)
        nodes.append(d)
    return {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "weights": weights_name,
        "nodes": nodes,
        "edges": [list(e) for e in graph.edges],
        "blocks": [list(b) for b in graph.blocks],
    }


def save_model(graph: ModelGraph, path, extra: dict | None = None) -> Path:
    """Write ``path`` (model JSON) plus ``<stem>.weights.json`` / ``.weights.bin``."""
    path = Path(path)
    manifest = path.with_name(path.stem + ".weights.json")
    blobs = {}
    for n in graph.find(Kind.CONV):
        blobs[f"{n.id}.w"] = n.weights
        blobs[f"{n.id}.b"] = n.bias
    write_weights(manifest, blobs)
    doc = model_to_dict(graph, manifest.name)
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_model_doc(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None


def load_model(path) -> ModelGraph:
    path = Path(path)
    doc = load_model_doc(path)
    blobs = read_weights(path.parent / doc["weights"]) if doc.get("weights") else {}
    nodes = []
    for d in doc["nodes"]:
        try:
            kind = Kind(d["kind"])
        except ValueError:
            raise FormatError(f"node {d.get('id')}: unknown kind {d.get('kind')!r}") from None
        fmts = {k: parse_format(d[k]) for k in ("weight_fmt", "bias_fmt", "out_fmt") if k in d}
        if kind == Kind.INPUT and "out_fmt" not in fmts:
            fmts["out_fmt"] = INPUT_FMT
        w = b = None
        if kind == Kind.CONV:
            try:
                w, b = blobs[d["weights"]], blobs[d["bias"]]
            except KeyError as exc:
                raise FormatError(f"node {d['id']}: weight blob {exc} not in bundle") from None
        nodes.append(Node(d["id"], kind, kernel=int(d.get("kernel", 1)),
                          filters=int(d.get("filters", 0)), pad=int(d.get("pad", 0)),
                          channels=int(d.get("channels", 0)), weights=w, bias=b, **fmts))
    return ModelGraph(nodes, [tuple(e) for e in doc["edges"]], tuple(doc["input_shape"]),
                      doc.get("name", path.stem), [tuple(b) for b in doc.get("blocks", [])])


# -- images and tensors ---------------------------------------------------

def _sidecar(path: Path) -> dict:
    side = path.with_suffix(path.suffix + ".json")
    if not side.exists():
        side = path.with_suffix(".json")
    if not side.exists():
        raise FormatError(f"{path}: raw data needs a JSON sidecar with shape and dtype")
    return json.loads(side.read_text())


def read_image(path) -> np.ndarray:
    """8-bit RGB image as a (3, H, W) uint8 array."""
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        meta = _sidecar(path)
        if meta.get("dtype", "uint8") != "uint8":
            raise FormatError(f"{path}: images must be uint8")
        data = np.fromfile(path, dtype=np.uint8)
        shape = tuple(meta["shape"])
        if data.size != int(np.prod(shape)):
            raise FormatError(f"{path}: {data.size} bytes do not match shape {shape}")
        return data.reshape(shape)
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected an RGB image, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8).transpose(1, 2, 0), "RGB").save(path, format="PPM")


def read_labels(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        meta = _sidecar(path)
        data = np.fromfile(path, dtype=np.dtype(meta.get("dtype", "uint8")))
        return data.reshape(tuple(meta["shape"])).astype(np.int64)
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise FormatError(f"{path}: expected an 8-bit grayscale label map, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), "L").save(path, format="PPM")


def preprocess(image: np.ndarray, expected_shape=None) -> FxTensor:
    """uint8 pixels v -> v/256 held exactly in u8.0 (mantissa = v)."""
    image = np.asarray(image)
    if expected_shape is not None and tuple(image.shape) != tuple(expected_shape):
        raise FormatError(f"image shape {tuple(image.shape)} != model input {tuple(expected_shape)}")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise FormatError("pixel values must lie in [0, 255]")
    return FxTensor(image.astype(np.int64), INPUT_FMT)


def write_tensor(path, tensor) -> None:
    """Raw little-endian data (int32 mantissas or float32 values) plus sidecar."""
    path = Path(path)
    if isinstance(tensor, FxTensor):
        data = tensor.mantissas.astype("<i4")
        meta = {"shape": list(tensor.shape), "dtype": "int32", "format": format_string(tensor.fmt)}
    else:
        data = np.asarray(tensor, dtype="<f4")
        meta = {"shape": list(data.shape), "dtype": "float32"}
    path.write_bytes(data.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def read_tensor(path):
    path = Path(path)
    meta = _sidecar(path)
    if meta["dtype"] == "int32":
        m = np.frombuffer(path.read_bytes(), dtype="<i4").reshape(meta["shape"]).astype(np.int64)
        return FxTensor(m, parse_format(meta["format"]))
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"]).astype(np.float64)
