"""Exact, byte-stable JSON encoding of numpy arrays."""

import base64
import json

import numpy as np


def encode_array(arr) -> dict:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
        dtype = "float64"
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i8")
        dtype = "int64"
    else:
        raise TypeError(f"cannot encode dtype {arr.dtype}")
    payload = base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")
    return {"dtype": dtype, "shape": list(arr.shape), "data": payload}


def decode_array(obj) -> np.ndarray:
    dtype = {"float64": "<f8", "int64": "<i8"}[obj["dtype"]]
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=dtype).reshape(obj["shape"])
    return arr.astype(np.float64 if obj["dtype"] == "float64" else np.int64)


def dump_json(path, obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
