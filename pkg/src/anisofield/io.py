"""Persistence of field grids: CSV with '#' metadata, PGM heatmap, JSON sidecar.

CSV and PGM bytes depend only on the field and the config hash, so repeated
runs are byte-identical; the wall-clock timestamp lives in the JSON sidecar
only.
"""
import datetime
import hashlib
import json
import math
import os

import numpy as np

from .lepage import FieldGrid

FORMAT_TAG = "anisofield-field v1"


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(config):
    """SHA-256 of the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _grid_header(field, chash):
    grid = {"box": field.box.tolist(), "resolution": list(field.resolution)}
    return [
        f"# {FORMAT_TAG}",
        f"# config_hash: {chash}",
        f"# grid: {canonical_json(grid)}",
        f"# metadata: {canonical_json(field.metadata)}",
    ]


def field_csv_text(field, chash=""):
    d = field.d
    idx = np.indices(field.resolution).reshape(d, -1).T
    coords = field.points
    lines = _grid_header(field, chash)
    lines.append(",".join([f"i{j}" for j in range(d)] + [f"u{j}" for j in range(d)] + ["re", "im"]))
    for i, u, v in zip(idx, coords, field.values):
        lines.append(",".join([str(int(k)) for k in i] + [repr(float(c)) for c in u]
                              + [repr(float(v.real)), repr(float(v.imag))]))
    return "\n".join(lines) + "\n"


def write_field_csv(field, path, chash=""):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(field_csv_text(field, chash))


def read_field_csv(path):
    """Read a grid written by :func:`write_field_csv`; ValueError on malformed input."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    meta, grid, chash = {}, None, ""
    body = []
    for line in lines:
        if line.startswith("# grid: "):
            grid = json.loads(line[len("# grid: "):])
        elif line.startswith("# metadata: "):
            meta = json.loads(line[len("# metadata: "):])
        elif line.startswith("# config_hash: "):
            chash = line[len("# config_hash: "):]
        elif line.startswith("#"):
            continue
        elif line.strip():
            body.append(line)
    if grid is None or not body:
        raise ValueError(f"{path}: not an anisofield field CSV")
    res = tuple(int(r) for r in grid["resolution"])
    d = len(res)
    header = body[0].split(",")
    expected = [f"i{j}" for j in range(d)] + [f"u{j}" for j in range(d)] + ["re", "im"]
    if header != expected:
        raise ValueError(f"{path}: unexpected columns {header}")
    rows = body[1:]
    if len(rows) != int(np.prod(res)):
        raise ValueError(f"{path}: expected {int(np.prod(res))} rows, found {len(rows)}")
    vals = np.empty(len(rows), dtype=np.complex128)
    flat = np.ravel_multi_index(np.indices(res).reshape(d, -1), res)
    for r, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != len(expected):
            raise ValueError(f"{path}: malformed row {r + 1}")
        idx = tuple(int(p) for p in parts[:d])
        k = np.ravel_multi_index(idx, res)
        if k != flat[r]:
            raise ValueError(f"{path}: rows out of order at row {r + 1}")
        vals[k] = complex(float(parts[-2]), float(parts[-1]))
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{path}: non-finite field values")
    field = FieldGrid(np.asarray(grid["box"], dtype=np.float64), res, vals, meta)
    field.metadata.setdefault("config_hash", chash)
    return field


def pgm_bytes(field, chash=""):
    """8-bit binary PGM of ``|S|`` with linear min-max scaling (recorded in a comment).

    Two-dimensional grids map axis 0 to rows; 1-D grids give a single row;
    higher dimensions are flattened to rows of the last axis.
    """
    mag = np.abs(field.array())
    if mag.ndim == 1:
        mag = mag[None, :]
    elif mag.ndim > 2:
        mag = mag.reshape(-1, mag.shape[-1])
    lo, hi = float(mag.min()), float(mag.max())
    span = hi - lo
    if span > 0:
        img = np.floor(255.0 * (mag - lo) / span + 0.5)
    else:
        img = np.zeros_like(mag)
    img = np.clip(img, 0, 255).astype(np.uint8)
    h, w = img.shape
    header = (f"P5\n# {FORMAT_TAG} |S| linear min={lo!r} max={hi!r} config_hash={chash}\n"
              f"{w} {h}\n255\n")
    return header.encode("ascii") + img.tobytes()


def write_pgm(field, path, chash=""):
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(field, chash))


def read_pgm(path):
    """Return ``(image, comments)`` of a binary PGM."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    img = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if img.size != w * h or maxval != 255:
        raise ValueError(f"{path}: truncated or unsupported PGM")
    return img.reshape(h, w), comments


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def timestamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_field(field, out_dir, prefix, config, chash):
    """CSV + PGM + JSON sidecar; returns the three paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{prefix}.csv")
    pgm_path = os.path.join(out_dir, f"{prefix}.pgm")
    json_path = os.path.join(out_dir, f"{prefix}.json")
    write_field_csv(field, csv_path, chash)
    write_pgm(field, pgm_path, chash)
    write_json({
        "config_hash": chash,
        "config": config,
        "grid": {"box": field.box.tolist(), "resolution": list(field.resolution)},
        "metadata": field.metadata,
        "checksums": {"csv": file_sha256(csv_path), "pgm": file_sha256(pgm_path)},
        "timestamp": timestamp(),
    }, json_path)
    return csv_path, pgm_path, json_path
