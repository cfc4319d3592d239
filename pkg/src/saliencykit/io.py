"""Binary PGM images, saliency exports and scene datasets on disk."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .attribution import SaliencyMap


class PGMError(ValueError):
    pass


def _header_tokens(data, count):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise PGMError(f"truncated header at byte offset {pos}")
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append((data[start:pos], start))
    if pos >= n:
        raise PGMError(f"missing payload after header at byte offset {pos}")
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def parse_pgm(data, source="<bytes>"):
    if len(data) == 0:
        raise PGMError(f"{source}: empty file at byte offset 0")
    if data[:2] != b"P5":
        raise PGMError(f"{source}: not a binary PGM (magic {bytes(data[:2])!r}) at byte offset 0")
    tokens, pos = _header_tokens(data, 4)
    vals = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise PGMError(f"{source}: bad header field {tok!r} at byte offset {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if w < 1 or h < 1:
        raise PGMError(f"{source}: image size {w}x{h} at byte offset {tokens[1][1]} must be positive")
    if not 1 <= maxval <= 65535:
        raise PGMError(f"{source}: maxval {maxval} at byte offset {tokens[3][1]} out of range")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise PGMError(
            f"{source}: truncated payload at byte offset {len(data)}, expected {need} bytes from offset {pos}"
        )
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return raw.astype(np.float64) / maxval


def read_pgm(path):
    """Read a P5 PGM as a ``(1, H, W)`` float array scaled to ``[0, 1]``."""
    path = Path(path)
    return parse_pgm(path.read_bytes(), str(path))[None]


def encode_pgm(image, maxval=65535):
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise PGMError(f"PGM holds one 2-D channel, got shape {np.shape(image)}")
    if not np.all(np.isfinite(a)) or a.min(initial=0) < 0 or a.max(initial=0) > 1:
        raise PGMError("PGM pixel values must lie in [0, 1]")
    q = np.rint(a * maxval)
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    return f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode() + payload


def write_pgm(image, path, maxval=65535):
    Path(path).write_bytes(encode_pgm(image, maxval))


# ---------------------------------------------------------------------------
# saliency exports


def normalize(values):
    """Min-max scale to ``[0, 1]``; constant maps become all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def write_raw_map(values, path):
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.17g")


def read_raw_map(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def export_saliency(saliency, path_stem, image=None, config=None):
    """Write ``<stem>.csv`` (raw), ``<stem>.pgm`` (normalized), ``<stem>.json``
    (metadata) and, when ``image`` is given, ``<stem>_overlay.pgm``.

    The overlay is ``0.5 * image + 0.5 * normalized_map``. Returns the paths.
    """
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot export a map with non-finite values")
    paths = {"raw": stem.with_suffix(".csv"), "normalized": stem.with_suffix(".pgm")}
    write_raw_map(values, paths["raw"])
    norm = normalize(values)
    write_pgm(norm, paths["normalized"])
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        img = img[0] if img.ndim == 3 else img
        if img.shape != norm.shape:
            raise ValueError(f"overlay image shape {img.shape} differs from map shape {norm.shape}")
        paths["overlay"] = stem.parent / f"{stem.name}_overlay.pgm"
        write_pgm(0.5 * img + 0.5 * norm, paths["overlay"])
    meta = dict(config or {})
    if isinstance(saliency, SaliencyMap):
        meta.update(
            method=saliency.method,
            class_index=saliency.class_index,
            native_resolution=saliency.native_resolution,
            width=saliency.width,
            height=saliency.height,
            method_config=saliency.config,
        )
        if saliency.coarse is not None:
            paths["coarse"] = stem.parent / f"{stem.name}_coarse.csv"
            write_raw_map(saliency.coarse, paths["coarse"])
    paths["meta"] = stem.with_suffix(".json")
    paths["meta"].write_text(json.dumps(meta, indent=2, default=str))
    return paths


# ---------------------------------------------------------------------------
# scene datasets

MANIFEST_FIELDS = ("id", "split", "class", "seed", "object_count", "contrast", "distractors", "noise_sigma", "size")


def write_scenes(scenes, directory, split):
    """Write images, union masks and per-object masks; return manifest rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for scene in scenes:
        sid = f"{split}-{scene.spec.class_label}-{scene.spec.seed}"
        write_pgm(scene.image, directory / f"{sid}.pgm")
        write_pgm(scene.union_mask.astype(float), directory / f"{sid}_mask.pgm", maxval=255)
        for k, m in enumerate(scene.masks):
            write_pgm(m.astype(float), directory / f"{sid}_mask{k}.pgm", maxval=255)
        s = scene.spec
        rows.append((sid, split, s.class_label, s.seed, s.object_count, repr(s.contrast), s.distractors, repr(s.noise_sigma), s.size))
    return rows


def write_manifest(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)


def read_manifest(path):
    """Parse a manifest into ``(row_dict, SceneSpec)`` pairs."""
    from .scenes import SceneSpec

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            spec = SceneSpec(
                row["class"], int(row["object_count"]), float(row["contrast"]), int(row["distractors"]),
                float(row["noise_sigma"]), int(row["seed"]), int(row["size"]),
            )
            out.append((row, spec))
    return out
