"""Binary tensor and checkpoint files, dataset manifests, synthetic pairs.

Tensor file (little-endian)::

    b"CVTF" | u16 version | u8 ndims | u32 dims[ndims] | u8 dtype | payload

``dtype`` is 1 for float32 and 2 for float64; the payload is row-major.

Checkpoint file (little-endian)::

    b"CVFT" | u16 version | records...
    record: u16 name_len | name (utf-8) | u8 ndims | u32 dims[ndims] | f64 payload

Records run to end of file.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidPermutation, ValidationError

TENSOR_MAGIC = b"CVTF"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"CVFT"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1

# truncation of the ground noise, in standard deviations; held just inside 4 so
# that (aerial + noise) - aerial stays within 4 sigma after f64 rounding
NOISE_CLIP = 4.0 * (1.0 - 1e-9)

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _write_atomic(path: Path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def encode_tensor(a: np.ndarray, dtype="float64") -> bytes:
    a = np.asarray(a)
    dt = np.dtype(dtype)
    if dt not in _CODES:
        raise ValidationError(f"unsupported dtype {dt}")
    if a.ndim > 255 or any(d > 0xFFFFFFFF for d in a.shape):
        raise ValidationError("tensor too large for the file format")
    head = TENSOR_MAGIC + struct.pack("<HB", TENSOR_VERSION, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<B", _CODES[dt])
    return head + np.ascontiguousarray(a, dtype=dt.newbyteorder("<")).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 7 or blob[:4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: not a tensor file (bad magic)")
    version, ndims = struct.unpack_from("<HB", blob, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{source}: unsupported tensor version {version}")
    at = 7
    if len(blob) < at + 4 * ndims + 1:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndims}I", blob, at)
    at += 4 * ndims
    code = blob[at]
    at += 1
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - at != count * dt.itemsize:
        raise FormatError(f"{source}: payload is {len(blob) - at} bytes, "
                          f"expected {count * dt.itemsize}")
    return np.frombuffer(blob, dtype=dt, count=count, offset=at).astype(np.float64).reshape(dims)


def save_tensor(path, a: np.ndarray, dtype="float64") -> None:
    _write_atomic(Path(path), encode_tensor(a, dtype))


def load_tensor(path) -> np.ndarray:
    """Read a tensor file; float32 payloads are promoted to float64."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    return decode_tensor(blob, str(path))


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name in sorted(tensors):
        a = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(blob) < 6 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    out, at = {}, 6
    try:
        while at < len(blob):
            (ln,) = struct.unpack_from("<H", blob, at)
            at += 2
            name = blob[at:at + ln].decode("utf-8")
            at += ln
            (ndims,) = struct.unpack_from("<B", blob, at)
            at += 1
            dims = struct.unpack_from(f"<{ndims}I", blob, at)
            at += 4 * ndims
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if at + nbytes > len(blob):
                raise FormatError(f"{source}: truncated record {name!r}")
            out[name] = np.frombuffer(blob, "<f8", nbytes // 8, at).astype(np.float64).reshape(dims)
            at += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint ({exc})") from exc
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    _write_atomic(Path(path), encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(blob, str(path))


# ---------------------------------------------------------------------------
# manifests

@dataclass
class PairRecord:
    id: str
    ground_path: str
    aerial_path: str
    geo_tag: tuple[float, float] | None = None
    oracle_permutation: list[int] | None = None


@dataclass
class DatasetManifest:
    pairs: list[PairRecord]
    splits: dict[str, list[str]] = field(default_factory=dict)
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate(check_files=False)

    def validate(self, check_files: bool = True) -> None:
        seen = set()
        for p in self.pairs:
            if p.id in seen:
                raise ValidationError(f"duplicate pair id {p.id!r}")
            seen.add(p.id)
            if p.oracle_permutation is not None:
                perm = list(p.oracle_permutation)
                if sorted(perm) != list(range(len(perm))):
                    raise InvalidPermutation(f"pair {p.id!r}: oracle_permutation is not a permutation")
            if p.geo_tag is not None and len(p.geo_tag) != 2:
                raise ValidationError(f"pair {p.id!r}: geo_tag must be [x_m, y_m]")
            if check_files:
                for rel in (p.ground_path, p.aerial_path):
                    if not (self.root / rel).is_file():
                        raise ValidationError(f"pair {p.id!r}: missing file {rel}")
        for name, ids in self.splits.items():
            missing = [i for i in ids if i not in seen]
            if missing:
                raise ValidationError(f"split {name!r} names unknown id {missing[0]!r}")

    def select(self, split: str | None) -> list[PairRecord]:
        if split is None or split == "all":
            return list(self.pairs)
        if split not in self.splits:
            raise ValidationError(f"manifest has no split {split!r}")
        wanted = set(self.splits[split])
        return [p for p in self.pairs if p.id in wanted]

    def load_arrays(self, split: str | None = None):
        """Stack ground and aerial inputs of a split: ``(N, H, W, C)`` each."""
        recs = self.select(split)
        if not recs:
            raise ValidationError(f"split {split!r} is empty")
        g = np.stack([load_tensor(self.root / p.ground_path) for p in recs])
        a = np.stack([load_tensor(self.root / p.aerial_path) for p in recs])
        return g, a, recs

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "meta": self.meta,
            "pairs": [
                {
                    "id": p.id,
                    "ground_path": p.ground_path,
                    "aerial_path": p.aerial_path,
                    **({"geo_tag": list(p.geo_tag)} if p.geo_tag is not None else {}),
                    **({"oracle_permutation": list(p.oracle_permutation)}
                       if p.oracle_permutation is not None else {}),
                }
                for p in self.pairs
            ],
            "splits": self.splits,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def save_manifest(path, manifest: DatasetManifest) -> None:
    _write_atomic(Path(path), manifest.to_json().encode("utf-8"))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        pairs = [
            PairRecord(
                str(d["id"]), d["ground_path"], d["aerial_path"],
                tuple(d["geo_tag"]) if d.get("geo_tag") is not None else None,
                d.get("oracle_permutation"),
            )
            for d in doc["pairs"]
        ]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed pair entry ({exc})") from exc
    m = DatasetManifest(pairs, doc.get("splits", {}), path.parent, doc.get("meta", {}))
    m.validate(check_files)
    return m


# ---------------------------------------------------------------------------
# synthetic data

def block_permute(image: np.ndarray, perm: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Rearrange an image's blocks so that output block ``j`` is input block ``perm[j]``.

    Blocks are numbered row-major on a ``grid[0] x grid[1]`` lattice.
    """
    H, W, C = image.shape
    gh, gw = grid
    bh, bw = H // gh, W // gw
    blocks = image.reshape(gh, bh, gw, bw, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, bh, bw, C)
    out = blocks[np.asarray(perm)]
    return out.reshape(gh, gw, bh, bw, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)


def permutation_plan(perm) -> np.ndarray:
    """Plan ``P`` with ``(P @ ground)[perm[j]] = ground[j]``; undoes :func:`block_permute`."""
    perm = np.asarray(perm)
    P = np.zeros((perm.size, perm.size))
    P[perm, np.arange(perm.size)] = 1.0
    return P


def jittered_tags(count: int, rng: np.random.Generator, spacing: float = 100.0,
                  jitter: float = 20.0) -> np.ndarray:
    """Planar tags on a jittered square lattice; min spacing is ``spacing - 2*jitter``."""
    side = int(np.ceil(np.sqrt(count)))
    ij = np.array([(k // side, k % side) for k in range(count)], dtype=np.float64)
    return ij * spacing + rng.uniform(-jitter, jitter, size=(count, 2))


def generate_synthetic(out_dir, count: int = 200, input_shape=(32, 32, 3), feature_shape=(8, 8),
                       noise_sigma: float = 0.05, seed: int = 0,
                       mode: str = "fixed-permutation", permutation_seed: int | None = None,
                       val_fraction: float = 0.1, smooth: int = 4,
                       dtype: str = "float64") -> DatasetManifest:
    """Write a synthetic cross-view dataset and return its manifest.

    Aerial inputs are seeded Gaussian fields (averaged over ``smooth x smooth``
    pixel tiles when ``smooth > 1``, rescaled to unit variance).  Each ground
    input is the aerial image with its ``feature_shape`` lattice of blocks
    permuted, plus Gaussian noise truncated at four standard deviations.  In
    ``fixed-permutation`` mode one permutation, drawn from
    ``permutation_seed`` (default ``seed``), is shared by every pair.
    """
    if mode not in ("fixed-permutation", "per-pair-permutation"):
        raise ValidationError(f"unknown mode {mode!r}")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be nonnegative")
    if count < 1:
        raise ValidationError("count must be positive")
    H, W, C = (int(v) for v in input_shape)
    gh, gw = (int(v) for v in feature_shape[:2])
    if H % gh or W % gw:
        raise ValidationError(f"input {H}x{W} does not split into a {gh}x{gw} block lattice")
    if smooth < 1 or H % smooth or W % smooth:
        raise ValidationError(f"smooth={smooth} must divide the input size")
    n = gh * gw
    out = Path(out_dir)
    (out / "ground").mkdir(parents=True, exist_ok=True)
    (out / "aerial").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    perm_rng = np.random.default_rng(seed if permutation_seed is None else permutation_seed)
    shared = perm_rng.permutation(n)
    tags = jittered_tags(count, rng)
    pairs = []
    for k in range(count):
        base = rng.standard_normal((H // smooth, W // smooth, C))
        aerial = np.repeat(np.repeat(base, smooth, axis=0), smooth, axis=1)
        perm = shared if mode == "fixed-permutation" else rng.permutation(n)
        noise = np.clip(rng.standard_normal((H, W, C)), -NOISE_CLIP, NOISE_CLIP) * noise_sigma
        ground = block_permute(aerial, perm, (gh, gw)) + noise
        pid = f"{k:05d}"
        save_tensor(out / "ground" / f"{pid}.cvtf", ground, dtype)
        save_tensor(out / "aerial" / f"{pid}.cvtf", aerial, dtype)
        pairs.append(PairRecord(pid, f"ground/{pid}.cvtf", f"aerial/{pid}.cvtf",
                                (float(tags[k, 0]), float(tags[k, 1])), [int(v) for v in perm]))
    order = np.random.default_rng([seed, 1]).permutation(count)
    n_val = int(round(val_fraction * count))
    val_ids = sorted(pairs[i].id for i in order[:n_val])
    splits = {"train": sorted(pairs[i].id for i in order[n_val:]), "val": val_ids}
    meta = {"generator": {"count": count, "input_shape": [H, W, C], "feature_shape": [gh, gw],
                          "noise_sigma": noise_sigma, "seed": seed, "mode": mode,
                          "permutation_seed": permutation_seed, "val_fraction": val_fraction,
                          "smooth": smooth, "dtype": dtype}}
    manifest = DatasetManifest(pairs, splits, out, meta)
    save_manifest(out / "manifest.json", manifest)
    return manifest
