"""Binary tensor file format and prediction-bundle loading.

File layout (little-endian): magic ``PPDL``, u16 format version (=1), u8
dtype code, u8 rank, one u64 per dimension, then the row-major payload.
Dtype codes: 0=f32, 1=f64, 2=i32, 3=u8. Rank is limited to 4.

A bundle directory holds one ``bundle.manifest`` (UTF-8 ``key=value`` lines)
naming the component tensor files; see README for the key set.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    MissingComponent,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedRank,
    UnsupportedVersion,
)
from .spatial import GAUSSIAN, POINT, SAMPLES, OffsetField

MAGIC = b"PPDL"
FORMAT_VERSION = 1
MANIFEST_NAME = "bundle.manifest"

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int32): 2,
    np.dtype(np.uint8): 3,
}
_CODE_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "u1"}
MAX_RANK = 4


def write_tensor(tensor: np.ndarray, path) -> None:
    """Write a tensor in the PPDL format; read_tensor inverts it bit-exactly."""
    tensor = np.asarray(tensor)
    code = _DTYPE_CODES.get(tensor.dtype)
    if code is None:
        raise UnsupportedDtype(f"unsupported dtype {tensor.dtype}; use f32/f64/i32/u8")
    if not 1 <= tensor.ndim <= MAX_RANK:
        raise UnsupportedRank(f"unsupported rank {tensor.ndim}; must be 1..{MAX_RANK}")
    if min(tensor.shape) < 1:
        raise InvariantViolation(f"dimensions must be >= 1, got shape {tensor.shape}")
    payload = np.ascontiguousarray(tensor).astype(_CODE_DTYPES[code], copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHBB", MAGIC, FORMAT_VERSION, code, tensor.ndim))
        f.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        f.write(payload)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise TruncatedPayload(f"{path}: file shorter than the 8-byte header")
        magic, version, code, rank = struct.unpack("<4sHBB", header)
        if magic != MAGIC:
            raise BadMagic(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"{path}: unsupported format version {version}")
        if code not in _CODE_DTYPES:
            raise UnsupportedDtype(f"{path}: unknown dtype code {code}")
        if not 1 <= rank <= MAX_RANK:
            raise UnsupportedRank(f"{path}: unsupported rank {rank}")
        dims_raw = f.read(8 * rank)
        if len(dims_raw) < 8 * rank:
            raise TruncatedPayload(f"{path}: header declares rank {rank} but dims are missing")
        shape = struct.unpack(f"<{rank}Q", dims_raw)
        if min(shape) < 1:
            raise InvariantViolation(f"{path}: dimensions must be >= 1, got {shape}")
        dtype = np.dtype(_CODE_DTYPES[code])
        expected = int(np.prod(shape)) * dtype.itemsize
        payload = f.read()
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload is {len(payload)} bytes but the header declares {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


@dataclass(frozen=True)
class GroundTruth:
    """Panoptic ground truth: per-pixel (class id, instance id), instance 0
    marking stuff pixels."""

    panoptic: np.ndarray  # (H, W, 2) i32

    @property
    def semantic(self) -> np.ndarray:
        return self.panoptic[..., 0]

    @property
    def instances(self) -> np.ndarray:
        return self.panoptic[..., 1]

    @property
    def shape(self) -> tuple:
        return self.panoptic.shape[:2]


@dataclass(frozen=True)
class PredictionBundle:
    """One image's predictions plus the metadata needed to decode them."""

    semantic_kind: str  # "logits" | "dirichlet" (dirichlet stores alpha >= 1)
    semantic: np.ndarray  # (H, W, C)
    center_heatmap: np.ndarray  # (H, W) in [0, 1]
    offsets: OffsetField
    thing_class_ids: frozenset
    ignore_label: int
    temperature: float = 1.0

    @property
    def shape(self) -> tuple:
        return self.semantic.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.semantic.shape[-1]

    @property
    def height(self) -> int:
        return self.semantic.shape[0]

    @property
    def width(self) -> int:
        return self.semantic.shape[1]


def validate_bundle(bundle: PredictionBundle, gt: GroundTruth | None = None) -> None:
    """Check every bundle invariant; raises ShapeMismatch or InvariantViolation."""
    sem = bundle.semantic
    if sem.ndim != 3:
        raise ShapeMismatch(f"semantic must be (H, W, C), got {sem.shape}")
    h, w, c = sem.shape
    if bundle.semantic_kind not in ("logits", "dirichlet"):
        raise InvariantViolation(f"unknown semantic_kind {bundle.semantic_kind!r}")
    if not np.all(np.isfinite(sem)):
        raise InvariantViolation("semantic tensor contains non-finite values")
    if bundle.semantic_kind == "dirichlet" and np.any(sem < 1.0):
        raise InvariantViolation("dirichlet semantic tensor must hold alpha >= 1")
    if bundle.center_heatmap.shape != (h, w):
        raise ShapeMismatch(
            f"center_heatmap shape {bundle.center_heatmap.shape} disagrees with semantic {(h, w)}"
        )
    if not np.all((bundle.center_heatmap >= 0.0) & (bundle.center_heatmap <= 1.0)):
        raise InvariantViolation("center_heatmap values must lie in [0, 1]")
    if bundle.offsets.spatial_shape != (h, w):
        raise ShapeMismatch(
            f"offsets shape {bundle.offsets.spatial_shape} disagrees with semantic {(h, w)}"
        )
    if not bundle.temperature > 0.0:
        raise InvariantViolation("temperature must be positive")
    for t in bundle.thing_class_ids:
        if not 0 <= t < c:
            raise InvariantViolation(f"thing class id {t} outside [0, {c})")
    if gt is not None:
        if gt.panoptic.ndim != 3 or gt.panoptic.shape[-1] != 2:
            raise ShapeMismatch(f"gt panoptic must be (H, W, 2), got {gt.panoptic.shape}")
        if gt.shape != (h, w):
            raise ShapeMismatch(f"gt panoptic shape {gt.shape} disagrees with semantic {(h, w)}")
        classes = gt.semantic
        ok = ((classes >= 0) & (classes < c)) | (classes == bundle.ignore_label)
        if not np.all(ok):
            raise InvariantViolation(f"gt classes outside [0, {c}) and not ignore_label")
        thing = np.isin(classes, sorted(bundle.thing_class_ids))
        if np.any(thing & (gt.instances <= 0)):
            raise InvariantViolation("thing pixels must carry instance id > 0")
        if np.any(~thing & (gt.instances != 0)):
            raise InvariantViolation("stuff pixels must carry instance id 0")


def _parse_manifest(path: Path) -> dict:
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvariantViolation(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in entries:
            raise InvariantViolation(f"{path}: ambiguous manifest, key {key!r} given twice")
        entries[key] = value.strip()
    return entries


def _manifest_tensor(directory: Path, entries: dict, key: str) -> np.ndarray:
    if key not in entries:
        raise MissingComponent(f"{directory}: manifest lacks required key {key!r}")
    file = directory / entries[key]
    if not file.exists():
        raise MissingComponent(f"{directory}: component file {entries[key]!r} not found")
    return read_tensor(file)


def load_bundle(directory) -> tuple:
    """Load and validate (PredictionBundle, GroundTruth) from a bundle directory."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise MissingComponent(f"{directory}: no {MANIFEST_NAME}")
    entries = _parse_manifest(manifest)

    for key in ("semantic_kind", "offsets_kind", "thing_ids", "ignore_label"):
        if key not in entries:
            raise MissingComponent(f"{directory}: manifest lacks required key {key!r}")
    semantic_kind = entries["semantic_kind"]
    if semantic_kind not in ("logits", "dirichlet"):
        raise InvariantViolation(f"{directory}: semantic_kind must be logits|dirichlet")
    offsets_kind = entries["offsets_kind"]
    if offsets_kind not in (POINT, GAUSSIAN, SAMPLES):
        raise InvariantViolation(f"{directory}: offsets_kind must be point|gaussian|samples")

    semantic = _manifest_tensor(directory, entries, "semantic").astype(np.float64)
    heatmap = _manifest_tensor(directory, entries, "heatmap").astype(np.float64)
    offsets_raw = _manifest_tensor(directory, entries, "offsets").astype(np.float64)
    gt_panoptic = _manifest_tensor(directory, entries, "gt_panoptic")

    if offsets_kind == POINT:
        if offsets_raw.ndim != 3 or offsets_raw.shape[-1] != 2:
            raise ShapeMismatch(f"{directory}: point offsets must be (H, W, 2), got {offsets_raw.shape}")
        offsets = OffsetField.point(offsets_raw)
    elif offsets_kind == GAUSSIAN:
        if offsets_raw.ndim != 3 or offsets_raw.shape[-1] != 4:
            raise ShapeMismatch(
                f"{directory}: gaussian offsets must be (H, W, 4), got {offsets_raw.shape}"
            )
        offsets = OffsetField.gaussian(offsets_raw[..., :2], offsets_raw[..., 2:])
    else:
        if offsets_raw.ndim != 4 or offsets_raw.shape[-1] != 2:
            raise ShapeMismatch(
                f"{directory}: sample offsets must be (H, W, M, 2), got {offsets_raw.shape}"
            )
        offsets = OffsetField.from_samples(offsets_raw)

    try:
        thing_ids = frozenset(int(t) for t in entries["thing_ids"].split(",") if t.strip())
        ignore_label = int(entries["ignore_label"])
        temperature = float(entries.get("temperature", "1"))
    except ValueError as exc:
        raise InvariantViolation(f"{directory}: malformed manifest value ({exc})") from exc

    if gt_panoptic.ndim != 3 or gt_panoptic.shape[-1] != 2:
        raise ShapeMismatch(f"{directory}: gt_panoptic must be (H, W, 2), got {gt_panoptic.shape}")
    bundle = PredictionBundle(
        semantic_kind=semantic_kind,
        semantic=semantic,
        center_heatmap=heatmap,
        offsets=offsets,
        thing_class_ids=thing_ids,
        ignore_label=ignore_label,
        temperature=temperature,
    )
    gt = GroundTruth(panoptic=gt_panoptic.astype(np.int32))
    validate_bundle(bundle, gt)
    return bundle, gt


def save_bundle(directory, bundle: PredictionBundle, gt: GroundTruth) -> None:
    """Write a bundle directory in the manifest layout that load_bundle reads."""
    validate_bundle(bundle, gt)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(bundle.semantic.astype(np.float64), directory / "semantic.ppdl")
    write_tensor(bundle.center_heatmap.astype(np.float64), directory / "heatmap.ppdl")
    off = bundle.offsets
    if off.kind == POINT:
        offsets_arr = off.mean
    elif off.kind == GAUSSIAN:
        offsets_arr = np.concatenate([off.mean, off.var], axis=-1)
    else:
        offsets_arr = off.samples
    write_tensor(offsets_arr.astype(np.float64), directory / "offsets.ppdl")
    write_tensor(gt.panoptic.astype(np.int32), directory / "gt_panoptic.ppdl")
    lines = [
        f"semantic_kind={bundle.semantic_kind}",
        "semantic=semantic.ppdl",
        "heatmap=heatmap.ppdl",
        f"offsets_kind={off.kind}",
        "offsets=offsets.ppdl",
        "gt_panoptic=gt_panoptic.ppdl",
        f"thing_ids={','.join(str(t) for t in sorted(bundle.thing_class_ids))}",
        f"ignore_label={bundle.ignore_label}",
        f"temperature={bundle.temperature!r}",
    ]
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
