"""On-disk session and annotation storage.

A session is one directory holding a manifest plus per-frame files:

    <store>/<session_id>/
        manifest              flat JSON document (id, resolution, seeds, ...)
        pv/%06d.png           RGB frames, lossless
        depth/%06d.png        16-bit depth in millimeters, optional
        pose/%06d.txt         camera-to-world 4x4, row-major, optional
        pc/%06d.bin           opaque point-cloud blobs, never interpreted
        ann/<run>/%06d.png    annotation runs: one {0,255} mask per frame
        ann/<run>/run.json    run manifest (flags, seeds, backend info)
        ann/<run>.stats.json  wall-clock stats; kept outside the run dir so
                              identical runs produce bit-identical run dirs

One writer per session; finalized sessions are immutable and loading
re-validates every manifest invariant.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from PIL import Image

from .errors import (
    CorruptSession,
    DuplicateSession,
    EmptySession,
    ExportError,
    MissingSeed,
    OutOfOrderFrame,
    ResolutionMismatch,
    SeedOutOfBounds,
    SessionClosed,
    StorageError,
)

MANIFEST_NAME = "manifest"
FRAME_NAME = "%06d"

SEED_ORIGINS = ("capture_center", "capture_explicit", "review_click")
CAPTURE_SOURCES = ("network", "replay", "synthetic", "import")

FLAG_TRACKED = "tracked"
FLAG_EMPTY = "empty"
FLAG_RESEEDED = "reseeded"
MASK_FLAGS = (FLAG_TRACKED, FLAG_EMPTY, FLAG_RESEEDED)

_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass
class SeedPrompt:
    """A single positive point prompt on one frame."""

    frame_index: int
    x: int
    y: int
    label: str = "foreground"
    origin: str = "capture_explicit"

    def to_dict(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "x": self.x,
            "y": self.y,
            "label": self.label,
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SeedPrompt":
        return cls(
            frame_index=int(doc["frame_index"]),
            x=int(doc["x"]),
            y=int(doc["y"]),
            label=str(doc.get("label", "foreground")),
            origin=str(doc.get("origin", "capture_explicit")),
        )


@dataclass
class FrameRecord:
    """One captured frame: RGB image plus optional depth, pose and point cloud."""

    index: int
    timestamp_us: int
    pv_image: np.ndarray
    depth_image: np.ndarray | None = None
    pose: np.ndarray | None = None
    point_cloud: bytes | None = None


@dataclass
class RunStats:
    """Wall-clock statistics for one labeling run."""

    duration_s: float
    fps: float
    started_at: str = ""

    def to_dict(self) -> dict:
        return {"duration_s": self.duration_s, "fps": self.fps, "started_at": self.started_at}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunStats":
        return cls(
            duration_s=float(doc["duration_s"]),
            fps=float(doc["fps"]),
            started_at=str(doc.get("started_at", "")),
        )


@dataclass
class AnnotationSet:
    """Per-frame binary masks for one object track plus provenance."""

    session_id: str
    masks: list[np.ndarray]
    flags: list[str]
    backend_info: dict
    seed_history: list[SeedPrompt] = field(default_factory=list)
    object_id: int = 1
    stats: RunStats | None = None

    @property
    def frame_count(self) -> int:
        return len(self.masks)

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.masks[0].shape
        return (w, h)

    def validate(self, frame_count: int, resolution: tuple[int, int]) -> None:
        if self.object_id != 1:
            raise ValueError(f"object_id must be 1, got {self.object_id}")
        if len(self.masks) != frame_count:
            raise ValueError(
                f"expected {frame_count} masks, got {len(self.masks)}"
            )
        if len(self.flags) != len(self.masks):
            raise ValueError("flags and masks length differ")
        w, h = resolution
        for i, mask in enumerate(self.masks):
            if mask.shape != (h, w):
                raise ResolutionMismatch(
                    f"mask {i} is {mask.shape[1]}x{mask.shape[0]}, session is {w}x{h}"
                )
        for i, flag in enumerate(self.flags):
            if flag not in MASK_FLAGS:
                raise ValueError(f"unknown flag {flag!r} at frame {i}")


def _frame_file(index: int, suffix: str) -> str:
    return (FRAME_NAME % index) + suffix


def save_mask(path: Path, mask: np.ndarray) -> None:
    """Write a binary mask as an 8-bit {0,255} PNG; 255 marks the object."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise CorruptSession(f"{path} holds values outside {{0,255}}: {bad[:4]}")
    return arr == 255


def load_mask_dir(path: Path | str) -> dict[int, np.ndarray]:
    """Read every ``%06d.png`` mask in a directory, keyed by frame index."""
    path = Path(path)
    if not path.is_dir():
        raise StorageError(f"not a mask directory: {path}")
    masks: dict[int, np.ndarray] = {}
    for entry in sorted(path.glob("*.png")):
        stem = entry.stem
        if not stem.isdigit():
            continue
        masks[int(stem)] = load_mask(entry)
    if not masks:
        raise StorageError(f"no mask files in {path}")
    return masks


def save_mask_dir(path: Path | str, masks: Mapping[int, np.ndarray]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for index, mask in masks.items():
        save_mask(path / _frame_file(index, ".png"), mask)
    return path


def _save_depth(path: Path, depth: np.ndarray) -> None:
    Image.fromarray(depth.astype(np.uint16)).save(path, format="PNG")


def _load_depth(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def _save_pose(path: Path, pose: np.ndarray) -> None:
    # %.17g keeps float64 round-trips exact
    np.savetxt(path, np.asarray(pose, dtype=np.float64).reshape(4, 4), fmt="%.17g")


def _load_pose(path: Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64).reshape(4, 4)


class CaptureSession:
    """Handle to one session directory; append frames, then finalize.

    Use :func:`create_session` and :func:`load_session` instead of the
    constructor.
    """

    def __init__(
        self,
        path: Path,
        *,
        session_id: str,
        resolution: tuple[int, int],
        capture_source: str,
        created_at: str,
        seed_prompts: list[SeedPrompt] | None = None,
        timestamps_us: list[int] | None = None,
        finalized: bool = False,
    ):
        self.path = Path(path)
        self.session_id = session_id
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self.capture_source = capture_source
        self.created_at = created_at
        self.seed_prompts: list[SeedPrompt] = list(seed_prompts or [])
        self.timestamps_us: list[int] = list(timestamps_us or [])
        self.finalized = finalized

    @property
    def frame_count(self) -> int:
        return len(self.timestamps_us)

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    # -- recording ---------------------------------------------------------

    def append_frame(self, frame: FrameRecord) -> None:
        """Persist one frame; indices must arrive dense and in order."""
        if self.finalized:
            raise SessionClosed(f"session {self.session_id} is finalized")
        if frame.index != self.frame_count:
            raise OutOfOrderFrame(
                f"expected frame index {self.frame_count}, got {frame.index}"
            )
        ts = int(frame.timestamp_us)
        if ts < 0:
            raise ValueError("timestamp_us must be non-negative")
        if self.timestamps_us and ts < self.timestamps_us[-1]:
            raise OutOfOrderFrame(
                f"timestamp {ts} decreases below {self.timestamps_us[-1]}"
            )
        pv = np.asarray(frame.pv_image)
        if pv.dtype != np.uint8 or pv.ndim != 3 or pv.shape[2] != 3:
            raise ValueError("pv_image must be an HxWx3 uint8 array")
        if pv.shape[:2] != (self.height, self.width):
            raise ResolutionMismatch(
                f"frame is {pv.shape[1]}x{pv.shape[0]}, session is "
                f"{self.width}x{self.height}"
            )
        Image.fromarray(pv, mode="RGB").save(
            self.path / "pv" / _frame_file(frame.index, ".png"), format="PNG"
        )
        if frame.depth_image is not None:
            depth = np.asarray(frame.depth_image)
            if depth.ndim != 2:
                raise ValueError("depth_image must be a 2-D array")
            _save_depth(self.path / "depth" / _frame_file(frame.index, ".png"), depth)
        if frame.pose is not None:
            pose = np.asarray(frame.pose, dtype=np.float64)
            if pose.shape != (4, 4):
                raise ValueError("pose must be a 4x4 matrix")
            _save_pose(self.path / "pose" / _frame_file(frame.index, ".txt"), pose)
        if frame.point_cloud is not None:
            (self.path / "pc" / _frame_file(frame.index, ".bin")).write_bytes(
                frame.point_cloud
            )
        self.timestamps_us.append(ts)

    def add_seed(self, seed: SeedPrompt) -> None:
        if self.finalized:
            raise SessionClosed(f"session {self.session_id} is finalized")
        self._check_seed(seed, allow_empty=True)
        self.seed_prompts.append(seed)

    def _check_seed(self, seed: SeedPrompt, *, allow_empty: bool = False) -> None:
        if not (0 <= seed.x < self.width and 0 <= seed.y < self.height):
            raise SeedOutOfBounds(
                f"seed ({seed.x},{seed.y}) outside {self.width}x{self.height}"
            )
        if seed.origin not in SEED_ORIGINS:
            raise ValueError(f"unknown seed origin {seed.origin!r}")
        if seed.label != "foreground":
            raise ValueError("only foreground seeds are supported")
        # A seed registered before any frame arrived binds to frame 0.
        last = self.frame_count - 1
        if allow_empty and self.frame_count == 0:
            last = 0
        if not (0 <= seed.frame_index <= last):
            raise ValueError(
                f"seed frame {seed.frame_index} beyond last frame {last}"
            )

    def finalize(self) -> None:
        """Seal the session: write the manifest and reject further appends."""
        if self.finalized:
            raise SessionClosed(f"session {self.session_id} already finalized")
        if self.frame_count == 0:
            raise EmptySession(f"session {self.session_id} has no frames")
        if not self.seed_prompts:
            raise MissingSeed(f"session {self.session_id} has no seed prompts")
        for seed in self.seed_prompts:
            self._check_seed(seed)
        self.finalized = True
        self._write_manifest()

    def _write_manifest(self) -> None:
        doc = {
            "session_id": self.session_id,
            "resolution": [self.width, self.height],
            "frame_count": self.frame_count,
            "created_at": self.created_at,
            "capture_source": self.capture_source,
            "seed_prompts": [s.to_dict() for s in self.seed_prompts],
            "timestamps_us": self.timestamps_us,
            "finalized": self.finalized,
        }
        (self.path / MANIFEST_NAME).write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n"
        )

    def manifest_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "resolution": [self.width, self.height],
            "frame_count": self.frame_count,
            "created_at": self.created_at,
            "capture_source": self.capture_source,
            "seed_prompts": [s.to_dict() for s in self.seed_prompts],
            "finalized": self.finalized,
        }

    # -- reading -----------------------------------------------------------

    def _check_index(self, index: int) -> None:
        if not (0 <= index < self.frame_count):
            raise ValueError(f"frame index {index} outside 0..{self.frame_count - 1}")

    def pv_path(self, index: int) -> Path:
        self._check_index(index)
        return self.path / "pv" / _frame_file(index, ".png")

    def read_pv(self, index: int) -> np.ndarray:
        return np.asarray(Image.open(self.pv_path(index)).convert("RGB"), dtype=np.uint8)

    def read_frame(self, index: int) -> FrameRecord:
        self._check_index(index)
        depth_path = self.path / "depth" / _frame_file(index, ".png")
        pose_path = self.path / "pose" / _frame_file(index, ".txt")
        pc_path = self.path / "pc" / _frame_file(index, ".bin")
        return FrameRecord(
            index=index,
            timestamp_us=self.timestamps_us[index],
            pv_image=self.read_pv(index),
            depth_image=_load_depth(depth_path) if depth_path.exists() else None,
            pose=_load_pose(pose_path) if pose_path.exists() else None,
            point_cloud=pc_path.read_bytes() if pc_path.exists() else None,
        )

    def frames(self) -> Iterator[FrameRecord]:
        for index in range(self.frame_count):
            yield self.read_frame(index)

    # -- video export --------------------------------------------------------

    def export_video(self, target_path: Path | str, fps: float) -> Path:
        """Encode all PV frames, in index order, into one video container."""
        if not self.finalized:
            raise ValueError("export requires a finalized session")
        if fps <= 0:
            raise ValueError("fps must be positive")
        try:
            import cv2
        except ImportError as exc:  # pragma: no cover - cv2 is a hard dep here
            raise ExportError("no video encoder available (cv2 missing)") from exc
        target = Path(target_path)
        codecs = {".avi": "MJPG", ".mp4": "mp4v"}
        code = codecs.get(target.suffix.lower())
        if code is None:
            raise ExportError(f"unsupported container {target.suffix!r}; use .avi or .mp4")
        writer = cv2.VideoWriter(
            str(target), cv2.VideoWriter_fourcc(*code), float(fps), self.resolution
        )
        if not writer.isOpened():
            raise ExportError(f"encoder {code} refused to open {target}")
        try:
            for index in range(self.frame_count):
                bgr = self.read_pv(index)[:, :, ::-1]
                writer.write(np.ascontiguousarray(bgr))
        finally:
            writer.release()
        return target

    # -- annotation runs -----------------------------------------------------

    def run_dir(self, run_id: str) -> Path:
        if not _NAME_RE.match(run_id):
            raise ValueError(f"invalid run id {run_id!r}")
        return self.path / "ann" / run_id

    def list_runs(self) -> list[str]:
        ann = self.path / "ann"
        if not ann.is_dir():
            return []
        return sorted(p.name for p in ann.iterdir() if p.is_dir())

    def save_run(self, run_id: str, annotations: AnnotationSet) -> Path:
        """Persist an annotation run; runs are immutable once written."""
        annotations.validate(self.frame_count, self.resolution)
        if annotations.session_id != self.session_id:
            raise ValueError(
                f"annotations for {annotations.session_id!r}, session is "
                f"{self.session_id!r}"
            )
        rdir = self.run_dir(run_id)
        if rdir.exists():
            raise StorageError(f"run {run_id!r} already exists")
        rdir.mkdir(parents=True)
        for index, mask in enumerate(annotations.masks):
            save_mask(rdir / _frame_file(index, ".png"), mask)
        doc = {
            "session_id": annotations.session_id,
            "object_id": annotations.object_id,
            "flags": annotations.flags,
            "backend_info": annotations.backend_info,
            "seed_history": [s.to_dict() for s in annotations.seed_history],
        }
        (rdir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if annotations.stats is not None:
            (self.path / "ann" / f"{run_id}.stats.json").write_text(
                json.dumps(annotations.stats.to_dict(), indent=2, sort_keys=True) + "\n"
            )
        return rdir

    def load_run(self, run_id: str) -> AnnotationSet:
        rdir = self.run_dir(run_id)
        run_json = rdir / "run.json"
        if not run_json.exists():
            raise CorruptSession(f"run {run_id!r} has no run.json")
        try:
            doc = json.loads(run_json.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptSession(f"unreadable run.json for {run_id!r}: {exc}") from exc
        masks = []
        for index in range(self.frame_count):
            mask_path = rdir / _frame_file(index, ".png")
            if not mask_path.exists():
                raise CorruptSession(f"run {run_id!r} missing mask {index}")
            masks.append(load_mask(mask_path))
        stats = None
        stats_path = self.path / "ann" / f"{run_id}.stats.json"
        if stats_path.exists():
            stats = RunStats.from_dict(json.loads(stats_path.read_text()))
        annotations = AnnotationSet(
            session_id=str(doc["session_id"]),
            masks=masks,
            flags=[str(f) for f in doc["flags"]],
            backend_info=dict(doc["backend_info"]),
            seed_history=[SeedPrompt.from_dict(d) for d in doc["seed_history"]],
            object_id=int(doc.get("object_id", 1)),
            stats=stats,
        )
        try:
            annotations.validate(self.frame_count, self.resolution)
        except (ValueError, ResolutionMismatch) as exc:
            raise CorruptSession(f"run {run_id!r} is inconsistent: {exc}") from exc
        return annotations


def create_session(
    store_root: Path | str,
    session_id: str,
    resolution: tuple[int, int],
    source: str,
) -> CaptureSession:
    """Create an empty session directory and return a writable handle."""
    if not session_id or not _NAME_RE.match(session_id):
        raise ValueError(f"invalid session id {session_id!r}")
    if source not in CAPTURE_SOURCES:
        raise ValueError(f"unknown capture source {source!r}")
    width, height = int(resolution[0]), int(resolution[1])
    if width <= 0 or height <= 0:
        raise ValueError(f"resolution components must be positive, got {resolution}")
    root = Path(store_root)
    sdir = root / session_id
    if sdir.exists():
        raise DuplicateSession(f"session {session_id!r} already exists in {root}")
    try:
        sdir.mkdir(parents=True)
        for sub in ("pv", "depth", "pose", "pc", "ann"):
            (sdir / sub).mkdir()
    except OSError as exc:
        raise StorageError(f"cannot create session directory {sdir}: {exc}") from exc
    session = CaptureSession(
        sdir,
        session_id=session_id,
        resolution=(width, height),
        capture_source=source,
        created_at=datetime.now(timezone.utc).isoformat(),
        finalized=False,
    )
    session._write_manifest()
    return session


def load_session(path: Path | str) -> CaptureSession:
    """Open a finalized session read-only, re-validating its invariants."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise CorruptSession(f"no manifest in {path}")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptSession(f"unreadable manifest in {path}: {exc}") from exc
    try:
        session_id = str(doc["session_id"])
        width, height = (int(v) for v in doc["resolution"])
        frame_count = int(doc["frame_count"])
        timestamps = [int(t) for t in doc["timestamps_us"]]
        seeds = [SeedPrompt.from_dict(d) for d in doc["seed_prompts"]]
        session = CaptureSession(
            path,
            session_id=session_id,
            resolution=(width, height),
            capture_source=str(doc["capture_source"]),
            created_at=str(doc["created_at"]),
            seed_prompts=seeds,
            timestamps_us=timestamps,
            finalized=bool(doc["finalized"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptSession(f"malformed manifest in {path}: {exc}") from exc
    if not session.finalized:
        raise CorruptSession(f"session in {path} was never finalized")
    if frame_count != len(timestamps):
        raise CorruptSession(
            f"frame_count {frame_count} != {len(timestamps)} timestamps"
        )
    if frame_count == 0:
        raise CorruptSession(f"finalized session in {path} has no frames")
    if any(b < a for a, b in zip(timestamps, timestamps[1:])):
        raise CorruptSession("timestamps are not non-decreasing")
    pv_dir = path / "pv"
    expected = {_frame_file(i, ".png") for i in range(frame_count)}
    actual = {p.name for p in pv_dir.glob("*.png")} if pv_dir.is_dir() else set()
    if actual != expected:
        missing = sorted(expected - actual)[:3]
        extra = sorted(actual - expected)[:3]
        raise CorruptSession(
            f"pv frames inconsistent with manifest (missing {missing}, extra {extra})"
        )
    for i in range(frame_count):
        # header-only size check; full pixel data stays lazy
        with Image.open(pv_dir / _frame_file(i, ".png")) as img:
            if img.size != (width, height):
                raise CorruptSession(
                    f"frame {i} is {img.size[0]}x{img.size[1]}, manifest says "
                    f"{width}x{height}"
                )
    if not session.seed_prompts:
        raise CorruptSession(f"finalized session in {path} has no seed prompts")
    for seed in session.seed_prompts:
        if not (0 <= seed.x < width and 0 <= seed.y < height):
            raise CorruptSession(f"seed ({seed.x},{seed.y}) out of bounds")
        if not (0 <= seed.frame_index < frame_count):
            raise CorruptSession(f"seed frame {seed.frame_index} out of range")
    return session
