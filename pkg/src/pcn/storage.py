"""On-disk containers and run-directory bookkeeping.

Grid container (magic ``PCNVOL1``): an ASCII key=value header terminated
by a line reading ``end``, followed by a raw little-endian row-major
payload. Volumes store float32, masks uint8.

Checkpoint container (magic ``PCNCKPT1``): magic line, one JSON header
line describing every model (name, arch, param_count, phase/direction),
the concatenated parameter payload as little-endian float64, and a
trailing 64-hex-char sha256 over header+payload. Loading verifies the
checksum, so truncated or corrupted files are always detected.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from .core import Dataset, FoldSplit, LabelMask, Phase, Volume
from .errors import ChecksumError, MissingArtifactError

VOL_MAGIC = b"PCNVOL1"
CKPT_MAGIC = b"PCNCKPT1"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing file: {path}")
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# PCNVOL1 grid container


def _grid_header(kind: str, data: np.ndarray, fields: dict) -> bytes:
    lines = [VOL_MAGIC.decode(), f"kind={kind}",
             f"height={data.shape[0]}", f"width={data.shape[1]}"]
    for key, val in fields.items():
        if val is not None:
            lines.append(f"{key}={val}")
    lines.append("end")
    return ("\n".join(lines) + "\n").encode()


def save_volume(path, v: Volume) -> None:
    fields = {
        "phase": v.phase.value,
        "dtype": "float32",
        "case_id": v.case_id,
        "spacing": None if v.spacing is None else f"{v.spacing[0]},{v.spacing[1]}",
    }
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, _grid_header("volume", v.data, fields) + payload)


def save_mask(path, m: LabelMask) -> None:
    fields = {
        "phase": "latent" if m.phase is None else m.phase.value,
        "dtype": "uint8",
        "num_classes": m.num_classes,
    }
    payload = np.ascontiguousarray(m.data, dtype=np.uint8).tobytes()
    atomic_write_bytes(path, _grid_header("mask", m.data, fields) + payload)


def _read_grid(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing file: {path}")
    raw = path.read_bytes()
    first_nl = raw.find(b"\n")
    if first_nl < 0 or raw[:first_nl] != VOL_MAGIC:
        raise ChecksumError(f"{path}: bad magic, not a PCNVOL1 file")
    header = {}
    pos = first_nl + 1
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ChecksumError(f"{path}: header not terminated")
        line = raw[pos:nl].decode()
        pos = nl + 1
        if line == "end":
            break
        key, _, val = line.partition("=")
        header[key] = val
    return header, raw[pos:]


def load_volume(path) -> Volume:
    header, payload = _read_grid(path)
    if header.get("kind") != "volume":
        raise ChecksumError(f"{path}: expected a volume container")
    h, w = int(header["height"]), int(header["width"])
    expected = h * w * 4
    if len(payload) != expected:
        raise ChecksumError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    spacing = None
    if "spacing" in header:
        sx, sy = header["spacing"].split(",")
        spacing = (float(sx), float(sy))
    return Volume(data=data, phase=Phase(header["phase"]), case_id=header.get("case_id", ""),
                  spacing=spacing)


def load_mask(path) -> LabelMask:
    header, payload = _read_grid(path)
    if header.get("kind") != "mask":
        raise ChecksumError(f"{path}: expected a mask container")
    h, w = int(header["height"]), int(header["width"])
    if len(payload) != h * w:
        raise ChecksumError(f"{path}: payload is {len(payload)} bytes, expected {h * w}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    phase = None if header["phase"] == "latent" else Phase(header["phase"])
    return LabelMask(data=data, num_classes=int(header["num_classes"]), phase=phase)


# ---------------------------------------------------------------------------
# Dataset directories


def save_dataset(out_dir, dataset: Dataset, config_snapshot: dict | None = None,
                 seed: int | None = None) -> dict:
    """Write one subdirectory per case plus a manifest with checksums."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    case_entries = []
    for case in dataset.cases:
        cdir = out_dir / case.case_id
        cdir.mkdir(exist_ok=True)
        files = {}
        for phase in (Phase.ARTERIAL, Phase.VENOUS):
            if not case.has_phase(phase):
                continue
            vol, mask = case.phase_pair(phase)
            vpath = cdir / f"{phase.value}_volume.pcnvol"
            mpath = cdir / f"{phase.value}_mask.pcnvol"
            save_volume(vpath, vol)
            save_mask(mpath, mask)
            files[vpath.name] = sha256_file(vpath)
            files[mpath.name] = sha256_file(mpath)
        if case.latent_label is not None:
            lpath = cdir / "latent_mask.pcnvol"
            save_mask(lpath, case.latent_label)
            files[lpath.name] = sha256_file(lpath)
        case_entries.append({"case_id": case.case_id, "files": files})
    manifest = {
        "format": "pcn-dataset-v1",
        "provenance": dataset.provenance,
        "n_cases": len(dataset),
        "seed": seed,
        "config": config_snapshot,
        "cases": case_entries,
    }
    write_json(out_dir / "dataset_manifest.json", manifest)
    return manifest


def load_dataset(in_dir, verify: bool = True) -> Dataset:
    in_dir = Path(in_dir)
    manifest = read_json(in_dir / "dataset_manifest.json")
    from .core import Case  # local import to keep module load order simple

    cases = []
    for entry in manifest["cases"]:
        cdir = in_dir / entry["case_id"]
        if verify:
            for name, digest in entry["files"].items():
                actual = sha256_file(cdir / name)
                if actual != digest:
                    raise ChecksumError(f"{cdir / name}: checksum mismatch")
        kwargs = {"case_id": entry["case_id"]}
        for phase in (Phase.ARTERIAL, Phase.VENOUS):
            vpath = cdir / f"{phase.value}_volume.pcnvol"
            if vpath.exists():
                kwargs[phase.value] = (load_volume(vpath), load_mask(cdir / f"{phase.value}_mask.pcnvol"))
        lpath = cdir / "latent_mask.pcnvol"
        if lpath.exists():
            kwargs["latent_label"] = load_mask(lpath)
        cases.append(Case(**kwargs))
    return Dataset(cases=tuple(cases), provenance=manifest.get("provenance", "phantom"))


def save_folds(path, folds: FoldSplit) -> None:
    write_json(path, folds.to_json_dict())


def load_folds(path) -> FoldSplit:
    return FoldSplit.from_json_dict(read_json(path))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, header: dict, param_blocks: list[np.ndarray]) -> None:
    """Serialize named float64 parameter blocks with a trailing sha256."""
    payload = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in param_blocks)
    header_line = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + b"\n" + header_line + b"\n" + payload
    digest = sha256_bytes(body).encode()
    atomic_write_bytes(path, body + digest)


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < 64:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-64], raw[-64:]
    if sha256_bytes(body).encode() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    first_nl = body.find(b"\n")
    if first_nl < 0 or body[:first_nl] != CKPT_MAGIC:
        raise ChecksumError(f"{path}: bad magic, not a PCNCKPT1 file")
    second_nl = body.find(b"\n", first_nl + 1)
    header = json.loads(body[first_nl + 1:second_nl].decode())
    payload = body[second_nl + 1:]
    blocks = []
    offset = 0
    for model in header["models"]:
        n = int(model["param_count"])
        blocks.append(np.frombuffer(payload, dtype="<f8", count=n, offset=offset * 8).copy())
        offset += n
    return header, blocks


# ---------------------------------------------------------------------------
# Run manifests and locks


def acquire_lock(run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        from .errors import LockError

        raise LockError(f"{run_dir} is locked by another invocation (delete run.lock if stale)")
    with os.fdopen(fd, "w") as f:
        f.write(str(os.getpid()))
    return lock


def release_lock(lock: Path) -> None:
    if lock.exists():
        lock.unlink()


class ManifestWriter:
    """Collects artifacts and warnings, written atomically at run end."""

    def __init__(self, run_dir, command: str, config_snapshot: dict | None = None,
                 seeds=None, filename: str = "run_manifest.json"):
        self.run_dir = Path(run_dir)
        self.filename = filename
        self.data = {
            "format": "pcn-run-v1",
            "command": command,
            "config": config_snapshot,
            "seeds": seeds,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "inputs": {},
            "artifacts": {},
            "warnings": [],
        }

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.data["inputs"][str(path)] = sha256_file(path)

    def add_artifact(self, path) -> None:
        path = Path(path)
        rel = os.path.relpath(path, self.run_dir)
        self.data["artifacts"][rel] = sha256_file(path)

    def warn(self, message: str) -> None:
        self.data["warnings"].append(message)

    def finish(self, extra: dict | None = None) -> dict:
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        if extra:
            self.data.update(extra)
        write_json(self.run_dir / self.filename, self.data)
        return self.data
