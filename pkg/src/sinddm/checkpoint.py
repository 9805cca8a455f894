"""Single-file checkpoint container.

Layout: an 8-byte magic, a little-endian u64 header length, a JSON header,
the raw array payload, and a trailing sha256 over everything before it.
The header carries a directory of named arrays (dtype with explicit
endianness, shape, offset) plus every piece of configuration needed to
rebuild the model, the schedule tables, and the pyramid, so a loaded
checkpoint samples bit-identically to the one that was saved. Writes go
through a temp file and an atomic rename; loads verify the digest and the
shape manifest before anything is trusted.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserSpec
from .pyramid import Pyramid, build_pyramids
from .schedule import NoiseSchedule, ScalePlan
from .trainer import TrainConfig

__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointIntegrityError",
    "UnsupportedVersionError",
    "FingerprintMismatch",
    "compute_fingerprint",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1
_MAGIC = b"SNDMCKPT"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointIntegrityError(RuntimeError):
    """File is truncated, corrupt, or inconsistent with its manifest."""


class UnsupportedVersionError(CheckpointIntegrityError):
    """File is well-formed but written by an incompatible format version."""


class FingerprintMismatch(RuntimeError):
    """Resume requested under a configuration the checkpoint was not trained with."""


@dataclass
class Checkpoint:
    format_version: int
    spec: DenoiserSpec
    raw_params: dict[str, np.ndarray] = field(repr=False)
    ema_params: dict[str, np.ndarray] = field(repr=False)
    schedule: NoiseSchedule
    plan: ScalePlan
    scale_factor: float
    train_image: np.ndarray = field(repr=False)
    train_config: TrainConfig
    step: int
    fingerprint: str
    rng_state: dict | None = None
    opt_state: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def num_scales(self) -> int:
        return self.plan.num_scales

    @property
    def timesteps(self) -> int:
        return self.schedule.timesteps

    @property
    def dims(self) -> list[tuple[int, int]]:
        return self.rebuild_pyramid().dims

    def rebuild_pyramid(self) -> Pyramid:
        if not hasattr(self, "_pyramid"):
            self._pyramid = build_pyramids(
                self.train_image, self.scale_factor, self.num_scales
            )
        return self._pyramid

    def build_model(self, use_ema: bool = True) -> Denoiser:
        """Materialize the torch model from the stored weights."""
        model = Denoiser(self.spec)
        source = self.ema_params if use_ema else self.raw_params
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name not in source:
                    raise CheckpointIntegrityError(f"missing weight array {name!r}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(source[name])))
        model.eval()
        return model

    def load_into(self, model: Denoiser, ema: dict[str, torch.Tensor], optimizer) -> None:
        """Restore raw weights, EMA weights, and Adam moments for resuming."""
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(np.ascontiguousarray(self.raw_params[name])))
                ema[name].copy_(torch.from_numpy(np.ascontiguousarray(self.ema_params[name])))
                avg = self.opt_state.get(f"{name}.exp_avg")
                if avg is None:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(float(self.opt_state[f"{name}.step"][0])),
                    "exp_avg": torch.from_numpy(self.opt_state[f"{name}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(
                        self.opt_state[f"{name}.exp_avg_sq"].copy()
                    ),
                }

    def summary(self) -> dict:
        """Human-oriented manifest digest (used by the inspect command)."""
        pyr = self.rebuild_pyramid()
        return {
            "format_version": self.format_version,
            "fingerprint": self.fingerprint,
            "step": self.step,
            "spec": self.spec.to_dict(),
            "train_config": self.train_config.to_dict(),
            "scale_factor": self.scale_factor,
            "num_scales": self.num_scales,
            "timesteps": self.timesteps,
            "dims": [list(d) for d in pyr.dims],
            "start_timesteps": self.plan.start_t.tolist(),
            "rmse": self.plan.rmse.tolist(),
            "sigma_mode": self.plan.sigma_mode,
            "blur_norm": self.plan.norm,
            "blur_free": self.plan.blur_free,
            "param_count": int(sum(a.size for a in self.raw_params.values())),
        }


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def compute_fingerprint(
    spec: DenoiserSpec,
    config: TrainConfig,
    scale_factor: float,
    num_scales: int,
    timesteps: int,
    dims: list[tuple[int, int]],
    plan: ScalePlan,
    image: np.ndarray | None = None,
) -> str:
    """Digest of everything that defines a training run's identity."""
    doc = {
        "spec": spec.to_dict(),
        "train_config": config.to_dict(),
        "scale_factor": scale_factor,
        "num_scales": num_scales,
        "timesteps": timesteps,
        "dims": [list(d) for d in dims],
        "sigma_mode": plan.sigma_mode,
        "norm": plan.norm,
        "blur_free": plan.blur_free,
    }
    h = hashlib.sha256(_canonical_json(doc).encode("utf-8"))
    if image is not None:
        h.update(np.ascontiguousarray(image, dtype="<f8").tobytes())
    return h.hexdigest()


def _encode_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f" and arr.dtype.itemsize == 4:
        return "<f4"
    if kind == "f":
        return "<f8"
    if kind in "iu":
        return "<i8"
    raise TypeError(f"unsupported array dtype {arr.dtype!r}")


def _named_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items: list[tuple[str, np.ndarray]] = []
    for name, arr in sorted(ckpt.raw_params.items()):
        items.append((f"raw/{name}", arr))
    for name, arr in sorted(ckpt.ema_params.items()):
        items.append((f"ema/{name}", arr))
    items.append(("plan/alpha_bar", ckpt.schedule.alpha_bar))
    items.append(("plan/rmse", ckpt.plan.rmse))
    items.append(("plan/start_t", ckpt.plan.start_t))
    items.append(("plan/gamma_train", ckpt.plan.gamma_train))
    items.append(("plan/gamma_sample", ckpt.plan.gamma_sample))
    items.append(("image/train", ckpt.train_image))
    for name, arr in sorted(ckpt.opt_state.items()):
        items.append((f"opt/{name}", arr))
    return items


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Serialize atomically: temp file in the target directory, then rename."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in _named_arrays(ckpt):
        code = _encode_dtype(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.format_version,
        "fingerprint": ckpt.fingerprint,
        "spec": ckpt.spec.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "scale_factor": ckpt.scale_factor,
        "num_scales": ckpt.num_scales,
        "timesteps": ckpt.timesteps,
        "sigma_mode": ckpt.plan.sigma_mode,
        "norm": ckpt.plan.norm,
        "blur_free": ckpt.plan.blur_free,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "arrays": entries,
    }
    header_bytes = _canonical_json(header).encode("utf-8")
    body = (
        _MAGIC
        + len(header_bytes).to_bytes(8, "little")
        + header_bytes
        + b"".join(chunks)
    )
    blob = body + hashlib.sha256(body).digest()
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Parse and verify a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 8 + 32:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic; not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: sha256 mismatch (truncated or corrupt)")
    header_len = int.from_bytes(blob[8:16], "little")
    header_end = 16 + header_len
    if header_end > len(body):
        raise CheckpointIntegrityError(f"{path}: header overruns the file")
    try:
        header = json.loads(body[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    payload = body[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        code = entry["dtype"]
        if code not in _DTYPES:
            raise CheckpointIntegrityError(f"{path}: unknown dtype {code!r}")
        dtype = _DTYPES[code]
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise CheckpointIntegrityError(
                f"{path}: array {entry['name']!r} shape/size mismatch"
            )
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointIntegrityError(
                f"{path}: array {entry['name']!r} overruns the payload"
            )
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    def _take(name: str) -> np.ndarray:
        if name not in arrays:
            raise CheckpointIntegrityError(f"{path}: missing array {name!r}")
        return arrays[name]

    schedule = NoiseSchedule(
        timesteps=header["timesteps"], alpha_bar=_take("plan/alpha_bar")
    )
    plan = ScalePlan(
        rmse=_take("plan/rmse"),
        start_t=_take("plan/start_t"),
        gamma_train=_take("plan/gamma_train"),
        gamma_sample=_take("plan/gamma_sample"),
        sigma_mode=header["sigma_mode"],
        norm=header["norm"],
        blur_free=header["blur_free"],
    )
    raw = {
        name[len("raw/") :]: arr for name, arr in arrays.items() if name.startswith("raw/")
    }
    ema = {
        name[len("ema/") :]: arr for name, arr in arrays.items() if name.startswith("ema/")
    }
    opt = {
        name[len("opt/") :]: arr for name, arr in arrays.items() if name.startswith("opt/")
    }
    return Checkpoint(
        format_version=version,
        spec=DenoiserSpec.from_dict(header["spec"]),
        raw_params=raw,
        ema_params=ema,
        schedule=schedule,
        plan=plan,
        scale_factor=header["scale_factor"],
        train_image=_take("image/train"),
        train_config=TrainConfig.from_dict(header["train_config"]),
        step=header["step"],
        fingerprint=header["fingerprint"],
        rng_state=header["rng_state"],
        opt_state=opt,
    )
