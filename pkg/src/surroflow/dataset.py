"""Dataset generation, on-disk format and loading.

A split directory contains three files:

``inputs.bin``
    One record per sample: the log-permeability modifier as little-endian
    float32, row-major ``[1, height, width]``.
``outputs.bin``
    One record per (sample, time) pair, sample-major: rescaled pressure,
    injected saturation and plume mask as little-endian float32, row-major
    ``[3, height, width]``. Record ``m = sample * n_times + time_index``.
``manifest.json``
    Sizes, snapshot times, normalisation constants, per-sample field seeds,
    the generator config digest and sha256 checksums of both binary files.

Generation is deterministic: the field seed of sample ``i`` in a split
derives from ``(run seed, split tag, i)`` alone, so any record can be
regenerated without touching the others. Realisations whose simulation fails
are skipped, recorded in the manifest, and replaced by nothing; the manifest
sample count is the number of successful records.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DataError, NumericalError
from .grf import FieldSampler
from .simulator import PRESSURE_SCALE_PA, PRESSURE_SHIFT, simulate

FORMAT = "surroflow-dataset v1"
SPLIT_TAGS = {"train": 0, "test": 1, "uq": 2}
MASK_THRESHOLD = 1e-8


@dataclass(frozen=True)
class Normalization:
    """Constants mapping physical quantities to network-friendly ranges."""

    pressure_scale_pa: float = PRESSURE_SCALE_PA
    pressure_shift: float = PRESSURE_SHIFT
    time_scale_s: float = 1.0
    mask_threshold: float = MASK_THRESHOLD

    def normalize_time(self, t_s):
        return np.asarray(t_s, dtype=np.float64) / self.time_scale_s

    def to_dict(self) -> dict:
        return {
            "pressure_scale_pa": self.pressure_scale_pa,
            "pressure_shift": self.pressure_shift,
            "time_scale_s": self.time_scale_s,
            "mask_threshold": self.mask_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Normalization":
        return cls(**data)


def derive_field_seed(run_seed: int, split: str, index: int) -> int:
    """Stable 64-bit seed for one realisation of one split."""
    if split not in SPLIT_TAGS:
        raise DataError(f"unknown split {split!r}")
    state = np.random.SeedSequence((run_seed, SPLIT_TAGS[split], index)).generate_state(2)
    return int(state[0]) | (int(state[1]) << 32)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class DatasetManifest:
    """Everything needed to interpret and verify the binary shards."""

    split: str
    height: int
    width: int
    n_samples: int
    times_s: list[float]
    train_times_s: list[float]
    normalization: Normalization
    field_seeds: list[int]
    skipped_seeds: list[int] = field(default_factory=list)
    config_sha256: str = ""
    checksums: dict[str, str] = field(default_factory=dict)

    @property
    def n_times(self) -> int:
        return len(self.times_s)

    @property
    def n_records(self) -> int:
        return self.n_samples * self.n_times

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "split": self.split,
            "height": self.height,
            "width": self.width,
            "n_samples": self.n_samples,
            "times_s": list(self.times_s),
            "train_times_s": list(self.train_times_s),
            "normalization": self.normalization.to_dict(),
            "field_seeds": list(self.field_seeds),
            "skipped_seeds": list(self.skipped_seeds),
            "config_sha256": self.config_sha256,
            "checksums": dict(self.checksums),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        if data.get("format") != FORMAT:
            raise DataError(f"unsupported dataset format {data.get('format')!r}")
        try:
            return cls(
                split=data["split"],
                height=int(data["height"]),
                width=int(data["width"]),
                n_samples=int(data["n_samples"]),
                times_s=[float(t) for t in data["times_s"]],
                train_times_s=[float(t) for t in data["train_times_s"]],
                normalization=Normalization.from_dict(data["normalization"]),
                field_seeds=[int(s) for s in data["field_seeds"]],
                skipped_seeds=[int(s) for s in data.get("skipped_seeds", [])],
                config_sha256=data.get("config_sha256", ""),
                checksums=dict(data.get("checksums", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset manifest: {exc}") from exc


def split_times_s(config: RunConfig, split: str) -> tuple[float, ...]:
    if split == "train":
        return config.train_times_s
    if split == "test":
        return config.test_times_s
    if split == "uq":
        return config.uq_times_s
    raise DataError(f"unknown split {split!r}")


def generate_split(out_dir, config: RunConfig, split: str, progress=None) -> DatasetManifest:
    """Simulate one split and write its shard files under ``out_dir/split``.

    ``progress``, if given, is called with ``(done, total)`` after each sample.
    """
    n_samples = {"train": config.n_train, "test": config.n_test, "uq": config.uq_realizations}[
        split
    ]
    times_s = split_times_s(config, split)
    sim_cfg = config.sim_config(times_s)
    sampler = FieldSampler(config.grid(), config.grf_params(), config.k_ref)
    norm = Normalization(time_scale_s=config.time_scale_s)

    directory = Path(out_dir) / split
    directory.mkdir(parents=True, exist_ok=True)
    inputs_path = directory / "inputs.bin"
    outputs_path = directory / "outputs.bin"

    seeds: list[int] = []
    skipped: list[int] = []
    with open(inputs_path, "wb") as f_in, open(outputs_path, "wb") as f_out:
        for i in range(n_samples):
            seed = derive_field_seed(config.seed, split, i)
            realization = sampler.sample(seed)
            try:
                snaps = simulate(realization, sim_cfg)
            except NumericalError as exc:
                warnings.warn(f"sample {i} (seed {seed}) skipped: {exc}")
                skipped.append(seed)
                continue
            f_in.write(
                np.ascontiguousarray(realization.log_values[None], dtype="<f4").tobytes()
            )
            for snap in snaps:
                record = np.stack(
                    [snap.rescaled_pressure, snap.saturation, snap.mask]
                )
                f_out.write(np.ascontiguousarray(record, dtype="<f4").tobytes())
            seeds.append(seed)
            if progress is not None:
                progress(i + 1, n_samples)

    manifest = DatasetManifest(
        split=split,
        height=config.grid_height,
        width=config.grid_width,
        n_samples=len(seeds),
        times_s=[float(t) for t in times_s],
        train_times_s=[float(t) for t in config.train_times_s],
        normalization=norm,
        field_seeds=seeds,
        skipped_seeds=skipped,
        config_sha256=config.digest(),
        checksums={
            "inputs.bin": _sha256(inputs_path),
            "outputs.bin": _sha256(outputs_path),
        },
    )
    (directory / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2) + "\n"
    )
    return manifest


class FlowDataset:
    """In-memory view of one split directory."""

    def __init__(self, manifest: DatasetManifest, inputs: np.ndarray, outputs: np.ndarray):
        self.manifest = manifest
        self.inputs = inputs
        self.outputs = outputs

    @classmethod
    def load(cls, directory, verify: bool = True) -> "FlowDataset":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"{directory}: no manifest.json")
        try:
            manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: invalid JSON") from exc

        arrays = {}
        for name, channels, count in (
            ("inputs.bin", 1, manifest.n_samples),
            ("outputs.bin", 3, manifest.n_records),
        ):
            path = directory / name
            if not path.exists():
                raise DataError(f"{directory}: missing {name}")
            if verify:
                actual = _sha256(path)
                expected = manifest.checksums.get(name)
                if actual != expected:
                    raise DataError(
                        f"{path}: checksum mismatch (expected {expected}, got {actual})"
                    )
            raw = np.fromfile(path, dtype="<f4")
            expected_len = count * channels * manifest.height * manifest.width
            if raw.size != expected_len:
                raise DataError(
                    f"{path}: {raw.size} values on disk, manifest implies {expected_len}"
                )
            arrays[name] = raw.reshape(count, channels, manifest.height, manifest.width)

        outputs = arrays["outputs.bin"].reshape(
            manifest.n_samples, manifest.n_times, 3, manifest.height, manifest.width
        )
        return cls(manifest, arrays["inputs.bin"], outputs)

    def time_indices(self, times: str = "all") -> list[int]:
        """Select snapshot indices: ``all``, ``train`` or ``withheld``."""
        trained = set(self.manifest.train_times_s)
        if times == "all":
            return list(range(self.manifest.n_times))
        if times == "train":
            return [i for i, t in enumerate(self.manifest.times_s) if t in trained]
        if times == "withheld":
            return [i for i, t in enumerate(self.manifest.times_s) if t not in trained]
        raise DataError(f"unknown time selection {times!r}")

    def records(self, times: str = "all"):
        """Flatten (sample, time) pairs into network-ready arrays.

        Returns ``(x, t_norm, y, sample_idx, time_idx)`` with ``x`` repeated
        per selected time and ``t_norm`` the normalised snapshot time.
        """
        sel = self.time_indices(times)
        if not sel:
            raise DataError(f"no snapshots match selection {times!r}")
        n = self.manifest.n_samples
        x = np.repeat(self.inputs, len(sel), axis=0)
        y = self.outputs[:, sel].reshape(n * len(sel), 3, self.manifest.height, self.manifest.width)
        t_phys = np.tile(np.asarray(self.manifest.times_s)[sel], n)
        t_norm = self.manifest.normalization.normalize_time(t_phys).astype(np.float32)
        sample_idx = np.repeat(np.arange(n), len(sel))
        time_idx = np.tile(np.asarray(sel, dtype=int), n)
        return x, t_norm, y, sample_idx, time_idx
