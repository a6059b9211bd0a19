"""Synthetic over-suppression corpus: (clean, noisy, enhanced) feature triples.

The simulator works directly in log-mel-like feature space. "clean" is a set
of smooth energy blobs elongated along time (a speech proxy) on a zero
floor, "noisy" adds a Gaussian noise field scaled to the target SNR, and
"enhanced" models an over-aggressive denoiser: a random fraction of the
speech cells is cut to the floor while a small fraction of the noise
survives. The enhanced and noisy views therefore carry complementary
information about the clean target, which is what the fusion network must
exploit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import iffio
from .tensor import Tensor

FLOOR = 0.0
SPEECH_CUTOFF = 0.05  # blob mass below this is clamped to the floor


@dataclass(frozen=True)
class SimConfig:
    T: int = 32
    F: int = 40
    num_blobs: int = 8
    snr_db: float = 0.0
    suppress_frac: float = 0.3
    residual_noise_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.suppress_frac <= 1.0:
            raise ValueError(f"suppress_frac must be in [0, 1], got {self.suppress_frac}")
        if not 0.0 <= self.residual_noise_frac <= 1.0:
            raise ValueError(f"residual_noise_frac must be in [0, 1], got {self.residual_noise_frac}")


@dataclass(frozen=True)
class FeatureTriple:
    clean: Tensor
    noisy: Tensor
    enhanced: Tensor

    def __post_init__(self):
        if not (self.clean.shape == self.noisy.shape == self.enhanced.shape):
            raise ValueError("feature triple members must share one T x F shape")


@dataclass(frozen=True)
class SimRecord:
    """Triple plus the hidden state the generator used, for direct oracles."""

    clean: np.ndarray
    noisy: np.ndarray
    enhanced: np.ndarray
    speech_mask: np.ndarray
    suppressed_mask: np.ndarray
    noise: np.ndarray
    noise_scale: float

    def triple(self) -> FeatureTriple:
        return FeatureTriple(
            clean=Tensor(self.clean.astype(np.float32)),
            noisy=Tensor(self.noisy.astype(np.float32)),
            enhanced=Tensor(self.enhanced.astype(np.float32)),
        )


def _blob_field(rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    t = np.arange(cfg.T, dtype=np.float64)[:, None]
    f = np.arange(cfg.F, dtype=np.float64)[None, :]
    field = np.zeros((cfg.T, cfg.F))
    for _ in range(cfg.num_blobs):
        ct = rng.uniform(0.0, cfg.T)
        cf = rng.uniform(0.0, cfg.F)
        # elongated along T, like formant trajectories
        st = rng.uniform(cfg.T / 10.0, cfg.T / 4.0)
        sf = rng.uniform(max(1.0, cfg.F / 20.0), max(1.5, cfg.F / 10.0))
        amp = rng.uniform(0.6, 1.6)
        field += amp * np.exp(-((t - ct) ** 2 / (2 * st**2) + (f - cf) ** 2 / (2 * sf**2)))
    field[field < SPEECH_CUTOFF] = 0.0
    return field


def simulate_record(cfg: SimConfig) -> SimRecord:
    """Deterministic per-seed generation; draw order is blobs, noise, suppression."""
    rng = np.random.default_rng(cfg.seed)
    speech = _blob_field(rng, cfg)
    clean = FLOOR + speech
    speech_mask = speech > 0.0

    noise = rng.standard_normal((cfg.T, cfg.F))
    signal_power = float(np.mean(speech**2))
    if math.isinf(cfg.snr_db) and cfg.snr_db > 0:
        noise_scale = 0.0
    else:
        noise_scale = math.sqrt(signal_power / 10.0 ** (cfg.snr_db / 10.0)) if signal_power > 0 else 0.0
    noisy = clean + noise_scale * noise

    enhanced = clean.copy()
    speech_idx = np.flatnonzero(speech_mask)
    k = int(round(cfg.suppress_frac * speech_idx.size))
    chosen = rng.choice(speech_idx, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    suppressed_mask = np.zeros_like(speech_mask)
    suppressed_mask.reshape(-1)[chosen] = True
    enhanced.reshape(-1)[chosen] = FLOOR
    enhanced += cfg.residual_noise_frac * noise_scale * noise

    return SimRecord(
        clean=clean,
        noisy=noisy,
        enhanced=enhanced,
        speech_mask=speech_mask,
        suppressed_mask=suppressed_mask,
        noise=noise,
        noise_scale=noise_scale,
    )


def gen_triple(cfg: SimConfig) -> FeatureTriple:
    return simulate_record(cfg).triple()


def _item_seed(master_seed, index: int):
    # stable composite seed so datasets with different offsets never collide
    return [np.uint32(np.int64(master_seed) & 0xFFFFFFFF), np.uint32(index)]


def gen_triples(cfg: SimConfig, n: int, index_offset: int = 0) -> list[FeatureTriple]:
    """n independent triples with per-item seeds derived from cfg.seed."""
    if n < 1:
        raise ValueError(f"need at least one item, got n={n}")
    items = []
    for i in range(n):
        item_cfg = replace(cfg, seed=_item_seed(cfg.seed, index_offset + i))
        items.append(gen_triple(item_cfg))
    return items


def gen_dataset(cfg: SimConfig, n: int, out_dir, index_offset: int = 0) -> Path:
    """Write n triples as IFT1 files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    triples = gen_triples(cfg, n, index_offset=index_offset)
    entries = {
        "version": 1,
        "count": n,
        "index_offset": index_offset,
        "T": cfg.T,
        "F": cfg.F,
        "num_blobs": cfg.num_blobs,
        "snr_db": cfg.snr_db,
        "suppress_frac": cfg.suppress_frac,
        "residual_noise_frac": cfg.residual_noise_frac,
        "seed": cfg.seed,
    }
    for i, triple in enumerate(triples):
        idx = index_offset + i
        names = {}
        for kind, tensor in (("clean", triple.clean), ("noisy", triple.noisy), ("enh", triple.enhanced)):
            name = f"{idx}.{kind}.ift"
            iffio.save_tensor(tensor, out / name)
            names[kind] = name
        entries[f"item.{idx}"] = f"{names['clean']};{names['noisy']};{names['enh']}"
    manifest = out / "manifest.txt"
    iffio.write_manifest(manifest, entries)
    return manifest


def load_dataset(dataset_dir) -> list[FeatureTriple]:
    root = Path(dataset_dir)
    entries = iffio.read_manifest(root / "manifest.txt")
    triples = []
    for key in entries:
        if not key.startswith("item."):
            continue
        clean_name, noisy_name, enh_name = entries[key].split(";")
        triples.append(
            FeatureTriple(
                clean=iffio.load_tensor(root / clean_name),
                noisy=iffio.load_tensor(root / noisy_name),
                enhanced=iffio.load_tensor(root / enh_name),
            )
        )
    if not triples:
        raise ValueError(f"no items listed in {root / 'manifest.txt'}")
    return triples


def oracle_mse(a, b) -> float:
    """Plain numpy mean squared difference, independent of the graph ops."""
    da = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    db = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if da.shape != db.shape:
        raise ValueError(f"oracle_mse: shapes {da.shape} and {db.shape} differ")
    return float(np.mean((da - db) ** 2))
