"""Synthetic multi-dataset volume corpus with latent classes.

Texture classes combine two factors:

* grating orientation (horizontal vs vertical), visible in any single slice;
* the direction of an intensity ramp along the slice axis, which is only
  recoverable from the ordered sequence of slices.

A single slice therefore identifies the class only up to the ramp direction,
while the whole volume identifies it completely. Each volume also carries a
slice-varying blob (a sphere cross-section) that is independent of the class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CorpusSpec:
    datasets: tuple[int, ...] = (100, 100)
    slices: int = 16
    extent: int = 32
    classes: int = 4
    pattern: str = "texture"
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.extent < 8:
            raise ValueError(f"slice extent must be at least 8, got {self.extent}")
        if self.classes < 2:
            raise ValueError("need at least 2 latent classes")
        if self.slices < 4:
            raise ValueError("volumes need at least 4 slices")
        if self.pattern not in ("texture", "constant"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if not self.datasets or min(self.datasets) < 1:
            raise ValueError("every dataset needs at least one volume")


@dataclass(frozen=True)
class Corpus:
    """Volumes ``(V, n, E, E)`` with dataset tags; labels are for probing only."""

    volumes: np.ndarray
    dataset: np.ndarray
    labels: np.ndarray
    spec: CorpusSpec

    def __len__(self) -> int:
        return len(self.volumes)

    def unlabeled(self) -> np.ndarray:
        """The training-facing view: volumes only."""
        return self.volumes


def _texture_volume(rng, cls: int, spec: CorpusSpec, gain: float) -> np.ndarray:
    n, e = spec.slices, spec.extent
    yy, xx = np.mgrid[0:e, 0:e] / e
    vertical = (cls // 2) % 2 == 1
    ascending = cls % 2 == 0
    # more than four classes: extra orientations on top of the two base ones
    angle = (np.pi / 2 if vertical else 0.0) + np.pi / 4 * (cls // 4)
    coord = np.cos(angle) * yy + np.sin(angle) * xx
    freq = 3.0 + rng.uniform(-0.3, 0.3)
    phase = rng.uniform(0, 2 * np.pi)
    ramp = np.linspace(0.3, 0.7, n)
    if not ascending:
        ramp = ramp[::-1]
    ramp = ramp + rng.uniform(-0.05, 0.05)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    radius = rng.uniform(0.15, 0.3)
    vol = np.empty((n, e, e))
    for i in range(n):
        t = (i - (n - 1) / 2) / ((n - 1) / 2)
        r = radius * np.sqrt(max(0.0, 1.0 - 0.8 * t * t))
        blob = 0.15 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        grating = 0.15 * np.sin(2 * np.pi * freq * coord + phase + 0.2 * i)
        vol[i] = ramp[i] + grating + blob
    return gain * vol


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    levels = np.linspace(0.2, 0.8, spec.classes)
    volumes, dataset, labels = [], [], []
    for d, count in enumerate(spec.datasets):
        gain = 1.0 + 0.1 * d
        cls = rng.permutation(np.arange(count) % spec.classes)
        for c in cls:
            if spec.pattern == "constant":
                vol = np.full((spec.slices, spec.extent, spec.extent), levels[c])
            else:
                vol = _texture_volume(rng, int(c), spec, gain)
            vol = vol + spec.noise * rng.normal(size=vol.shape)
            volumes.append(vol)
            dataset.append(d)
            labels.append(int(c))
    return Corpus(np.stack(volumes), np.array(dataset), np.array(labels), spec)
