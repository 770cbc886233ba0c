"""Synthetic data with known structure, for experiments and tests.

``patch_dataset`` plants each present class as a single patch in an H x W
grid of background patches, so its evidence is strongly local and global
averaging dilutes it H*W-fold. Like real encoder outputs, all patches share a
common direction ``b`` and differ by small perturbations. ``redundant_corpus`` builds curation metadata
with many events per recording.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curate import RecordingMeta


@dataclass(frozen=True)
class PatchWorld:
    C: int = 8
    D: int = 32
    H: int = 8
    W: int = 32
    background_noise: float = 0.2
    evidence_noise: float = 0.3
    evidence_scale: float = 1.5
    max_labels: int = 2
    seed: int = 0

    def _directions(self, n: int, stream: int) -> np.ndarray:
        v = np.random.default_rng([self.seed, stream]).standard_normal((n, self.D))
        return v / np.linalg.norm(v, axis=1, keepdims=True) * np.sqrt(self.D)

    def signatures(self) -> np.ndarray:
        """(C, D) class directions, norm sqrt(D)."""
        return self._directions(self.C, 1)

    def base(self) -> np.ndarray:
        return self._directions(1, 4)[0]

    def sample(self, classes, rng: np.random.Generator) -> np.ndarray:
        cells = self.H * self.W
        b = self.base()
        fm = b + self.background_noise * rng.standard_normal((cells, self.D))
        spots = rng.choice(cells, size=len(classes), replace=False)
        mu = self.signatures()
        for c, s in zip(classes, spots):
            fm[s] = b + self.evidence_scale * mu[c] + self.evidence_noise * rng.standard_normal(self.D)
        return fm.reshape(self.H, self.W, self.D)


def patch_dataset(world: PatchWorld, n: int, seed: int):
    """``n`` samples of ``((H, W, D) map, multi-hot labels)`` plus each sample's primary class."""
    rng = np.random.default_rng([world.seed, 2, seed])
    data, primary = [], []
    for _ in range(n):
        k = int(rng.integers(1, world.max_labels + 1))
        classes = rng.choice(world.C, size=k, replace=False)
        y = np.zeros(world.C)
        y[classes] = 1.0
        data.append((world.sample(classes, rng), y))
        primary.append(int(classes[0]))
    return data, primary


def balanced_patch_dataset(world: PatchWorld, per_class: int, seed: int):
    """Like :func:`patch_dataset` but with exactly ``per_class`` samples per primary class."""
    rng = np.random.default_rng([world.seed, 3, seed])
    data, primary = [], []
    for c0 in range(world.C):
        for _ in range(per_class):
            k = int(rng.integers(1, world.max_labels + 1))
            others = rng.choice([c for c in range(world.C) if c != c0], size=k - 1, replace=False)
            classes = [c0, *others.tolist()]
            y = np.zeros(world.C)
            y[classes] = 1.0
            data.append((world.sample(classes, rng), y))
            primary.append(c0)
    return data, primary


def k_shot(primary, k: int, seed: int) -> list[int]:
    """Indices of up to ``k`` samples per primary class, drawn without replacement."""
    rng = np.random.default_rng([seed, k])
    primary = np.asarray(primary)
    picked = []
    for c in np.unique(primary):
        pool = np.flatnonzero(primary == c)
        picked.extend(rng.choice(pool, size=min(k, pool.size), replace=False).tolist())
    return sorted(picked)


def averaged(data):
    return [(fm.reshape(-1, fm.shape[-1]).mean(axis=0), y) for fm, y in data]


def redundant_corpus(n_species: int = 200, seed: int = 0, p_stop: float = 0.293,
                     max_events: int = 60) -> list[RecordingMeta]:
    """Recordings with 1 + Geometric(p_stop) events each (about 3.4 on average),
    a heavy-tailed number of recordings per species and ~30% secondary labels."""
    rng = np.random.default_rng(seed)
    metas = []
    for s in range(n_species):
        n_rec = int(np.clip(rng.pareto(1.5) * 20 + 1, 1, 400))
        for r in range(n_rec):
            n_ev = int(min(rng.geometric(p_stop), max_events))
            duration = float(rng.uniform(3.0, 60.0))
            starts = np.sort(rng.uniform(0.0, max(duration - 0.5, 0.0), size=n_ev))
            events = [(float(a), float(min(a + 0.5, duration))) for a in starts]
            secondary = [f"sp{int(rng.integers(n_species)):04d}"] if rng.random() < 0.3 else []
            metas.append(RecordingMeta(f"sp{s:04d}_r{r:04d}", f"sp{s:04d}", secondary, duration, events))
    return metas
