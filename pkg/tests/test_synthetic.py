import numpy as np

from bmae import synthetic
from bmae.synthetic import PatchWorld


def test_world_is_seeded():
    a, pa = synthetic.patch_dataset(PatchWorld(seed=3), 5, seed=1)
    b, pb = synthetic.patch_dataset(PatchWorld(seed=3), 5, seed=1)
    assert pa == pb
    assert all(np.array_equal(x, y) and np.array_equal(u, v) for (x, u), (y, v) in zip(a, b))


def test_one_evidence_patch_per_label():
    world = PatchWorld(background_noise=0.0, evidence_noise=0.0)
    data, primary = synthetic.patch_dataset(world, 20, seed=0)
    b = world.base()
    for (fm, y), c0 in zip(data, primary):
        assert fm.shape == (8, 32, 32)
        off = np.linalg.norm(fm.reshape(-1, 32) - b, axis=1) > 0
        assert off.sum() == y.sum() and y[c0] == 1


def test_balanced_and_k_shot():
    _, primary = synthetic.balanced_patch_dataset(PatchWorld(), 6, seed=0)
    assert np.bincount(primary).tolist() == [6] * 8
    idx = synthetic.k_shot(primary, 4, seed=2)
    assert np.bincount(np.asarray(primary)[idx]).tolist() == [4] * 8
    assert idx == synthetic.k_shot(primary, 4, seed=2)
    assert len(synthetic.k_shot(primary, 10, seed=0)) == 48


def test_averaging_dilutes_evidence():
    world = PatchWorld(background_noise=0.0, evidence_noise=0.0)
    (fm, _), = synthetic.patch_dataset(world, 1, seed=0)[0][:1]
    avg = synthetic.averaged([(fm, None)])[0][0]
    # one replaced patch out of 256 shifts the mean by 1/256 at most per label
    assert np.linalg.norm(avg - world.base()) <= 2 * 1.5 * np.sqrt(32) / 256 + 1e-12
