"""End-to-end acceptance checks. Each test prints one PASS/FAIL line, collected
again in the terminal summary under "acceptance"."""

import os
import subprocess
import sys
import time
import zlib

import numpy as np
import pytest

from bmae import curate as cu
from bmae import featmap, frontend, probes, synthetic, trainer
from bmae import ndgrad as nd
from bmae.curate import CurationConfig, RecordingMeta
from bmae.metrics import average_precision, auroc, evaluate_all, top1_acc
from bmae.ndgrad import Tensor
from oracles import ap_oracle, auroc_oracle, proto_scores_oracle

SEEDS = (0, 1, 2)
N_TRAIN, N_TEST = 1024, 256


# -- 1 ---------------------------------------------------------------------------


def test_parameter_accounting(verdict):
    t0 = time.perf_counter()
    table = {"linear": 21_525, "mlp": 535_573, "attentive": 2_119_701, "proto": 430_521}
    got = {k: probes.param_count(k, 1024, 21, H=512, J=20) for k in table}
    ok = got == table
    rng = np.random.default_rng(1)
    bad = []
    for _ in range(50):
        kind = str(rng.choice(list(table)))
        D = int(rng.integers(1, 9)) * 12
        C, H, J = (int(v) for v in rng.integers(1, 12, size=3))
        head = probes.build_head(kind, D, C, H=H, J=J, heads=12 if D % 12 == 0 else 1)
        enumerated = sum(p.data.size for _, p in head.parameters())
        if enumerated != probes.param_count(kind, D, C, H=H, J=J):
            bad.append((kind, D, C, H, J))
    dt = time.perf_counter() - t0
    ok = ok and not bad and dt < 1.0
    verdict(1, "parameter accounting", ok, f"table {got}, {len(bad)} enumeration mismatches, {dt:.2f}s")


# -- 2 ---------------------------------------------------------------------------


def _param_grad_error(loss_fn, params, step=1e-5) -> float:
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy().reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
    return worst


def test_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, count = 0.0, 0
    kinds = ("linear", "mlp", "attentive", "proto")
    for inst in range(100):
        kind = kinds[inst % 4]
        C = int(rng.integers(1, 6))
        heads = int(rng.integers(1, 3))
        D = heads * int(rng.integers(1, 5)) if kind == "attentive" else int(rng.integers(2, 9))
        J = int(rng.integers(1, 5))
        head = probes.build_head(kind, D, C, H=int(rng.integers(1, 5)), J=J, heads=heads, seed=inst)
        if kind == "proto":
            head.head_weights.data[...] = rng.uniform(0.2, 1.5, head.head_weights.data.shape)
        shape = (2, D) if kind in ("linear", "mlp") else (2, int(rng.integers(1, 3)), int(rng.integers(2, 4)), D)
        x = rng.standard_normal(shape)
        y = (rng.random((2, C)) < 0.5).astype(float)

        def with_input(t):
            loss = probes.asymmetric_loss(head.forward(t), y)
            extra = head.extra_loss()
            return nd.add(loss, extra) if extra is not None else loss

        worst = max(worst, nd.grad_check(with_input, x))
        worst = max(worst, _param_grad_error(lambda: with_input(Tensor(x)), [p for _, p in head.parameters()]))
        count += 1
    dt = time.perf_counter() - t0
    verdict(2, "gradient correctness", worst < 1e-4 and dt < 60,
            f"max relative error {worst:.2e} over {count} instances, {dt:.1f}s")


# -- 3 ---------------------------------------------------------------------------


def test_max_cosine_semantics(verdict):
    rng = np.random.default_rng(3)
    err, differing, total = 0.0, 0, 0
    for i in range(1000):
        D = int(rng.integers(1, 9))
        C, J = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        fm = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 5)), D))
        bank = probes.PrototypicalHead(D, C, J, focal=False, seed=i)
        got = probes.proto_similarities(fm, bank)
        want = proto_scores_oracle(fm, bank.prototypes.data, focal=False)
        err = max(err, float(np.abs(got - want).max()))
        for lam in (0.1, 10.0):
            scaled = probes.proto_similarities(fm * lam, bank)
            differing += int(np.count_nonzero(scaled != got))
            total += got.size
    ok = err <= 1e-12 and differing == 0
    verdict(3, "max-cosine semantics", ok,
            f"oracle error {err:.1e}; {differing}/{total} scores not bit-identical after scaling")


# -- 4 ---------------------------------------------------------------------------


def test_initialization_contract(verdict):
    worst = 0.0
    for C, J in ((1, 1), (21, 20), (5, 3)):
        bank = probes.PrototypicalHead(16, C, J, seed=C)
        p = 1.0 / (1.0 + np.exp(-probes.proto_logits(np.zeros((4, C, J)), bank)))
        worst = max(worst, float(np.abs(p - 0.11920).max()))
    verdict(4, "initialization contract", worst <= 1e-5, f"max |p - 0.11920| = {worst:.1e}")


# -- 5, 6 ------------------------------------------------------------------------


def _world_split(seed):
    world = synthetic.PatchWorld(seed=seed)
    train, primary = synthetic.patch_dataset(world, N_TRAIN, seed=0)
    test, _ = synthetic.patch_dataset(world, N_TEST, seed=1)
    return world, train, primary, test


def _fit(head, train, test, cfg):
    trainer.train_probe(head, train, cfg)
    return trainer.evaluate(head, test).map


@pytest.fixture(scope="module")
def full_data_runs():
    out = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        world, train, _, test = _world_split(seed)
        cfg = trainer.TrainConfig(seed=seed)
        proto = _fit(probes.PrototypicalHead(world.D, world.C, 20, seed=seed), train, test, cfg)
        linear = _fit(probes.LinearHead(world.D, world.C, seed=seed), synthetic.averaged(train),
                      synthetic.averaged(test), cfg)
        out[seed] = (proto, linear)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_probing_gap(verdict, full_data_runs):
    proto = float(np.mean([full_data_runs[s][0] for s in SEEDS]))
    linear = float(np.mean([full_data_runs[s][1] for s in SEEDS]))
    dt = full_data_runs["seconds"]
    verdict(5, "probing gap", proto >= 0.90 and linear <= 0.60 and dt < 300,
            f"prototypical {proto:.3f}, linear {linear:.3f}, {dt:.0f}s")


@pytest.mark.slow
def test_few_shot_monotonicity(verdict, full_data_runs):
    t0 = time.perf_counter()
    by_k = {1: [], 5: [], 10: []}
    for seed in SEEDS:
        world, train, primary, test = _world_split(seed)
        for subset in range(3):
            for k in by_k:
                idx = synthetic.k_shot(primary, k, seed=100 * seed + subset)
                head = probes.PrototypicalHead(world.D, world.C, 20, seed=seed)
                cfg = trainer.TrainConfig.few_shot(seed=seed)
                by_k[k].append(_fit(head, [train[i] for i in idx], test, cfg))
    means = {k: float(np.mean(v)) for k, v in by_k.items()}
    full = float(np.mean([full_data_runs[s][0] for s in SEEDS]))
    dt = time.perf_counter() - t0
    ok = means[1] <= means[5] <= means[10] and means[10] >= 0.85 * full and dt < 600
    verdict(6, "few-shot monotonicity", ok,
            f"k=1 {means[1]:.3f}, k=5 {means[5]:.3f}, k=10 {means[10]:.3f}, full {full:.3f}, {dt:.0f}s")


# -- 7 ---------------------------------------------------------------------------


def test_metric_oracles(verdict):
    rng = np.random.default_rng(7)
    err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[:2] = (1, 0)
        y = rng.permutation(y)
        s = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        err = max(err, abs(average_precision(s, y) - ap_oracle(s, y)), abs(auroc(s, y) - auroc_oracle(s, y)))
    r = evaluate_all(rng.random((10000, 5)), rng.integers(0, 2, (10000, 5)))
    worked = [
        average_precision([0.9, 0.1, 0.8], [1, 0, 1]) == 1.0,
        average_precision([0.1, 0.9], [1, 0]) == 0.5,
        average_precision([0.3, 0.2, 0.7], [1, 1, 1]) == 1.0,
        auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0,
        auroc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5,
        auroc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0,
        top1_acc([[0.1, 0.9]], [[0, 1]])[0] == 1.0,
        top1_acc([[0.1, 0.9]], [[1, 0]])[0] == 0.0,
        top1_acc([[0.1, 0.9], [0.8, 0.2]], [[0, 1], [0, 1]])[0] == 0.5,
    ]
    perfect = evaluate_all(np.eye(4), np.eye(4))
    worked.append(perfect.map == perfect.auroc == perfect.top1 == 1.0)
    ok = err <= 1e-12 and abs(r.auroc - 0.5) <= 0.02 and all(worked)
    verdict(7, "metric oracles", ok,
            f"oracle error {err:.1e}, random AUROC {r.auroc:.4f}, {sum(worked)}/{len(worked)} worked examples")


# -- 8 ---------------------------------------------------------------------------


def _random_corpus(rng):
    metas = []
    for s in range(int(rng.integers(1, 6))):
        for r in range(int(rng.integers(1, 12))):
            n = int(rng.integers(0, 7))
            evs = [(float(i), float(i) + 0.5) for i in range(n)]
            metas.append(RecordingMeta(f"s{s}r{r}", f"s{s}", (), 10.0, evs))
    return metas


def test_curation_constraints(verdict):
    rng = np.random.default_rng(8)
    violations = 0
    for i in range(200):
        metas = _random_corpus(rng)
        cfg = CurationConfig(int(rng.integers(1, 25)), int(rng.integers(1, 4)), 1, seed=i)
        violations += bool(cu.check_curation(metas, cu.curate_pretrain(metas, cfg), cfg))
    corpus = synthetic.redundant_corpus()
    before = sum(len(m.events) for m in corpus)
    ratio = len(cu.curate_pretrain(corpus, CurationConfig(500, 2))) / before
    verdict(8, "curation constraints", violations == 0 and 0.45 <= ratio <= 0.55,
            f"{violations}/200 corpora violate a constraint, reduction ratio {ratio:.3f}")


# -- 9 ---------------------------------------------------------------------------


def test_few_shot_sampler(verdict):
    rng = np.random.default_rng(9)
    problems = []
    for i in range(200):
        metas = []
        for s in range(int(rng.integers(1, 5))):
            for r in range(int(rng.integers(0, 14))):
                dur = float(rng.choice([3.0, 5.0, 12.0, 40.0]))
                n = int(rng.integers(0, 4))
                evs = sorted((float(a), float(a) + 0.3) for a in rng.uniform(0, dur - 0.3, n))
                sec = ("x",) if rng.random() < 0.3 else ()
                metas.append(RecordingMeta(f"s{s}r{r}", f"s{s}", sec, dur, evs))
        if not metas:
            continue
        k = int(rng.choice([1, 5, 10]))
        clips = cu.sample_fewshot(metas, k, seed=i)
        if [c.to_json() for c in clips] != [c.to_json() for c in cu.sample_fewshot(metas, k, seed=i)]:
            problems.append("nondeterministic")
        keys = [(c.recording_id, c.event_index) for c in clips]
        if len(set(keys)) != len(keys):
            problems.append("shared event")
        for sp in {m.species for m in metas}:
            n_eligible = sum(1 for m in metas if m.species == sp and cu.eligible(m))
            got = sum(1 for c in clips if c.species == sp)
            if got > k or (n_eligible >= k and got != k):
                problems.append(f"{sp}: {got} clips for k={k} with {n_eligible} eligible")
    verdict(9, "few-shot sampler", not problems, f"{len(problems)} problems {problems[:2]}")


# -- 10 --------------------------------------------------------------------------


def test_frontend_geometry(verdict):
    rng = np.random.default_rng(10)
    shapes = set()
    for kind in range(6):
        if kind == 0:
            x = np.zeros(160_000)
        elif kind == 1:
            x = np.sin(2 * np.pi * 1000 * np.arange(160_000) / 32_000)
        else:
            x = rng.standard_normal(160_000) * 10.0 ** rng.uniform(-4, 0)
        spec = frontend.spectrogram(frontend.Waveform(x.astype(np.float32), 32_000))
        shapes.add(spec.values.shape if np.all(np.isfinite(spec.values)) else "non-finite")
    raw = frontend.fbank(frontend.Waveform(rng.standard_normal(160_000).astype(np.float32), 32_000))
    ok = shapes == {(128, 512)} and raw.values.shape == (128, 498)
    verdict(10, "frontend geometry", ok, f"normalized shapes {shapes}, raw {raw.values.shape}")


# -- 11 --------------------------------------------------------------------------


def test_determinism(verdict, tmp_path):
    world = synthetic.PatchWorld(H=2, W=4)
    data, _ = synthetic.patch_dataset(world, 24, seed=0)
    featmap.write_fmap(tmp_path / "f.bmfm", [(f"c{i}", featmap.FeatureMap(fm)) for i, (fm, _) in enumerate(data)])
    featmap.write_labels(tmp_path / "l.jsonl", [(f"c{i}", np.flatnonzero(y).tolist()) for i, (_, y) in enumerate(data)])
    blobs = []
    for run, threads in enumerate(("1", "1", "4")):
        env = {**os.environ, "OMP_NUM_THREADS": threads, "OPENBLAS_NUM_THREADS": threads, "BMAE_THREADS": threads}
        out = tmp_path / f"h{run}.bmph"
        res = subprocess.run([sys.executable, "-m", "bmae.cli", "train", "--features", str(tmp_path / "f.bmfm"),
                              "--labels", str(tmp_path / "l.jsonl"), "--probe", "proto", "--C", "8", "--J", "4",
                              "--epochs", "3", "--batch-size", "8", "--seed", "11", "--out", str(out)],
                             env=env, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        blobs.append(out.read_bytes())
    digests = [f"{zlib.crc32(b):08x}" for b in blobs]
    verdict(11, "determinism", blobs[0] == blobs[1] == blobs[2], f"checkpoint crc32 {digests}")
