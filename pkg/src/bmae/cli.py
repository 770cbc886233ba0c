"""``bmae`` command line: curation, few-shot splits, featurization, probe
training and evaluation.

Every subcommand accepts ``--config FILE`` with plain ``key = value`` lines
(``#`` starts a comment). Keys are the long option names, with dashes or
underscores; flags given on the command line win over the file. Unknown keys
are rejected.

Exit status: 0 ok, 2 usage, 3 data error, 4 numeric failure. Errors are
reported as a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import augment, curate, featmap, frontend, probes, trainer
from .featmap import FormatError
from .frontend import AudioError
from .probes import CheckpointError
from .trainer import NumericError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# Keys that name files or are the seed; they never enter the config hash.
_UNHASHED = {"command", "config", "out", "report", "labels_out", "log", "seed", "func"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


# -- config files ---------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected key = value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    defaults = {}
    for key, text in values.items():
        act = actions[key]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key}: expected a boolean, got {text!r}")
            defaults[key] = low in ("true", "1", "yes")
            continue
        try:
            val = act.type(text) if act.type else text
        except (TypeError, ValueError):
            raise UsageError(f"config key {key}: bad value {text!r}") from None
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key}: {val!r} not in {sorted(act.choices)}")
        defaults[key] = val
    parser.set_defaults(**defaults)


def config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()) -> None:
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = type(f.default)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=f.default)


def _workers() -> int:
    raw = os.environ.get("BMAE_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"BMAE_THREADS must be an integer, got {raw!r}") from None
    return max(1, cap)


# -- subcommands ----------------------------------------------------------------


def cmd_curate(args) -> None:
    metas = curate.read_metas(args.meta)
    cfg = curate.CurationConfig(args.species_cap, args.recording_cap, args.min_per_recording, args.seed)
    sel = curate.curate_pretrain(metas, cfg)
    n = curate.write_split(args.out, curate.selection_clips(metas, sel))
    total = sum(len(m.events) for m in metas)
    print(f"selected {n} of {total} events from {len(metas)} recordings")


def cmd_fewshot(args) -> None:
    metas = curate.read_metas(args.meta)
    clips = curate.sample_fewshot(metas, args.k, args.seed)
    n = curate.write_split(args.out, clips)
    print(f"wrote {n} clips for {len(curate.vocabulary(metas))} classes")


def _load_clip(audio_dir: Path, row: dict) -> tuple[frontend.Waveform, list[int]]:
    path = audio_dir / f"{row['recording_id']}.wav"
    wave = frontend.load_audio(path)
    n = int(round(frontend.SAMPLE_RATE * curate.CLIP_SECONDS))
    start = int(round(float(row.get("start_s", 0.0)) * frontend.SAMPLE_RATE))
    seg = wave.samples[start : start + n]
    if seg.size == 0:
        raise AudioError(f"{path}: clip start {row.get('start_s')} s is past the end of the audio")
    if seg.size < n:
        seg = np.concatenate([seg, np.zeros(n - seg.size, dtype=np.float32)])
    return frontend.Waveform(seg, frontend.SAMPLE_RATE), [int(c) for c in row["labels"]]


def _noise_pool(directory: str | None) -> list[np.ndarray]:
    if not directory:
        return []
    return [frontend.load_audio(p).samples for p in sorted(Path(directory).glob("*.wav"))]


def cmd_featurize(args) -> None:
    rows = curate.read_split(args.split)
    ids = [str(r.get("clip_id", r.get("id", ""))) for r in rows]
    labels_out = args.labels_out or str(Path(args.out).with_suffix(".labels.jsonl"))
    if args.encoder == "import":
        if not args.import_from:
            raise UsageError("--encoder import needs --import-from <bmfm>")
        known = dict(featmap.read_fmap(args.import_from))
        missing = [i for i in ids if i not in known]
        if missing:
            raise FormatError(f"{args.import_from}: no feature map for {len(missing)} clip(s), e.g. {missing[0]!r}")
        featmap.write_fmap(args.out, ((i, known[i]) for i in ids))
        featmap.write_labels(labels_out, ((i, r["labels"]) for i, r in zip(ids, rows)))
        print(f"imported {len(ids)} feature maps")
        return

    audio_dir = Path(args.audio_dir)
    workers = _workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        loaded = list(pool.map(lambda r: _load_clip(audio_dir, r), rows))
    C = max([c for _, ls in loaded for c in ls], default=-1) + 1
    clips = [augment.LabeledClip(w, featmap.multi_hot(ls, C).astype(np.int8) if C else np.zeros(0, np.int8), i)
             for (w, ls), i in zip(loaded, ids)]
    acfg = augment.AugmentConfig(**{f.name: getattr(args, f.name) for f in fields(augment.AugmentConfig)})
    noise = _noise_pool(args.noise_dir)
    nocall = _noise_pool(args.nocall_dir)
    enc = featmap.ToyEncoderSpec(seed=args.encoder_seed, D=args.D)

    def one(idx: int):
        clip = clips[idx]
        if args.train_augment:
            rng = augment.sample_rng(acfg.rng_seed, idx)
            clip = augment.augment_waveform(clip, rng, acfg, pool=clips, noise_pool=noise, nocall_pool=nocall)
            spec = augment.spec_mask(frontend.spectrogram(clip.waveform), rng, acfg)
        else:
            spec = frontend.spectrogram(clip.waveform)
        return featmap.toy_encode(spec, enc), np.flatnonzero(clip.labels).tolist()

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, range(len(clips))))
    featmap.write_fmap(args.out, ((i, fm) for i, (fm, _) in zip(ids, results)))
    featmap.write_labels(labels_out, ((i, ls) for i, (_, ls) in zip(ids, results)))
    print(f"featurized {len(ids)} clips with {workers} worker(s) -> {args.out}")


def _dataset(features_path: str, labels_path: str, kind: str, C: int | None):
    maps = featmap.read_fmap(features_path)
    labels = featmap.read_labels(labels_path)
    missing = [rid for rid, _ in maps if rid not in labels]
    if missing:
        raise FormatError(f"{labels_path}: no labels for {len(missing)} record(s), e.g. {missing[0]!r}")
    if not maps:
        raise FormatError(f"{features_path}: no feature maps")
    n_classes = C if C else max([c for ls in labels.values() for c in ls], default=-1) + 1
    if n_classes < 1:
        raise FormatError(f"{labels_path}: no class labels at all")
    pooled = kind in ("linear", "mlp")
    data = [(featmap.global_average(fm) if pooled else fm.values, featmap.multi_hot(labels[rid], n_classes))
            for rid, fm in maps]
    return data, maps[0][1].D, n_classes


def _train_config(args) -> trainer.TrainConfig:
    base = trainer.TrainConfig.few_shot() if args.regime == "few-shot" else trainer.TrainConfig()
    over = {f.name: getattr(args, f.name) for f in fields(trainer.TrainConfig)
            if getattr(args, f.name, None) is not None}
    return trainer.TrainConfig(**{**{f.name: getattr(base, f.name) for f in fields(base)}, **over})


def cmd_train(args) -> None:
    data, D, C = _dataset(args.features, args.labels, args.probe, args.C)
    cfg = _train_config(args)
    head = probes.build_head(args.probe, D, C, H=args.H, J=args.J, heads=args.heads,
                             focal=not args.no_focal, seed=args.seed)
    head, record = trainer.train_probe(head, data, cfg)
    probes.save_head(head, args.out)
    if args.log:
        Path(args.log).write_text(record.to_jsonl(), encoding="utf-8")
    print(f"trained {args.probe} head ({head.num_params()} parameters) for {cfg.epochs} epochs, "
          f"final loss {record.epoch_loss[-1]:.6f} -> {args.out}")


def cmd_eval(args) -> None:
    head = probes.load_head(args.head)
    data, D, _ = _dataset(args.features, args.labels, head.kind, head.dims()["C"])
    if D != head.dims()["D"]:
        raise FormatError(f"features have D={D} but the head expects D={head.dims()['D']}")
    report = trainer.evaluate(head, data)
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(report.table())


def cmd_params(args) -> None:
    print(probes.param_count(args.probe, args.D, args.C, H=args.H, J=args.J))


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bmae", description="Prototypical probing of frozen audio feature maps.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("curate", cmd_curate, "capped event selection for pretraining")
    p.add_argument("--meta", required=True)
    p.add_argument("--species-cap", type=float, default=500)
    p.add_argument("--recording-cap", type=float, default=2)
    p.add_argument("--min-per-recording", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("fewshot", cmd_fewshot, "k-shot training split")
    p.add_argument("--meta", required=True)
    p.add_argument("--k", type=int, choices=(1, 5, 10, 64), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("featurize", cmd_featurize, "audio clips -> BMFM feature maps")
    p.add_argument("--audio-dir", default=".")
    p.add_argument("--split", required=True)
    p.add_argument("--encoder", choices=("toy", "import"), default="toy")
    p.add_argument("--import-from", help="BMFM file exported by an external encoder")
    p.add_argument("--encoder-seed", type=int, default=0)
    p.add_argument("--D", type=int, default=768)
    p.add_argument("--train-augment", action="store_true")
    p.add_argument("--noise-dir")
    p.add_argument("--nocall-dir")
    p.add_argument("--labels-out")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, augment.AugmentConfig)

    p = command("train", cmd_train, "train a probe head")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--probe", choices=probes.KINDS, required=True)
    p.add_argument("--regime", choices=("full", "few-shot"), default="full")
    p.add_argument("--C", type=int, help="number of classes (default: largest label + 1)")
    p.add_argument("--H", type=int, default=512)
    p.add_argument("--J", type=int, default=20)
    p.add_argument("--heads", type=int, default=12)
    p.add_argument("--no-focal", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="write per-epoch JSON lines here")
    p.add_argument("--out", required=True)
    for f in fields(trainer.TrainConfig):
        if f.name != "seed":
            # None means "take the regime default".
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)

    p = command("eval", cmd_eval, "score a trained head")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--report")

    p = command("params", cmd_params, "closed-form learnable parameter count")
    p.add_argument("--probe", choices=probes.KINDS, required=True)
    p.add_argument("--D", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--H", type=int, default=512)
    p.add_argument("--J", type=int, default=20)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    choices = parser._subparsers._group_actions[0].choices
    if path and command in choices:
        subparser = choices[command]
        values = read_config(path)
        _apply_config(subparser, values)
        for act in subparser._actions:
            if act.dest in values:
                act.required = False
    args = parser.parse_args(argv)
    if args.command == "train":
        cfg = _train_config(args)
        for f in fields(cfg):
            setattr(args, f.name, getattr(cfg, f.name))
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        print(f"config_hash={config_hash(args)}", file=sys.stderr)
        args.func(args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (NumericError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (FormatError, CheckpointError, AudioError, OSError, ValueError, KeyError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
