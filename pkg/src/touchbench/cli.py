"""``touchbench`` command line: one executable, one subcommand per pipeline stage.

Failures print a single line ``error[<category>] <detail>`` on stderr, with
category one of unknown-flag, bad-config, missing-input or runtime. Every
successful subcommand writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import capture, config, corpus, gradcheck, store, synthgen, tactile
from . import metrics as mt
from . import model as mdl
from . import tensor as tn
from . import train as tr
from .core import SplitSpec

EXIT_CODES = {"unknown-flag": 2, "bad-config": 3, "missing-input": 4, "runtime": 1}
SEED_ENV = "TOUCHBENCH_SEED"


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("unknown-flag", message)


# ----------------------------------------------------------------------------
# manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_tree(path: str | Path, exclude: Sequence[str] = ("manifest.json",)) -> dict[str, str]:
    """sha256 per file under ``path`` (or of ``path`` itself), relative keys sorted."""
    path = Path(path)
    if path.is_file():
        return {path.name: sha256_file(path)}
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in exclude and not p.name.endswith(".partial"):
            out[p.relative_to(path).as_posix()] = sha256_file(p)
    return out


def write_manifest(out_dir: str | Path, subcommand: str, argv: Sequence[str], seed: int | None,
                   resolved: dict, inputs: dict[str, dict[str, str]], outputs: str | Path | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "argv": list(argv),
        "seed": seed,
        "config": resolved,
        "inputs": inputs,
        "outputs": hash_tree(outputs if outputs is not None else out_dir),
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


# ----------------------------------------------------------------------------
# helpers


def resolve_seed(flag: int | None, default: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise CliError("bad-config", f"env.{SEED_ENV}: not an integer: {env!r}") from None


def _need(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"{what} {p} does not exist")
    return p


def _load_config(path: str | None) -> config.RunConfig:
    if path is None:
        return config.RunConfig()
    _need(path, "config")
    return config.load(path)


def _corpus_for(run: config.RunConfig, base: Path | None = None):
    """Episodes named by the config: converted containers, or an in-memory synthetic corpus."""
    if run.data.containers:
        d = Path(run.data.containers)
        if base is not None and not d.is_absolute():
            d = base / d
        _need(d, "container directory")
        eps = store.load_corpus(d)
        if not eps:
            raise CliError("missing-input", f"no .tbc containers in {d}")
        return eps
    return corpus.synthetic_corpus(run.data.episodes, run.data.corpus_seed, run.gen)


def map_mosaic(pred: np.ndarray, target: np.ndarray, scale: int = 4) -> np.ndarray:
    """Peak-over-time maps, predicted on top and ground truth below, left|right hands."""
    rows = [np.concatenate([m.max(axis=0)[0], m.max(axis=0)[1]], axis=1) for m in (pred, target)]
    img = np.clip(np.concatenate(rows, axis=0), 0.0, 1.0)
    return np.kron(img, np.ones((scale, scale)))


def write_pgm(path: Path, img: np.ndarray) -> Path:
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5 %d %d 255\n" % (data.shape[1], data.shape[0]))
        f.write(data.tobytes())
    return path


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(args, argv) -> int:
    run = _load_config(args.config)
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.episodes):
        script = synthgen.generate_script(corpus.episode_seed(seed, i), run.gen)
        (out / f"{script.episode_id}.json").write_text(script.dumps())
    write_manifest(out, "gen", argv, seed, {"gen": config.dumps(run)}, {})
    print(f"wrote {args.episodes} scripts to {out}")
    return 0


def _capture_one(job):
    path, out, rig, seed, gen_cfg = job
    script = synthgen.ScenarioScript.from_dict(json.loads(Path(path).read_text()))
    mappings = tactile.default_mappings()
    ep = capture.capture_episode(script, mappings, rig, seed * 1_000_003 + script.seed, gen_cfg)
    d = capture.write_episode_dir(ep, Path(out) / capture.episode_relpath(ep.meta))
    return str(d), sorted(ep.meta.flags)


def cmd_capture_sim(args, argv) -> int:
    run = _load_config(args.config)
    seed = resolve_seed(args.seed)
    src = _need(args.inp, "script directory")
    scripts = sorted(src.glob("*.json")) if src.is_dir() else [src]
    scripts = [p for p in scripts if p.name != "manifest.json"]
    if not scripts:
        raise CliError("missing-input", f"no scripts in {src}")
    rig = capture.load_rig(_need(args.sensors, "sensor file")) if args.sensors else capture.default_rig()
    out = Path(args.out)
    jobs = [(str(p), str(out), rig, seed, run.gen) for p in scripts]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_capture_one, jobs))
    else:
        results = [_capture_one(j) for j in jobs]
    flagged = sum(1 for _, flags in results if flags)
    inputs = {"scripts": hash_tree(src)}
    if args.sensors:
        inputs["sensors"] = hash_tree(args.sensors)
    write_manifest(out, "capture-sim", argv, seed, {"sensors": [s.__dict__ for s in rig]}, inputs)
    print(f"captured {len(results)} episodes into {out} ({flagged} flagged)")
    return 0


def _preprocess_one(job):
    d, pre_cfg = job
    ep = capture.read_episode_dir(d)
    archive = tactile.preprocess_episode(ep, tactile.default_mappings(), pre_cfg)
    archive.save(Path(d) / store.ARCHIVE_NAME)
    return d


def cmd_preprocess(args, argv) -> int:
    root = _need(args.root, "episode root")
    dirs = store.find_episode_dirs(root)
    if not dirs:
        raise CliError("missing-input", f"no episode directories under {root}")
    jobs = [(str(d), tactile.PreprocessConfig()) for d in dirs]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_preprocess_one, jobs))
    else:
        for j in jobs:
            _preprocess_one(j)
    write_manifest(root, "preprocess", argv, None, {}, {}, outputs=root)
    print(f"preprocessed {len(dirs)} episodes")
    return 0


def cmd_convert(args, argv) -> int:
    root = _need(args.root, "episode root")
    bad = str(_need(args.bad_list, "bad list")) if args.bad_list else None
    out = Path(args.out) if args.out else root / "containers"
    rep = store.batch_convert(root, out, workers=args.workers, skip_existing=args.skip_existing,
                              bad_list=bad, reason=args.reason)
    inputs = {"bad_list": hash_tree(bad)} if bad else {}
    write_manifest(out, "convert", argv, None, {"workers": args.workers}, inputs)
    print(f"converted {rep.converted}, skipped {rep.skipped}, failed {rep.failed}")
    for tid, why in rep.failures:
        print(f"  failed {tid}: {why}")
    return 0 if rep.failed == 0 else 1


def cmd_train(args, argv) -> int:
    run = _load_config(args.config)
    seed = resolve_seed(args.seed, run.train.seed)
    run.train = tr.TrainConfig(**{**run.train.to_dict(), "seed": seed})
    base = Path(args.config).parent if args.config else None
    episodes = _corpus_for(run, base)
    spec, parts = corpus.split_corpus(episodes, run.data.split_seed, frozenset(run.data.holdout_objects))
    train_eps = corpus.subset(parts["train"], run.data.train_fraction, run.data.split_seed)
    dtype = np.dtype(run.train.dtype)
    feats = {k: mdl.prepare_episodes(v, run.model, dtype) for k, v in (("train", train_eps), ("val", parts["val"]))}
    out = Path(args.out) / run.name
    ckpt = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config.dumps(run))
    (out / "split.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    meta = {"run_config": config.dumps(run), "split": spec.to_dict()}

    def show(entry, seconds):
        print(f"epoch {entry['epoch']:3d}  loss {entry['loss']:.5f}  lr {entry['lr']:.2e}  "
              f"val V.IoU {entry.get('val_volumetric_iou', float('nan')):.4f}  ({seconds:.1f}s)", flush=True)

    res = tr.train(feats["train"], feats["val"], run.model, run.train, run.loss, out_dir=ckpt,
                   log_fn=show, meta=meta)
    tr.write_log(out / "log.jsonl", res.log)
    inputs = {"config": hash_tree(args.config)} if args.config else {}
    write_manifest(out, "train", argv, seed, {"run": config.dumps(run)}, inputs)
    print(f"best epoch {res.best_epoch} (val V.IoU {res.best_val:.4f}); checkpoints in {ckpt}")
    return 0


def cmd_eval(args, argv) -> int:
    ckpt = _need(args.checkpoint, "checkpoint")
    params, model_cfg, extra, _ = mdl.load_checkpoint(ckpt)
    if args.config:
        run = _load_config(args.config)
    elif "run_config" in extra:
        run = config.loads(extra["run_config"])
    else:
        raise CliError("bad-config", "checkpoint carries no run config; pass --config")
    try:
        views = mdl.make_viewset(args.views)
    except ValueError as e:
        raise CliError("bad-config", f"views: {e}") from None
    episodes = _corpus_for(run, Path(args.config).parent if args.config else None)
    if "split" in extra:
        spec = SplitSpec.from_dict(extra["split"])
    else:
        spec, _ = corpus.split_corpus(episodes, run.data.split_seed, frozenset(run.data.holdout_objects))
    if args.split not in ("train", "val", "test_seen", "test_unseen"):
        raise CliError("bad-config", f"split: unknown split {args.split!r}")
    chosen = [e for e in episodes if e.meta.episode_id in spec.get(args.split)]
    if not chosen:
        raise CliError("missing-input", f"split {args.split} is empty")
    ev = run.eval
    ev = mt.EvalConfig(tau=ev.tau, views=ev.views, lightweight=args.lightweight or ev.lightweight,
                       max_trajectories=args.max_trajectories or ev.max_trajectories,
                       pooled_temporal=ev.pooled_temporal, batch_size=ev.batch_size)
    feats = mdl.prepare_episodes(chosen, model_cfg)
    rep = mt.evaluate(params, feats, views, ev, model_cfg)
    label = mdl.viewset_label(views)
    out = Path(args.out) / run.name / ckpt.stem / label / args.split
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "report.json")
    lines = [f"views {label}  split {args.split}  episodes {rep.episodes}  frames {rep.frames}"]
    lines += [f"{mt.LABELS[m]:6s} {rep.value(m):.4f}" for m in mt.METRICS]
    for s, r in rep.per_scenario.items():
        lines.append(f"  {s:10s} " + "  ".join(f"{mt.LABELS[m]} {r.value(m):.4f}" for m in mt.METRICS))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    if args.dump_maps:
        maps = out / "maps"
        maps.mkdir(exist_ok=True)
        for f in mt.select_episodes(feats, ev):
            pred, covered = mt.predict_episode(params, f, views, model_cfg, ev.batch_size)
            np.savez_compressed(maps / f"{f.episode_id}.npz", pred=pred, target=f.target, valid=f.valid,
                                covered=covered)
            write_pgm(maps / f"{f.episode_id}.pgm", map_mosaic(pred[covered], f.target[covered]))
    write_manifest(out, "eval", argv, None, {"run": config.dumps(run), "views": label, "split": args.split},
                   {"checkpoint": hash_tree(ckpt)})
    print("\n".join(lines))
    return 0


def cmd_report(args, argv) -> int:
    base = mt.MetricsReport.load(_need(args.baseline, "baseline report"))
    variants = [mt.MetricsReport.load(_need(p, "variant report")) for p in args.variants]
    table = mt.report_table(base, [(r.views, r) for r in variants], baseline_label=base.views or "baseline")
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table + "\n")
        summary = {"baseline": base.to_dict(), "variants": [r.to_dict() for r in variants],
                   "change_percent": [{m: mt.relative_change(r.value(m), base.value(m)) for m in mt.METRICS}
                                      for r in variants]}
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        inputs = {"baseline": hash_tree(args.baseline), **{f"variant{i}": hash_tree(p) for i, p in enumerate(args.variants)}}
        write_manifest(out, "report", argv, None, {}, inputs)
    return 0


def cmd_gradcheck(args, argv) -> int:
    results = gradcheck.run_suite(args.seeds, args.model_seeds)
    for name, errs in results.items():
        cells = "  ".join(f"{k} {v:.2e}{'' if v < gradcheck.TOLERANCE[k] else ' FAIL'}" for k, v in errs.items())
        print(f"{name:18s} {cells}")
    ok = gradcheck.passed(results)
    print("tolerances: " + ", ".join(f"{k} < {v:.0e}" for k, v in gradcheck.TOLERANCE.items()))
    print("overall: " + ("PASS" if ok else "FAIL"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
        write_manifest(out, "gradcheck", argv, None, {"seeds": args.seeds, "model_seeds": args.model_seeds}, {})
    return 0 if ok else 1


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="touchbench", description="Multi-view tactile prediction toolkit.")
    p.add_argument("--version", action="version", version=f"touchbench {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenario scripts")
    g.add_argument("--seed", type=int)
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("capture-sim", help="simulate asynchronous capture of scripts")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--sensors")
    c.add_argument("--seed", type=int)
    c.add_argument("--config")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_capture_sim)

    pp = sub.add_parser("preprocess", help="remap and normalise glove streams of captured episodes")
    pp.add_argument("--root", required=True)
    pp.add_argument("--workers", type=int, default=1)
    pp.set_defaults(func=cmd_preprocess)

    cv = sub.add_parser("convert", help="pack episode directories into trajectory containers")
    cv.add_argument("--root", required=True)
    cv.add_argument("--out")
    cv.add_argument("--workers", type=int, default=1)
    cv.add_argument("--skip-existing", action="store_true")
    cv.add_argument("--bad-list")
    cv.add_argument("--reason")
    cv.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under a view subset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--views", default="ego,wl,wr")
    e.add_argument("--split", default="test_seen")
    e.add_argument("--lightweight", action="store_true")
    e.add_argument("--max-trajectories", type=int)
    e.add_argument("--config")
    e.add_argument("--out", default="runs")
    e.add_argument("--dump-maps", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="table of variants against a baseline report")
    r.add_argument("--baseline", required=True)
    r.add_argument("--variants", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of the tensor engine")
    gc.add_argument("--seeds", type=int, default=100)
    gc.add_argument("--model-seeds", type=int, default=1)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except CliError as e:
        category, detail = e.category, str(e)
    except config.ConfigError as e:
        category, detail = "bad-config", str(e)
    except FileNotFoundError as e:
        category, detail = "missing-input", str(e)
    except Exception as e:  # noqa: BLE001 - reported as one line
        category, detail = "runtime", f"{type(e).__name__}: {e}"
    detail = " ".join(detail.split())
    print(f"error[{category}] {detail}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
