"""``vfalign`` command line: synth, train, eval, check, sweep, replay.

Exit codes: 0 ok, 2 config error, 3 I/O or malformed input, 4 training abort,
5 checkpoint/dataset/config dimension mismatch, 6 self-check failure.

Environment: ``VFALIGN_SEED`` supplies the root seed when ``--seed`` is absent;
``VFALIGN_THREADS`` caps BLAS threads (default 1) and ``VFALIGN_RUNS`` is the
parent of auto-named run directories (default ``./runs``).
"""

import os

# BLAS reads these once at load time, so they must be set before numpy is imported
_THREADS = os.environ.get("VFALIGN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import struct  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from .checks import bound_suite, grad_suite, hinge_suite  # noqa: E402
from .config import ConfigError, RunConfig, load_config  # noqa: E402
from .data import Split, read_dataset, validate_dataset, write_dataset  # noqa: E402
from .encoders import load_checkpoint, save_checkpoint  # noqa: E402
from .evaluation import evaluate_all  # noqa: E402
from .rng import Rng  # noqa: E402
from .synth import generate  # noqa: E402
from .trainer import TrainingAbort, train  # noqa: E402

log = logging.getLogger("vfalign")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORT, EXIT_MISMATCH, EXIT_CHECK = 0, 2, 3, 4, 5, 6
_INPUT_ERRORS = (OSError, ValueError, KeyError, struct.error, UnicodeDecodeError)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _seed(args, config: RunConfig | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if "VFALIGN_SEED" in os.environ:
        try:
            return int(os.environ["VFALIGN_SEED"])
        except ValueError:
            raise CliError(EXIT_CONFIG, f"VFALIGN_SEED={os.environ['VFALIGN_SEED']!r} is not an integer")
    return config.train.seed if config is not None else 0


def _config(args) -> RunConfig:
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}")


def _run_dir(args, seed: int) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(os.environ.get("VFALIGN_RUNS", "runs")) / f"{stamp}-seed{seed}"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create run directory: {exc}")
    return path


def _load(reader, path, what: str):
    try:
        return reader(path)
    except _INPUT_ERRORS as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {exc}")


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


class Manifest:
    """Run record: resolved config, seed, inputs, artifacts, timestamps.

    ``replay`` re-executes ``command`` with ``argv`` after swapping in the
    saved config snapshot, so the manifest alone reproduces the run.
    """

    def __init__(self, run_dir: Path, command: str, argv: list[str], seed: int,
                 config: RunConfig | None = None):
        self.run_dir = run_dir
        self.data = {"tool": "vfalign", "version": __version__, "command": command, "argv": argv,
                     "seed": seed, "started": _now(), "artifacts": {}, "notes": {}}
        if config is not None:
            (run_dir / "config.txt").write_text(config.to_text())
            self.data["config"] = config.as_dict()
            self.artifact("config", run_dir / "config.txt")

    def artifact(self, name: str, path: Path) -> None:
        self.data["artifacts"][name] = str(path)

    def note(self, key: str, value) -> None:
        self.data["notes"][key] = value

    def finish(self) -> Path:
        self.data["finished"] = _now()
        missing = [p for p in self.data["artifacts"].values() if not Path(p).exists()]
        if missing:
            raise CliError(EXIT_IO, f"artifacts missing at run end: {missing}")
        path = self.run_dir / "manifest.json"
        path.write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n")
        return path


def cmd_synth(args) -> int:
    config = _config(args)
    seed = _seed(args, config)
    config = config.with_seed(seed)
    run_dir = _run_dir(args, seed)
    manifest = Manifest(run_dir, "synth", args.argv, seed, config)
    dataset = generate(config.synth)
    out = Path(args.out) if args.out else run_dir / "dataset.vfd"
    try:
        write_dataset(dataset, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}")
    manifest.artifact("dataset", out)
    manifest.note("dims", {"M": dataset.M, "L": dataset.L, "d_in": dataset.d_in})
    print(f"dataset {out} (M={dataset.M}, L={dataset.L}, d_in={dataset.d_in})")
    print(f"manifest {manifest.finish()}")
    return EXIT_OK


def _apply_flags(config: RunConfig, args, seed: int) -> RunConfig:
    train_cfg = config.train
    if args.no_explicit:
        train_cfg = replace(train_cfg, disable_explicit=True)
    if args.no_implicit:
        train_cfg = replace(train_cfg, disable_implicit=True)
    if args.no_reweight:
        train_cfg = replace(train_cfg, disable_reweighting=True)
    if args.r_keep is not None:
        train_cfg = replace(train_cfg, R_keep=args.r_keep)
    config = replace(config, train=train_cfg).with_seed(seed)
    errors = config.errors()
    if errors:
        raise CliError(EXIT_CONFIG, "config error: " + "; ".join(errors))
    return config


def _metrics_stream(model) -> list[dict]:
    """Per-iteration trace with a marker before each stage and validation records inline."""
    out, stage = [], None
    validation = {v["t"]: v for v in model.validation}
    for rec in model.trace:
        if rec["stage"] != stage:
            stage = rec["stage"]
            out.append({"event": "stage_start", "stage": stage})
        out.append(rec)
        if stage == 3 and rec["t"] in validation:
            out.append({"event": "validation", "stage": 3, **validation[rec["t"]]})
    out.append({"event": "end", "best_iteration": model.best_iteration, **model.stage_bounds})
    return out


def cmd_train(args) -> int:
    config = _config(args)
    seed = _seed(args, config)
    config = _apply_flags(config, args, seed)
    dataset = _load(read_dataset, args.dataset, "dataset")
    violations = validate_dataset(dataset)
    if violations:
        raise CliError(EXIT_IO, "dataset invalid: " + "; ".join(f"{v.rule}: {v.detail}" for v in violations[:5]))
    run_dir = _run_dir(args, seed)
    manifest = Manifest(run_dir, "train", args.argv, seed, config)
    manifest.artifact("dataset", Path(args.dataset))
    manifest.note("R_keep_threshold", config.train.R_keep * len(dataset.split_ids(Split.TRAIN)))
    try:
        model = train(config.train, dataset)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"last iteration: {json.dumps(exc.diagnostics, sort_keys=True, default=float)}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}")

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    extra = {"embed_dim": config.train.embed_dim, "identity_of_label": model.identity_of_label.tolist()}
    for name, params, it in (("best", model.params, model.best_iteration),
                             ("final", model.final_params, config.train.T_max)):
        path = ckpt_dir / f"{name}.ckpt"
        save_checkpoint(path, params, it, seed, extra)
        manifest.artifact(f"checkpoint_{name}", path)

    metrics = run_dir / "metrics.jsonl"
    _write_jsonl(metrics, _metrics_stream(model))
    manifest.artifact("metrics", metrics)
    if model.stage2_skipped:
        manifest.note("stage2", "skipped")
    else:
        history = run_dir / "weight_history.jsonl"
        _write_jsonl(history, model.weight_history)
        manifest.artifact("weight_history", history)
    weights = run_dir / "weights.json"
    weights.write_text(json.dumps({
        "identity_of_label": model.identity_of_label.tolist(),
        "s": [repr(float(s)) for s in model.weights.s],
        "excluded": model.excluded_identities.tolist(),
    }, sort_keys=True, indent=2) + "\n")
    manifest.artifact("weights", weights)
    manifest.note("excluded_count", int(len(model.excluded_identities)))
    print(f"checkpoint {ckpt_dir / 'best.ckpt'} (best at stage-3 iteration {model.best_iteration})")
    print(f"manifest {manifest.finish()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args) if args.config else None
    params, header = _load(load_checkpoint, args.checkpoint, "checkpoint")
    dataset = _load(read_dataset, args.dataset, "dataset")
    dims = params.dims
    if dims["d_in"] != dataset.d_in:
        raise CliError(EXIT_MISMATCH, f"checkpoint d_in={dims['d_in']} but dataset d_in={dataset.d_in}")
    if config is not None and config.train.embed_dim != dims["D"]:
        raise CliError(EXIT_MISMATCH, f"checkpoint D={dims['D']} but config train.embed_dim={config.train.embed_dim}")
    try:
        split = Split.parse(args.split)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    seed = args.seed if args.seed is not None else int(header.get("seed", 0))
    eval_cfg = config.eval if config is not None else RunConfig().eval
    report = evaluate_all(params, dataset, split, Rng(seed).child("eval"), eval_cfg)
    if args.out:
        out = Path(args.out)
        run_dir = out.parent
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        run_dir = _run_dir(args, seed)
        out = run_dir / "report.json"
    manifest = Manifest(run_dir, "eval", args.argv, seed, config)
    manifest.artifact("checkpoint", Path(args.checkpoint))
    manifest.artifact("dataset", Path(args.dataset))
    try:
        for i, path in enumerate(report.write(out)):
            manifest.artifact("report" if i == 0 else f"curve_{path.stem}", path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}")
    for key in ("matching/V-F/U", "matching/F-V/U", "verification/V-F/U", "retrieval/V-F/U"):
        value = report.metrics.get(key)
        print(f"{key}: {'n/a' if value is None else f'{value:.4f}'}")
    print(f"manifest {manifest.finish()}")
    return EXIT_OK


_SUITES = {"grad": (grad_suite, 20), "bound": (bound_suite, 1000), "hinge": (hinge_suite, 100)}


def cmd_check(args) -> int:
    if args.trials is not None and args.trials < 1:
        raise CliError(EXIT_CONFIG, "--trials must be >= 1")
    seed = _seed(args)
    suite, default_trials = _SUITES[args.suite]
    report = suite(seed=seed, trials=args.trials or default_trials)
    print(report.summary())
    print(json.dumps(report.details, sort_keys=True, default=float))
    for f in report.failures:
        print(f"failing instance: {json.dumps(f, sort_keys=True, default=float)}")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_sweep(args) -> int:
    from .experiments import VARIANTS, summarize, sweep

    config = _config(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    run_dir = _run_dir(args, seeds[0])
    manifest = Manifest(run_dir, "sweep", args.argv, seeds[0], config)
    try:
        results = sweep(variants, seeds, synth=config.synth, base=config.train, eval_config=config.eval)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    summary = summarize(results)
    out = run_dir / "sweep.json"
    out.write_text(json.dumps(summary, sort_keys=True, indent=2, default=float) + "\n")
    manifest.artifact("summary", out)
    for variant, row in summary.items():
        print(f"{variant:>12}: mean 1:2 V-F ACC {row['mean_acc_vf_u']:.4f}")
    print(f"manifest {manifest.finish()}")
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = _load(lambda p: json.loads(Path(p).read_text()), args.manifest, "manifest")
    argv = list(manifest["argv"])
    if "config" in manifest:
        snapshot = Path(args.manifest).parent / "config.txt"
        if not snapshot.exists():
            raise CliError(EXIT_IO, f"config snapshot {snapshot} missing")
        argv = _replace_option(argv, "--config", str(snapshot))
    argv = _replace_option(argv, "--seed", str(manifest["seed"]))
    if args.run_dir:
        argv = _replace_option(argv, "--run-dir", args.run_dir)
    print("replaying: vfalign " + " ".join(argv))
    return main(argv)


def _replace_option(argv: list[str], flag: str, value: str) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        if argv[i] == flag:
            i += 2
            continue
        if argv[i].startswith(flag + "="):
            i += 1
            continue
        out.append(argv[i])
        i += 1
    return out[:1] + [flag, value] + out[1:]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfalign", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"vfalign {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=True):
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides VFALIGN_SEED and config)")
        if run_dir:
            p.add_argument("--run-dir", default=None, help="output directory (default: runs/<timestamp>-seed<seed>)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="dataset path (default: <run-dir>/dataset.vfd)")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="three-stage training")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--no-explicit", action="store_true", help="drop the N-pair term")
    p.add_argument("--no-implicit", action="store_true", help="drop the shared classifier term")
    p.add_argument("--no-reweight", action="store_true", help="skip identity re-weighting")
    p.add_argument("--r-keep", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="matching, verification and retrieval metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="report path (default: <run-dir>/report.json)")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="gradient, bound and hinge self-checks")
    p.add_argument("suite", choices=sorted(_SUITES))
    p.add_argument("--trials", type=int, default=None)
    common(p, run_dir=False)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="ablation / keep-ratio sweep over seeds")
    p.add_argument("--config", default=None)
    p.add_argument("--variants", default=None, help="comma separated; default all")
    p.add_argument("--seeds", default="0,1,2")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which is also our config-error code
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
