"""Command line entry point: ``annoclean synth | train | eval | compare | losscurves``."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import tomlkit

from .datagen import DEFAULT_FRACTIONS, DatasetManifest, build_dataset, bundled_clean_dir
from .exceptions import (AnnocleanError, CheckpointError, CollisionError, ConfigurationError,
                         NonFiniteLossError, RegistryError, ShapeError)
from .metrics import DEFAULT_TAU, MetricReport, evaluate, format_table, identity_predictor, oracle_predictor
from .model import ModelSpec, build_model, load_checkpoint
from .train import LossCurve, LossSpec, TrainConfig, convergence_step, is_degenerate, last_checkpoint, train

log = logging.getLogger("annoclean")

EXIT_OK, EXIT_INPUT, EXIT_COLLISION, EXIT_RUNTIME = 0, 2, 3, 4
SEED_ENV = "ANNOCLEAN_SEED"
SNAPSHOT_NAME = "config.toml"
METHOD_LABELS = {"custom_unet": "Custom U-Net", "global_bias": "Global Bias"}
MATRIX_KEYS = ("scheme", "loss", "normalization")


# --------------------------------------------------------------------------
# Config handling


def load_config(path) -> dict:
    """Read a TOML experiment config into plain dicts; a missing ``path`` gives an empty config."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = tomlkit.parse(path.read_text())
    except tomlkit.exceptions.TOMLKitError as exc:
        raise ConfigurationError(f"config {path} is not valid TOML: {exc}") from exc
    cfg = doc.unwrap()
    cfg["_base"] = str(path.parent.resolve())
    return cfg


def _resolve_path(cfg: dict, value) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def resolve_seed(cli_seed, configured) -> int:
    """``--seed`` wins over ``ANNOCLEAN_SEED``, which wins over the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(configured) if configured is not None else 0


def _known(section: dict, cls, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigurationError(f"unknown key {unknown[0]!r} in [{where}]; expected one of {sorted(names)}")
    return dict(section)


def expand_matrix(train_section: dict, matrix: dict) -> list[dict]:
    """One train section per cell of scheme × loss × normalization."""
    unknown = sorted(set(matrix) - set(MATRIX_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown matrix axis {unknown[0]!r}; expected a subset of {MATRIX_KEYS}")
    axes = []
    for key in MATRIX_KEYS:
        values = matrix.get(key)
        if values is None:
            continue
        if isinstance(values, (str, int, float)) or not list(values):
            raise ConfigurationError(f"matrix.{key} must be a non-empty list")
        axes.append([(key, v) for v in values])
    if not axes:
        return [dict(train_section)]
    return [{**train_section, **dict(cell)} for cell in itertools.product(*axes)]


def run_id_for(base: str | None, config: TrainConfig, n_cells: int) -> str:
    if base and n_cells == 1:
        return base
    slug = f"{config.scheme}-{config.loss.replace('+', '_')}-{config.normalization}"
    return f"{base}-{slug}" if base else slug


def _toml_clean(d: dict) -> dict:
    # TOML has no null; unset optionals are written as empty strings
    return {k: ("" if v is None else v) for k, v in d.items()}


def _snapshot(model_spec: ModelSpec, config: TrainConfig, manifest: DatasetManifest, manifest_dir: Path,
              eval_section: dict) -> str:
    doc = tomlkit.document()
    doc.add(tomlkit.comment("resolved configuration; every default is spelled out"))
    doc["dataset"] = {"manifest": str(manifest_dir.resolve()), "fingerprint": manifest.fingerprint()}
    doc["model"] = _toml_clean(model_spec.to_dict())
    doc["train"] = _toml_clean(config.to_dict())
    doc["eval"] = eval_section
    return tomlkit.dumps(doc)


def _eval_section(cfg: dict, args) -> dict:
    section = dict(cfg.get("eval", {}))
    tau = getattr(args, "tau", None)
    split = getattr(args, "split", None)
    return {"tau": float(tau if tau is not None else section.get("tau", DEFAULT_TAU)),
            "split": str(split if split is not None else section.get("split", "test"))}


def _read_snapshot(run_dir: Path) -> dict:
    path = run_dir / SNAPSHOT_NAME
    if not path.is_file():
        return {}
    return tomlkit.parse(path.read_text()).unwrap()


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    ds = dict(cfg.get("dataset", {}))
    clean_dir = args.clean_dir or (ds.get("clean_dir") and _resolve_path(cfg, ds["clean_dir"])) or bundled_clean_dir()
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise ConfigurationError(f"clean image directory not found: {clean_dir}")
    out = Path(args.out) if args.out else _resolve_path(cfg, ds.get("out", "dataset"))
    kind = args.kind or ds.get("kind", "radial_line")
    n_pairs = int(args.n_pairs if args.n_pairs is not None else ds.get("n_pairs", 200))
    seed = resolve_seed(args.seed, ds.get("seed"))
    fractions = ds.get("fractions", DEFAULT_FRACTIONS)
    manifest = build_dataset(clean_dir, kind, n_pairs, seed, out, fractions=fractions,
                             split_seed=ds.get("split_seed"), overwrite=args.force)
    stats = manifest.channel_stats
    print(out / "manifest.json")
    print(f"records: {len(manifest.records)}  kind: {manifest.annotation_kind.value}  seed: {seed}")
    print("splits: " + ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items()))
    print("channel mean: " + " ".join(f"{m:.4f}" for m in stats["mean"])
          + "  std: " + " ".join(f"{s:.4f}" for s in stats["std"]))
    return EXIT_OK


def _manifest_arg(args, cfg) -> tuple[DatasetManifest, Path]:
    value = args.manifest or cfg.get("dataset", {}).get("manifest") or cfg.get("dataset", {}).get("out")
    if not value:
        raise ConfigurationError("no manifest given; pass --manifest or set dataset.manifest")
    path = Path(args.manifest) if args.manifest else _resolve_path(cfg, value)
    manifest = DatasetManifest.load(path)
    return manifest, Path(manifest.root)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest, manifest_dir = _manifest_arg(args, cfg)
    model_spec = ModelSpec.from_dict(_known(cfg.get("model", {}), ModelSpec, "model"))
    train_section = _known(cfg.get("train", {}), TrainConfig, "train")
    train_section["seed"] = resolve_seed(args.seed, train_section.get("seed"))
    expanded = expand_matrix(train_section, cfg.get("matrix", {}))
    for key in ("scheme", "batch_size", "epochs"):
        if any(key not in cell for cell in expanded):
            raise ConfigurationError(f"train.{key} is required (no default is assumed)")
    cells = [TrainConfig(**cell) for cell in expanded]
    run_ids = [run_id_for(args.run_id, c, len(cells)) for c in cells]
    if len(set(run_ids)) != len(run_ids):
        raise ConfigurationError(f"matrix expansion produced duplicate run ids: {run_ids}")
    eval_section = _eval_section(cfg, args)
    runs_root = Path(args.out) if args.out else _resolve_path(cfg, cfg.get("runs_dir", "runs"))

    plans = []
    for run_id, config in zip(run_ids, cells):
        run_dir = runs_root / run_id
        snapshot = _snapshot(model_spec, config, manifest, manifest_dir, eval_section)
        resume = None
        if run_dir.exists() and any(run_dir.iterdir()):
            if args.resume:
                if (run_dir / SNAPSHOT_NAME).is_file() and (run_dir / SNAPSHOT_NAME).read_text() != snapshot:
                    raise CollisionError(f"run {run_id}: existing config snapshot differs; refusing to resume")
                resume = last_checkpoint(run_dir)
            elif not args.force:
                raise CollisionError(f"run directory {run_dir} already exists (use --force or --resume)")
            else:
                for p in run_dir.iterdir():
                    if p.is_file():
                        p.unlink()
        plans.append((run_id, config, run_dir, snapshot, resume))

    failures = []
    for run_id, config, run_dir, snapshot, resume in plans:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / SNAPSHOT_NAME).write_text(snapshot)
        if resume is not None and int(resume.stem.split("_")[1]) >= config.epochs:
            print(f"{run_id}: already complete")
            continue
        model = build_model(model_spec, config.seed)
        print(f"{run_id}: training ({config.scheme}, {config.loss}, {config.normalization})"
              + (f", resuming from {resume.name}" if resume else ""))
        try:
            _, curve = train(model, manifest, config, run_dir=run_dir, resume_from=resume,
                             log=lambda msg, rid=run_id: print(f"{rid}: {msg}"))
        except NonFiniteLossError as exc:
            failures.append(run_id)
            (run_dir / "status.json").write_text(json.dumps({"status": "failed", "error": str(exc),
                                                             "step": exc.step}, indent=2) + "\n")
            print(f"{run_id}: FAILED: {exc}", file=sys.stderr)
            continue
        (run_dir / "status.json").write_text(json.dumps({"status": "ok", "steps": len(curve.steps)}, indent=2) + "\n")
        print(f"{run_id}: {last_checkpoint(run_dir)}  {run_dir / 'loss.csv'}")
    if failures:
        print(f"{len(failures)} run(s) failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _load_target(target: str, manifest: DatasetManifest):
    """A checkpoint path, a run directory (its last checkpoint) or one of the stub evaluators."""
    if target == "oracle":
        return oracle_predictor, "Oracle", "clean", {}
    if target == "identity":
        return identity_predictor, "Identity", "input", {}
    path = Path(target)
    snapshot = {}
    if path.is_dir():
        snapshot = _read_snapshot(path)
        ckpt = last_checkpoint(path)
        if ckpt is None:
            raise ConfigurationError(f"run directory {path} holds no checkpoint")
        path = ckpt
    model = load_checkpoint(path)
    label = METHOD_LABELS.get(model.spec.architecture, model.spec.architecture)
    mode = str(model.training_meta.get("scheme", "")).upper()
    return model, label, mode, snapshot


def _evaluate_target(target: str, manifest: DatasetManifest, args, cfg) -> MetricReport:
    model, label, mode, snapshot = _load_target(target, manifest)
    section = _eval_section({"eval": {**snapshot.get("eval", {}), **cfg.get("eval", {})}}, args)
    padding = snapshot.get("train", {}).get("padding_policy", "reflect")
    return evaluate(model, manifest, section["split"], section["tau"], padding_policy=padding,
                    label=args.label or label, mode=mode)


def _write_reports(reports, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text("".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1]
                                             for i, r in enumerate(reports)))
    (out / f"{stem}.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    table = format_table(reports)
    (out / f"{stem}.txt").write_text(table)
    print(table, end="")


def _targets(args) -> list[str]:
    targets = list(args.checkpoint or [])
    if args.oracle:
        targets.append("oracle")
    if getattr(args, "identity", False):
        targets.append("identity")
    return targets


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    manifest, _ = _manifest_arg(args, cfg)
    targets = _targets(args)
    if len(targets) != 1:
        raise ConfigurationError("eval takes exactly one of --checkpoint/--run or --oracle; use compare for several")
    report = _evaluate_target(targets[0], manifest, args, cfg)
    out = Path(args.out) if args.out else (Path(targets[0]) if Path(targets[0]).is_dir() else Path("."))
    _write_reports([report], out, "report")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    manifest, _ = _manifest_arg(args, cfg)
    targets = _targets(args)
    if len(targets) < 2:
        raise ConfigurationError("compare needs at least two checkpoints or run directories")
    reports = [_evaluate_target(t, manifest, args, cfg) for t in targets]
    _write_reports(reports, Path(args.out or "."), "comparison")
    return EXIT_OK


def _run_loss_name(run_dir: Path) -> str:
    snap = _read_snapshot(run_dir)
    if snap.get("train", {}).get("loss"):
        return LossSpec.parse(snap["train"]["loss"]).name
    return run_dir.name


def _family(loss: str) -> str:
    try:
        return LossSpec.parse(loss).family
    except ConfigurationError:
        return "l1" if "mse" not in loss and "l2" not in loss else "mse"


def cmd_losscurves(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.runs:
        raise ConfigurationError("losscurves needs at least one run directory")
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        csv_path = run_dir / "loss.csv" if run_dir.is_dir() else run_dir
        if not csv_path.is_file():
            raise ConfigurationError(f"loss curve not found: {csv_path}")
        curve = LossCurve.load(csv_path)
        loss = _run_loss_name(run_dir) if run_dir.is_dir() else csv_path.stem
        step = convergence_step(curve, args.window, args.rel_eps)
        rows.append({"run": run_dir.name if run_dir.is_dir() else csv_path.stem, "loss": loss,
                     "family": _family(loss),
                     "convergence_step": step, "degenerate": is_degenerate(curve, args.window, args.rel_eps),
                     "final_loss": float(curve.values[-args.window:].mean()), "curve": curve})

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    lines = ["run,loss,family,convergence_step,final_loss,degenerate"]
    for r in rows:
        lines.append(f"{r['run']},{r['loss']},{r['family']},{r['convergence_step']},{r['final_loss']!r},"
                     f"{str(r['degenerate']).lower()}")
    (out / "convergence.csv").write_text("\n".join(lines) + "\n")
    width = max(3, *(len(r["run"]) for r in rows))
    text = [f"{'run'.ljust(width)}  {'loss':<24} {'family':<6} {'conv_step':>9}  final_loss"]
    for r in sorted(rows, key=lambda r: (r["convergence_step"], r["run"])):
        flag = "  DEGENERATE (never settled)" if r["degenerate"] else ""
        text.append(f"{r['run'].ljust(width)}  {r['loss']:<24} {r['family']:<6} {r['convergence_step']:>9}  "
                    f"{r['final_loss']:.6f}{flag}")
    (out / "convergence.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))

    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharex=True)
    for ax, family, title in zip(axes, ("l1", "mse"), ("L1 family", "MSE family")):
        for r in (r for r in rows if r["family"] == family):
            steps = [s for s, _ in r["curve"].steps]
            ax.plot(steps, r["curve"].values, lw=0.8, label=r["loss"])
            ax.axvline(r["convergence_step"], ls=":", lw=0.6, color=ax.lines[-1].get_color())
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        if ax.lines:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "losscurves.png", dpi=120)
    plt.close(fig)
    print(out / "losscurves.png")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help=f"overrides the config seed and ${SEED_ENV}")
    p.add_argument("--force", action="store_true", help="replace existing outputs")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="annoclean", description="Annotation removal toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize an annotated dataset")
    _common(p)
    p.add_argument("--clean-dir", help="directory of clean images (default: bundled phantoms)")
    p.add_argument("--kind", help="body_marker, radial_line or vascular_flow")
    p.add_argument("--n-pairs", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one run per matrix cell")
    _common(p)
    p.add_argument("--manifest", help="dataset directory or manifest.json")
    p.add_argument("--run-id", help="run id (prefix when a matrix is configured)")
    p.add_argument("--resume", action="store_true", help="continue from each run's last checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "score one checkpoint on a split"),
                                  ("compare", cmd_compare, "score several checkpoints side by side")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--manifest", help="dataset directory or manifest.json")
        p.add_argument("--checkpoint", "--run", action="append", help="checkpoint file or run directory")
        p.add_argument("--oracle", action="store_true", help="stub evaluator that outputs the clean image")
        p.add_argument("--identity", action="store_true", help="stub evaluator that returns its input")
        p.add_argument("--split", help="split to score (default test)")
        p.add_argument("--tau", type=float, help="segmentation threshold on [0, 1] intensities")
        p.add_argument("--label", help="method label in the table")
        p.set_defaults(func=func)

    p = sub.add_parser("losscurves", help="convergence summary and plot for finished runs")
    _common(p)
    p.add_argument("runs", nargs="*", help="run directories or loss CSV files")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--rel-eps", type=float, default=0.05)
    p.set_defaults(func=cmd_losscurves)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CollisionError):
        return EXIT_COLLISION
    if isinstance(exc, (ConfigurationError, ShapeError, CheckpointError, RegistryError, FileNotFoundError)):
        return EXIT_INPUT
    return EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (AnnocleanError, FileNotFoundError) as exc:
        print(f"annoclean {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except Exception as exc:  # stable exit code for scripting
        log.debug("unexpected failure", exc_info=True)
        print(f"annoclean {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
