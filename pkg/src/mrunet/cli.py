"""Command-line harness tying the modules into reproducible experiments.

Subcommands: summary, gradcheck, train, eval, kfold, compare. Every report
embeds the fully resolved run spec, and all outputs are deterministic for a
fixed seed. Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .data import (
    CHALLENGES,
    Dataset,
    kfold_split,
    load_dataset,
    synth_generate,
)
from .metrics import as_percent, binarize, jaccard
from .model import (
    ARCHITECTURES,
    build_model,
    count_parameters,
    forward,
    load_checkpoint,
    summarize,
)
from .tensor import NumericError
from .train import TrainConfig, TrainAbortError, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

BLOCK_VARIANT_CHOICES = ("multires", "inception_parallel", "factorized_sequence")


class UsageError(ValueError):
    pass


@dataclass
class RunSpec:
    """Fully resolved invocation, embedded in every report for provenance."""

    command: str
    architecture: str
    variant: str
    rank: int
    input_extents: list[int]
    in_channels: int
    u_base: int
    alpha: float
    epochs: int
    batch: int
    lr: float
    seed: int
    data: str | None
    synth: int | None
    challenge: str
    out: str | None
    k: int

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_input(text: str) -> tuple[tuple[int, ...], int]:
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise UsageError(f"cannot parse --input {text!r}") from None
    if len(parts) < 3 or len(parts) > 4:
        raise UsageError("--input must be HxWxC or HxWxDxC")
    return tuple(parts[:-1]), parts[-1]


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="mrunet",
                                     description="segmentation model experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_train=False):
        p.add_argument("--config", default=None, help="flat key=value defaults file; flags win")
        p.add_argument("--arch", default="multiresunet",
                       choices=(*ARCHITECTURES, "both"))
        p.add_argument("--variant", default="multires", choices=BLOCK_VARIANT_CHOICES)
        p.add_argument("--rank", type=int, default=None, choices=(2, 3))
        p.add_argument("--input", default=None, help="extents and channels, e.g. 256x256x3")
        p.add_argument("--ubase", type=int, default=32)
        p.add_argument("--alpha", type=float, default=1.67)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        if with_train:
            p.add_argument("--epochs", type=int, default=150)
            p.add_argument("--batch", type=int, default=16)
            p.add_argument("--lr", type=float, default=1e-3)
            p.add_argument("--data", default=None, help="dataset root with images/ and masks/")
            p.add_argument("--synth", type=int, default=None, help="synthetic sample count")
            p.add_argument("--challenge", default="clean", choices=CHALLENGES)
            p.add_argument("--k", type=int, default=5)

    p_summary = sub.add_parser("summary", help="model summary and parameter counts")
    common(p_summary)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--ops", default="all",
                        help="comma-separated case names, or 'all'")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--model", action="store_true",
                        help="also check a tiny full model at sampled coordinates")

    p_train = sub.add_parser("train", help="train one model with a held-out split")
    common(p_train, with_train=True)

    p_eval = sub.add_parser("eval", help="re-evaluate a saved checkpoint on its val split")
    p_eval.add_argument("--out", required=True, help="directory written by train")

    p_kfold = sub.add_parser("kfold", help="k-fold cross-validation")
    common(p_kfold, with_train=True)

    p_cmp = sub.add_parser("compare", help="multi-seed architecture comparison")
    common(p_cmp, with_train=True)
    p_cmp.add_argument("--seeds", default=None,
                       help="comma-separated seeds (default: seed, seed+1, seed+2)")

    subparsers = {"summary": p_summary, "gradcheck": p_grad, "train": p_train,
                  "eval": p_eval, "kfold": p_kfold, "compare": p_cmp}
    return parser, subparsers


def _apply_config(argv: list[str], parser: argparse.ArgumentParser,
                  subparsers: dict[str, argparse.ArgumentParser]) -> argparse.Namespace:
    # Parse once, then re-parse with config-file values prepended so that
    # explicit flags override them (argparse keeps the last occurrence).
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if not config_path:
        return args
    file_values = _read_config_file(config_path)
    if not file_values:
        return args
    known = {a.dest for a in subparsers[args.command]._actions}
    overlay = []
    for key, value in file_values.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        overlay.extend([f"--{key.replace('_', '-')}", value])
    return parser.parse_args([args.command] + overlay + argv[1:])


def _resolve_spec(args: argparse.Namespace) -> RunSpec:
    default_input = "80x80x48x4" if getattr(args, "rank", None) == 3 else "256x256x3"
    extents, channels = _parse_input(args.input or default_input)
    rank = len(extents)
    if args.rank is not None and args.rank != rank:
        raise UsageError(f"--rank {args.rank} conflicts with --input rank {rank}")
    return RunSpec(
        command=args.command,
        architecture=args.arch,
        variant=args.variant,
        rank=rank,
        input_extents=list(extents),
        in_channels=channels,
        u_base=args.ubase,
        alpha=args.alpha,
        epochs=getattr(args, "epochs", 150),
        batch=getattr(args, "batch", 16),
        lr=getattr(args, "lr", 1e-3),
        seed=args.seed,
        data=getattr(args, "data", None),
        synth=getattr(args, "synth", None),
        challenge=getattr(args, "challenge", "clean"),
        out=args.out,
        k=getattr(args, "k", 5),
    )


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_data(spec: RunSpec) -> Dataset:
    if spec.data is not None:
        return load_dataset(spec.data, resize_to=spec.input_extents)
    if spec.synth is None:
        raise UsageError("either --data or --synth is required")
    return synth_generate(spec.synth, spec.input_extents, spec.challenge,
                          seed=spec.seed, channels=spec.in_channels)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _build_from_spec(spec: RunSpec, arch: str, seed: int):
    return build_model(arch, rank=spec.rank, input_extents=spec.input_extents,
                       in_channels=spec.in_channels, u_base=spec.u_base,
                       alpha=spec.alpha, variant=spec.variant, seed=seed)


# -- subcommands ---------------------------------------------------------------


def cmd_summary(args) -> int:
    spec = _resolve_spec(args)
    if spec.architecture == "both":
        raise UsageError("summary takes a single architecture")
    model = _build_from_spec(spec, spec.architecture, spec.seed)
    doc = summarize(model)
    doc["runspec"] = spec.to_dict()
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = [s for s in args.ops.split(",") if s.strip()] if args.ops != "all" else None
    if args.ops.strip() == "":
        raise UsageError("empty op list")
    all_cases = {c.name: c for c in gc.default_cases()}
    if names is None:
        cases = list(all_cases.values())
    else:
        missing = [n for n in names if n not in all_cases]
        if missing:
            raise UsageError(f"unknown gradcheck ops: {', '.join(missing)}")
        cases = [all_cases[n] for n in names]
    results = gc.run_suite(cases, seed=args.seed)
    if args.model:
        results.append(gc.check_model_gradients(seed=args.seed))
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tolerance:.0e}  {status}")
        failures += 0 if r.passed else 1
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def _train_once(spec: RunSpec, arch: str, dataset: Dataset, model_seed: int,
                history_path=None, checkpoint_path=None):
    split = kfold_split(len(dataset), spec.k, seed=spec.seed)
    val_idx = split.folds[0]
    train_idx = split.train_indices(0)
    model = _build_from_spec(spec, arch, model_seed)
    cfg = TrainConfig(epochs=spec.epochs, batch_size=spec.batch,
                      learning_rate=spec.lr, seed=spec.seed)
    report = train(model, dataset.subset(train_idx), dataset.subset(val_idx), cfg,
                   history_path=history_path, checkpoint_path=checkpoint_path)
    return report, model, train_idx, val_idx


def cmd_train(args) -> int:
    spec = _resolve_spec(args)
    if spec.architecture == "both":
        raise UsageError("train takes a single architecture")
    if spec.out is None:
        raise UsageError("train requires --out")
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_data(spec)
    report, _, train_idx, val_idx = _train_once(
        spec, spec.architecture, dataset,
        model_seed=_derived_seed(spec.seed, 0),
        history_path=out / "history.csv",
        checkpoint_path=out / "best.ckpt")
    payload = {
        "runspec": spec.to_dict(),
        "train_ids": [dataset[i].id for i in train_idx],
        "val_ids": [dataset[i].id for i in val_idx],
        **report.to_dict(),
        "best_val_jaccard_pct": as_percent(report.best_val_jaccard),
        "checkpoint": "best.ckpt",
        "history_csv": "history.csv",
    }
    _write_json(out / "report.json", payload)
    print(f"best epoch {report.best_epoch}: val jaccard "
          f"{as_percent(report.best_val_jaccard):.4f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    report_path = out / "report.json"
    if not report_path.exists():
        raise FileNotFoundError(f"missing {report_path}")
    saved = json.loads(report_path.read_text())
    spec = RunSpec(**saved["runspec"])
    dataset = _load_data(spec)
    by_id = {s.id: s for s in dataset}
    try:
        val = [by_id[i] for i in saved["val_ids"]]
    except KeyError as exc:
        raise FileNotFoundError(f"validation id {exc} not present in dataset") from exc
    model = _build_from_spec(spec, spec.architecture, _derived_seed(spec.seed, 0))
    load_checkpoint(model, out / "best.ckpt")
    val_loss, val_j = evaluate(model, val, spec.batch)
    payload = {
        "runspec": spec.to_dict(),
        "checkpoint": "best.ckpt",
        "val_ids": saved["val_ids"],
        "val_loss": val_loss,
        "val_jaccard": val_j,
        "val_jaccard_pct": as_percent(val_j),
    }
    _write_json(out / "eval.json", payload)
    print(f"val jaccard {as_percent(val_j):.4f}%")
    return EXIT_OK


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def cmd_kfold(args) -> int:
    spec = _resolve_spec(args)
    if spec.out is None:
        raise UsageError("kfold requires --out")
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_data(spec)
    split = kfold_split(len(dataset), spec.k, seed=spec.seed)
    archs = list(ARCHITECTURES) if spec.architecture == "both" else [spec.architecture]
    cfg_base = dict(epochs=spec.epochs, batch_size=spec.batch, learning_rate=spec.lr)
    rows = []
    for arch in archs:
        for fold in range(spec.k):
            val_idx = split.folds[fold]
            train_idx = split.train_indices(fold)
            model = _build_from_spec(spec, arch, _derived_seed(spec.seed, fold))
            cfg = TrainConfig(seed=_derived_seed(spec.seed, fold, 1), **cfg_base)
            report = train(model, dataset.subset(train_idx), dataset.subset(val_idx), cfg)
            rows.append({"arch": arch, "fold": fold,
                         "best_epoch": report.best_epoch,
                         "best_val_jaccard": report.best_val_jaccard})
    summary = {}
    for arch in archs:
        vals = [r["best_val_jaccard"] for r in rows if r["arch"] == arch]
        mean, std = _mean_std(vals)
        summary[arch] = {"mean_jaccard_pct": as_percent(mean),
                         "std_jaccard_pct": as_percent(std)}
    payload = {
        "runspec": spec.to_dict(),
        "folds": [[dataset[i].id for i in fold] for fold in split.folds],
        "results": rows,
        "summary": summary,
    }
    if len(archs) == 2:
        a = summary["multiresunet"]["mean_jaccard_pct"]
        b = summary["unet"]["mean_jaccard_pct"]
        payload["relative_improvement_pct"] = (a - b) / b * 100.0
        payload["ordering"] = ("multiresunet>unet" if a > b
                               else "unet>multiresunet" if b > a else "tie")
    _write_json(out / "kfold.json", payload)
    with open(out / "kfold.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["row", "arch", "fold", "best_epoch",
                         "jaccard_pct", "jaccard_std_pct"])
        for r in rows:
            writer.writerow(["fold", r["arch"], r["fold"], r["best_epoch"],
                             repr(as_percent(r["best_val_jaccard"])), ""])
        for arch in archs:
            writer.writerow(["summary", arch, "", "",
                             repr(summary[arch]["mean_jaccard_pct"]),
                             repr(summary[arch]["std_jaccard_pct"])])
    for arch in archs:
        s = summary[arch]
        print(f"{arch}: {s['mean_jaccard_pct']:.4f}% +/- {s['std_jaccard_pct']:.4f}%")
    return EXIT_OK


def cmd_compare(args) -> int:
    spec = _resolve_spec(args)
    if spec.out is None:
        raise UsageError("compare requires --out")
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"cannot parse --seeds {args.seeds!r}") from None
    else:
        seeds = [spec.seed, spec.seed + 1, spec.seed + 2]
    if not seeds:
        raise UsageError("at least one seed required")
    archs = list(ARCHITECTURES) if spec.architecture == "both" else [spec.architecture]
    results = []
    for seed in seeds:
        corpus_spec = RunSpec(**{**spec.to_dict(), "seed": seed})
        dataset = _load_data(corpus_spec)
        for arch in archs:
            report, *_ = _train_once(corpus_spec, arch, dataset,
                                     model_seed=_derived_seed(seed, ARCHITECTURES.index(arch)))
            results.append({"arch": arch, "seed": seed,
                            "best_epoch": report.best_epoch,
                            "best_val_jaccard": report.best_val_jaccard})
    summary = {}
    for arch in archs:
        vals = [r["best_val_jaccard"] for r in results if r["arch"] == arch]
        mean, std = _mean_std(vals)
        summary[arch] = {"mean_jaccard_pct": as_percent(mean),
                         "std_jaccard_pct": as_percent(std)}
    payload = {
        "runspec": spec.to_dict(),
        "challenge": spec.challenge,
        "seeds": seeds,
        "results": results,
        "summary": summary,
    }
    if len(archs) == 2:
        a = summary["multiresunet"]["mean_jaccard_pct"]
        b = summary["unet"]["mean_jaccard_pct"]
        payload["relative_improvement_pct"] = (a - b) / b * 100.0
        payload["ordering"] = ("multiresunet>unet" if a > b
                               else "unet>multiresunet" if b > a else "tie")
    _write_json(out / "compare.json", payload)
    with open(out / "compare.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["arch", "seed", "best_epoch", "jaccard_pct"])
        for r in results:
            writer.writerow([r["arch"], r["seed"], r["best_epoch"],
                             repr(as_percent(r["best_val_jaccard"]))])
    for arch in archs:
        s = summary[arch]
        print(f"{arch} [{spec.challenge}]: {s['mean_jaccard_pct']:.4f}% "
              f"+/- {s['std_jaccard_pct']:.4f}%")
    return EXIT_OK


_COMMANDS = {
    "summary": cmd_summary,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "kfold": cmd_kfold,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = _build_parser()
    try:
        args = _apply_config(argv, parser, subparsers)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainAbortError as exc:
        print(f"numeric abort at epoch {exc.epoch}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
