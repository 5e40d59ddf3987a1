"""Command-line front end.

Every subcommand writes into a fresh run directory ``<out>/<timestamp>-seed<seed>``
holding a ``manifest.json`` (written before any work starts), its CSV/JSON
outputs and, unless ``--no-plot`` is given, PNG figures next to them.
``eir replay <manifest>`` re-executes a run from its manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import encoder as enc
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, write_eird
from .errors import ConfigError, DataError, DimensionError, EIRError
from .evaluate import (
    EvalIndex,
    ProbeConfig,
    file_sha256,
    intra_alignment_diagnostic,
    knn_accuracy,
    linear_probe,
    make_knn_evaluator,
    project_2d,
    recall_at_k,
    report_json,
    retrieval_ranking,
)
from .trainer import Checkpoint, TrainConfig, train, write_metrics_csv

log = logging.getLogger("eir")

ABLATION_VARIANTS = ("baseline", "+intra", "+inter", "full")
SWEEP_PARAMS = ("lambda1", "lambda2", "ratio")


# run directories and manifests


@dataclass
class RunManifest:
    command: str
    args: dict
    config: Optional[dict]
    dataset_hash: Optional[str]
    seed: Optional[int]
    outputs: dict
    code_version: str = __version__
    start_time: str = ""

    def write(self, path: Path) -> None:
        _atomic_write(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime())


def make_run_dir(root, seed) -> Path:
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-seed{seed if seed is not None else 'na'}"
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}.{k}"
        k += 1
    path.mkdir(parents=True)
    return path


class Run:
    """A run directory plus its manifest.

    The manifest is written once before work begins and never rewritten;
    completion is recorded in a separate ``done.json``.
    """

    def __init__(self, args, command: str, config: Optional[TrainConfig], dataset_hash: Optional[str], outputs: dict):
        seed = config.seed if config is not None else None
        self.dir = make_run_dir(args.out, seed)
        self.outputs = {k: str(self.dir / v) for k, v in outputs.items()}
        self.manifest = RunManifest(
            command=command,
            args=_replay_args(args),
            config=config.to_dict() if config is not None else None,
            dataset_hash=dataset_hash,
            seed=seed,
            outputs=self.outputs,
            start_time=_now(),
        )
        self.manifest.write(self.dir / "manifest.json")

    def path(self, key: str) -> Path:
        return Path(self.outputs[key])

    def finish(self) -> None:
        done = {"end_time": _now(), "outputs": {k: v for k, v in self.outputs.items() if Path(v).exists()}}
        _atomic_write(self.dir / "done.json", json.dumps(done, indent=2, sort_keys=True))
        print(f"run directory: {self.dir}")


def _replay_args(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    return json.loads(json.dumps(d, default=str))


# configuration and data resolution


def load_config(path: Optional[str], overrides: Sequence[str]) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file does not exist: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        cfg = TrainConfig.from_dict(doc)
    return cfg.with_overrides(overrides or [])


def _resolve_path(arg: Optional[str]) -> Path:
    root = os.environ.get("EIR_DATA_DIR")
    if arg is None:
        if not root:
            raise ConfigError("no dataset given: pass --data or set EIR_DATA_DIR")
        p = Path(root)
    else:
        p = Path(arg)
        if not p.exists() and root and not p.is_absolute():
            p = Path(root) / arg
    if not p.exists():
        raise ConfigError(f"dataset path does not exist: {p}")
    return p


def load_split(arg: Optional[str], split: str) -> Dataset:
    """An ``.eird`` file, a CIFAR-10 ``.bin`` file or directory, or a synthetic spec ``.json``."""
    p = _resolve_path(arg)
    if p.suffix == ".json":
        try:
            spec = SyntheticSpec(**json.loads(p.read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{p}: bad synthetic spec: {exc}") from None
        tr, te = generate_synthetic(spec)
        return tr if split == "train" else te
    return load_dataset(p, split)


def load_pair(args) -> tuple[Dataset, Optional[Dataset]]:
    train_ds = load_split(args.data, "train")
    if getattr(args, "test_data", None):
        return train_ds, load_split(args.test_data, "test")
    p = _resolve_path(args.data)
    if p.suffix == ".json" or p.is_dir():
        return train_ds, load_split(args.data, "test")
    return train_ds, None


def _check_shape(params: enc.EncoderParams, ds: Dataset) -> None:
    if ds.sample_shape != params.spec.input_shape:
        raise DimensionError(f"dataset samples have shape {ds.sample_shape}, checkpoint expects {params.spec.input_shape}")


# training helpers shared by train / ablate / sweep


def _fit(config: TrainConfig, train_ds: Dataset, test_ds: Optional[Dataset]):
    evaluator = None
    if test_ds is not None:
        evaluator = make_knn_evaluator(train_ds.samples, train_ds.labels, test_ds.samples, test_ds.labels, config.knn_k, config.tau)
    return train(train_ds.unlabeled(), config, evaluator=evaluator)


def _final_knn(metrics) -> Optional[float]:
    return metrics[-1].knn_acc if metrics else None


def _sweep_point(config: TrainConfig, train_ds: Dataset, test_ds: Dataset) -> float:
    _, metrics = _fit(config, train_ds, test_ds)
    return _final_knn(metrics)


# subcommands


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    train_ds, test_ds = load_pair(args)
    outputs = {"checkpoint": "checkpoint.eirc", "metrics": "metrics.csv"}
    if not args.no_plot:
        outputs["metrics_plot"] = "metrics.png"
    run = Run(args, "train", config, train_ds.digest(), outputs)
    state, metrics = _fit(config, train_ds, test_ds)
    digest = state.save(run.path("checkpoint"))
    write_metrics_csv(run.path("metrics"), metrics)
    if not args.no_plot:
        from .plotting import plot_metrics

        plot_metrics(metrics, run.path("metrics_plot"))
    last = metrics[-1]
    msg = f"epoch {last.epoch}: total loss {last.total:.4f}"
    if last.knn_acc is not None:
        msg += f", kNN(k={config.knn_k}) accuracy {last.knn_acc:.4f}"
    print(msg)
    print(f"checkpoint sha256 {digest}")
    run.finish()
    return 0


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}") from None


def evaluate_checkpoint(ck: Checkpoint, train_ds: Dataset, test_ds: Optional[Dataset], protocol: str, ks, probe: ProbeConfig) -> tuple[Optional[list], dict]:
    _check_shape(ck.params, train_ds)
    if protocol == "knn":
        if test_ds is None:
            raise ConfigError("knn evaluation needs a test split (--test-data)")
        _check_shape(ck.params, test_ds)
        ks = ks or [5, 20, 200]
        tr = EvalIndex(enc.embed(ck.params, train_ds.samples), train_ds.labels)
        te = EvalIndex(enc.embed(ck.params, test_ds.samples), test_ds.labels, split="test")
        return ks, {k: knn_accuracy(te, tr, min(k, len(tr)), ck.config.tau) for k in ks}
    if protocol == "linear":
        if test_ds is None:
            raise ConfigError("linear evaluation needs a test split (--test-data)")
        _check_shape(ck.params, test_ds)
        ftr = enc.embed(ck.params, train_ds.samples, layer="penultimate")
        fte = enc.embed(ck.params, test_ds.samples, layer="penultimate")
        return None, {"top1": linear_probe(ftr, train_ds.labels, fte, test_ds.labels, probe)}
    if protocol == "recall":
        ds = test_ds if test_ds is not None else train_ds
        _check_shape(ck.params, ds)
        ks = ks or [1, 2, 4, 8]
        return ks, recall_at_k(EvalIndex(enc.embed(ck.params, ds.samples), ds.labels), ks)
    raise ConfigError(f"unknown protocol {protocol!r}")


def cmd_eval(args) -> int:
    ck_path = Path(args.checkpoint)
    if not ck_path.exists():
        raise ConfigError(f"checkpoint does not exist: {ck_path}")
    ck = Checkpoint.load(ck_path)
    train_ds, test_ds = load_pair(args)
    ks = _parse_ints(args.k) if args.k else None
    probe = ProbeConfig(epochs=args.probe_epochs, seed=ck.config.seed)
    outputs = {"report": f"eval-{args.protocol}.json"}
    if args.protocol == "recall":
        outputs["ranking"] = "ranking.csv"
    run = Run(args, "eval", ck.config, train_ds.digest(), outputs)
    ks, acc = evaluate_checkpoint(ck, train_ds, test_ds, args.protocol, ks, probe)
    if args.protocol == "recall":
        ds = test_ds if test_ds is not None else train_ds
        ranked = retrieval_ranking(enc.embed(ck.params, ds.samples), max(ks))
        rows = [{"query": i, "neighbours": " ".join(map(str, r))} for i, r in enumerate(ranked)]
        _write_rows(run.path("ranking"), ("query", "neighbours"), rows)
    params = {"k": ks, "tau": ck.config.tau}
    if args.protocol == "linear":
        params = dataclasses.asdict(probe)
    text = report_json(args.protocol, ks, acc, params, file_sha256(ck_path))
    _atomic_write(run.path("report"), text + "\n")
    head = next(iter(acc.items()))
    label = "top-1" if args.protocol == "linear" else f"{'kNN' if args.protocol == 'knn' else 'R'}@{head[0]}"
    print(f"{args.protocol}: {label} {head[1]:.4f}  " + " ".join(f"{k}={v:.4f}" for k, v in acc.items()))
    run.finish()
    return 0


def ablation_configs(config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    l1, l2 = config.lambda1, config.lambda2
    pairs = [(0.0, 0.0), (l1, 0.0), (0.0, l2), (l1, l2)]
    return [(name, dataclasses.replace(config, lambda1=a, lambda2=b)) for name, (a, b) in zip(ABLATION_VARIANTS, pairs)]


def _run_points(configs: list[TrainConfig], train_ds, test_ds, jobs: int) -> list[float]:
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_sweep_point, c, train_ds, test_ds) for c in configs]
            return [f.result() for f in futs]
    return [_sweep_point(c, train_ds, test_ds) for c in configs]


def _write_rows(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    train_ds, test_ds = load_pair(args)
    if test_ds is None:
        raise ConfigError("ablation needs a test split (--test-data)")
    outputs = {"table": "ablation.csv"}
    if not args.no_plot:
        outputs["plot"] = "ablation.png"
    run = Run(args, "ablate", config, train_ds.digest(), outputs)
    variants = ablation_configs(config)
    accs = _run_points([c for _, c in variants], train_ds, test_ds, args.jobs)
    rows = [
        {"variant": name, "lambda1": c.lambda1, "lambda2": c.lambda2, "knn_acc": a}
        for (name, c), a in zip(variants, accs)
    ]
    _write_rows(run.path("table"), ("variant", "lambda1", "lambda2", "knn_acc"), rows)
    if not args.no_plot:
        from .plotting import plot_ablation

        plot_ablation(rows, run.path("plot"))
    for r in rows:
        print(f"{r['variant']:>9}  kNN(k={config.knn_k}) {r['knn_acc']:.4f}")
    run.finish()
    return 0


def sweep_config(config: TrainConfig, param: str, value: float) -> TrainConfig:
    if param == "lambda1":
        return dataclasses.replace(config, lambda1=value)
    if param == "lambda2":
        return dataclasses.replace(config, lambda2=value)
    if param == "ratio":
        interp = dataclasses.replace(config.interpolation, ratio_policy="fixed", r=value)
        return dataclasses.replace(config, interpolation=interp)
    raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")


def cmd_sweep(args) -> int:
    config = load_config(args.config, args.set)
    values = _parse_floats(args.values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    configs = [sweep_config(config, args.param, v) for v in values]
    train_ds, test_ds = load_pair(args)
    if test_ds is None:
        raise ConfigError("sweep needs a test split (--test-data)")
    outputs = {"table": f"sweep-{args.param}.csv"}
    if not args.no_plot:
        outputs["plot"] = f"sweep-{args.param}.png"
    run = Run(args, "sweep", config, train_ds.digest(), outputs)
    accs = _run_points(configs, train_ds, test_ds, args.jobs)
    rows = [{args.param: v, "knn_acc": a} for v, a in zip(values, accs)]
    _write_rows(run.path("table"), (args.param, "knn_acc"), rows)
    if not args.no_plot:
        from .plotting import plot_sweep

        plot_sweep(args.param, values, accs, run.path("plot"))
    for v, a in zip(values, accs):
        print(f"{args.param}={v:g}  kNN(k={config.knn_k}) {a:.4f}")
    run.finish()
    return 0


def _checkpoint_and_split(args) -> tuple[Checkpoint, Dataset]:
    ck_path = Path(args.checkpoint)
    if not ck_path.exists():
        raise ConfigError(f"checkpoint does not exist: {ck_path}")
    ck = Checkpoint.load(ck_path)
    ds = load_split(args.data, args.split)
    _check_shape(ck.params, ds)
    return ck, ds


def cmd_project(args) -> int:
    ck, ds = _checkpoint_and_split(args)
    outputs = {"table": "projection.csv"}
    if not args.no_plot:
        outputs["plot"] = "projection.png"
    run = Run(args, "project", ck.config, ds.digest(), outputs)
    coords = project_2d(enc.embed(ck.params, ds.samples))
    rows = [{"index": i, "label": int(y), "x": float(c[0]), "y": float(c[1])} for i, (y, c) in enumerate(zip(ds.labels, coords))]
    _write_rows(run.path("table"), ("index", "label", "x", "y"), rows)
    if not args.no_plot:
        from .plotting import plot_projection

        plot_projection(coords, ds.labels, run.path("plot"))
    print(f"projected {len(rows)} samples")
    run.finish()
    return 0


def cmd_diagnose(args) -> int:
    ck, ds = _checkpoint_and_split(args)
    if args.split == "train" and len(ds) != ck.bank.n:
        log.warning("bank holds %d instances, split has %d", ck.bank.n, len(ds))
    run = Run(args, "diagnose", ck.config, ds.digest(), {"report": "diagnose.json"})
    tau = ck.config.effective_intra_tau
    kl = intra_alignment_diagnostic(ck.params, ck.bank, ds.samples, ck.config.augment, tau, seed=args.seed)
    doc = {"mean_kl": kl, "intra_tau": tau, "seed": args.seed, "split": args.split, "checkpoint_sha256": file_sha256(args.checkpoint)}
    _atomic_write(run.path("report"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"mean view KL {kl:.6f}")
    run.finish()
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        spec = SyntheticSpec(**json.loads(Path(args.spec).read_text()))
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        overrides[k] = json.loads(v)
    try:
        spec = dataclasses.replace(spec, **overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    tr, te = generate_synthetic(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_eird(out / "train.eird", tr)
    write_eird(out / "test.eird", te)
    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(tr)} train and {len(te)} test samples to {out}")
    return 0


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise ConfigError(f"manifest does not exist: {path}")
    doc = json.loads(path.read_text())
    saved = dict(doc["args"])
    if args.out:
        saved["out"] = args.out
    ns = argparse.Namespace(**saved)
    ns.func = COMMANDS[doc["command"]]
    return ns.func(ns)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "project": cmd_project,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eir", description="Instance-recognition embedding training with multi-view and interpolation relations.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=True, test=True, plot=True):
        if config:
            p.add_argument("--config", help="JSON document with TrainConfig fields")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path config override")
        if data:
            p.add_argument("--data", help="dataset: .eird file, CIFAR-10 .bin file or directory, or synthetic spec .json (default $EIR_DATA_DIR)")
        if test:
            p.add_argument("--test-data", help="held-out split (defaults to the test split of --data when it has one)")
        if plot:
            p.add_argument("--no-plot", action="store_true", help="skip PNG figures")
        p.add_argument("--out", default="runs", help="root directory for run directories")

    p = sub.add_parser("train", help="train an encoder")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False, plot=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=("knn", "linear", "recall"), default="knn")
    p.add_argument("--k", help="comma-separated k list (knn default 5,20,200; recall default 1,2,4,8)")
    p.add_argument("--probe-epochs", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / +intra / +inter / full under one seed")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="final kNN accuracy over a parameter grid")
    common(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("project", help="2-D principal-axis export of embeddings")
    common(p, config=False, test=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("diagnose", help="mean KL between two views' bank distributions")
    common(p, config=False, test=False, plot=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="write a synthetic dataset as .eird files")
    p.add_argument("--spec", help="JSON synthetic spec")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="override the run root")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EIRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
