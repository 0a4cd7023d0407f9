"""Command-line entry point: ``fbprop <subcommand> ...``.

Every failure ends with exit status 1 and a single JSON line on stderr of the
form ``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import FeedbackPropError, SpecError
from .feedback import FeedbackConfig, rule_from_name, run_method
from .losses import ClassWeights, EvidencePartition
from .model import load_class_weights, load_model, model_from_json, save_model
from .tensor import Tensor, load_tensor


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: expected a JSON object")
    return doc


def _emit(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


def parse_known(text: str) -> dict[int, float]:
    """``"3=1,7=0"`` -> ``{3: 1.0, 7: 0.0}``."""
    out: dict[int, float] = {}
    if not text:
        return out
    for part in text.split(","):
        key, sep, val = part.partition("=")
        if not sep:
            raise SpecError(f"known label {part!r} is not of the form index=value")
        try:
            out[int(key)] = float(val)
        except ValueError:
            raise SpecError(f"known label {part!r} is not of the form index=value") from None
    return out


def cmd_gen_data(args) -> None:
    from .harness.data import DatasetSpec, save_dataset_dir

    spec = DatasetSpec.from_json(_read_json(args.spec))
    parts = save_dataset_dir(spec, args.out_dir)
    _emit({"out_dir": str(args.out_dir), "splits": {k: len(v) for k, v in parts.items()},
           "label_rate": float(np.mean([p.labels.mean() for p in parts.values()]))})


def cmd_train(args) -> None:
    from .harness.data import load_split
    from .harness.evaluate import predict
    from .harness.training import TrainConfig, safe_class_weights, train
    from .metrics import mean_ap

    doc = _read_json(args.model_spec)
    hyper = dict(doc.get("train", {}))
    for key in ("epochs", "batch", "rate", "rule", "seed"):
        if getattr(args, key) is not None:
            hyper[key] = getattr(args, key)
    try:
        config = TrainConfig(**hyper)
    except TypeError as exc:
        raise SpecError(f"invalid training hyperparameters: {exc}") from None
    model = model_from_json(doc)
    train_set = load_split(args.data_dir, "train")
    val_path = Path(args.data_dir) / "val_images.fbpt"
    val_set = load_split(args.data_dir, "val") if val_path.exists() else None
    weights, dropped = safe_class_weights(train_set.labels)
    model, curve = train(model, train_set, val_set, config, weights)
    save_model(model, args.out_model, class_weights=weights)
    summary = {"model": str(args.out_model), "curve": curve, "dropped_labels": list(dropped)}
    if val_set is not None:
        try:
            summary["val_map"] = mean_ap(predict(model, val_set.images), val_set.labels)
        except FeedbackPropError:
            summary["val_map"] = None
    _emit(summary)


def cmd_infer(args) -> None:
    model = load_model(args.model)
    x = load_tensor(args.sample)
    if x.shape != model.input_shape and x.shape[1:] == model.input_shape and x.shape[0] == 1:
        x = Tensor.wrap(np.array(x.array[0]))
    known = parse_known(args.known)
    if args.unknown:
        unknown = tuple(int(i) for i in args.unknown.split(","))
    else:
        unknown = tuple(i for i in range(model.output_dim) if i not in known)
    evidence = EvidencePartition.from_known(known, unknown)
    lam = load_class_weights(args.model)
    weights = ClassWeights(lam) if lam is not None else None
    pivots = tuple(p for p in args.pivots.split(",") if p) if args.pivots else ()
    if args.method != "none" and not pivots:
        raise SpecError(f"method {args.method!r} needs --pivots")
    config = FeedbackConfig(pivots=pivots, rate=args.rate, iterations=args.iters,
                            rule=rule_from_name(args.rule), residual_placement=args.placement,
                            weighted=not args.unweighted)
    scores, trace = run_method(args.method, model, x, evidence, config, weights)
    probs = 1.0 / (1.0 + np.exp(-scores.array))
    _emit({
        "method": args.method,
        "pivots": list(pivots),
        "unknown": list(unknown),
        "scores": scores.values(),
        "probabilities": probs.tolist(),
        "losses": [float(v) for v in trace.losses] + [float(v) for v in trace.final_losses[-1:]],
    })


def cmd_sweep(args) -> None:
    from .harness.experiments import load_experiment, run_sweep
    from .harness.report import emit_report

    report = run_sweep(load_experiment(args.experiment))
    emit_report(report, args.out_csv)
    _emit({"rows": len(report), "out": str(args.out_csv)})


def cmd_layers(args) -> None:
    from .harness.experiments import layer_analysis, load_experiment
    from .harness.report import emit_report

    report = layer_analysis(load_experiment(args.experiment))
    emit_report(report, args.out_csv)
    _emit({"rows": len(report), "out": str(args.out_csv)})


def cmd_bench(args) -> None:
    from .harness.bench import BenchSpec, benchmark_timing
    from .harness.data import load_split
    from .harness.report import emit_report

    doc = _read_json(args.schedule)
    data_dir = Path(doc.pop("data_dir", "data"))
    if not data_dir.is_absolute():
        data_dir = Path(args.schedule).parent / data_dir
    split = doc.pop("split", "test")
    try:
        spec = BenchSpec(**doc)
    except TypeError as exc:
        raise SpecError(f"invalid bench schedule: {exc}") from None
    model = load_model(args.model)
    data = load_split(data_dir, split)
    lam = load_class_weights(args.model)
    report = benchmark_timing(model, data.images, data.labels, spec,
                              ClassWeights(lam) if lam is not None else None)
    emit_report(report, args.out_csv)
    _emit({"rows": len(report), "out": str(args.out_csv)})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbprop", description="Feedback-prop inference and experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic correlated-label dataset")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model on a generated dataset")
    s.add_argument("model_spec")
    s.add_argument("data_dir")
    s.add_argument("out_model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--rate", type=float)
    s.add_argument("--rule", choices=("sgd", "momentum", "adam"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run (feedback) inference on one sample")
    s.add_argument("model")
    s.add_argument("sample", help="FBPT tensor holding one input")
    s.add_argument("--known", default="", help="comma-separated index=value pairs")
    s.add_argument("--unknown", default="", help="comma-separated indices (default: all others)")
    s.add_argument("--method", choices=("none", "single", "lf", "rf"), default="lf")
    s.add_argument("--pivots", default="")
    s.add_argument("--rate", type=float, default=1e-3)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--rule", choices=("sgd", "momentum", "adam"), default="sgd")
    s.add_argument("--placement", choices=("post", "pre"), default="post")
    s.add_argument("--unweighted", action="store_true", help="drop the class weights from the loss")
    s.set_defaults(func=cmd_infer)

    for name, func, text in (("sweep", cmd_sweep, "evidence-amount sweep"),
                             ("layers", cmd_layers, "single-pivot analysis over all layers")):
        s = sub.add_parser(name, help=text)
        s.add_argument("experiment")
        s.add_argument("out_csv")
        s.set_defaults(func=func)

    s = sub.add_parser("bench", help="LF vs RF timing over a pivot schedule")
    s.add_argument("model")
    s.add_argument("schedule")
    s.add_argument("out_csv")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FeedbackPropError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        if isinstance(exc, FeedbackPropError):
            msg = str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(msg)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
