"""Command-line entry point: ``flowkd <command> [--config PATH] [flags]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, distill_plan, dump, load_config, load_dataset, train_config, validate
from .data import STREAM_INIT, DataError, stream
from .distill import NumericalFailure
from .gradcheck import gradient_check
from .hog import HogSpec, HogTeacher
from .infoflow import flow_vector, match_layers, ncc_probe
from .kernels import COSINE, KernelKind
from .metrics import model_accuracy, retrieval_report
from .nn import build_model
from .tensor import NonFiniteError
from .training import distill_student, train_auxiliary, train_teacher

log = logging.getLogger("flowkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _init_rng(cfg: dict, role: int) -> np.random.Generator:
    return stream(cfg["seed"], STREAM_INIT, role)


ROLE_TEACHER, ROLE_AUX, ROLE_STUDENT = 1, 2, 3


def _source(cfg: dict, prefer_aux: bool):
    if prefer_aux and cfg["aux"]["checkpoint"]:
        return load_model(cfg["aux"]["checkpoint"])[0]
    if cfg["teacher"]["kind"] == "hog":
        return HogTeacher(HogSpec(orientation_bins=cfg["teacher"]["hog_bins"]))
    return load_model(cfg["teacher"]["checkpoint"])[0]


def _begin(cfg: dict, out: Path) -> None:
    """Create the output directory once every input has been loaded and checked."""
    out.mkdir(parents=True, exist_ok=True)
    dump(cfg, out / "config.resolved.yaml")


def _input_shape(data) -> tuple[int, ...]:
    return tuple(data.x.shape[1:])


def cmd_train_teacher(cfg: dict, out: Path) -> int:
    train, test = load_dataset(cfg)
    model = build_model(cfg["teacher"]["arch"], _input_shape(train), train.n_classes, _init_rng(cfg, ROLE_TEACHER))
    _begin(cfg, out)
    train_teacher(model, train, train_config(cfg, out), test, out / "metrics.csv")
    save_model(model, out / "teacher.ckpt", {"role": "teacher", "seed": cfg["seed"]})
    return EXIT_OK


def cmd_train_aux(cfg: dict, out: Path) -> int:
    train, test = load_dataset(cfg)
    teacher = _source(cfg, prefer_aux=False)
    aux = build_model(cfg["aux"]["arch"], _input_shape(train), None, _init_rng(cfg, ROLE_AUX))
    _begin(cfg, out)
    train_auxiliary(teacher, aux, train, train_config(cfg, out), test, out / "metrics.csv", cfg["distill"]["degree"])
    save_model(aux, out / "aux.ckpt", {"role": "auxiliary", "seed": cfg["seed"]})
    if train.y is not None:
        write_flow_report(out / "flow_report.csv", [("aux", aux)], train, test, cfg)
    return EXIT_OK


def cmd_distill(cfg: dict, out: Path) -> int:
    train, test = load_dataset(cfg)
    source = _source(cfg, prefer_aux=True)
    method, sup = cfg["distill"]["method"], cfg["distill"]["supervision"]
    needs_head = method == "softlabel" or sup == "crossentropy"
    if method == "softlabel" and getattr(source, "head", None) is None:
        raise ConfigError("soft-label distillation needs a source model with a classification head")
    student = build_model(cfg["student"]["arch"], _input_shape(train), train.n_classes if needs_head else None,
                          _init_rng(cfg, ROLE_STUDENT))
    try:
        plan = distill_plan(cfg, source.n_transfer_points, student.n_transfer_points)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _begin(cfg, out)
    distill_student(source, student, plan, train, train_config(cfg, out), test, out / "metrics.csv")
    save_model(student, out / "student.ckpt", {"role": "student", "method": method, "seed": cfg["seed"]})
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    train, test = load_dataset(cfg)
    model, _ = load_model(cfg["eval"]["checkpoint"])
    _begin(cfg, out)
    db = model.representations(train.x)[-1]
    q = model.representations(test.x)[-1]
    report = retrieval_report(db, train.y, q, test.y, cfg["train"]["top_k"])
    report["accuracy"] = model_accuracy(model, test.x, test.y) if model.head is not None else float("nan")
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in report.items():
            writer.writerow([key, repr(float(value))])
    for key, value in report.items():
        print(f"{key}\t{value:.4f}")
    return EXIT_OK


def write_flow_report(path: Path, models, train, test, cfg: dict) -> list[np.ndarray]:
    """CSV of per-layer QMI and NCC accuracy; returns the flow vectors."""
    if train.y is None or test.y is None:
        raise DataError("flow reports need labelled data")
    kind = cfg["flow"]["kernel"]
    kernel = COSINE if kind == "cosine" else KernelKind("tstudent", cfg["distill"]["degree"])
    omegas = []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "layer_index", "qmi", "ncc_accuracy"])
        for name, model in models:
            omega = flow_vector(model, test.x, test.y, kernel, cfg["flow"]["batch_size"]).omega
            tr_reps, te_reps = model.representations(train.x), model.representations(test.x)
            for layer, (q, r_tr, r_te) in enumerate(zip(omega, tr_reps, te_reps)):
                writer.writerow([name, layer, repr(float(q)), repr(ncc_probe(r_tr, train.y, r_te, test.y))])
            omegas.append(omega)
    return omegas


def cmd_flow_report(cfg: dict, out: Path) -> int:
    train, test = load_dataset(cfg)
    models = []
    for i, ref in enumerate(cfg["flow"]["models"]):
        model = HogTeacher(HogSpec(orientation_bins=cfg["teacher"]["hog_bins"])) if ref == "hog" else load_model(ref)[0]
        models.append((f"{i}:{Path(ref).stem}", model))
    _begin(cfg, out)
    omegas = write_flow_report(out / "flow_report.csv", models, train, test, cfg)
    if len(omegas) == 2:
        kappa = match_layers(omegas[0], omegas[1])
        print("kappa", " ".join(str(int(k)) for k in kappa))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    """Finite-difference check of the distillation losses on random batches."""
    from .distill import DistillPlan, Supervision, distill_loss, softlabel_baseline, hint_baseline
    from .kernels import hybrid_layer_loss
    from .tensor import Tensor

    _begin(cfg, out)
    rng = stream(cfg["seed"], 9)
    n, d = 8, 4
    teacher = [rng.standard_normal((n, d)) for _ in range(2)]
    student = [Tensor(rng.standard_normal((n, d)), requires_grad=True) for _ in range(2)]
    labels = rng.integers(0, 2, n)
    plan = DistillPlan(pairs=[(0, 0), (1, 1)], supervision=Supervision("contrastive"), degree=cfg["distill"]["degree"])
    t_logits, s_logits = rng.standard_normal((n, 3)), Tensor(rng.standard_normal((n, 3)), requires_grad=True)
    checks = {
        "hybrid_layer_loss": (lambda: hybrid_layer_loss(teacher[0], student[0]), [student[0]]),
        "distill_loss": (lambda: distill_loss(plan, teacher, student, 0, labels=labels), student),
        "softlabel": (lambda: softlabel_baseline(t_logits, s_logits, cfg["distill"]["temperature"]), [s_logits]),
        "hint": (lambda: hint_baseline(teacher[0], student[0]), [student[0]]),
    }
    ok = True
    with open(out / "gradcheck.txt", "w") as fh:
        for name, (fn, params) in checks.items():
            report = gradient_check(fn, params)
            ok &= report.passed
            text = f"{name}: {report}"
            print(text)
            fh.write(text + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "train-teacher": (cmd_train_teacher, "supervised training of the desk-scale teacher"),
    "train-aux": (cmd_train_aux, "train the auxiliary teacher by single-layer probability matching"),
    "distill": (cmd_distill, "distill a student from the auxiliary (or teacher)"),
    "eval": (cmd_eval, "retrieval and accuracy report for a checkpoint"),
    "flow-report": (cmd_flow_report, "per-layer QMI / NCC report and layer matching"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the loss gradients"),
}


def _parse_value(text: str):
    return yaml.safe_load(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides config; config default 0)")
        p.add_argument("--out", type=Path, default=None, help="output directory (config default runs/default)")
        p.add_argument("--threads", type=int, default=None, help="BLAS threads (config default 1, deterministic)")
        p.add_argument("--f32", action="store_true", default=False, help="32-bit speed mode")
        p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
        p.add_argument("--method", default=None, help="override distill.method")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key by dotted path, e.g. distill.gamma=0.6")
        p.add_argument("-v", "--verbose", action="store_true", default=False, help="log every epoch")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        overrides[key.strip()] = _parse_value(value)
    for flag, key in (("seed", "seed"), ("out", "out"), ("threads", "threads"), ("epochs", "train.epochs"),
                      ("method", "distill.method")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value) if flag == "out" else value
    if args.f32:
        overrides["f32"] = True
    cfg = load_config(args.config, overrides)
    validate(cfg, args.command)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["out"])
    handler = COMMANDS[args.command][0]
    prev_dtype = T.get_default_dtype()
    if cfg["f32"]:
        T.set_default_dtype(np.float32)
    try:
        with threadpool_limits(limits=cfg["threads"]):
            return handler(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        T.set_default_dtype(prev_dtype)


if __name__ == "__main__":
    sys.exit(main())
