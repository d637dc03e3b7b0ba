"""Command-line interface: synth, train, eval, predict, gradcheck.

Configuration precedence: explicit flags override the config file, which
overrides built-in defaults. The config file is INI-style with one
section per subcommand. Every output directory receives the fully
resolved configuration as resolved.json. Seeds are always explicit
values (flag, file, or built-in default), never wall-clock derived.

Exit codes: 0 success, 1 check failure, 2 invalid input, 3 IO error,
4 numerical divergence, 5 compatibility mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import features as feat
from . import metrics, synthgen, training
from .autodiff import grad_check_report
from .floorplan import (
    FloorplanError,
    graph_to_dict,
    graph_to_dot,
    load_floorplan,
    MultiAdjacency,
)
from .model import (
    CompatibilityError,
    Model,
    ModelConfig,
    ModelConfigError,
    VARIANTS,
    forward_graph,
    instance_a0_channels,
    prepare_instances,
)
from .synthgen import GenerationError, GenParams

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5

DATA_DIR_ENV = "FLOORGRAPH_DATA_DIR"

DEFAULTS = {
    "synth": {
        "count": 400,
        "seed": 7,
        "min_rooms": 4,
        "max_rooms": 16,
        "extra_door_prob": 0.10,
        "threads": 1,
    },
    "train": {
        "task": "generate",
        "observe_frac": 0.6,
        "variant": "full",
        "k": 2,
        "sets": "1,2,3",
        "seed": 0,
        "lr": 1e-4,
        "epochs": 300,
        "patience": 30,
        "hidden": 32,
    },
    "eval": {
        "task": "generate",
        "observe_frac": 0.6,
        "split": "test",
        "seed": 0,
    },
    "predict": {
        "threshold": 0.5,
    },
    "gradcheck": {
        "seed": 0,
        "tolerance": 1e-4,
    },
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_config_file(path: str | None, section: str) -> dict:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    loaded = parser.read(path)
    if not loaded:
        raise CliError(f"config file not found: {path}", EXIT_IO)
    merged: dict = {}
    for sec in ("common", section):
        if parser.has_section(sec):
            merged.update(dict(parser.items(sec)))
    return merged


def _resolve(section: str, args: argparse.Namespace, flag_names: list[str]) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(DEFAULTS.get(section, {}))
    file_values = _read_config_file(getattr(args, "config", None), section)
    for key, raw in file_values.items():
        if key in resolved:
            resolved[key] = type(resolved[key])(raw) if not isinstance(resolved[key], str) else raw
        else:
            resolved[key] = raw
    for name in flag_names:
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    return resolved


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "resolved": resolved}
    (out_dir / "resolved.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _parse_sets(text) -> tuple:
    if isinstance(text, tuple):
        return text
    try:
        sets = tuple(sorted({int(tok) for tok in str(text).replace("+", ",").split(",") if tok.strip()}))
    except ValueError:
        raise CliError(f"invalid feature sets {text!r}; expected e.g. '1,2,3'", EXIT_INVALID)
    if not sets or any(s not in (1, 2, 3, 4) for s in sets):
        raise CliError(f"invalid feature sets {text!r}; valid sets are 1..4", EXIT_INVALID)
    return sets


def _default_data_dir(args_value):
    if args_value:
        return args_value
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return env
    raise CliError(f"--data is required (or set {DATA_DIR_ENV})", EXIT_INVALID)


# ----------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    resolved = _resolve("synth", args, ["count", "seed", "min_rooms", "max_rooms", "extra_door_prob", "threads", "out"])
    if "out" not in resolved or not resolved["out"]:
        raise CliError("synth needs --out", EXIT_INVALID)
    try:
        params = GenParams(
            min_rooms=int(resolved["min_rooms"]),
            max_rooms=int(resolved["max_rooms"]),
            extra_door_prob=float(resolved["extra_door_prob"]),
        )
        corpus = synthgen.generate_corpus(
            int(resolved["count"]), params, int(resolved["seed"]), threads=int(resolved.get("threads", 1))
        )
    except GenerationError as exc:
        raise CliError(str(exc), EXIT_INVALID)
    out = Path(resolved["out"])
    try:
        synthgen.save_corpus(corpus, out)
        _write_resolved(out, "synth", resolved)
        stats = corpus.manifest["achieved"]
        report = [
            f"graphs: {stats['graphs']}",
            f"splits: {corpus.manifest['splits']}",
            f"mean nodes: {stats['mean_nodes']:.2f}",
            f"mean spatial edges: {stats['mean_spatial_edges']:.2f}",
            f"mean door edges: {stats['mean_door_edges']:.2f}",
            f"spatial:door ratio: {stats['spatial_to_door_ratio']:.2f}",
        ]
        (out / "stats.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write corpus: {exc}", EXIT_IO)
    print(f"wrote {stats['graphs']} floorplans to {out}")
    for line in report:
        print("  " + line)
    return EXIT_OK


def _load_corpus_or_fail(path) -> synthgen.Corpus:
    try:
        return synthgen.load_corpus(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO)
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid corpus: {exc}", EXIT_INVALID)


def cmd_train(args) -> int:
    flags = ["data", "task", "observe_frac", "variant", "k", "sets", "out", "seed", "lr", "epochs", "patience", "hidden"]
    resolved = _resolve("train", args, flags)
    if not resolved.get("out"):
        raise CliError("train needs --out", EXIT_INVALID)
    corpus = _load_corpus_or_fail(_default_data_dir(resolved.get("data")))
    sets = _parse_sets(resolved["sets"])
    task = resolved["task"]
    if task not in training.TASKS:
        raise CliError(f"invalid task {task!r}; expected one of {training.TASKS}", EXIT_INVALID)
    if resolved["variant"] not in VARIANTS:
        raise CliError(f"invalid variant {resolved['variant']!r}; expected one of {VARIANTS}", EXIT_INVALID)
    try:
        k = int(resolved["k"])
        if resolved["variant"] == "no_il":
            k = 0
        model_cfg = ModelConfig(
            variant=resolved["variant"],
            k_iterations=k,
            gat_hidden=int(resolved["hidden"]),
        )
        train_cfg = training.TrainConfig(
            lr=float(resolved["lr"]),
            max_epochs=int(resolved["epochs"]),
            early_stop_patience=int(resolved["patience"]),
            seed=int(resolved["seed"]),
        )
    except (ModelConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_INVALID)

    try:
        model, history = training.train(
            corpus,
            task,
            model_cfg,
            training.LossConfig(),
            train_cfg,
            feature_sets=sets,
            observe_fraction=float(resolved["observe_frac"]),
            log=lambda msg: print(msg, flush=True) if args.verbose else None,
        )
    except training.TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED)

    out = Path(resolved["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint.json")
        (out / "history.json").write_text(json.dumps(history.to_dict()), encoding="utf-8")
        _write_resolved(out, "train", resolved)
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO)
    print(f"trained {resolved['variant']} (k={k}) for {history.stopped_epoch} epochs; best epoch {history.best_epoch}")
    best = history.val_auc[history.best_epoch - 1]
    print("val AUC  " + "  ".join(f"{rel}={100 * best[rel]:.2f}" for rel in ("spatial", "wall", "door")))
    return EXIT_OK


def cmd_eval(args) -> int:
    flags = ["ckpt", "data", "task", "observe_frac", "split", "report", "seed"]
    resolved = _resolve("eval", args, flags)
    if not resolved.get("ckpt"):
        raise CliError("eval needs --ckpt", EXIT_INVALID)
    ckpt_path = Path(resolved["ckpt"])
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}", EXIT_IO)
    try:
        model = Model.load(ckpt_path)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CompatibilityError):
            raise CliError(str(exc), EXIT_INCOMPATIBLE)
        raise CliError(f"invalid checkpoint: {exc}", EXIT_INVALID)
    corpus = _load_corpus_or_fail(_default_data_dir(resolved.get("data")))
    split = resolved["split"]
    if split not in ("train", "val", "test"):
        raise CliError(f"invalid split {split!r}", EXIT_INVALID)
    task = resolved["task"]
    if task not in training.TASKS:
        raise CliError(f"invalid task {task!r}", EXIT_INVALID)
    try:
        instances = prepare_instances(
            model,
            corpus.splits()[split],
            task,
            float(resolved["observe_frac"]),
            seed=int(resolved["seed"]),
        )
    except CompatibilityError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE)
    report = metrics.evaluate(model, instances, task)
    table = metrics.format_report_table(report, title=f"{task} / {split}")
    csv_text = metrics.report_to_csv(report)
    print(table)
    if resolved.get("report"):
        try:
            report_path = Path(resolved["report"])
            report_path.parent.mkdir(parents=True, exist_ok=True)
            report_path.write_text(csv_text, encoding="utf-8")
            report_path.with_suffix(".txt").write_text(table, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write report: {exc}", EXIT_IO)
    return EXIT_OK


def cmd_predict(args) -> int:
    flags = ["ckpt", "floorplan", "threshold", "out_json", "out_dot", "set4"]
    resolved = _resolve("predict", args, flags)
    for req in ("ckpt", "floorplan"):
        if not resolved.get(req):
            raise CliError(f"predict needs --{req}", EXIT_INVALID)
    ckpt_path = Path(resolved["ckpt"])
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}", EXIT_IO)
    model = Model.load(ckpt_path)
    try:
        fp = load_floorplan(resolved["floorplan"])
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO)
    except (FloorplanError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid floorplan: {exc}", EXIT_INVALID)

    external = None
    if 4 in model.feature_sets:
        if not resolved.get("set4"):
            raise CliError("checkpoint uses feature set 4; pass --set4 with an n x d matrix (JSON)", EXIT_INVALID)
        try:
            external = np.array(json.loads(Path(resolved["set4"]).read_text(encoding="utf-8")), dtype=np.float64)
        except FileNotFoundError as exc:
            raise CliError(str(exc), EXIT_IO)
    try:
        full = feat.assemble_features(fp, sets=model.feature_sets, external_set4=external)
        fm = model.prepare_feature_matrix(full)
    except feat.FeatureError as exc:
        raise CliError(str(exc), EXIT_INVALID)
    except CompatibilityError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE)

    from .floorplan import make_generation_instance

    inst = make_generation_instance(fp, fm)
    preds = model.predict_instance(inst)

    threshold = float(resolved["threshold"])
    n = fp.n
    door = (preds.p_door > threshold) & ~np.eye(n, dtype=bool)
    wall = (preds.p_wall > threshold) & ~np.eye(n, dtype=bool)
    spatial = (preds.p_spatial > threshold) & ~np.eye(n, dtype=bool)
    adj = MultiAdjacency(n, door.astype(float), wall.astype(float), spatial.astype(float))

    payload = graph_to_dict(adj)
    payload["threshold"] = threshold
    payload["probabilities"] = {
        "door": [[round(float(v), 9) for v in row] for row in preds.p_door],
        "wall": [[round(float(v), 9) for v in row] for row in preds.p_wall],
        "spatial": [[round(float(v), 9) for v in row] for row in preds.p_spatial],
    }
    if resolved.get("out_json"):
        try:
            Path(resolved["out_json"]).write_text(json.dumps(payload, indent=2), encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write JSON: {exc}", EXIT_IO)
    if resolved.get("out_dot"):
        dot = graph_to_dot(adj, room_types=[r.room_type for r in fp.rooms])
        try:
            Path(resolved["out_dot"]).write_text(dot, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write DOT: {exc}", EXIT_IO)
    counts = {rel: len(adj.edge_list(rel)) for rel in ("door", "wall", "spatial")}
    print(f"predicted edges at threshold {threshold}: {counts}")
    return EXIT_OK


def gradcheck_fixture(seed: int):
    """Seeded 4-node instance with economy dims; exercises every component."""
    from .floorplan import make_generation_instance

    params = GenParams(min_rooms=4, max_rooms=4, grid_w=8, grid_h=6)
    record = synthgen.generate_record(params, seed=seed + 11, plan_id="gradcheck")
    cfg = ModelConfig(
        k_iterations=2,
        gat_hidden=8,
        scoring_mlp_dims=(8, 4, 1),
        decoder_mlp_dims=(8, 4, 1),
    )
    fm = record.features.select_sets((1,))
    model = Model.initialize(cfg, fm.f, seed=seed, feature_sets=(1,), feature_layout=fm.layout)
    inst = make_generation_instance(record.floorplan, fm, target=record.graph)
    mask = training.pair_mask(inst, "generate")
    return model, inst, mask


def cmd_gradcheck(args) -> int:
    resolved = _resolve("gradcheck", args, ["seed", "tolerance", "corrupt"])
    seed = int(resolved["seed"])
    tolerance = float(resolved["tolerance"])
    model, inst, mask = gradcheck_fixture(seed)
    corrupt = resolved.get("corrupt")

    def loss_fn(tape, leaves):
        out = forward_graph(tape, leaves, model.config, inst.features.x, instance_a0_channels(inst))
        return training.total_loss(tape, out, inst.target, mask, training.LossConfig())

    if corrupt:
        # fault-injection hook: report a perturbed analytic gradient for
        # any parameter whose name contains the given substring
        original = grad_check_report

        def corrupted_report(f, params, epsilon=1e-6):
            report = original(f, params, epsilon=epsilon)
            hit = False
            for name in report:
                if corrupt in name:
                    report[name] = max(report[name], 1.0)
                    hit = True
            if not hit:
                raise CliError(f"no parameter matches --corrupt {corrupt!r}", EXIT_INVALID)
            return report

        report = corrupted_report(loss_fn, model.params)
    else:
        report = grad_check_report(loss_fn, model.params)

    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    print(f"gradient check on a {inst.target.n}-node instance, {len(report)} parameter groups")
    for name in sorted(report):
        print(f"  {report[name]:.3e}  {name}")
    print(f"max relative error {worst:.3e} at {worst_name} (tolerance {tolerance:.0e})")
    if worst >= tolerance:
        print(f"FAIL: gradient mismatch in {worst_name}")
        return EXIT_CHECK_FAILED
    print("PASS")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="floorgraph",
        description="Learn and predict multi-relational room connectivity from room attributes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic floorplan corpus")
    p.add_argument("--count", type=int, help="number of floorplans")
    p.add_argument("--seed", type=int, help="corpus seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--min-rooms", dest="min_rooms", type=int, help="minimum rooms per plan")
    p.add_argument("--max-rooms", dest="max_rooms", type=int, help="maximum rooms per plan")
    p.add_argument("--extra-door-prob", dest="extra_door_prob", type=float, help="extra door probability")
    p.add_argument("--threads", type=int, help="parallel workers for plan generation")
    p.add_argument("--config", help="INI config file")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--data", help=f"corpus directory (or ${DATA_DIR_ENV})")
    p.add_argument("--task", choices=list(training.TASKS), help="generate or complete")
    p.add_argument("--observe-frac", dest="observe_frac", type=float, help="observed spatial fraction (completion)")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--variant", choices=list(VARIANTS), help="model variant")
    p.add_argument("--k", type=int, help="encoder iterations")
    p.add_argument("--sets", help="feature sets, e.g. 1,2,3")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--epochs", type=int, help="max epochs")
    p.add_argument("--patience", type=int, help="early stopping patience")
    p.add_argument("--hidden", type=int, help="attention layer width")
    p.add_argument("--out", help="output directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", help="checkpoint JSON")
    p.add_argument("--data", help=f"corpus directory (or ${DATA_DIR_ENV})")
    p.add_argument("--task", choices=list(training.TASKS))
    p.add_argument("--observe-frac", dest="observe_frac", type=float)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--seed", type=int, help="held-out sampling seed (completion)")
    p.add_argument("--report", help="write CSV (and .txt table) to this path")
    p.add_argument("--config", help="INI config file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="predict topology for one floorplan JSON")
    p.add_argument("--ckpt", help="checkpoint JSON")
    p.add_argument("--floorplan", help="floorplan JSON file")
    p.add_argument("--threshold", type=float, help="edge probability threshold")
    p.add_argument("--set4", help="JSON file with an n x d external feature matrix")
    p.add_argument("--out-json", dest="out_json", help="write thresholded graph + probabilities")
    p.add_argument("--out-dot", dest="out_dot", help="write DOT graph")
    p.add_argument("--config", help="INI config file")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, help="fixture seed")
    p.add_argument("--tolerance", type=float, help="max relative error allowed")
    p.add_argument("--corrupt", help="(testing) corrupt the gradient of matching parameters")
    p.add_argument("--config", help="INI config file")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FloorplanError, GenerationError, ModelConfigError, feat.FeatureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
