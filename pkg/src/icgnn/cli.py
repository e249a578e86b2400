"""Command-line pipelines wiring the package into reproducible runs.

Subcommands: gen-data | label | train | eval | transfer | ota-train | ablate
| bench | report.  Every option resolves as flags > config file > defaults,
and the resolved plan is embedded in each artifact the command writes (dataset
sidecar ``<out>.plan``, checkpoint metadata, ``#``-comment header in CSVs).

Only the standard library is imported at module level; numpy and the package
modules load lazily inside each command so ``--threads`` can pin the BLAS
thread pools before numpy first initializes them.
"""

from __future__ import annotations

import argparse
import difflib
import os
import sys
from dataclasses import dataclass

PROG = "icgnn"

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class CliError(Exception):
    """Usage-level failure (bad flag/config); maps to exit code 2."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# ----------------------------------------------------------------- options


@dataclass(frozen=True)
class Opt:
    """One command-line option; also the schema for config-file keys."""

    flag: str
    type: object = str
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None
    dest: str | None = None
    is_flag: bool = False

    @property
    def key(self) -> str:
        return self.dest or self.flag.lstrip("-").replace("-", "_")

    def parse(self, text: str):
        if self.is_flag:
            return _parse_bool(text)
        try:
            value = self.type(text)
        except ValueError as exc:
            raise CliError(f"bad value for {self.flag}: {exc}") from None
        return value


SHARED = (
    Opt("--config", str, help="flat key = value config file (flags override it)"),
    Opt("--seed", int, 0, help="root seed; all randomness derives from it"),
    Opt("--out", str, help="output path"),
    Opt("--threads", int, help="BLAS/OpenMP thread cap (default: library choice)"),
    Opt("--quiet", is_flag=True, default=False, help="suppress progress lines"),
)

def _profile_opt(default: str) -> Opt:
    return Opt("--profile", str, default, choices=("table", "desk", "tiny"),
               help="architecture layer table")


_PROFILE = _profile_opt("desk")
_TRAIN_OPTS = (
    Opt("--data", str, required=True, help="dataset file"),
    Opt("--epochs", int, 100, help="training epochs"),
    Opt("--batch", int, 64, help="minibatch size"),
    Opt("--lr", float, 1e-4, help="Adam learning rate"),
    Opt("--lambda", float, 1.0, dest="penalty", help="QoS penalty weight"),
)

COMMANDS: dict[str, tuple] = {
    "gen-data": (
        Opt("--pairs", int, 2, help="number of Tx-Rx pairs K"),
        Opt("--antennas", int, 4, help="Tx antennas N_T"),
        Opt("--count", int, 1000, help="number of channel samples"),
        Opt("--snr-db", float, 10.0, help="SNR in dB (sets noise power)"),
        Opt("--p-max", float, 1.0, help="per-Tx power budget (W)"),
        Opt("--p-circuit", float, 0.1, help="circuit power (W)"),
        Opt("--r-req", float, 1.0, help="per-Rx rate requirement (bits/s/Hz)"),
    ),
    "label": (
        Opt("--data", str, required=True, help="dataset file to label"),
        Opt("--solver", str, "coord", choices=("coord", "grid"),
            help="coordinate ascent or exhaustive grid"),
        Opt("--grid-points", int, 101, help="points per variable axis"),
    ),
    "train": _TRAIN_OPTS + (
        _PROFILE,
        Opt("--from", str, dest="warm_start", help="checkpoint to warm-start from"),
    ),
    "eval": (
        Opt("--ckpt", str, required=True, help="trained checkpoint"),
        Opt("--data", str, required=True, help="labeled dataset file"),
        Opt("--tol", float, 1e-6, help="QoS feasibility tolerance"),
    ),
    "transfer": _TRAIN_OPTS + (
        Opt("--from", str, dest="warm_start", required=True,
            help="source checkpoint to fine-tune"),
        Opt("--recalibrate-bn", is_flag=True, default=False,
            help="re-estimate batch-norm buffers on the new data first"),
    ),
    "ota-train": _TRAIN_OPTS + (
        _PROFILE,
        Opt("--one-value", is_flag=True, default=False,
            help="single-symbol broadcast variant"),
    ),
    "ablate": _TRAIN_OPTS + (
        _PROFILE,
        Opt("--rows", str, "all", choices=("all", "mp", "rd", "sr", "fe"),
            help="run the ladder up to this row (fe = full ladder)"),
        Opt("--timing-repeats", int, 20, help="latency measurement repeats"),
    ),
    "bench": (
        Opt("--pairs", int, 6, help="number of Tx-Rx pairs K"),
        Opt("--antennas", int, 4, help="Tx antennas N_T"),
        _profile_opt("table"),
        Opt("--count", int, 32, help="samples in the timing pool"),
        Opt("--repeats", int, 100, help="timed forwards"),
    ),
    "report": (),
}

_SUMMARIES = {
    "gen-data": "draw Rayleigh channel samples and write a dataset file",
    "label": "attach max-EE oracle labels to a dataset",
    "train": "train a model centrally and write a checkpoint",
    "eval": "score a checkpoint against oracle labels",
    "transfer": "fine-tune a checkpoint on a new dataset (e.g. new K)",
    "ota-train": "distributed training with per-pair parameters and message accounting",
    "ablate": "train the cumulative feature ladder and tabulate optimality",
    "bench": "measure single-sample inference latency",
    "report": "render any artifact (dataset / checkpoint / CSV) as text",
}


# ---------------------------------------------------------------- resolution


@dataclass
class RunPlan:
    """The fully resolved invocation, serialized into every artifact."""

    command: str
    options: dict

    def to_kv(self) -> dict:
        kv = {"plan.command": self.command}
        for key, value in sorted(self.options.items()):
            if value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            kv[f"plan.{key}"] = str(value)
        return kv

    def lines(self) -> list:
        return [f"{k} = {v}" for k, v in self.to_kv().items()]


def _read_config_file(path: str, opts_by_key: dict, command: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from None
    values = {}
    for lineno, line in enumerate(raw.splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = text.partition("=")
        key = key.strip().replace("-", "_")
        if key not in opts_by_key:
            known = ", ".join(sorted(opts_by_key))
            raise CliError(f"{path}:{lineno}: unknown key {key!r} for "
                           f"'{command}' (known: {known})")
        try:
            values[key] = opts_by_key[key].parse(value.strip())
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: {exc}") from None
    return values


def _resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge flags > config file > defaults; validate required/choices."""
    opts = SHARED + COMMANDS[command]
    by_key = {o.key: o for o in opts}
    given = vars(ns)
    from_file: dict = {}
    config_path = given.get("config")
    if config_path is not None:
        from_file = _read_config_file(config_path, by_key, command)
    values = {}
    for o in opts:
        if given.get(o.key) is not None:
            values[o.key] = given[o.key]
        elif o.key in from_file:
            values[o.key] = from_file[o.key]
        else:
            values[o.key] = o.default
    for o in opts:
        if o.required and values[o.key] is None:
            raise CliError(f"{command}: missing required option {o.flag} "
                           "(set it on the command line or in --config)")
        if o.choices and values[o.key] is not None and values[o.key] not in o.choices:
            raise CliError(f"{command}: {o.flag} must be one of "
                           f"{', '.join(o.choices)}, got {values[o.key]!r}")
    if "path" in given:  # report's positional
        values["path"] = given["path"]
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="two-stage beamforming learner for MISO interference channels",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, extra in COMMANDS.items():
        p = sub.add_parser(name, help=_SUMMARIES[name], description=_SUMMARIES[name])
        if name == "report":
            p.add_argument("path", help="artifact file to render")
        for o in SHARED + extra:
            if o.is_flag:
                p.add_argument(o.flag, dest=o.key, action="store_true",
                               default=None, help=o.help)
            else:
                # required/choices enforced after the config-file merge
                p.add_argument(o.flag, dest=o.key, type=o.type, default=None,
                               metavar=o.key.upper(), help=o.help)
    return parser


def _require_out(values: dict, command: str) -> str:
    if values["out"] is None:
        raise CliError(f"{command}: --out is required")
    return values["out"]


def _write_plan_sidecar(path: str, plan: RunPlan) -> None:
    with open(path + ".plan", "w", encoding="utf-8") as fh:
        fh.write("\n".join(plan.lines()) + "\n")


def _logger(values: dict):
    if values["quiet"]:
        return None

    def log(record):
        if isinstance(record, dict):
            parts = [f"{k} {v:.6g}" if isinstance(v, float) else f"{k} {v}"
                     for k, v in record.items()]
            print("  " + "  ".join(parts))
        else:
            print(f"  {record}")

    return log


def _say(values: dict, text: str) -> None:
    if not values["quiet"]:
        print(text)


def _emit(values: dict, text: str, plan: RunPlan) -> None:
    """Print a text report; mirror it (with plan comments) to --out if set."""
    print(text)
    if values["out"]:
        with open(values["out"], "w", encoding="utf-8") as fh:
            for line in plan.lines():
                fh.write(f"# {line}\n")
            fh.write(text if text.endswith("\n") else text + "\n")


# ----------------------------------------------------------------- commands


def _profile_config(values: dict, n_antennas: int, **flags):
    from . import model

    factory = {"table": model.table_config, "desk": model.desk_config,
               "tiny": model.tiny_config}[values["profile"]]
    return factory(n_antennas=n_antennas, **flags)


def _train_config(values: dict):
    from .training import TrainConfig

    return TrainConfig(lr=values["lr"], batch_size=values["batch"],
                       epochs=values["epochs"], penalty=values["penalty"],
                       seed=values["seed"])


def _load_dataset(path: str):
    from .channel import read_dataset

    return read_dataset(path)


def cmd_gen_data(values: dict, plan: RunPlan) -> int:
    from .channel import SystemConfig, sample_channels, write_dataset

    out = _require_out(values, "gen-data")
    config = SystemConfig(
        n_pairs=values["pairs"], n_antennas=values["antennas"],
        p_max=values["p_max"], p_circuit=values["p_circuit"],
        r_req=values["r_req"], snr_db=values["snr_db"], seed=values["seed"],
    )
    dataset = sample_channels(config, values["count"])
    write_dataset(out, dataset)
    _write_plan_sidecar(out, plan)
    _say(values, f"wrote {len(dataset)} samples "
                 f"(K={config.n_pairs}, N_T={config.n_antennas}) to {out}")
    return 0


def cmd_label(values: dict, plan: RunPlan) -> int:
    import numpy as np

    from . import oracle
    from .channel import Dataset, write_dataset

    out = _require_out(values, "label")
    dataset = _load_dataset(values["data"])
    if values["solver"] == "coord":
        labeled = oracle.label_dataset(dataset, grid_points=values["grid_points"],
                                       seed=values["seed"])
    else:
        labels = np.empty(len(dataset), dtype=np.float64)
        for i in range(len(dataset)):
            sol = oracle.exhaustive_grid_solve(dataset.h[i], dataset.config,
                                               resolution=values["grid_points"])
            labels[i] = sol.ee if sol.feasible else np.nan
        labeled = Dataset(dataset.config, dataset.h, labels, dataset.split)
    write_dataset(out, labeled)
    _write_plan_sidecar(out, plan)
    n_bad = int(np.isnan(labeled.labels).sum())
    _say(values, f"labeled {len(labeled)} samples "
                 f"({n_bad} oracle-infeasible) -> {out}")
    return 0


def _checkpoint_metadata(plan: RunPlan, dataset, result) -> dict:
    meta = plan.to_kv()
    meta["train_pairs"] = str(dataset.config.n_pairs)
    meta["best_epoch"] = str(result.best_epoch)
    meta["best_val_loss"] = repr(result.best_val_loss)
    return meta


def cmd_train(values: dict, plan: RunPlan) -> int:
    from .channel import split_dataset
    from .training import read_checkpoint, train, write_checkpoint

    out = _require_out(values, "train")
    dataset = _load_dataset(values["data"])
    parts = split_dataset(dataset, (0.9, 0.1, 0.0))
    init = None
    if values["warm_start"] is not None:
        init, _ = read_checkpoint(values["warm_start"])
        model_config = init.config
    else:
        model_config = _profile_config(values, dataset.config.n_antennas)
    result = train(parts["train"], parts["validation"], model_config,
                   _train_config(values), init=init, log=_logger(values))
    write_checkpoint(out, result.params, _checkpoint_metadata(plan, dataset, result))
    _say(values, f"best epoch {result.best_epoch} "
                 f"(val loss {result.best_val_loss:.6g}); checkpoint -> {out}")
    return 0


def cmd_transfer(values: dict, plan: RunPlan) -> int:
    import dataclasses

    from .channel import split_dataset
    from .training import fine_tune, read_checkpoint, write_checkpoint

    out = _require_out(values, "transfer")
    params, _ = read_checkpoint(values["warm_start"])
    dataset = _load_dataset(values["data"])
    parts = split_dataset(dataset, (0.9, 0.1, 0.0))
    config = dataclasses.replace(_train_config(values),
                                 recalibrate_bn=values["recalibrate_bn"])
    result = fine_tune(params, parts["train"], parts["validation"], config,
                       log=_logger(values))
    write_checkpoint(out, result.params, _checkpoint_metadata(plan, dataset, result))
    _say(values, f"val loss {result.pre_val_loss:.6g} -> {result.best_val_loss:.6g}, "
                 f"feasibility {result.pre_feasibility:.3f} -> "
                 f"{result.post_feasibility:.3f}; checkpoint -> {out}")
    return 0


def cmd_eval(values: dict, plan: RunPlan) -> int:
    from .evalmetrics import evaluate, format_eval_text, write_eval_csv
    from .training import read_checkpoint

    params, meta = read_checkpoint(values["ckpt"])
    dataset = _load_dataset(values["data"])
    train_pairs = int(meta["train_pairs"]) if "train_pairs" in meta else None
    report = evaluate(params, dataset, tol=values["tol"], train_pairs=train_pairs)
    print(format_eval_text(report))
    if values["out"]:
        write_eval_csv(values["out"], report, header_lines=plan.lines())
    return 0


def cmd_ota_train(values: dict, plan: RunPlan) -> int:
    from .channel import split_dataset
    from .ota import distributed_train
    from .training import write_checkpoint

    out = _require_out(values, "ota-train")
    dataset = _load_dataset(values["data"])
    parts = split_dataset(dataset, (0.9, 0.1, 0.0))
    model_config = _profile_config(values, dataset.config.n_antennas,
                                   one_value_variant=values["one_value"])
    result = distributed_train(parts["train"], parts["validation"], model_config,
                               _train_config(values), log=_logger(values))
    meta = plan.to_kv()
    meta["train_pairs"] = str(dataset.config.n_pairs)
    meta["best_epoch"] = str(result.best_epoch)
    meta["best_val_loss"] = repr(result.best_val_loss)
    for k, node in enumerate(result.node_params):
        write_checkpoint(f"{out}.node{k}", node, {**meta, "node": str(k)})
    _say(values, f"best epoch {result.best_epoch} "
                 f"(val loss {result.best_val_loss:.6g}); "
                 f"{result.overhead.total} symbols/sample, "
                 f"{result.total_symbols} total; "
                 f"checkpoints -> {out}.node0..{out}.node{len(result.node_params) - 1}")
    return 0


_ROW_PREFIX = {"mp": 2, "rd": 3, "sr": 4, "fe": 5, "all": 5}


def cmd_ablate(values: dict, plan: RunPlan) -> int:
    from .channel import split_dataset
    from .evalmetrics import (ABLATION_ROWS, ablation_suite,
                              format_ablation_text, write_ablation_csv)

    dataset = _load_dataset(values["data"])
    parts = split_dataset(dataset, (0.8, 0.1, 0.1))
    base = _profile_config(values, dataset.config.n_antennas)
    rows_spec = ABLATION_ROWS[: _ROW_PREFIX[values["rows"]]]
    rows = ablation_suite(parts["train"], parts["validation"], parts["test"],
                          base, _train_config(values),
                          timing_repeats=values["timing_repeats"],
                          log=None if values["quiet"] else
                          (lambda row: print(f"  {row.name}: done")),
                          rows_spec=rows_spec)
    print(format_ablation_text(rows))
    if values["out"]:
        write_ablation_csv(values["out"], rows, header_lines=plan.lines())
    return 0


def cmd_bench(values: dict, plan: RunPlan) -> int:
    from .channel import SystemConfig, sample_channels
    from .evalmetrics import inference_time
    from .model import init_params

    system = SystemConfig(n_pairs=values["pairs"], n_antennas=values["antennas"],
                          seed=values["seed"])
    dataset = sample_channels(system, values["count"])
    config = _profile_config(values, system.n_antennas)
    params = init_params(config, seed=values["seed"])
    timing = inference_time(params, dataset, repeats=values["repeats"])
    text = (f"single-sample forward, K={system.n_pairs}, N_T={system.n_antennas}, "
            f"profile={values['profile']} ({params.n_scalars} scalars):\n"
            f"  mean {timing.mean_ms:.4f} ms, p95 {timing.p95_ms:.4f} ms "
            f"over {timing.repeats} repeats")
    _emit(values, text, plan)
    return 0


def _report_checkpoint(path: str) -> str:
    from .training import read_checkpoint

    params, meta = read_checkpoint(path)
    lines = [f"checkpoint {path}",
             f"  parameters: {params.n_scalars} scalars "
             f"({len(params.entries)} tensors, {len(params.bn_states)} norm buffers), "
             f"dtype {params.dtype}"]
    lines.append("  architecture:")
    for key, value in params.config.to_kv().items():
        lines.append(f"    {key} = {value}")
    if meta:
        lines.append("  metadata:")
        for key in sorted(meta):
            lines.append(f"    {key} = {meta[key]}")
    return "\n".join(lines)


def _report_dataset(path: str) -> str:
    import numpy as np

    dataset = _load_dataset(path)
    cfg = dataset.config
    lines = [f"dataset {path}",
             f"  {len(dataset)} samples, K={cfg.n_pairs}, N_T={cfg.n_antennas}, "
             f"SNR {cfg.snr_db:g} dB, P_max {cfg.p_max:g} W, "
             f"P_c {cfg.p_circuit:g} W, R_req {cfg.r_req:g}, seed {cfg.seed}"]
    if dataset.labeled:
        finite = dataset.labels[np.isfinite(dataset.labels)]
        lines.append(f"  labels: {finite.size}/{len(dataset)} oracle-feasible, "
                     f"mean EE {finite.mean():.4f}" if finite.size else
                     f"  labels: 0/{len(dataset)} oracle-feasible")
    else:
        lines.append("  labels: none")
    if os.path.exists(path + ".plan"):
        lines.append("  plan:")
        with open(path + ".plan", encoding="utf-8") as fh:
            for line in fh.read().splitlines():
                lines.append(f"    {line}")
    return "\n".join(lines)


def cmd_report(values: dict, plan: RunPlan) -> int:
    path = values["path"]
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise CliError(f"cannot read artifact: {exc}") from None
    if head == b"ICKP":
        text = _report_checkpoint(path)
    elif head == b"ICGN":
        text = _report_dataset(path)
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read().rstrip("\n")
    _emit(values, text, plan)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "ota-train": cmd_ota_train,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = list(sys.argv[1:]) if argv is None else list(argv)
    if args and not args[0].startswith("-") and args[0] not in COMMANDS:
        near = difflib.get_close_matches(args[0], COMMANDS, n=1)
        hint = f" (did you mean {near[0]!r}?)" if near else ""
        print(f"{PROG}: unknown command {args[0]!r}{hint}", file=sys.stderr)
        print(f"commands: {' '.join(COMMANDS)}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        ns = parser.parse_args(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        values = _resolve(ns.command, ns)
    except CliError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    if values["threads"] is not None:
        if values["threads"] < 1:
            print(f"{PROG}: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(values["threads"])
    plan = RunPlan(ns.command, {k: v for k, v in values.items() if k != "quiet"})
    try:
        return HANDLERS[ns.command](values, plan)
    except CliError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary: report, don't trace
        print(f"{PROG}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
