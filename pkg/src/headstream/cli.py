"""Command-line surface: synthesize streams, run adaptation, sweep the
ablation grid, merge reports, and inspect binary files.

Config precedence is defaults < config file < flags. Config files are flat
JSON whose keys match the engine/synth field names exactly; unknown keys are
rejected.

Exit codes: 0 success, 1 usage/config, 2 data/format, 3 internal invariant.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import (
    ABLATION_NAMES,
    Ablations,
    EngineConfig,
    RunResult,
    load_session,
    run_stream,
    run_zero_shot,
    save_session,
)
from .errors import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_INVARIANT,
    EXIT_OK,
    ConfigError,
    DataError,
    FormatError,
    HeadstreamError,
)
from .gate import GateConfig
from .metrics import MetricsReport
from .stream_io import open_stream
from .synth import SynthConfig, read_truth, write_synth
from .temperature import TempConfig
from .updates import UpdateConfig

# flat config key -> (section, type); section None = EngineConfig itself
_ENGINE_KEYS: dict[str, tuple[Optional[str], type]] = {
    "window_len": ("gate", int),
    "quantile": ("gate", float),
    "warmup": ("gate", int),
    "alpha": ("update", float),
    "gamma": ("update", float),
    "eta": ("update", float),
    "rho": ("update", float),
    "kappa": ("update", float),
    "eps": ("update", float),
    "batch_size": ("update", int),
    "decay": ("update", float),
    "tau_min": ("temp", float),
    "tau_max": ("temp", float),
    "beta": ("temp", float),
    "search_tol": ("temp", float),
    "cal_mode": ("temp", str),
    "tau_init": ("temp", float),
    "coarse_steps": ("temp", int),
    "gate_off": ("ablations", bool),
    "freeze_prototypes": ("ablations", bool),
    "freeze_prior": ("ablations", bool),
    "single_tau": ("ablations", bool),
    "single_tau_fixed": ("ablations", bool),
    "guards_off": ("ablations", bool),
    "metrics_probs": (None, str),
    "validate_each_update": (None, bool),
    "trace": (None, bool),
}

_SYNTH_KEYS: dict[str, type] = {
    "C": int, "d": int, "N": int, "K": int, "seed": int,
    "shift": float, "noise_sigma": float, "view_sigma": float,
    "true_prior_concentration": float, "switch_at": int,
}

GRID_SETTINGS = (
    "full",
    "gate_off",
    "freeze_prototypes",
    "freeze_prior",
    "single_tau",
    "guards_off",
)


def _load_config_file(path, allowed: set[str]) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def _coerce(key: str, value, typ: type):
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
    if value is None:
        return None
    try:
        return typ(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"key {key!r} expects {typ.__name__}, got {value!r}") from e


def _parse_set_overrides(pairs: list[str], allowed: dict) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def build_engine_config(file_values: dict, overrides: dict) -> EngineConfig:
    merged: dict = {}
    for src in (file_values, overrides):
        for k, v in src.items():
            section, typ = _ENGINE_KEYS[k]
            merged[k] = _coerce(k, v, typ)
    sections: dict[Optional[str], dict] = {"gate": {}, "update": {}, "temp": {}, "ablations": {}, None: {}}
    for k, v in merged.items():
        section, _ = _ENGINE_KEYS[k]
        sections[section][k] = v
    return EngineConfig(
        gate=GateConfig(**sections["gate"]),
        update=UpdateConfig(**sections["update"]),
        temp=TempConfig(**sections["temp"]),
        ablations=Ablations(**sections["ablations"]),
        **sections[None],
    )


def build_synth_config(file_values: dict, overrides: dict) -> SynthConfig:
    merged: dict = {}
    for src in (file_values, overrides):
        for k, v in src.items():
            merged[k] = _coerce(k, v, _SYNTH_KEYS[k])
    return SynthConfig(**merged)


def _apply_ablations(config: EngineConfig, names: list[str]) -> EngineConfig:
    values = {}
    for name in names:
        if name not in ABLATION_NAMES:
            raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATION_NAMES}")
        values[name] = True
    if values:
        config = replace(config, ablations=replace(config.ablations, **values))
    return config


def _report_payload(result: RunResult, setting: str) -> dict:
    payload = result.report.to_dict()
    payload.update(result.summary)
    payload["setting"] = setting
    return payload


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _run_one(stream_path, config: EngineConfig, *, zero_shot: bool,
             trace_path=None, state_in=None, state_out=None) -> RunResult:
    reader = open_stream(stream_path)
    session = load_session(state_in) if state_in else None
    trace_file = open(trace_path, "w") if trace_path else None

    def sink(rec: dict) -> None:
        trace_file.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        if zero_shot:
            result = run_zero_shot(
                reader.anchors, iter(reader), config,
                trace_sink=sink if trace_file else None,
            )
        else:
            result = run_stream(
                reader.anchors, iter(reader), config, session=session,
                trace_sink=sink if trace_file else None,
            )
    finally:
        if trace_file:
            trace_file.close()
    if state_out:
        save_session(state_out, result.session)
    return result


def cmd_synth(args) -> int:
    file_values = _load_config_file(args.config, set(_SYNTH_KEYS)) if args.config else {}
    overrides = {
        k: v
        for k, v in (
            ("C", args.C), ("d", args.d), ("N", args.N), ("K", args.K),
            ("seed", args.seed), ("shift", args.shift),
            ("noise_sigma", args.noise_sigma), ("view_sigma", args.view_sigma),
            ("true_prior_concentration", args.prior_concentration),
            ("switch_at", args.switch_at),
        )
        if v is not None
    }
    config = build_synth_config(file_values, overrides)
    truth_path = args.truth_out or (str(args.out) + ".truth")
    _, truth = write_synth(config, args.out, truth_path)
    prior_entropy = float(-(truth.prior * np.log(truth.prior)).sum())
    print(
        f"wrote {args.out}: C={config.C} d={config.d} N={config.N} "
        f"K={config.K} shift={config.shift} prior_entropy={prior_entropy:.4f}"
    )
    print(f"ground truth sidecar: {truth_path}")
    return EXIT_OK


def cmd_run(args) -> int:
    file_values = _load_config_file(args.config, set(_ENGINE_KEYS)) if args.config else {}
    overrides = _parse_set_overrides(args.set or [], _ENGINE_KEYS)
    config = build_engine_config(file_values, overrides)
    config = _apply_ablations(config, args.ablate or [])
    zero_shot = args.baseline == "zero-shot"
    result = _run_one(
        args.stream, config, zero_shot=zero_shot, trace_path=args.trace,
        state_in=args.state_in, state_out=args.state_out,
    )
    setting = "zero-shot" if zero_shot else (
        "+".join(args.ablate) if args.ablate else "full"
    )
    payload = _report_payload(result, setting)
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote report: {args.out}")
    top1 = payload["top1"]
    ece = payload["ece"]
    print(
        f"setting={setting} n_eval={payload['n_eval']} "
        f"top1={'n/a' if top1 is None else f'{top1:.4f}'} "
        f"ece={'n/a' if ece is None else f'{ece:.4f}'} "
        f"accepted={payload['accepted_count']} updates={payload['update_count']}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_values = _load_config_file(args.config, set(_ENGINE_KEYS)) if args.config else {}
    overrides = _parse_set_overrides(args.set or [], _ENGINE_KEYS)
    base = build_engine_config(file_values, overrides)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for setting in GRID_SETTINGS:
        config = base if setting == "full" else _apply_ablations(base, [setting])
        result = _run_one(args.stream, config, zero_shot=False)
        payload = _report_payload(result, setting)
        rows.append(payload)
        if out_dir:
            _write_json(out_dir / f"{setting}.json", payload)
    print(f"{'setting':<20} {'top1':>8} {'ece':>8} {'max_kl':>8} {'updates':>8}")
    for row in rows:
        top1 = "n/a" if row["top1"] is None else f"{row['top1']:.4f}"
        ece = "n/a" if row["ece"] is None else f"{row['ece']:.4f}"
        print(
            f"{row['setting']:<20} {top1:>8} {ece:>8} "
            f"{row['max_prior_kl']:>8.4f} {row['update_count']:>8}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    payloads = []
    for path in args.reports:
        try:
            with open(path) as f:
                payload = json.load(f)
        except OSError as e:
            raise DataError(f"cannot read report {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"report {path} is not valid JSON: {e}") from e
        missing = {k for k in ("n_eval", "top1", "ece") if k not in payload}
        if missing:
            raise DataError(f"report {path} lacks keys {sorted(missing)}")
        payloads.append((Path(path).name, payload))
    print(f"{'report':<32} {'setting':<16} {'n_eval':>8} {'top1':>8} {'ece':>8}")
    for name, p in payloads:
        top1 = "n/a" if p["top1"] is None else f"{p['top1']:.4f}"
        ece = "n/a" if p["ece"] is None else f"{p['ece']:.4f}"
        print(f"{name:<32} {p.get('setting', '?'):<16} {p['n_eval']:>8} {top1:>8} {ece:>8}")
    if args.reliability:
        with open(args.reliability, "w") as f:
            f.write("report,bin,lo,hi,count,mean_confidence,accuracy\n")
            for name, p in payloads:
                counts = p.get("bin_counts")
                if counts is None:
                    raise DataError(f"report {name} lacks reliability bins")
                confs = p["bin_conf_sums"]
                correct = p["bin_correct"]
                n_bins = len(counts)
                for b in range(n_bins):
                    lo, hi = b / n_bins, (b + 1) / n_bins
                    if counts[b]:
                        mc = confs[b] / counts[b]
                        acc = correct[b] / counts[b]
                        f.write(f"{name},{b},{lo:.6f},{hi:.6f},{counts[b]},{mc:.6f},{acc:.6f}\n")
                    else:
                        f.write(f"{name},{b},{lo:.6f},{hi:.6f},0,,\n")
        print(f"wrote reliability columns: {args.reliability}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.file)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"ULS1":
        reader = open_stream(path)
        h = reader.header
        reader.close()
        print(
            f"ULS1 stream: C={h.n_classes} d={h.dim} K={h.views} "
            f"N={h.n_samples} labeled={h.labeled}"
        )
    elif magic == b"ULH1":
        session = load_session(path)
        s = session.state
        print(
            f"ULH1 session: C={s.n_classes} d={s.dim} tau_pred={s.tau_pred:.4f} "
            f"tau_cal={s.tau_cal:.4f} accepted={s.accepted_count} "
            f"updates={s.update_count} window={len(session.window)} "
            f"buffered={session.buffer.count}"
        )
    elif magic == b"ULG1":
        truth = read_truth(path)
        c = truth.config
        print(
            f"ULG1 ground truth: C={c.C} d={c.d} N={c.N} shift={c.shift} "
            f"noise_sigma={c.noise_sigma} switch_at={c.switch_at}"
        )
    else:
        raise FormatError(f"{path}: unrecognized magic {magic!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headstream",
        description="Streaming logit-head adaptation: synthesize, run, ablate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shifted stream")
    p.add_argument("--C", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shift", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--view-sigma", type=float, default=None)
    p.add_argument("--prior-concentration", type=float, default=None)
    p.add_argument("--switch-at", type=int, default=None)
    p.add_argument("--config", default=None, help="flat JSON config file")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--truth-out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run adaptation (or the frozen baseline) on a stream")
    p.add_argument("stream")
    p.add_argument("-o", "--out", default=None, help="report JSON path")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--ablate", action="append", choices=ABLATION_NAMES)
    p.add_argument("--baseline", choices=["zero-shot"], default=None)
    p.add_argument("--trace", default=None, help="write per-sample JSONL here")
    p.add_argument("--state-in", default=None)
    p.add_argument("--state-out", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the six-setting ablation grid on one stream")
    p.add_argument("stream")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge metric reports into a table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--reliability", default=None, help="CSV of reliability-diagram columns")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="summarize a ULS1/ULH1/ULG1 file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except HeadstreamError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
