"""Config-driven command line: ``synth``, ``run``, ``simulate`` and ``report``.

Configs are INI files. Recognised sections::

    [experiment]  seed, out
    [scenario]    fields of ScenarioConfig (data generator, model, pretraining)
    [unlearn]     defaults shared by every method
    [method.NAME] one section per unlearning method, overriding [unlearn]
    [attack]      AttackConfig fields plus ``objectives`` (comma list)
    [geometry]    n_bins, floor
    [ntk]         spectrum, spectrum_param, d (or sigma2 = comma list), tau2,
                  kappa, eta, T, T_r, c_rate

Exit codes: 0 success, 1 config error, 2 runtime error, 3 incomplete inputs.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import sys
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, geometry
from .errors import DegenerateError, DomainError
from .experiments import Lab, ScenarioConfig, build_lab
from .linalg import save_json, spectrum_of
from .pipeline import (AttackConfig, NtkSimConfig, UnlearnConfig, extract_projector,
                       fit_recovery_rate, ntk_simulate, run_attack, run_unlearning)
from .serialize import write_csv, write_json
from .synth import RepBatch, make_spectrum, write_batch_csv
from .toymodel import accuracy_expected, representations, save_model

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INCOMPLETE = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class IncompleteError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


# --- config parsing ----------------------------------------------------------------

def _convert(section, key, raw, typ):
    origin = typing.get_origin(typ)
    args = [a for a in typing.get_args(typ) if a is not type(None)]
    if origin is typing.Union or origin is getattr(__import__("types"), "UnionType", None):
        if raw.strip().lower() in ("", "none"):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def _fields(cls, section, items: dict, extra=()) -> dict:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in items.items():
        if key in extra:
            continue
        if key not in names:
            raise ConfigError(f"[{section}] unknown field {key!r}")
        out[key] = _convert(section, key, raw, hints[key])
    return out


def _build(cls, section, kwargs):
    try:
        return cls(**kwargs)
    except (DomainError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # field names such as K and T are case-sensitive
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    known = {"experiment", "scenario", "unlearn", "attack", "geometry", "ntk"}
    for name in cp.sections():
        if name not in known and not name.startswith("method."):
            raise ConfigError(f"unknown section [{name}]")
    return cp


def canonical(cp: configparser.ConfigParser) -> dict:
    return {s: dict(sorted(cp.items(s))) for s in sorted(cp.sections())}


def config_hash(cp: configparser.ConfigParser) -> str:
    return hashlib.sha256(json.dumps(canonical(cp), sort_keys=True).encode()).hexdigest()


def _section(cp, name) -> dict:
    return dict(cp.items(name)) if cp.has_section(name) else {}


def experiment_seed(cp) -> int:
    raw = _section(cp, "experiment").get("seed")
    if raw is None:
        raise ConfigError("[experiment] seed is required")
    return _convert("experiment", "seed", raw, int)


def scenario_config(cp) -> ScenarioConfig:
    return _build(ScenarioConfig, "scenario", _fields(ScenarioConfig, "scenario", _section(cp, "scenario")))


def method_configs(cp, seed: int) -> dict:
    base = _section(cp, "unlearn")
    methods = {}
    for name in cp.sections():
        if not name.startswith("method."):
            continue
        items = dict(base)
        items.update({k: v for k, v in cp.items(name) if k not in base or cp.get(name, k) != base[k]})
        kwargs = _fields(UnlearnConfig, name, items)
        kwargs.setdefault("seed", seed)
        methods[name[len("method."):]] = _build(UnlearnConfig, name, kwargs)
    if not methods:
        raise ConfigError("no [method.NAME] sections")
    return methods


def attack_configs(cp, seed: int) -> list:
    """One AttackConfig per objective.

    Without an explicit ``lr`` the attack later inherits each method's
    unlearning lr; the placeholder here is replaced per method.
    """
    items = _section(cp, "attack")
    objectives = [o.strip() for o in items.get("objectives", "rtt_ce").split(",") if o.strip()]
    kwargs = _fields(AttackConfig, "attack", items, extra=("objectives",))
    kwargs.setdefault("seed", seed)
    return [_build(AttackConfig, "attack", dict(kwargs, objective=o)) for o in objectives]


def geometry_options(cp) -> dict:
    items = _section(cp, "geometry")
    out = {"n_bins": 8, "floor": 0.05}
    for key, raw in items.items():
        if key not in out:
            raise ConfigError(f"[geometry] unknown field {key!r}")
        out[key] = _convert("geometry", key, raw, type(out[key]))
    return out


def ntk_config(cp) -> NtkSimConfig:
    if not cp.has_section("ntk"):
        raise ConfigError("[ntk] section is required for simulate")
    items = dict(cp.items("ntk"))
    if "sigma2" in items:
        try:
            sigma2 = np.array([float(v) for v in items.pop("sigma2").split(",")])
        except ValueError:
            raise ConfigError("[ntk] sigma2: expected a comma-separated list of numbers") from None
    else:
        kind = items.pop("spectrum", "geometric")
        param = _convert("ntk", "spectrum_param", items.pop("spectrum_param", "0.5"), float)
        d = _convert("ntk", "d", items.pop("d", "16"), int)
        try:
            sigma2 = make_spectrum(d, kind, param)
        except DomainError as exc:
            raise ConfigError(f"[ntk] {exc}") from None
    kwargs = _fields(NtkSimConfig, "ntk", items)
    return _build(NtkSimConfig, "ntk", dict(kwargs, sigma2=sigma2))


# --- output helpers ------------------------------------------------------------------

def _out_dir(args, cp) -> Path:
    raw = args.out or _section(cp, "experiment").get("out")
    if not raw:
        raise ConfigError("no output directory: pass --out or set [experiment] out")
    path = Path(raw)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from None
    return path


def _manifest(out: Path, command: str, cp, seed: int, files: list) -> None:
    write_json(out / "manifest.json", {
        "command": command,
        "config": canonical(cp),
        "config_hash": config_hash(cp),
        "seed": seed,
        "version": __version__,
        "files": sorted(files),
        "created_unix": int(time.time()),
    })


def _apply_seed(cp, seed):
    if seed is not None:
        if not cp.has_section("experiment"):
            cp.add_section("experiment")
        cp.set("experiment", "seed", str(seed))


# --- subcommands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cp = load_config(args.config)
    _apply_seed(cp, args.seed)
    seed = experiment_seed(cp)
    scfg = scenario_config(cp)
    out = _out_dir(args, cp)
    try:
        lab = build_lab(dataclasses.replace(scfg, pretrain_steps=0, min_accuracy=None), seed)
    except Exception as exc:
        raise StageError("synth", exc) from exc
    _write_synth(out, lab)
    _manifest(out, "synth", cp, seed, ["forget_batch.csv", "retain_batch.csv", "task.json"])
    return EXIT_OK


def _write_synth(out: Path, lab: Lab) -> None:
    sc = lab.scenario
    for name, task in (("forget", sc.forget), ("retain", sc.retain)):
        write_batch_csv(out / f"{name}_batch.csv",
                        RepBatch(task.inputs, np.arange(len(task)), task.context_ids))
    write_json(out / "task.json", {
        "n_classes": sc.forget.n_classes,
        "forget": {"labels": sc.forget.labels, "rule": sc.forget.rule, "center": sc.forget.center},
        "retain": {"labels": sc.retain.labels, "rule": sc.retain.rule, "center": sc.retain.center},
        "split": {"T": sc.split.forget_T, "V": sc.split.forget_V},
    })


def _run_method(lab: Lab, name: str, ucfg: UnlearnConfig, attacks: list, geo: dict, out: str) -> dict:
    out = Path(out)
    sc = lab.scenario
    stage = "unlearn"
    try:
        projector = None
        if ucfg.mcu:
            projector, spec_k = extract_projector(lab.model_o, sc.forget.inputs[sc.split.forget], ucfg.K,
                                                  ucfg.include_mean, seed=ucfg.seed)
            save_json(out / f"{name}_projector.json", spec_k.truncate(min(ucfg.K, spec_k.n_components))
                      .to_dict(include_mean=ucfg.include_mean))
        model_u, traj = run_unlearning(lab.model_o, sc, ucfg, projector)
        traj.write_csv(out / f"{name}_trajectory.csv")
        save_model(out / f"{name}_model_u.json", model_u)
        Hf = representations(lab.model_o, sc.forget.inputs)
        spec = spectrum_of(Hf, None, method="exact")
        XV, yV = sc.part("V")
        row = {"method": name, "label": ucfg.label, "steps": len(traj), "stop_reason": traj.stop_reason,
               "retain_acc": accuracy_expected(model_u, sc.retain.inputs, sc.retain.labels),
               "forget_acc": accuracy_expected(model_u, XV, yV), "attacks": {}}
        h_u = representations(model_u, sc.forget.inputs)
        h_r = None
        stage = "attack"
        for acfg in attacks:
            if acfg.lr is None:
                acfg = dataclasses.replace(acfg, lr=ucfg.lr)
            rep = run_attack(model_u, lab.model_o, sc, acfg, spectrum=spec, floor=geo["floor"], keep_model=True)
            rep.write(out / f"{name}_attack_{acfg.objective}")
            row["attacks"][acfg.objective] = rep.to_dict()
            if acfg.objective == attacks[0].objective and acfg.epochs > 0:
                h_r = representations(rep.final_model, sc.forget.inputs)
        first = row["attacks"][attacks[0].objective] if attacks else None
        row["relearn_acc"] = first["relearn_acc"] if first else row["forget_acc"]
        row["delta"] = first["delta"] if first else 0.0
        stage = "geometry"
        try:
            report = geometry.geometry_report(spec, Hf, h_u, h_r, n_bins=geo["n_bins"], floor=geo["floor"])
            report.write(out / f"{name}_geometry.json", out / f"{name}_geometry.csv")
            row["first_bin_change"] = float(report.bin_histogram[0])
        except DegenerateError as exc:
            row["geometry_error"] = str(exc)
        return row
    except Exception as exc:
        raise StageError(f"{stage}:{name}", exc) from exc


def cmd_run(args) -> int:
    cp = load_config(args.config)
    _apply_seed(cp, args.seed)
    seed = experiment_seed(cp)
    scfg = scenario_config(cp)
    methods = method_configs(cp, seed)
    attacks = attack_configs(cp, seed)
    geo = geometry_options(cp)
    out = _out_dir(args, cp)
    try:
        lab = build_lab(scfg, seed)
    except Exception as exc:
        raise StageError("pretrain", exc) from exc
    _write_synth(out, lab)
    save_model(out / "model_o.json", lab.model_o)
    jobs = max(1, args.jobs)
    names = sorted(methods)
    if jobs == 1 or len(names) == 1:
        rows = [_run_method(lab, n, methods[n], attacks, geo, str(out)) for n in names]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_method, lab, n, methods[n], attacks, geo, str(out)) for n in names]
            rows = [f.result() for f in futs]
    sc = lab.scenario
    summary = {
        "seed": seed,
        "config_hash": config_hash(cp),
        "original": {"forget_acc": accuracy_expected(lab.model_o, *sc.part("V")),
                     "retain_acc": accuracy_expected(lab.model_o, sc.retain.inputs, sc.retain.labels)},
        "methods": rows,
    }
    write_json(out / "summary.json", summary)
    files = ["summary.json", "model_o.json", "forget_batch.csv", "retain_batch.csv", "task.json"]
    files += sorted(p.name for p in out.iterdir() if any(p.name.startswith(n + "_") for n in names))
    _manifest(out, "run", cp, seed, files)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cp = load_config(args.config)
    _apply_seed(cp, args.seed)
    seed = experiment_seed(cp)
    ncfg = ntk_config(cp)
    out = _out_dir(args, cp)
    try:
        res = ntk_simulate(ncfg)
        fit = fit_recovery_rate(res.recovery, res.times, res.sigma2)
    except Exception as exc:
        raise StageError("simulate", exc) from exc
    res.write_csv(out / "ntk_sim.csv")
    ratio = res.change_ratio()
    write_csv(out / "ntk_change.csv", ["k", "sigma2", "change_sq", "change_ratio"],
              [(k, float(res.sigma2[k]), float(res.change_sq[k]), float(ratio[k])) for k in range(ratio.size)])
    write_json(out / "ntk_fit.json", {"c_true": ncfg.c_rate, "c_pooled": fit.pooled, "c_per_k": fit.per_k,
                                      "n_clamped": fit.n_clamped})
    _manifest(out, "simulate", cp, seed, ["ntk_sim.csv", "ntk_change.csv", "ntk_fit.json"])
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.run_dir or args.out or "")
    if not root.is_dir():
        raise IncompleteError(f"run directory {root} does not exist")
    candidates = [root] if (root / "manifest.json").exists() else sorted(
        p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())
    runs = []
    for p in candidates:
        try:
            manifest = json.loads((p / "manifest.json").read_text())
        except ValueError as exc:
            raise IncompleteError(f"corrupt manifest {p / 'manifest.json'}: {exc}") from None
        if manifest.get("command") == "run":
            runs.append(p)
    incomplete = [str(p) for p in runs if not (p / "summary.json").exists()]
    if not runs:
        raise IncompleteError(f"no completed runs under {root}")
    if incomplete:
        raise IncompleteError("incomplete runs (no summary.json): " + ", ".join(incomplete))
    rows = []
    for p in runs:
        path = p / "summary.json"
        try:
            summary = json.loads(path.read_text())
            for m in summary["methods"]:
                rows.append({"run": p.name, "method": m["method"], "label": m["label"],
                             "retain_acc": float(m["retain_acc"]), "forget_acc": float(m["forget_acc"]),
                             "relearn_acc": float(m["relearn_acc"]), "delta": float(m["delta"])})
        except (ValueError, KeyError, TypeError) as exc:
            raise IncompleteError(f"corrupt summary {path}: {exc}") from None
    rows.sort(key=lambda r: (r["delta"], r["run"], r["method"]))
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    header = ["run", "method", "label", "retain_acc", "forget_acc", "relearn_acc", "delta"]
    write_csv(out / "report.csv", header, [[r[h] for h in header] for r in rows])
    write_json(out / "report.json", {"rows": rows})
    return EXIT_OK


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcu-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "run", "simulate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1)
        if name == "report":
            p.add_argument("run_dir", nargs="?")
    return parser


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "simulate": cmd_simulate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompleteError as exc:
        print(f"incomplete inputs: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
