"""Command-line experiment runner.

    speclab gen-task     --config C   teacher, initial draft, prompts, fixed data
    speclab distill      --config C   one trained draft per preset, tau table
    speclab sweep        --config C   lenience quality/latency tradeoff rows
    speclab oracle-audit --config C   randomized bound and losslessness audit
    speclab report       --config C   one long-format CSV joining the above

Every random draw is seeded from the config's ``seed`` plus a fixed tag, so
re-running a command rewrites byte-identical files. Relative file paths in
the config are resolved against the config file's directory; ``out`` and
``--out`` are resolved against the working directory.

Exit codes: 0 ok, 2 bad config, 3 audit violation, 4 missing or unwritable
files.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import copy
import csv
import json
import logging
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracle
from .distill import Batch, KDConfig, FixedDataset, kd_loss, preset, sample_fixed_dataset, train
from .errors import BoundViolation, ConfigError, MissingTask, NothingToReport, SpeclabError, UnknownPreset
from .lm import SoftmaxLM, TabularLM, blend_lm, generate_batch, load_model, random_tabular_lm, save_model
from .prob import TVD
from .specdec import LenienceSpec, SpecConfig

log = logging.getLogger("speclab")

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_IO = 0, 2, 3, 4

TAU_COLUMNS = ("method", "gamma", "temperature", "tau", "alpha")
SUMMARY_COLUMNS = ("method", "divergence", "lambda1", "lambda2", "eta", "steps",
                   "alpha_initial", "alpha_final", "tvd_loss_initial", "tvd_loss_final")
TRADEOFF_COLUMNS = ("lenience", "eps", "gamma", "c", "quality_tvd", "quality_loglik",
                    "relative_latency", "tau", "alpha", "tvd_method")
REPORT_COLUMNS = ("source", "method", "gamma", "temperature", "step", "lenience", "eps", "c",
                  "metric", "value")
INITIAL = "none"

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "task": {"vocab": 16, "order": 1, "concentration": 0.5, "eos_bias": -1.5, "t_max": 12,
             "n_train_prompts": 64, "n_eval_prompts": 32, "prompt_len": [1, 2], "n_fixed": 8},
    "teacher": {"kind": "random"},
    "draft": {"kind": "random"},
    "distill": {"presets": ["SupervisedKD", "SeqKD", "ImitKD", "f-Distill", "GKD"],
                "steps": 2000, "batch_size": 32, "eta": 0.5, "eta_by_preset": {},
                "divergence_by_preset": {}, "eval_every": 100, "eval_gamma": 7,
                "gen_temperature": 1.0, "probe_repeats": 8},
    "spec": {"gammas": [3, 5, 7], "temperatures": [1.0]},
    "sweep": {"draft": "initial", "kinds": ["LIN", "SQ", "EXP"],
              "eps": [1.0, 0.3, 0.1, 0.03, 0.01, 0.001, 1e-05], "gammas": [3, 5, 7],
              "c": [0.05, 0.2], "temperature": 1.0, "mc_samples": 128},
    "audit": {"n_instances": 50, "vocab": 3, "t_max": 3, "order": 1, "concentration": 1.0,
              "eos_bias": 0.0},
}


# -- config -------------------------------------------------------------------

@dataclass
class Experiment:
    cfg: dict
    base_dir: Path
    out: Path

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    def rng(self, *tags) -> np.random.Generator:
        """Independent stream for ``tags``; same seed and tags, same stream."""
        words = [zlib.crc32(str(t).encode()) for t in tags]
        return np.random.default_rng([self.seed, *words])

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def task_dir(self) -> Path:
        return self.out / "task"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("eta_by_preset", "divergence_by_preset"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, out=None, seed=None) -> Experiment:
    """Read a JSON experiment file over :data:`DEFAULTS` and validate it."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    exp = Experiment(cfg, path.resolve().parent, Path(out if out is not None else cfg["out"]))
    _validate(exp)
    return exp


def _validate(exp: Experiment) -> None:
    c = exp.cfg
    t = c["task"]
    try:
        if not 2 <= int(t["vocab"]) or not 0 <= int(t["order"]) <= 2:
            raise ConfigError("task.vocab must be >= 2 and task.order in 0..2")
        if float(t["concentration"]) <= 0 or int(t["t_max"]) < 1:
            raise ConfigError("task.concentration must be > 0 and task.t_max >= 1")
        lo, hi = (int(v) for v in t["prompt_len"])
        if not 0 <= lo <= hi:
            raise ConfigError("task.prompt_len must be [lo, hi] with 0 <= lo <= hi")
        if min(int(t["n_train_prompts"]), int(t["n_eval_prompts"])) < 1 or int(t["n_fixed"]) < 0:
            raise ConfigError("task needs at least one train and one eval prompt")
        for role in ("teacher", "draft"):
            spec = c[role]
            kind = spec.get("kind")
            if kind not in ("random", "file") + (("blend",) if role == "draft" else ()):
                raise ConfigError(f"{role}.kind {kind!r} not supported")
            if kind == "file" and not exp.path(spec.get("path", "")).is_file():
                raise ConfigError(f"{role}.path {spec.get('path')!r} does not exist")
            if kind == "blend" and not 0.0 <= float(spec.get("lambda", -1)) <= 1.0:
                raise ConfigError("draft.lambda must be in [0, 1]")
        d = c["distill"]
        for name in d["presets"]:
            _kd_config(exp, name)
        for g in c["spec"]["gammas"] + c["sweep"]["gammas"]:
            SpecConfig(gamma=int(g), t_max=int(t["t_max"]))
        for temp in c["spec"]["temperatures"]:
            if float(temp) <= 0:
                raise ConfigError("spec.temperatures must be > 0")
        s = c["sweep"]
        for kind in s["kinds"]:
            for eps in s["eps"]:
                LenienceSpec(kind, float(eps))
        if any(float(v) <= 0 for v in s["c"]) or int(s["mc_samples"]) < 1:
            raise ConfigError("sweep.c values must be > 0 and sweep.mc_samples >= 1")
        a = c["audit"]
        if int(a["n_instances"]) < 1:
            raise ConfigError("audit.n_instances must be >= 1")
    except ConfigError:
        raise
    except (UnknownPreset, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def _kd_config(exp: Experiment, name: str) -> KDConfig:
    d = exp.cfg["distill"]
    kw = preset(name)
    if name in d["divergence_by_preset"]:
        kw["divergence"] = d["divergence_by_preset"][name]
    return KDConfig(**kw, eta=float(d["eta_by_preset"].get(name, d["eta"])), steps=int(d["steps"]),
                    batch_size=int(d["batch_size"]), gen_temperature=float(d["gen_temperature"]),
                    t_max=int(exp.cfg["task"]["t_max"]), eval_every=int(d["eval_every"]),
                    eval_gamma=int(d["eval_gamma"]))


# -- files --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


@dataclass
class Task:
    teacher: TabularLM
    draft: TabularLM
    train_prompts: list
    eval_prompts: list
    fixed: FixedDataset
    t_max: int


def load_task(exp: Experiment) -> Task:
    d = exp.task_dir
    try:
        prompts = json.loads((d / "prompts.json").read_text(encoding="utf-8"))
        fixed = json.loads((d / "fixed.json").read_text(encoding="utf-8"))
        teacher, draft = load_model(d / "teacher.json"), load_model(d / "draft.json")
    except FileNotFoundError as exc:
        raise MissingTask(f"task files missing under {d} ({exc.filename}); run gen-task first") from None
    return Task(teacher, draft, [tuple(x) for x in prompts["train"]], [tuple(x) for x in prompts["eval"]],
                FixedDataset([(tuple(p["x"]), tuple(p["y"])) for p in fixed]), int(exp.cfg["task"]["t_max"]))


# -- gen-task -----------------------------------------------------------------

def _random_prompts(rng, n, vocab, eos, lo, hi) -> list[tuple]:
    tokens = [t for t in range(vocab) if t != eos]
    lens = rng.integers(lo, hi + 1, size=n)
    return [tuple(int(tokens[i]) for i in rng.integers(len(tokens), size=k)) for k in lens]


def cmd_gen_task(exp: Experiment) -> int:
    t = exp.cfg["task"]
    V, order = int(t["vocab"]), int(t["order"])
    conc, bias = float(t["concentration"]), float(t["eos_bias"])
    ts, ds = exp.cfg["teacher"], exp.cfg["draft"]
    if ts["kind"] == "file":
        teacher = load_model(exp.path(ts["path"]))
    else:
        teacher = random_tabular_lm(V, order, conc, bias, exp.rng("teacher"))
    if ds["kind"] == "file":
        draft = load_model(exp.path(ds["path"]))
        if isinstance(draft, SoftmaxLM):
            draft = draft.to_tabular()
    else:
        noise = random_tabular_lm(teacher.vocab_size, int(ds.get("order", teacher.order)),
                                  float(ds.get("concentration", conc)), float(ds.get("eos_bias", bias)),
                                  exp.rng("draft"), eos=teacher.eos)
        draft = blend_lm(teacher, noise, float(ds["lambda"])) if ds["kind"] == "blend" else noise
    lo, hi = (int(v) for v in t["prompt_len"])
    train_p = _random_prompts(exp.rng("prompts", "train"), int(t["n_train_prompts"]), teacher.vocab_size,
                              teacher.eos, lo, hi)
    eval_p = _random_prompts(exp.rng("prompts", "eval"), int(t["n_eval_prompts"]), teacher.vocab_size,
                             teacher.eos, lo, hi)
    fixed = sample_fixed_dataset(teacher, train_p, int(t["n_fixed"]), int(t["t_max"]), exp.rng("fixed"))
    d = exp.task_dir
    d.mkdir(parents=True, exist_ok=True)
    save_model(teacher, d / "teacher.json")
    save_model(draft, d / "draft.json")
    _write_json(d / "prompts.json", {"train": [list(x) for x in train_p], "eval": [list(x) for x in eval_p]})
    _write_json(d / "fixed.json", [{"x": list(x), "y": list(y)} for x, y in fixed.pairs])
    alpha = oracle.mean_alpha(teacher, draft, eval_p, int(t["t_max"]))
    log.info("task written to %s (initial exact alpha %.4f)", d, alpha)
    return EXIT_OK


# -- distill ------------------------------------------------------------------

def _probe(exp: Experiment, task: Task) -> Batch:
    xs = [x for x in task.eval_prompts for _ in range(int(exp.cfg["distill"]["probe_repeats"]))]
    tokens, lengths = generate_batch(task.teacher, xs, task.t_max, 1.0, exp.rng("probe"))
    return Batch(xs, tokens, lengths, "teacher")


def _train_one(exp: Experiment, name: str):
    task = load_task(exp)
    cfg = _kd_config(exp, name)
    probe = _probe(exp, task)
    student, history = train(cfg, task.teacher, SoftmaxLM.from_tabular(task.draft), task.fixed,
                             task.train_prompts, exp.rng("train", name), eval_prompts=task.eval_prompts,
                             probe=probe)
    d = exp.out / "distill" / name
    d.mkdir(parents=True, exist_ok=True)
    save_model(student, d / "model.json")
    history.write_csv(d / "history.csv")
    init = SoftmaxLM.from_tabular(task.draft)
    summary = {
        "method": name, "divergence": str(cfg.divergence), "lambda1": cfg.lambda1, "lambda2": cfg.lambda2,
        "eta": cfg.eta, "steps": cfg.steps,
        "alpha_initial": history.records[0].alpha, "alpha_final": history.records[-1].alpha,
        "tvd_loss_initial": kd_loss(task.teacher, init, probe, TVD),
        "tvd_loss_final": kd_loss(task.teacher, student, probe, TVD),
    }
    log.info("%s: alpha %.4f -> %.4f", name, summary["alpha_initial"], summary["alpha_final"])
    return summary, _tau_rows(exp, task, name, student)


def _tau_rows(exp: Experiment, task: Task, method: str, draft) -> list[dict]:
    rows = []
    for temp in exp.cfg["spec"]["temperatures"]:
        for g in exp.cfg["spec"]["gammas"]:
            st = oracle.pooled_block_stats(task.teacher, draft, task.eval_prompts,
                                           SpecConfig(gamma=int(g), t_max=task.t_max, temperature=float(temp)))
            rows.append({"method": method, "gamma": int(g), "temperature": float(temp),
                         "tau": st["tau"], "alpha": st["alpha"]})
    return rows


def _run_jobs(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with cf.ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


class _Bound:
    """Picklable ``fn(exp, item)`` for process pools."""

    def __init__(self, fn, exp):
        self.fn, self.exp = fn, exp

    def __call__(self, item):
        return self.fn(self.exp, item)


def cmd_distill(exp: Experiment, jobs: int = 1) -> int:
    task = load_task(exp)
    names = list(exp.cfg["distill"]["presets"])
    results = _run_jobs(_Bound(_train_one, exp), names, jobs)
    tau = _tau_rows(exp, task, INITIAL, task.draft)
    for _, rows in results:
        tau.extend(rows)
    write_csv(exp.out / "distill" / "tau_table.csv", TAU_COLUMNS, tau)
    write_csv(exp.out / "distill" / "summary.csv", SUMMARY_COLUMNS, [s for s, _ in results])
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

def _sweep_draft(exp: Experiment, task: Task):
    src = exp.cfg["sweep"]["draft"]
    if src == "initial":
        return task.draft
    if src in exp.cfg["distill"]["presets"] or (exp.out / "distill" / src / "model.json").exists():
        path = exp.out / "distill" / src / "model.json"
        if not path.exists():
            raise MissingTask(f"{path} missing; run distill first")
        return load_model(path)
    return load_model(exp.path(src))


def _exact_tractable(task: Task, cfg: SpecConfig) -> bool:
    return (task.teacher.vocab_size <= oracle.SPEC_MAX_VOCAB and cfg.gamma <= oracle.SPEC_MAX_GAMMA
            and cfg.t_max <= oracle.SPEC_MAX_T)


def _sweep_cell(exp: Experiment, cell) -> list[dict]:
    kind, eps, gamma = cell
    task = load_task(exp)
    draft = _sweep_draft(exp, task)
    s = exp.cfg["sweep"]
    cfg = SpecConfig(gamma=gamma, t_max=task.t_max, temperature=float(s["temperature"]),
                     lenience=LenienceSpec(kind, eps))
    st = oracle.pooled_block_stats(task.teacher, draft, task.eval_prompts, cfg)
    if _exact_tractable(task, cfg):
        tv = float(np.mean([oracle.seqdist_tv(oracle.exact_specdec_dist(task.teacher, draft, x, cfg),
                                              oracle.enumerate_seq_dist(task.teacher, x, cfg.t_max,
                                                                        cfg.temperature))
                            for x in task.eval_prompts]))
        method = "exact"
    else:
        tv = oracle.sampled_specdec_tv(task.teacher, draft, task.eval_prompts, cfg, int(s["mc_samples"]),
                                       exp.rng("sweep", kind, repr(eps), gamma))
        method = "mc"
    rows = []
    for c in s["c"]:
        rows.append({"lenience": kind, "eps": eps, "gamma": gamma, "c": float(c), "quality_tvd": tv,
                     "quality_loglik": st["loglik"] / len(task.eval_prompts),
                     "relative_latency": (st["blocks"] + float(c) * st["draft_calls"]) / st["tokens"],
                     "tau": st["tau"], "alpha": st["alpha"], "tvd_method": method})
    return rows


def sweep_cells(exp: Experiment) -> list[tuple]:
    s = exp.cfg["sweep"]
    cells = set()
    for kind in s["kinds"]:
        kind = kind.upper()
        for eps in ([1.0] if kind == "NONE" else s["eps"]):
            for g in s["gammas"]:
                cells.add((kind, float(eps), int(g)))
    return sorted(cells)


def cmd_sweep(exp: Experiment, jobs: int = 1) -> int:
    load_task(exp)
    cells = sweep_cells(exp)
    rows = [r for part in _run_jobs(_Bound(_sweep_cell, exp), cells, jobs) for r in part]
    rows.sort(key=lambda r: (r["lenience"], r["eps"], r["gamma"], r["c"]))
    write_csv(exp.out / "sweep" / "tradeoff.csv", TRADEOFF_COLUMNS, rows)
    log.info("%d tradeoff rows written", len(rows))
    return EXIT_OK


# -- oracle-audit -------------------------------------------------------------

def _audit_one(exp: Experiment, seed: int):
    a = exp.cfg["audit"]
    try:
        row, report = oracle.audit_instance(seed, vocab=int(a["vocab"]), t_max=int(a["t_max"]),
                                            order=int(a["order"]), concentration=float(a["concentration"]),
                                            eos_bias=float(a["eos_bias"]))
        return row, {"seed": seed, "ok": True, "report": report.to_record()}, None
    except BoundViolation as exc:
        inst = dict(exc.instance)
        row = inst.pop("row")
        return row, {"seed": seed, "ok": False, "error": str(exc), "instance": inst}, str(exc)


def cmd_oracle_audit(exp: Experiment, jobs: int = 1) -> int:
    n = int(exp.cfg["audit"]["n_instances"])
    seeds = list(range(exp.seed, exp.seed + n))
    results = _run_jobs(_Bound(_audit_one, exp), seeds, jobs)
    d = exp.out / "audit"
    write_csv(d / "audit.csv", oracle.AUDIT_COLUMNS, [r for r, _, _ in results])
    with open(d / "reports.jsonl", "w", encoding="utf-8") as fh:
        for _, rec, _ in results:
            fh.write(json.dumps(rec, default=_json_default) + "\n")
    bad = [(rec, err) for _, rec, err in results if err]
    for rec, err in bad:
        log.error("audit violation at seed %d: %s\n%s", rec["seed"], err,
                  json.dumps(rec["instance"], default=_json_default))
    log.info("audited %d instances, %d violations", n, len(bad))
    return EXIT_AUDIT if bad else EXIT_OK


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# -- report -------------------------------------------------------------------

def _report_row(source, metric, value, **kw) -> dict:
    row = dict.fromkeys(REPORT_COLUMNS, "")
    row.update(kw, source=source, metric=metric, value=value)
    return row


def build_report(run_dir: Path) -> list[dict]:
    """Long-format rows from every CSV a run directory holds, in a fixed order."""
    rows = []
    tau_path = run_dir / "distill" / "tau_table.csv"
    if tau_path.exists():
        for r in read_csv(tau_path):
            for m in ("tau", "alpha"):
                rows.append(_report_row("tau_table", m, r[m], method=r["method"], gamma=r["gamma"],
                                        temperature=r["temperature"]))
    summary_path = run_dir / "distill" / "summary.csv"
    if summary_path.exists():
        for r in read_csv(summary_path):
            for m in SUMMARY_COLUMNS[6:]:
                rows.append(_report_row("distill_summary", m, r[m], method=r["method"]))
    for hist in sorted((run_dir / "distill").glob("*/history.csv")):
        for r in read_csv(hist):
            for m in ("loss", "alpha", "tau"):
                rows.append(_report_row("history", m, r[m], method=hist.parent.name, step=r["step"]))
    sweep_path = run_dir / "sweep" / "tradeoff.csv"
    if sweep_path.exists():
        for r in read_csv(sweep_path):
            for m in ("quality_tvd", "quality_loglik", "relative_latency", "tau", "alpha"):
                rows.append(_report_row("sweep", m, r[m], gamma=r["gamma"], lenience=r["lenience"],
                                        eps=r["eps"], c=r["c"]))
    audit_path = run_dir / "audit" / "audit.csv"
    if audit_path.exists():
        audit = read_csv(audit_path)
        slack = [float(r["bound_slack"]) for r in audit]
        resid = [float(r["max_lemma_residual"]) for r in audit]
        rows.append(_report_row("audit", "n_instances", str(len(audit))))
        rows.append(_report_row("audit", "min_bound_slack", repr(min(slack))))
        rows.append(_report_row("audit", "max_lemma_residual", repr(max(resid))))
    return rows


def cmd_report(exp: Experiment) -> int:
    if not exp.out.is_dir():
        raise NothingToReport(f"{exp.out} does not exist")
    rows = build_report(exp.out)
    if not rows:
        raise NothingToReport(f"no result CSVs under {exp.out}")
    write_csv(exp.out / "report.csv", REPORT_COLUMNS, rows)
    taus = [r for r in rows if r["source"] == "tau_table" and r["metric"] == "tau"]
    if taus:
        print(_tau_text(taus))
    log.info("%d report rows written to %s", len(rows), exp.out / "report.csv")
    return EXIT_OK


def _tau_text(rows) -> str:
    methods = list(dict.fromkeys(r["method"] for r in rows))
    keys = list(dict.fromkeys((r["temperature"], r["gamma"]) for r in rows))
    val = {(r["method"], r["temperature"], r["gamma"]): float(r["value"]) for r in rows}
    head = f"{'T':>5} {'gamma':>5} " + " ".join(f"{m:>12}" for m in methods)
    lines = [head]
    for temp, g in keys:
        lines.append(f"{float(temp):>5.2f} {g:>5} " + " ".join(f"{val[(m, temp, g)]:>12.4f}" for m in methods))
    return "\n".join(lines)


# -- entry point --------------------------------------------------------------

COMMANDS = {
    "gen-task": lambda exp, jobs: cmd_gen_task(exp),
    "distill": cmd_distill,
    "sweep": cmd_sweep,
    "oracle-audit": cmd_oracle_audit,
    "report": lambda exp, jobs: cmd_report(exp),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speclab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment file")
        p.add_argument("--out", help="run directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="overrides config 'seed'")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        exp = load_config(args.config, args.out, args.seed)
        return COMMANDS[args.command](exp, max(1, args.jobs))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BoundViolation as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (MissingTask, NothingToReport, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SpeclabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
