"""Command-line pipeline: gen, train, audit, influence, unlearn, report.

Every command reads one INI config (sections ``run``, ``data``, ``encodings``,
``train``, ``audit``, ``influence``, ``unlearn``, ``solve``), applies
``--set section.key=value`` overrides and works inside ``run.workdir``.
Outputs are deterministic given the config and inputs; wall-clock times and
timestamps are kept in ``manifest.json`` only.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bias as bias_mod
from . import data as data_mod
from .dataset import CounterfactualSet, Dataset
from .exceptions import InputError, NumericalError
from .influence import influence_cf, influence_dp, influence_eo, rank, read_scores, write_scores
from .linalg import SolveConfig
from .model import FeatureMap, TrainConfig, accuracy, hessian, load_head, save_head, train_head
from .unlearn import (Evaluator, UnlearnConfig, run_fmd, unlearn_external, unlearn_replace,
                      unlearn_topk)

logger = logging.getLogger("fmdebias")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


def _opt(kind):
    def parse(raw):
        return None if raw.strip() in ("", "none", "None") else kind(raw)
    parse.__name__ = f"optional_{kind.__name__}"
    return parse


def _bool(raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _words(raw):
    return tuple(w.strip() for w in raw.split(",") if w.strip())


def _step(raw):
    raw = raw.strip()
    return raw if raw in ("auto", "1/n", "search") else float(raw)


_SYN = data_mod.SyntheticConfig()

# section -> key -> (parser, default)
SCHEMA = {
    "run": {"seed": (int, 0), "workdir": (str, "."), "preset": (str, "")},
    "data": {
        "source": (str, "synthetic"),
        "classes": (int, _SYN.classes),
        "prototypes_per_class": (int, _SYN.prototypes_per_class),
        "feature_dim": (int, _SYN.feature_dim),
        "color_count": (int, _SYN.color_count),
        "color_dim": (_opt(int), None),
        "bias_ratio": (float, _SYN.bias_ratio),
        "noise_sigma": (float, _SYN.noise_sigma),
        "color_strength": (float, _SYN.color_strength),
        "n_train": (int, _SYN.n_train),
        "n_test": (int, _SYN.n_test),
        "pairs": (int, 200),
        "csv_path": (str, ""),
        "csv_test_path": (str, ""),
        "test_fraction": (float, 0.2),
        "feature_columns": (_words, ()),
        "attribute_column": (str, ""),
        "label_column": (str, ""),
        "standardize": (_bool, False),
        "adult_attribute": (str, "sex"),
    },
    "train": {
        "l2": (float, 0.01),
        "max_iters": (int, 100),
        "grad_tol": (float, 1e-10),
        "optimizer": (str, "newton"),
        "feature_map": (str, "auto"),
        "affine_dim": (int, 32),
    },
    "audit": {
        "delta": (float, 0.0),
        "metrics": (_words, ("counterfactual",)),
        "positive": (_opt(int), None),
        "group_a": (int, 1),
        "group_b": (int, 0),
    },
    "influence": {"metric": (str, "counterfactual"), "literal": (_bool, False), "top": (int, 10)},
    "unlearn": {
        "strategy": (str, "external-pairs"),
        "k": (int, 200),
        "step_scale": (_step, "auto"),
        "hessian_scope": (str, "retained"),
        "curve_stride": (_opt(int), None),
    },
    "solve": {
        "method": (str, "direct"),
        "cg_tol": (float, 1e-8),
        "cg_max_iters": (_opt(int), None),
        "recompute_each_step": (_bool, False),
    },
}

PRESET_KEYS = {
    "toy": {"train.l2": "100", "unlearn.k": "50", "data.pairs": "50"},
    "colored": {"train.l2": "300", "unlearn.k": "5000", "data.pairs": "5000"},
}


class RunConfig(dict):
    """Parsed config: ``cfg["section"]["key"]`` with typed values."""

    @classmethod
    def load(cls, path=None, overrides=()):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise InputError(f"{path}: no such config file")
            try:
                parser.read(path)
            except configparser.Error as exc:
                raise InputError(f"{path}: {exc}") from None
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise InputError(f"override {item!r} must look like section.key=value")
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, value)
        raw = {s: dict(parser.items(s)) for s in parser.sections()}
        preset = raw.get("run", {}).get("preset", "").strip()
        if preset:
            if preset not in data_mod.PRESETS:
                raise InputError(f"unknown preset {preset!r}; expected one of {sorted(data_mod.PRESETS)}")
        return cls.from_raw(raw, preset)

    @classmethod
    def from_raw(cls, raw: dict, preset: str = ""):
        cfg = cls()
        base = {}
        if preset:
            syn = data_mod.PRESETS[preset].synthetic
            base = {f"data.{f.name}": str(getattr(syn, f.name)) for f in fields(syn)
                    if f.name != "seed" and getattr(syn, f.name) is not None}
            base.update(PRESET_KEYS.get(preset, {}))
        for section, keys in raw.items():
            if section == "encodings":
                continue
            if section not in SCHEMA:
                raise InputError(f"unknown config section [{section}]")
            for key in keys:
                if key not in SCHEMA[section]:
                    raise InputError(f"unknown config key {section}.{key}")
        for section, keys in SCHEMA.items():
            cfg[section] = {}
            for key, (parse, default) in keys.items():
                text = raw.get(section, {}).get(key, base.get(f"{section}.{key}"))
                if text is None:
                    cfg[section][key] = default
                    continue
                try:
                    cfg[section][key] = parse(text)
                except ValueError as exc:
                    raise InputError(f"bad value for {section}.{key}: {exc}") from None
        cfg["encodings"] = {}
        for column, spec in raw.get("encodings", {}).items():
            table = {}
            for item in _words(spec):
                label, sep, code = item.rpartition(":")
                if not sep:
                    raise InputError(f"encoding for {column!r} must be value:code pairs")
                table[label.strip()] = int(code)
            cfg["encodings"][column] = table
        return cfg

    @property
    def workdir(self) -> Path:
        return Path(self["run"]["workdir"])

    def synthetic(self) -> data_mod.SyntheticConfig:
        d = self["data"]
        names = [f.name for f in fields(data_mod.SyntheticConfig) if f.name != "seed"]
        return data_mod.SyntheticConfig(**{k: d[k] for k in names}, seed=self["run"]["seed"])

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(t["max_iters"], t["grad_tol"], self["run"]["seed"], t["optimizer"])

    def solve_config(self) -> SolveConfig:
        s = self["solve"]
        return SolveConfig(s["method"], s["cg_tol"], s["cg_max_iters"], s["recompute_each_step"])

    def unlearn_config(self) -> UnlearnConfig:
        u = self["unlearn"]
        return UnlearnConfig(u["strategy"], u["k"], self["audit"]["delta"], u["step_scale"],
                             self.solve_config(), u["curve_stride"], u["hessian_scope"])

    def to_dict(self):
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
                for s, keys in self.items()}


# -- workdir layout ----------------------------------------------------------------------------

DATA_FILES = ("train", "test", "pairs_factual", "pairs_counterfactual",
              "audit_factual", "audit_counterfactual")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from None


def _record_phase(cfg: RunConfig, phase: str, seconds: float, extra=None) -> None:
    path = cfg.workdir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    entry = {"seconds": seconds, "finished": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    entry.update(extra or {})
    manifest.setdefault("phases", {})[phase] = entry
    _write_json(path, manifest)


def _load_data(cfg: RunConfig):
    root = cfg.workdir / "data"
    meta = _read_json(root / "meta.json")

    def read(name):
        return data_mod.read_dataset_csv(root / f"{name}.csv", meta["n_classes"],
                                         meta["n_attribute_values"], meta["attribute_columns"])

    sets = {name: read(name) for name in DATA_FILES}
    pairs = CounterfactualSet(sets["pairs_factual"], sets["pairs_counterfactual"], meta["provenance"])
    audit = CounterfactualSet(sets["audit_factual"], sets["audit_counterfactual"], meta["provenance"])
    return meta, sets["train"], sets["test"], pairs, audit


def _feature_map(cfg: RunConfig, meta) -> FeatureMap:
    mode = cfg["train"]["feature_map"]
    if mode == "auto":
        mode = "identity-without-attribute" if meta["source"] == "synthetic" else "identity-with-attribute"
    if mode == "identity-with-attribute":
        return FeatureMap(mode, meta["n_attribute_values"])
    if mode == "fixed-affine":
        return FeatureMap.random_affine(meta["n_features"], cfg["train"]["affine_dim"], cfg["run"]["seed"])
    return FeatureMap(mode)


def _head_path(cfg: RunConfig, name="head.json") -> Path:
    return cfg.workdir / name


def _groups(cfg: RunConfig):
    a = cfg["audit"]
    return bias_mod.GroupSpec(a["group_a"]), bias_mod.GroupSpec(a["group_b"])


# -- commands ----------------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> dict:
    start = time.perf_counter()
    workdir = cfg.workdir
    if not workdir.is_dir():
        raise InputError(f"output directory {workdir} does not exist")
    root = workdir / "data"
    root.mkdir(exist_ok=True)
    seed = cfg["run"]["seed"]
    d = cfg["data"]
    aligned_fraction = None
    if d["source"] == "synthetic":
        syn = cfg.synthetic()
        train, test, tags = data_mod.gen_synthetic(syn)
        pairs = data_mod.external_pairs(syn, d["pairs"], seed)
        audit = data_mod.make_pairs_recolor(test, syn, seed)
        aligned_fraction = float(np.mean(tags))
    elif d["source"] in ("csv", "adult"):
        train, test = _load_tabular(cfg)
        rng = np.random.default_rng([seed, 21])
        pick = np.sort(rng.permutation(len(test))[: d["pairs"]])
        pairs = data_mod.make_pairs_flip(test.subset(pick))
        audit = data_mod.make_pairs_flip(test)
    else:
        raise InputError(f"unknown data source {d['source']!r}; expected synthetic, csv or adult")
    written = {
        "train": train, "test": test,
        "pairs_factual": pairs.factual, "pairs_counterfactual": pairs.counterfactual,
        "audit_factual": audit.factual, "audit_counterfactual": audit.counterfactual,
    }
    checksums = {f"data/{k}.csv": data_mod.write_dataset_csv(v, root / f"{k}.csv") for k, v in written.items()}
    meta = {
        "source": d["source"], "n_classes": train.n_classes,
        "n_attribute_values": train.n_attribute_values,
        "attribute_columns": list(train.attribute_columns), "n_features": train.n_features,
        "provenance": pairs.provenance, "seed": seed,
    }
    _write_json(root / "meta.json", meta)
    checksums["data/meta.json"] = _sha(root / "meta.json")
    manifest = {
        "seed": seed,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "checksums": checksums,
        "aligned_fraction": aligned_fraction,
        "counts": {k: len(v) for k, v in written.items()},
        "config": cfg.to_dict(),
        "phases": {"gen": {"seconds": time.perf_counter() - start}},
    }
    _write_json(workdir / "manifest.json", manifest)
    print(f"wrote {len(train)} training and {len(test)} test records to {root}")
    if aligned_fraction is not None:
        print(f"aligned fraction: {aligned_fraction:.4f}")
    return manifest


def _load_tabular(cfg: RunConfig):
    d = cfg["data"]
    if not d["csv_path"]:
        raise InputError("data.csv_path is required for tabular sources")
    if d["source"] == "adult":
        train, test = data_mod.load_adult(d["csv_path"], d["csv_test_path"] or None, d["adult_attribute"])
    else:
        if not (d["feature_columns"] and d["attribute_column"] and d["label_column"]):
            raise InputError("csv source needs data.feature_columns, attribute_column and label_column")
        schema = data_mod.TabularSchema(d["feature_columns"], d["attribute_column"], d["label_column"],
                                        cfg["encodings"], standardize=d["standardize"])
        report = data_mod.LoadReport()
        train = data_mod.load_csv(d["csv_path"], schema, report)
        print(f"loaded {report.rows_kept} rows, dropped {report.rows_dropped_missing} with missing values")
        test = data_mod.load_csv(d["csv_test_path"], schema) if d["csv_test_path"] else None
    if test is None:
        rng = np.random.default_rng([cfg["run"]["seed"], 20])
        order = rng.permutation(len(train))
        n_test = int(round(d["test_fraction"] * len(train)))
        if not 0 < n_test < len(train):
            raise InputError("test_fraction leaves an empty split")
        test, train = train.subset(np.sort(order[:n_test])), train.subset(np.sort(order[n_test:]))
    return train, test


def cmd_train(cfg: RunConfig):
    start = time.perf_counter()
    meta, train, test, _, _ = _load_data(cfg)
    head = train_head(train, cfg.train_config(), l2=cfg["train"]["l2"], feature_map=_feature_map(cfg, meta))
    path = _head_path(cfg)
    save_head(head, path)
    acc_tr, acc_te = accuracy(head, train), accuracy(head, test)
    print(f"converged: {str(head.converged).lower()}")
    print(f"iterations: {head.iterations}")
    print(f"gradient norm: {head.grad_norm:.3e}")
    print(f"train accuracy: {acc_tr:.4f}")
    print(f"test accuracy: {acc_te:.4f}")
    _record_phase(cfg, "train", time.perf_counter() - start, {"checkpoint": _sha(path)})
    return head


def cmd_audit(cfg: RunConfig):
    start = time.perf_counter()
    _, _, test, _, audit = _load_data(cfg)
    head = load_head(_head_path(cfg))
    a = cfg["audit"]
    reports = []
    for metric in a["metrics"]:
        if metric == "counterfactual":
            reports.append(bias_mod.identify(head, audit, a["delta"]))
        elif metric == "demographic-parity":
            reports.append(bias_mod.dp_bias(head, test, _groups(cfg), a["positive"], a["delta"]))
        elif metric == "equal-opportunity":
            reports.append(bias_mod.eo_bias(head, test, _groups(cfg), a["positive"], a["delta"]))
        else:
            raise InputError(f"unknown metric {metric!r}; expected one of {bias_mod.METRICS}")
    (cfg.workdir / "audit.txt").write_text("\n".join(r.to_text() for r in reports))
    _write_json(cfg.workdir / "audit.json", [r.to_dict() for r in reports])
    for r in reports:
        print(f"{r.metric}: {r.value:.6f} ({'biased' if r.verdict else 'unbiased'} at delta={r.threshold})")
    _record_phase(cfg, "audit", time.perf_counter() - start)
    return reports


def _operator(cfg: RunConfig, head, train):
    mode = "dense-factorized" if cfg["solve"]["method"] == "direct" else "matrix-free"
    return hessian(head, train, mode)


def cmd_influence(cfg: RunConfig):
    start = time.perf_counter()
    _, train, test, pairs, _ = _load_data(cfg)
    head = load_head(_head_path(cfg))
    op = _operator(cfg, head, train)
    solve = cfg.solve_config()
    inf = cfg["influence"]
    metric = inf["metric"]
    if metric == "counterfactual":
        scores = influence_cf(head, op, pairs, train, solve, literal=inf["literal"])
    elif metric == "demographic-parity":
        scores = influence_dp(head, op, test, _groups(cfg), train, solve, cfg["audit"]["positive"])
    elif metric == "equal-opportunity":
        scores = influence_eo(head, op, test, _groups(cfg), train, solve, cfg["audit"]["positive"])
    else:
        raise InputError(f"unknown metric {metric!r}; expected one of {bias_mod.METRICS}")
    write_scores(scores, cfg.workdir / "scores.csv")
    top = min(inf["top"], len(scores))
    harmful, helpful = rank(scores, top)
    print(f"metric: {metric}")
    print(f"harmful: {sum(s.classification == 'harmful' for s in scores)}  "
          f"helpful: {sum(s.classification == 'helpful' for s in scores)}")
    print("rank,harmful_index,harmful_value,helpful_index,helpful_value")
    for i in range(max(len(harmful), len(helpful))):
        h = harmful[i] if i < len(harmful) else None
        g = helpful[i] if i < len(helpful) else None
        print(f"{i + 1},{'' if h is None else h.sample_index},{'' if h is None else f'{h.value:.6e}'},"
              f"{'' if g is None else g.sample_index},{'' if g is None else f'{g.value:.6e}'}")
    _record_phase(cfg, "influence", time.perf_counter() - start)
    return scores


def cmd_unlearn(cfg: RunConfig):
    start = time.perf_counter()
    meta, train, test, pairs, audit = _load_data(cfg)
    head = load_head(_head_path(cfg))
    config = cfg.unlearn_config()
    evaluator = Evaluator(audit=audit, test=test, delta=config.delta)
    strategy = config.strategy
    op = _operator(cfg, head, train)
    if strategy == "external-pairs":
        outcome = run_fmd(head, pairs, config.delta, config, op=op, train=train, evaluator=evaluator)
    else:
        scores_path = cfg.workdir / "scores.csv"
        if not scores_path.exists():
            raise InputError(f"{strategy} needs influence scores; run the influence command first "
                             f"({scores_path} is missing)")
        scores = read_scores(scores_path)
        if strategy == "topk-removal":
            outcome = unlearn_topk(head, op, train, scores, config, evaluator)
        else:
            outcome = unlearn_replace(head, op, train, scores, _twins(cfg, meta, train), config, evaluator)
    tag = strategy
    summary = outcome.summary()
    timing = summary.pop("seconds")
    summary["notes"] = {k: v for k, v in summary["notes"].items() if not k.endswith("_indices")}
    summary["notes"].pop("twin_attributes", None)
    _write_json(cfg.workdir / f"outcome-{tag}.json", summary)
    outcome.write_curve(cfg.workdir / f"curve-{tag}.csv")
    save_head(outcome.head_after, cfg.workdir / f"head-{tag}.json")
    b0 = summary["bias_before"]
    b1 = summary["bias_after"]
    print(f"strategy: {strategy}")
    print(f"samples used: {outcome.samples_used}")
    print(f"bias: {b0:.6f} -> {b1:.6f}")
    print(f"accuracy: {summary['accuracy_before']:.4f} -> {summary['accuracy_after']:.4f}")
    _record_phase(cfg, f"unlearn-{tag}", time.perf_counter() - start, {"update_seconds": timing})
    return outcome


def _twins(cfg: RunConfig, meta, train: Dataset):
    if meta["source"] == "synthetic":
        return data_mod.conflicting_twins(train, cfg.synthetic(), cfg["run"]["seed"])
    return data_mod.make_pairs_flip(train).counterfactual


REPORT_COLUMNS = ("run", "strategy", "acc_before", "acc_after", "bias_before", "bias_after",
                  "time_s", "samples")


def _fmt(v, spec):
    return "" if v is None else format(v, spec)


def cmd_report(paths, out=None):
    if not paths:
        raise InputError("report needs at least one outcome file")
    rows = []
    for p in map(Path, paths):
        summary = _read_json(p)
        if "strategy" not in summary:
            raise InputError(f"{p}: not an unlearning outcome")
        seconds = summary.get("seconds")
        manifest = p.parent / "manifest.json"
        if seconds is None and manifest.exists():
            phase = json.loads(manifest.read_text()).get("phases", {}).get(p.stem.replace("outcome-", "unlearn-"), {})
            seconds = phase.get("seconds")
        acc0, acc1 = summary.get("accuracy_before"), summary.get("accuracy_after")
        rows.append([
            str(p), summary["strategy"],
            _fmt(None if acc0 is None else 100 * acc0, ".2f"), _fmt(None if acc1 is None else 100 * acc1, ".2f"),
            _fmt(summary.get("bias_before"), ".4f"), _fmt(summary.get("bias_after"), ".4f"),
            _fmt(seconds, ".2f"), str(summary.get("samples_used", "")),
        ])
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(REPORT_COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    print("\n".join(lines))
    if out:
        with Path(out).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            w.writerows(rows)
    return rows


# -- entry point -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmdebias", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("gen", "generate or ingest data and pairs"), ("train", "fit the head"),
                        ("audit", "measure bias"), ("influence", "score training samples"),
                        ("unlearn", "apply a Newton-step debiasing update")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
    p = sub.add_parser("report", help="merge outcome files into one table")
    p.add_argument("paths", nargs="+")
    p.add_argument("-o", "--out", help="also write the table as CSV")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "audit": cmd_audit,
            "influence": cmd_influence, "unlearn": cmd_unlearn}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.paths, args.out)
        else:
            COMMANDS[args.command](RunConfig.load(args.config, args.set))
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
