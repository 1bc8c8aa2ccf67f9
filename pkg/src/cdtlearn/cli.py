"""Command-line entry point: ``cdtlearn {synth,train,eval,lodo}``.

Configuration is one JSON file with optional sections ``synth``, ``model``,
``train``, ``loss`` and ``eval`` plus a top-level ``seed``. Flags override
file values and the merged result is echoed next to every artifact.

Exit codes: 0 success, 2 usage/config/data error, 3 non-finite loss.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

from .data import SynthConfig, generate, load, store
from .errors import CDTError, NumericalError
from .evaluation import DEFAULT_FARS, evaluate_domain, write_report, write_roc_csv
from .losses import LossConfig
from .model import ModelConfig, read_checkpoint, write_checkpoint
from .trainer import TrainConfig, train

log = logging.getLogger("cdtlearn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
}
EVAL_KEYS = {"far_levels", "sweep_lambda"}
# model fields that are dictated by the data, not by the user
DERIVED_MODEL_KEYS = {"input_dim", "num_classes"}


class ConfigError(CDTError, ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    synth: dict = dataclasses.field(default_factory=dict)
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    loss: dict = dataclasses.field(default_factory=dict)
    eval: dict = dataclasses.field(default_factory=dict)

    def synth_config(self):
        kw = dict(self.synth)
        if "domain_scale_range" in kw:
            kw["domain_scale_range"] = tuple(kw["domain_scale_range"])
        return SynthConfig(**{**kw, "seed": self.seed})

    def train_config(self, **override):
        return TrainConfig(**{**self.train, "seed": self.seed, **override})

    def loss_config(self):
        return LossConfig(**self.loss)

    def model_config(self, input_dim, num_classes):
        return ModelConfig(**{**self.model, "input_dim": input_dim, "num_classes": num_classes})

    @property
    def far_levels(self):
        return tuple(float(f) for f in self.eval.get("far_levels", DEFAULT_FARS))

    @property
    def sweep_lambda(self):
        grid = self.eval.get("sweep_lambda")
        return None if grid is None else [float(x) for x in grid]

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        """Build every sub-config once so bad values fail before any work starts."""
        try:
            self.synth_config()
            self.train_config()
            self.loss_config()
            self.model_config(1, 1)
        except TypeError as exc:
            # wrongly typed JSON values surface as comparison errors
            raise ConfigError(f"bad config value: {exc}") from exc
        for far in self.far_levels:
            if not 0.0 < far <= 1.0:
                raise ConfigError(f"FAR level {far} outside (0, 1]")
        for lam in self.sweep_lambda or ():
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"sweep value {lam} outside [0, 1]")
        return self


def _check_keys(section, values, allowed):
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {', '.join(unknown)}")


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("top-level", raw, {"seed", *SECTIONS, "eval"})
    cfg = RunConfig(seed=int(raw.get("seed", 0)))
    for name, cls in SECTIONS.items():
        values = raw.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)} - {"seed"}
        if name == "model":
            allowed -= DERIVED_MODEL_KEYS
        _check_keys(name, values, allowed)
        setattr(cfg, name, dict(values))
    ev = raw.get("eval", {})
    if not isinstance(ev, dict):
        raise ConfigError("section 'eval' must be an object")
    _check_keys("eval", ev, EVAL_KEYS)
    cfg.eval = dict(ev)
    return cfg


def read_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# flag name -> (section, key); the value is taken verbatim from argparse
FLAG_TARGETS = {
    "steps": ("train", "steps"),
    "lam": ("train", "lam"),
    "alpha": ("train", "alpha"),
    "beta": ("train", "beta"),
    "batch": ("train", "batch_size"),
    "tau": ("loss", "tau"),
    "rho": ("loss", "rho"),
    "margin_m": ("loss", "m"),
    "scale_s": ("loss", "s"),
    "lmcl_form": ("loss", "lmcl_form"),
    "far_levels": ("eval", "far_levels"),
    "sweep_lambda": ("eval", "sweep_lambda"),
}
SWITCHES = {
    "second_order": ("train", "second_order", True),
    "cov_grad": ("train", "cov_grad", True),
    "no_cls": ("train", "use_cls", False),
    "no_trp": ("train", "use_trp", False),
    "no_cdt": ("train", "use_cdt", False),
}


def merge_flags(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, (section, key) in FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is not None:
            getattr(cfg, section)[key] = value
    for flag, (section, key, value) in SWITCHES.items():
        if getattr(args, flag, False):
            getattr(cfg, section)[key] = value
    return cfg


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _split_domains(domains, held_out):
    ids = [ds.domain_id for ds in domains]
    if held_out is None:
        return domains, None
    if held_out not in ids:
        raise ConfigError(f"held-out domain {held_out} not in data (domains {ids})")
    return [ds for ds in domains if ds.domain_id != held_out], next(
        ds for ds in domains if ds.domain_id == held_out
    )


def fit(cfg, domains, **train_override):
    """Train on ``domains`` under ``cfg``; returns ``(params, traces, classes)``."""
    tcfg = cfg.train_config(**train_override)
    n_classes = len({int(c) for ds in domains for c in ds.identities})
    mcfg = cfg.model_config(domains[0].input_dim, n_classes)
    return train(domains, tcfg, model_cfg=mcfg, loss_cfg=cfg.loss_config())


# commands ----------------------------------------------------------------------------

def cmd_synth(cfg, out_path):
    domains = generate(cfg.synth_config())
    store(out_path, domains)
    write_json(out_path + ".config.json", cfg.to_dict())
    n = sum(len(ds) for ds in domains)
    ids = sum(len(ds.identities) for ds in domains)
    print(f"wrote {out_path}: {len(domains)} domains, {ids} identities, {n} samples")
    return domains


def cmd_train(cfg, data_path, out_dir, held_out=None):
    domains, _ = _split_domains(load(data_path), held_out)
    _ensure_dir(out_dir)
    write_json(os.path.join(out_dir, "config.json"), {**cfg.to_dict(), "held_out": held_out})
    params, traces, classes = fit(cfg, domains)
    ckpt = os.path.join(out_dir, "checkpoint.json")
    write_checkpoint(ckpt, params, class_labels=classes.labels)
    with open(os.path.join(out_dir, "trace.jsonl"), "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(tr.to_json() + "\n")
    print(f"trained {cfg.train_config().steps} steps on domains "
          f"{[ds.domain_id for ds in domains]}; checkpoint {ckpt}")
    return params, traces


def cmd_eval(cfg, checkpoint_path, data_path, held_out, report_path, roc_path=None):
    params, _, _ = read_checkpoint(checkpoint_path)
    domains = load(data_path)
    if held_out is None:
        if len(domains) != 1:
            raise ConfigError("--held-out is required when the data has several domains")
        target = domains[0]
    else:
        _, target = _split_domains(domains, held_out)
    if target.input_dim != params.config.input_dim:
        raise ConfigError(
            f"checkpoint expects input_dim {params.config.input_dim}, data has {target.input_dim}"
        )
    report, curve = evaluate_domain(params, target, far_levels=cfg.far_levels, seed=cfg.seed)
    write_report(report_path, report)
    if roc_path:
        write_roc_csv(roc_path, curve)
    print(report.table())
    return report


def summary_rows(results):
    rows = []
    for lam, report in results:
        rows.append({
            "lambda": f"{lam:g}",
            "held_out": report.held_out_domain,
            **{f"tar@{far:g}": tar for far, tar in sorted(report.tar_at_far.items())},
            "auc": report.auc,
            "rank1": report.rank1,
            "verification": report.verification_accuracy,
            "identification": report.identification_accuracy,
        })
    return rows


def format_table(rows):
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines)


def cmd_lodo(cfg, data_path, out_dir):
    domains = load(data_path)
    if len(domains) < 3:
        raise ConfigError(f"lodo needs at least 3 domains, got {len(domains)}")
    _ensure_dir(out_dir)
    write_json(os.path.join(out_dir, "config.json"), cfg.to_dict())
    grid = cfg.sweep_lambda or [cfg.train_config().lam]
    results = []
    for lam in grid:
        for ds in domains:
            train_domains, target = _split_domains(domains, ds.domain_id)
            params, _, _ = fit(cfg, train_domains, lam=lam)
            report, curve = evaluate_domain(params, target, far_levels=cfg.far_levels, seed=cfg.seed)
            report.extra["lambda"] = lam
            stem = os.path.join(out_dir, f"report_lam{lam:g}_domain{ds.domain_id}")
            write_report(stem + ".json", report)
            write_roc_csv(stem + ".roc.csv", curve)
            results.append((lam, report))
            log.info("lambda %g held-out %d done", lam, ds.domain_id)
    rows = summary_rows(results)
    write_json(os.path.join(out_dir, "summary.json"), rows)
    print(format_table(rows))
    return results


# argument parsing -------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)


def _add_training(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="meta-train/meta-test mixing weight")
    p.add_argument("--alpha", type=float, help="inner learning rate")
    p.add_argument("--beta", type=float, help="outer learning rate")
    p.add_argument("--batch", type=int, help="triplets per domain batch")
    p.add_argument("--tau", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--margin-m", dest="margin_m", type=float)
    p.add_argument("--scale-s", dest="scale_s", type=float)
    p.add_argument("--lmcl-form", dest="lmcl_form", choices=["paper", "cosface"])
    p.add_argument("--second-order", action="store_true")
    p.add_argument("--cov-grad", action="store_true", help="let gradients flow through the covariances")
    p.add_argument("--no-cls", action="store_true")
    p.add_argument("--no-trp", action="store_true")
    p.add_argument("--no-cdt", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="cdtlearn", description="Cross-domain triplet metric learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset path (.bin for the binary format)")

    p = sub.add_parser("train", help="meta-train on a dataset")
    _add_common(p)
    _add_training(p)
    p.add_argument("data")
    p.add_argument("--held-out", dest="held_out", type=int, help="domain id to exclude from training")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--held-out", dest="held_out", type=int)
    p.add_argument("--far-levels", dest="far_levels", type=_floats)
    p.add_argument("--roc", help="also write the ROC curve as CSV")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("lodo", help="leave-one-domain-out over every domain")
    _add_common(p)
    _add_training(p)
    p.add_argument("data")
    p.add_argument("--far-levels", dest="far_levels", type=_floats)
    p.add_argument("--sweep-lambda", dest="sweep_lambda", type=_floats)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def run(args):
    cfg = merge_flags(read_config(args.config), args).validate()
    if args.command == "synth":
        cmd_synth(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, args.data, args.out, held_out=args.held_out)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.data, args.held_out, args.out, roc_path=args.roc)
    else:
        cmd_lodo(cfg, args.data, args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except NumericalError as exc:
        print(f"cdtlearn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CDTError, OSError) as exc:
        print(f"cdtlearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
