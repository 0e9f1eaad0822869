"""Command-line entry points.

Every subcommand that writes results fills a fresh run directory:
config.json, record.jsonl, summary.json, checkpoint.bin, samples.csv,
metrics.csv.  Output goes to a temporary sibling first and is renamed into
place only on success.  Files carry no timestamps or timings, so a rerun
with the same config and seed reproduces them byte for byte.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (NaN abort or a failed verification).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataFormatError, generate_toy, load_digits, toy_log_evidence, train_test_split
from .distributions import rng_stream
from .estimators import Kind, NumericalError
from .experiments import (
    TOY_LOSSES,
    DigitProfile,
    ToyProfile,
    digit_splits,
    run_classify,
    run_toy,
    run_vae,
    toy_true_evidence,
)
from .metrics import classification_report, evaluate_evidence, predict_proba
from .models import ConfigError, ModelSpec, build_model, read_checkpoint, save_checkpoint
from .oracles import run_all

log = logging.getLogger("mixvi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# output helpers


def _dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Kind):
        return obj.value
    return obj


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c)) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


class RunDir:
    """Collects output files in a temp directory, renamed into place on success."""

    def __init__(self, out: Path):
        self.out = out
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.exists() and not (out / "config.json").exists():
            raise UsageError(f"{out} exists and is not a run directory")
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))

    def write(self, name: str, text: str) -> None:
        (self.tmp / name).write_text(text)

    def path(self, name: str) -> Path:
        return self.tmp / name

    def commit(self) -> None:
        if self.out.exists():
            shutil.rmtree(self.out)
        self.tmp.rename(self.out)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _save_models(models: dict, path: Path) -> None:
    """All models of a run in one container, tensor names prefixed by run name."""

    class _Bundle:
        def named_parameters(self):
            for prefix, m in models.items():
                for n, p in m.named_parameters():
                    yield f"{prefix}/{n}", p

    save_checkpoint(_Bundle(), path)


def _record_lines(cells: dict) -> str:
    lines = []
    for name, entries in cells.items():
        for e in entries:
            lines.append(json.dumps(_plain({"run": name, **e}), sort_keys=True))
    return "\n".join(lines) + "\n"


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise UsageError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _profile(cls, args, overrides: dict):
    cfg = _load_config(args.config)
    unknown = set(cfg) - {"profile", "settings"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    p = cls.named(cfg.get("profile", args.profile))
    p = cls.from_dict(cfg.get("settings", {}), base=p)
    for k, v in overrides.items():
        if v is not None:
            setattr(p, k, v)
    return p


def _csv_list(text: str, conv=str) -> list:
    try:
        return [conv(t) for t in text.split(",") if t]
    except ValueError as err:
        raise UsageError(f"bad list {text!r}") from err


# ---------------------------------------------------------------------------
# subcommands


def cmd_toy(args, rd: RunDir) -> int:
    p = _profile(
        ToyProfile,
        args,
        {"noise_var": args.noise_var, "eval_samples": args.eval_samples, "epochs": args.epochs, "T_mode": args.T_mode},
    )
    losses = _csv_list(args.losses)
    if args.stl:
        losses += [f"{l}_stl" for l in losses if l in ("siwae", "selbo")]
    bad = [l for l in losses if l not in TOY_LOSSES]
    if bad:
        raise UsageError(f"unknown toy losses {bad}; choose from {list(TOY_LOSSES)}")
    runs = {}
    for loss in losses:
        log.info("toy seed %d: training %s", args.seed, loss)
        runs[loss] = run_toy(loss, args.seed, p, log=lambda e, l=loss: log.debug("%s %s", l, e))
    truth = toy_true_evidence(args.seed, p)
    rd.write(
        "config.json",
        _dumps(
            {
                "command": "toy-experiment",
                "seed": args.seed,
                "profile": p.to_dict(),
                "model_spec": runs[losses[0]].model.spec.to_dict(),
                "train": {l: r.train_config for l, r in runs.items()},
            }
        ),
    )
    rd.write("record.jsonl", _record_lines({l: r.record for l, r in runs.items()}))
    summary = {
        "seed": args.seed,
        "true_log_evidence": truth,
        "eval_draws_per_point": (p.eval_samples // p.K) * p.K,
        "runs": {
            l: {
                "evidence": r.evidence,
                "grad_variance": r.grad_variance,
                "mode_coverage": r.coverage,
                "quadrant_mass": r.quadrant_mass,
                "alpha_min": r.record[-1]["alpha_min"] if r.record else None,
                "alpha_max": r.record[-1]["alpha_max"] if r.record else None,
            }
            for l, r in runs.items()
        },
    }
    rd.write("summary.json", _dumps(summary))
    _save_models({l: r.model for l, r in runs.items()}, rd.path("checkpoint.bin"))
    rows = [{"run": l, "z1": z[0], "z2": z[1]} for l, r in runs.items() for z in r.samples]
    rd.write("samples.csv", _csv(rows, ["run", "z1", "z2"]))
    rows = [{"run": l, "name": k, "value": v} for l, s in summary["runs"].items() for k, v in s.items() if k != "quadrant_mass"]
    rows += [{"run": l, "name": f"quadrant_{i}", "value": m} for l, r in runs.items() for i, m in enumerate(r.quadrant_mass)]
    rows += [
        {"run": l, "name": "evidence_curve", "epoch": e["epoch"], "value": e["evidence"]}
        for l, r in runs.items()
        for e in r.record
        if e["evidence"] is not None
    ]
    rd.write("metrics.csv", _csv(rows, ["run", "name", "epoch", "value"]))
    for l, s in summary["runs"].items():
        print(f"{l:10s} evidence {s['evidence']:.4f}  grad-var {s['grad_variance']:.4g}  modes {s['mode_coverage']}")
    print(f"{'truth':10s} evidence {truth:.4f}")
    return EXIT_OK


def _digit_data(args, p: DigitProfile, binarize: bool):
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise UsageError("--images and --labels go together")
        ds = load_digits(args.images, args.labels, "center_column", binarize)
        tr, te = train_test_split(ds, p.n_test, seed=0)
        return tr.subset(np.arange(min(p.n_train, len(tr)))), te, "idx"
    return digit_splits(p, 0, binarize=binarize)


def _sweep(args):
    return (
        _csv_list(args.loss),
        _csv_list(args.K, int),
        _csv_list(args.T, int),
        _csv_list(args.seeds, int) if args.seeds else [args.seed],
    )


def cmd_classify(args, rd: RunDir) -> int:
    p = _profile(DigitProfile, args, {"epochs": args.epochs, "source": args.data})
    losses, Ks, Ts, seeds = _sweep(args)
    for l in losses:
        if l not in {k.value for k in Kind} - {"score"}:
            raise UsageError(f"unknown loss {l!r}")
    data = _digit_data(args, p, binarize=False)
    cells, reports, models, samples = {}, [], {}, []
    for seed in seeds:
        for loss in losses:
            for K in Ks:
                for T in Ts:
                    name = f"{loss}_K{K}_T{T}{'_stl' if args.stl else ''}_s{seed}"
                    log.info("classify %s", name)
                    out = run_classify(loss, K, T, seed, p, data=data, stl=args.stl)
                    cells[name] = out["record"]
                    reports.append({"run": name, **out["report"]})
                    models[name] = out["model"]
                    q = out["model"].encode(data[1].inputs[:5])
                    z = q.components.mean.value
                    for i in range(z.shape[0]):
                        for k in range(z.shape[1]):
                            samples.append({"run": name, "example": i, "component": k, "weight": q.weights()[i, k], "z1": z[i, k, 0], "z2": z[i, k, 1] if z.shape[2] > 1 else None})
    rd.write("config.json", _dumps({"command": "classify", "profile": p.to_dict(), "losses": losses, "K": Ks, "T": Ts, "seeds": seeds, "stl": args.stl}))
    rd.write("record.jsonl", _record_lines(cells))
    rd.write("summary.json", _dumps({"reports": reports, "data_source": data[2], "n_train": len(data[0]), "n_test": len(data[1])}))
    _save_models(models, rd.path("checkpoint.bin"))
    rd.write("samples.csv", _csv(samples, ["run", "example", "component", "weight", "z1", "z2"]))
    cols = ["run", "loss", "K", "T", "stl", "seed", "accuracy", "ece", "n", "data_source"]
    rd.write("metrics.csv", _csv(reports, cols))
    for r in reports:
        print(f"{r['run']:28s} accuracy {r['accuracy']:.4f}  ece {r['ece']:.4f}")
    return EXIT_OK


def cmd_vae(args, rd: RunDir) -> int:
    p = _profile(DigitProfile, args, {"epochs": args.epochs, "source": args.data, "burn_in_epochs": args.burn_in})
    losses, Ks, Ts, seeds = _sweep(args)
    for l in losses:
        if l not in ("siwae", "selbo", "iwae", "elbo", "miwae", "ciwae"):
            raise UsageError(f"unknown loss {l!r}")
    data = _digit_data(args, p, binarize=True)
    cells, reports, models = {}, [], {}
    for seed in seeds:
        for loss in losses:
            for K in Ks:
                for T in Ts:
                    name = f"{loss}_K{K}_T{T}_s{seed}"
                    log.info("vae %s", name)
                    out = run_vae(loss, K, T, seed, p, data=data, eval_total=args.eval_total)
                    cells[name] = out["record"]
                    reports.append({"run": name, **out["report"]})
                    models[name] = out["model"]
    rd.write("config.json", _dumps({"command": "vae", "profile": p.to_dict(), "losses": losses, "K": Ks, "T": Ts, "seeds": seeds, "eval_total": args.eval_total}))
    rd.write("record.jsonl", _record_lines(cells))
    rd.write("summary.json", _dumps({"reports": reports, "data_source": data[2]}))
    _save_models(models, rd.path("checkpoint.bin"))
    rows = []
    for name, m in models.items():
        z = m.prior.sample((20,), rng_stream(0, 5))
        for i, zi in enumerate(z):
            rows.append({"run": name, "draw": i, "z1": zi[0], "z2": zi[1]})
    rd.write("samples.csv", _csv(rows, ["run", "draw", "z1", "z2"]))
    rd.write("metrics.csv", _csv(reports, ["run", "loss", "K", "T", "seed", "evidence", "eval_draws", "data_source"]))
    for r in reports:
        print(f"{r['run']:24s} evidence {r['evidence']:.3f}")
    return EXIT_OK


def cmd_verify(args, rd: RunDir | None) -> int:
    results = run_all(args.seed)
    ok = True
    for name, passed, detail in results:
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'}  {name}  [{detail}]")
    if rd is not None:
        rows = [{"check": n, "passed": bool(p), "detail": d} for n, p, d in results]
        rd.write("config.json", _dumps({"command": "verify", "seed": args.seed}))
        rd.write("record.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        rd.write("summary.json", _dumps({"all_passed": ok, "n_checks": len(rows)}))
        rd.write("metrics.csv", _csv(rows, ["check", "passed", "detail"]))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_eval(args, rd: RunDir | None) -> int:
    run = Path(args.run)
    try:
        cfg = json.loads((run / "config.json").read_text())
        tensors = read_checkpoint(run / "checkpoint.bin")
    except FileNotFoundError as err:
        raise UsageError(f"not a run directory: {run}") from err
    names = sorted({k.split("/", 1)[0] for k in tensors})
    if args.model not in names:
        raise UsageError(f"model {args.model!r} not in checkpoint; available: {names}")
    prefix = args.model + "/"
    state = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    command = cfg["command"]
    if command == "toy-experiment":
        p = ToyProfile.from_dict(cfg["profile"])
        model = build_model(ModelSpec.from_dict(cfg["model_spec"]), 0)
        model.load_state_dict(state)
        data = generate_toy(p.n_points, p.noise_var, cfg["seed"])
        T = max(1, (args.eval_samples or p.eval_samples) // p.K)
        result = {
            "model": args.model,
            "evidence": evaluate_evidence(model, data.x, data.x, T, seed=args.seed),
            "true_log_evidence": float(np.mean(toy_log_evidence(data.x, p.noise_var))),
            "eval_draws_per_point": T * p.K,
        }
    elif command == "classify":
        p = DigitProfile.from_dict(cfg["profile"])
        K = int(args.model.split("_K")[1].split("_")[0])
        _, te, _ = _digit_data(args, p, binarize=False)
        from .models import vib_spec

        model = build_model(p.model_spec(vib_spec(K=K, latent_dim=p.latent_dim, input_dim=te.inputs.shape[1])), 0)
        model.load_state_dict(state)
        result = {"model": args.model, **classification_report(predict_proba(model, te.inputs, p.S, seed=args.seed), te.labels)}
    else:
        raise UsageError(f"eval does not support {command!r} runs")
    print(_dumps(result), end="")
    if rd is not None:
        rd.write("config.json", _dumps({"command": "eval", "run_config": cfg, "model": args.model, "seed": args.seed}))
        rd.write("summary.json", _dumps(result))
        rd.write("metrics.csv", _csv([{"name": k, "value": v} for k, v in result.items()], ["name", "value"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mixvi", description="Mixture posteriors trained with stratified importance-weighted bounds.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file: {\"profile\": name, \"settings\": {...}}")
        sp.add_argument("--out", required=out_required, help="run directory")
        sp.add_argument("--profile", choices=["full", "fast"], default="full")

    sp = sub.add_parser("toy-experiment", help="train toy posteriors with shared initialization and batch order")
    common(sp)
    sp.add_argument("--losses", default="siwae,selbo,score")
    sp.add_argument("--stl", action="store_true", help="also train stl variants of siwae and selbo")
    sp.add_argument("--noise-var", type=float)
    sp.add_argument("--eval-samples", type=int, help="total draws per datapoint for the final evidence")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--T-mode", dest="T_mode", choices=["per_component", "total"])
    sp.set_defaults(func=cmd_toy)

    for name, func, helptext in (("classify", cmd_classify, "single-column digit VIB sweep"), ("vae", cmd_vae, "single-column VAE sweep")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--loss", default="siwae,selbo")
        sp.add_argument("--K", default="1,5")
        sp.add_argument("--T", default="1,5")
        sp.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--data", choices=["auto", "bundled", "synthetic"])
        sp.add_argument("--images", help="IDX image file")
        sp.add_argument("--labels", help="IDX label file")
        if name == "classify":
            sp.add_argument("--stl", action="store_true")
        else:
            sp.add_argument("--burn-in", type=int, dest="burn_in")
            sp.add_argument("--eval-total", type=int, default=100)
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="run the oracle check suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("eval", help="metrics for one model of a finished run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--model", required=True, help="run name inside the checkpoint, e.g. siwae")
    sp.add_argument("--seed", type=int, default=12345)
    sp.add_argument("--eval-samples", type=int)
    sp.add_argument("--out")
    sp.add_argument("--images")
    sp.add_argument("--labels")
    sp.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    rd = None
    try:
        if getattr(args, "out", None):
            rd = RunDir(Path(args.out))
        code = args.func(args, rd)
        if rd is not None:
            if code == EXIT_OK or args.command == "verify":
                rd.commit()
            else:
                rd.abort()
        return code
    except UsageError as err:
        msg, code = str(err), EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as err:
        msg, code = f"data error: {err}", EXIT_DATA
    except (ConfigError, ValueError, TypeError, KeyError) as err:
        msg, code = f"configuration error: {err}", EXIT_USAGE
    except OSError as err:
        msg, code = f"data error: {err}", EXIT_DATA
    except (NumericalError, FloatingPointError) as err:
        msg, code = f"numeric failure: {err}", EXIT_NUMERIC
    if rd is not None:
        rd.abort()
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
