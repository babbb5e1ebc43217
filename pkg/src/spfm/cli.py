"""Command-line entry point: gen-data, train, eval, analyze, reproduce.

Exit codes: 0 success, 1 input/config error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import filelock
import numpy as np

from . import svg
from .config import ExperimentConfig, builtin_config, load_config
from .data import GENERATORS, corrupt_labels, generate, load_dataset, save_dataset
from .errors import InputError, SPFMError, TrainingAborted
from .evaluate import (
    analysis_set,
    conditional_mse,
    detection_scores,
    export_histogram,
    loss_diff_sweep,
    purification_report,
    write_scores_csv,
)
from .flow import train_run, write_metrics_csv
from .net import Checkpoint, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, sample_batch, write_samples_csv

LOCK_NAME = ".spfm.lock"
_held_locks: set[Path] = set()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


@contextlib.contextmanager
def output_dir(path) -> Path:
    """Create ``path`` and hold its lock file for the duration of the command."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc.strerror}") from None
    key = path.resolve()
    if key in _held_locks:
        yield path
        return
    lock = filelock.FileLock(str(path / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise InputError(f"output directory {path} is locked by another spfm process") from None
    except OSError as exc:
        raise InputError(f"cannot write to output directory {path}: {exc.strerror}") from None
    _held_locks.add(key)
    try:
        yield path
    finally:
        _held_locks.discard(key)
        lock.release()


def model_tag(cfg: ExperimentConfig) -> str:
    return "spfm" if cfg.training.spfm_enabled else "baseline"


# ---------------------------------------------------------------------------
# Commands (library-callable)
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out) -> Path:
    d = cfg.dataset
    with output_dir(out) as out:
        ds = generate(d.name, d.n, d.seed, d.generator_params)
        if d.corruption_rate > 0:
            ds = corrupt_labels(ds, d.corruption_rate, d.corruption_seed, d.corruption_mode)
        path = out / "dataset.txt"
        save_dataset(path, ds)
    print(f"dataset={d.name} n={len(ds)} corrupted={ds.n_corrupted} path={path}")
    return path


def cmd_train(cfg: ExperimentConfig, data_path, out, gate_log: str = "final", timing: bool = False) -> Path:
    data_path = Path(data_path)
    if not data_path.exists():
        raise InputError(f"dataset file {data_path} does not exist (run gen-data first)")
    ds = load_dataset(data_path)
    spfm = cfg.training.spfm_enabled
    with output_dir(out) as out:
        run_dir = out / model_tag(cfg)
        run_dir.mkdir(exist_ok=True)
        ckpt_path = run_dir / "checkpoint.bin"
        try:
            res = train_run(ds, cfg.training, keep_gates=gate_log if spfm else "none")
        except TrainingAborted as exc:
            save_checkpoint(ckpt_path, Checkpoint(exc.params, exc.opt_state, cfg.hash()))
            write_metrics_csv(run_dir / "metrics.csv", exc.metrics, timing)
            Path(str(ckpt_path) + ".failed").write_text(f"{exc}\n")
            raise
        save_checkpoint(ckpt_path, Checkpoint(res.params, res.opt_state, cfg.hash()))
        write_metrics_csv(run_dir / "metrics.csv", res.metrics, timing)
        gates_path = run_dir / "gates.csv"
        if spfm:
            res.gates.write_csv(gates_path)
            if len(res.gates):
                purification_report(ds, res.gates).write_csv(run_dir / "purification.csv")
        elif gates_path.exists():
            gates_path.unlink()
    if res.metrics:
        m = res.metrics[-1]
        print(f"{model_tag(cfg)} epoch={m.epoch} mean_loss={m.mean_loss:.6f} "
              f"gated_fraction={m.gated_fraction:.4f} dropped_fraction={m.dropped_fraction:.4f}")
    else:
        print(f"{model_tag(cfg)} epochs=0 (initial parameters saved)")
    return run_dir


def _dedupe(values, what: str, notes: list[str]) -> list[float]:
    if not values:
        raise InputError(f"empty {what} list")
    out = list(dict.fromkeys(float(v) for v in values))
    if len(out) != len(values):
        notes.append(f"duplicate {what} entries removed: {values} -> {out}")
    return out


def cmd_eval(ckpt_path, data_path, out, omegas, n_eval: int, seed: int, n_steps: int,
             eval_seed: int, expected_hash: str | None = None) -> list[tuple[float, float]]:
    notes: list[str] = []
    omegas = _dedupe(list(omegas), "omega", notes)
    if any(o < 0 for o in omegas):
        raise InputError("guidance scales must be >= 0")
    if n_eval < 1:
        raise InputError("n_eval must be >= 1")
    ckpt = load_checkpoint(ckpt_path)
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        notes.append(f"warning: checkpoint config hash {ckpt.config_hash or '(none)'} "
                     f"differs from config hash {expected_hash}")
    ds = load_dataset(data_path)
    if ds.name not in GENERATORS:
        raise InputError(f"eval draws conditions from a synthetic generator; dataset {ds.name!r} has none")
    conds = generate(ds.name, n_eval, eval_seed, ds.params).conditions
    rows = []
    with output_dir(out) as out:
        samples = []
        for omega in omegas:
            gen = sample_batch(ckpt.params, conds, SamplerConfig(omega, n_steps, seed))
            rows.append((omega, conditional_mse(gen, conds)))
            samples.append(gen)
        with open(out / "mse.csv", "w") as fh:
            fh.write("omega,mse,n_eval\n")
            for omega, mse in rows:
                fh.write(f"{omega!r},{mse!r},{n_eval}\n")
        _write_samples(out / "samples.csv", omegas, conds, samples)
        mse_rows = svg.read_csv(out / "mse.csv")
        (out / "mse.svg").write_text(svg.line_chart(
            {ds.name: [(float(r["omega"]), float(r["mse"])) for r in mse_rows]},
            "conditional MSE vs guidance scale", "guidance scale", "MSE"))
        notes_path = out / "notes.txt"
        if notes:
            notes_path.write_text("\n".join(notes) + "\n")
        elif notes_path.exists():
            notes_path.unlink()
    for n in notes:
        _log(n)
    for omega, mse in rows:
        print(f"omega={omega:g} mse={mse:.6f}")
    return rows


def _write_samples(path, omegas, conds, samples):
    tmp = Path(str(path) + ".part")
    with open(path, "w") as fh:
        for k, (omega, gen) in enumerate(zip(omegas, samples)):
            write_samples_csv(tmp, conds, gen, {"omega": repr(omega)})
            lines = tmp.read_text().splitlines(keepends=True)
            fh.writelines(lines if k == 0 else lines[1:])
    tmp.unlink()


def cmd_analyze(ckpt_path, data_path, out, tprimes, threshold: float, noise_seed: int,
                n_samples: int, subset_seed: int, draws: int = 1, bins: int = 40):
    tprimes = _dedupe(list(tprimes), "t'", [])
    if any(not 0.0 < t < 1.0 for t in tprimes):
        raise InputError("t' values must lie strictly inside (0, 1)")
    ckpt = load_checkpoint(ckpt_path)
    ds = load_dataset(data_path)
    x1, conds, incorrect, ids = analysis_set(ds, n_samples, subset_seed)
    records = loss_diff_sweep(ckpt.params, x1, conds, incorrect, tprimes, noise_seed, ids=ids, draws=draws)
    scores = detection_scores(records, threshold)
    with output_dir(out) as out:
        records.write_csv(out / "loss_diff.csv")
        write_scores_csv(out / "scores.csv", scores)
        for t in tprimes:
            stem = f"hist_t{t:g}"
            export_histogram(records, t, bins).write_csv(out / f"{stem}.csv")
            rows = [(float(r["bin_lo"]), float(r["bin_hi"]), int(r["count_correct"]), int(r["count_incorrect"]))
                    for r in svg.read_csv(out / f"{stem}.csv")]
            (out / f"{stem}.svg").write_text(svg.histogram_chart(rows, f"loss difference at t'={t:g}"))
    for s in scores:
        flag = " (degenerate)" if s.degenerate else ""
        print(f"t'={s.t_prime:g} precision={s.precision:.4f} recall={s.recall:.4f} f1={s.f1:.4f}{flag}")
    return records, scores


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(out: Path, payload: dict) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != LOCK_NAME and p.name != "manifest.json")
    payload["files"] = {p.relative_to(out).as_posix(): _sha256(p) for p in files}
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except (SPFMError, OSError):
        _log(f"stage {name!r} failed; outputs of earlier stages are kept")
        raise


def cmd_reproduce(figure: str, out, cfg: ExperimentConfig | None = None) -> Path:
    if figure not in ("fig2", "fig3"):
        raise InputError(f"unknown figure {figure!r}; expected fig2 or fig3")
    cfg = cfg or builtin_config(figure)
    with output_dir(out) as out:
        if figure == "fig2":
            payload = _reproduce_fig2(cfg, out)
        else:
            payload = _reproduce_fig3(cfg, out)
        path = _manifest(out, payload)
    print(f"manifest={path}")
    return path


def _reproduce_fig2(cfg: ExperimentConfig, out: Path) -> dict:
    s = cfg.sampler
    table, panels, hashes = [], [], {}
    for name in ("two_circles", "spiral"):
        dcfg = cfg.with_overrides(dataset={"name": name})
        ddir = out / name
        with _stage(f"gen-data {name}"):
            data_path = cmd_gen_data(dcfg, ddir)
        for spfm in (False, True):
            mcfg = dcfg.with_overrides(training={"spfm_enabled": spfm})
            tag = model_tag(mcfg)
            hashes[f"{name}/{tag}"] = mcfg.hash()
            with _stage(f"train {name}/{tag}"):
                run_dir = cmd_train(mcfg, data_path, ddir)
            with _stage(f"eval {name}/{tag}"):
                rows = cmd_eval(run_dir / "checkpoint.bin", data_path, run_dir / "eval", s.omegas, s.n_eval,
                                s.seed, s.n_steps, s.eval_seed, mcfg.hash())
            table += [(name, tag, omega, mse) for omega, mse in rows]
    with open(out / "fig2_mse.csv", "w") as fh:
        fh.write("dataset,model,omega,mse\n")
        for name, tag, omega, mse in table:
            fh.write(f"{name},{tag},{omega!r},{mse!r}\n")
    # the figure is rendered from the CSV files alone
    mse_rows = svg.read_csv(out / "fig2_mse.csv")
    series = {}
    for r in mse_rows:
        series.setdefault(f"{r['dataset']}/{r['model']}", []).append((float(r["omega"]), float(r["mse"])))
    (out / "fig2_mse.svg").write_text(svg.line_chart(series, "conditional MSE vs guidance scale",
                                                     "guidance scale", "MSE"))
    mse_lookup = {(r["dataset"], r["model"], float(r["omega"])): float(r["mse"]) for r in mse_rows}
    for name in ("two_circles", "spiral"):
        for tag in ("baseline", "spfm"):
            rows = svg.read_csv(out / name / tag / "eval" / "samples.csv")
            for omega in s.omegas:
                pts = [(float(r["gen_x"]), float(r["gen_y"]), float(r["condition_angle"]))
                       for r in rows if float(r["omega"]) == omega]
                panels.append({"title": f"{name} {tag} w={omega:g} MSE={mse_lookup[(name, tag, omega)]:.3f}",
                               "points": pts})
    (out / "fig2_grid.svg").write_text(svg.scatter_grid(panels, ncols=len(s.omegas)))
    return {
        "figure": "fig2",
        "config_hashes": hashes,
        "seeds": {"data": cfg.dataset.seed, "corruption": cfg.dataset.corruption_seed,
                  "train": cfg.training.seed, "sampler": s.seed, "eval_conditions": s.eval_seed},
        "mse_entries": len(table),
    }


def _reproduce_fig3(cfg: ExperimentConfig, out: Path) -> dict:
    a = cfg.analysis
    mcfg = cfg.with_overrides(training={"spfm_enabled": True})
    with _stage("gen-data"):
        data_path = cmd_gen_data(mcfg, out)
    with _stage("train"):
        run_dir = cmd_train(mcfg, data_path, out)
    with _stage("analyze"):
        cmd_analyze(run_dir / "checkpoint.bin", data_path, out / "analysis", a.tprimes, a.threshold,
                    a.noise_seed, a.n_samples, a.subset_seed, a.noise_draws, a.bins)
    return {
        "figure": "fig3",
        "config_hashes": {"spfm": mcfg.hash()},
        "seeds": {"data": cfg.dataset.seed, "corruption": cfg.dataset.corruption_seed,
                  "train": cfg.training.seed, "analysis_noise": a.noise_seed, "analysis_subset": a.subset_seed},
        "analysis": asdict(a) | {"tprimes": list(a.tprimes)},
    }


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spfm", description="Self-purifying flow matching on synthetic 2-D data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_help):
        sp.add_argument("--config", help="experiment config file (defaults built in)")
        sp.add_argument("--seed", type=int, help=seed_help)
        sp.add_argument("--out", help="output directory (default: run.out_dir from the config)")

    g = sub.add_parser("gen-data", help="generate a (corrupted) synthetic dataset")
    common(g, "override dataset.seed")

    t = sub.add_parser("train", help="train a baseline or SPFM model")
    common(t, "override training.seed")
    t.add_argument("--spfm", type=_on_off, help="on|off, overrides training.spfm_enabled")
    t.add_argument("--data", help="dataset file (default: OUT/dataset.txt)")
    t.add_argument("--gate-log", choices=("final", "all"), default="final",
                   help="gate records to dump: last gated epoch only, or every epoch")
    t.add_argument("--timing", action="store_true", help="record wall-clock ms per epoch in metrics.csv")

    e = sub.add_parser("eval", help="conditional MSE over a guidance-scale sweep")
    common(e, "override sampler.seed")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--omega", type=_float_list, help="guidance scales, e.g. 0,0.5,1")
    e.add_argument("--steps", type=int, help="Euler steps")
    e.add_argument("--n-eval", type=int, help="number of evaluation conditions")

    a = sub.add_parser("analyze", help="loss-difference sweep and mislabel detection")
    common(a, "override analysis.noise_seed")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--tprime", type=_float_list, help="interpolation times, e.g. 0.1,0.3,0.5")
    a.add_argument("--threshold", type=float, help="detection threshold on L_cond - L_uncond (default 0)")
    a.add_argument("--n-samples", type=int, help="clean samples to analyse")

    r = sub.add_parser("reproduce", help="regenerate a figure bundle from pinned configs")
    r.add_argument("figure", choices=("fig2", "fig3"))
    r.add_argument("--config", help="replace the pinned config")
    r.add_argument("--seed", type=int, help="override training.seed")
    r.add_argument("--out", required=True)
    return p


def _config(args, default_name="fig2") -> ExperimentConfig:
    return load_config(args.config) if args.config else builtin_config(default_name)


def run(args) -> None:
    if args.command == "reproduce":
        cfg = _config(args, args.figure)
        if args.seed is not None:
            cfg = cfg.with_overrides(training={"seed": args.seed})
        cmd_reproduce(args.figure, args.out, cfg)
        return
    cfg = _config(args)
    out = Path(args.out or cfg.run.out_dir)
    if args.command == "gen-data":
        if args.seed is not None:
            cfg = cfg.with_overrides(dataset={"seed": args.seed})
        cmd_gen_data(cfg, out)
    elif args.command == "train":
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.spfm is not None:
            over["spfm_enabled"] = args.spfm
        if over:
            cfg = cfg.with_overrides(training=over)
        cmd_train(cfg, args.data or out / "dataset.txt", out, args.gate_log, args.timing)
    elif args.command == "eval":
        s = cfg.sampler
        cmd_eval(args.checkpoint, args.data, out,
                 args.omega if args.omega is not None else s.omegas,
                 args.n_eval if args.n_eval is not None else s.n_eval,
                 args.seed if args.seed is not None else s.seed,
                 args.steps if args.steps is not None else s.n_steps,
                 s.eval_seed,
                 cfg.hash() if args.config else None)
    elif args.command == "analyze":
        an = cfg.analysis
        cmd_analyze(args.checkpoint, args.data, out,
                    args.tprime if args.tprime is not None else an.tprimes,
                    args.threshold if args.threshold is not None else an.threshold,
                    args.seed if args.seed is not None else an.noise_seed,
                    args.n_samples if args.n_samples is not None else an.n_samples,
                    an.subset_seed, an.noise_draws, an.bins)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run(args)
    except SPFMError as exc:
        _log(f"error: {exc}")
        return exc.exit_code
    except OSError as exc:
        _log(f"error: {exc}")
        return 1
    return 0


def entry() -> None:
    sys.exit(main())
